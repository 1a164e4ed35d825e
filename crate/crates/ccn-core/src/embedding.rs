//! Hashed embedding tables and per-sample tensor assembly.
//!
//! Every categorical feature family owns a fixed-size table; ids index it
//! modulo the bucket count, so out-of-vocabulary ids alias into existing
//! rows instead of growing the table. An item is represented by the
//! concatenation of its item/category/seller embeddings (3d wide); the user
//! by user-id plus profile-field embeddings.

use crate::data::{ItemFeatures, TrainingSample, UserProfile};
use crate::graph::Value;
use crate::params::ParamStore;
use crate::rng::Rng64;

/// Embedding feature families, one table each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureFamily {
    ItemId,
    CategoryId,
    SellerId,
    UserId,
    Profile(usize),
}

impl FeatureFamily {
    /// Parameter entry name of the family's table.
    pub fn table_name(&self) -> String {
        match self {
            FeatureFamily::ItemId => "emb.item_id".to_string(),
            FeatureFamily::CategoryId => "emb.category_id".to_string(),
            FeatureFamily::SellerId => "emb.seller_id".to_string(),
            FeatureFamily::UserId => "emb.user_id".to_string(),
            FeatureFamily::Profile(i) => format!("emb.profile{i}"),
        }
    }

    /// Stable small code used for per-sample dedup keys.
    pub fn code(&self) -> u8 {
        match self {
            FeatureFamily::ItemId => 0,
            FeatureFamily::CategoryId => 1,
            FeatureFamily::SellerId => 2,
            FeatureFamily::UserId => 3,
            FeatureFamily::Profile(i) => 4 + *i as u8,
        }
    }
}

/// Table geometry: embedding dim and bucket counts per family.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingSchema {
    pub dim: usize,
    pub item_buckets: usize,
    pub category_buckets: usize,
    pub seller_buckets: usize,
    pub user_buckets: usize,
    pub profile_fields: usize,
    pub profile_buckets: usize,
}

impl EmbeddingSchema {
    pub fn bucket_count(&self, family: FeatureFamily) -> usize {
        match family {
            FeatureFamily::ItemId => self.item_buckets,
            FeatureFamily::CategoryId => self.category_buckets,
            FeatureFamily::SellerId => self.seller_buckets,
            FeatureFamily::UserId => self.user_buckets,
            FeatureFamily::Profile(_) => self.profile_buckets,
        }
    }

    /// Row index for an id: `id mod bucket_count`.
    pub fn row_of(&self, family: FeatureFamily, id: u64) -> usize {
        (id % self.bucket_count(family) as u64) as usize
    }

    pub fn families(&self) -> Vec<FeatureFamily> {
        let mut fams = vec![
            FeatureFamily::ItemId,
            FeatureFamily::CategoryId,
            FeatureFamily::SellerId,
            FeatureFamily::UserId,
        ];
        for i in 0..self.profile_fields {
            fams.push(FeatureFamily::Profile(i));
        }
        fams
    }

    /// Item representation width: item + category + seller embeddings.
    pub fn item_width(&self) -> usize {
        3 * self.dim
    }

    /// User representation width: user id + profile field embeddings.
    pub fn user_width(&self) -> usize {
        (1 + self.profile_fields) * self.dim
    }
}

/// Range embedding tables are initialized in: uniform `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 0.05;

/// Add one `bucket_count x d` table per family, uniformly initialized.
pub fn init_tables(store: &mut ParamStore, schema: &EmbeddingSchema, rng: &mut Rng64) {
    for family in schema.families() {
        let buckets = schema.bucket_count(family);
        let mut data = Vec::with_capacity(buckets * schema.dim);
        for _ in 0..buckets * schema.dim {
            data.push(rng.uniform(-INIT_RANGE, INIT_RANGE));
        }
        store.add(&family.table_name(), Value::new(buckets, schema.dim, data));
    }
}

/// Look up one embedding row; the id is hashed into range by modulo.
pub fn embed_lookup<'a>(
    store: &'a ParamStore,
    schema: &EmbeddingSchema,
    family: FeatureFamily,
    id: u64,
) -> Result<&'a [f64], String> {
    let table = store
        .get(&family.table_name())
        .ok_or_else(|| format!("unknown embedding family `{}`", family.table_name()))?;
    let row = schema.row_of(family, id);
    let d = schema.dim;
    Ok(&table.data()[row * d..(row + 1) * d])
}

/// Concatenated item embedding (item ++ category ++ seller), 3d wide.
pub fn embed_item(
    store: &ParamStore,
    schema: &EmbeddingSchema,
    item: &ItemFeatures,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(schema.item_width());
    out.extend_from_slice(
        embed_lookup(store, schema, FeatureFamily::ItemId, item.item_id).unwrap(),
    );
    out.extend_from_slice(
        embed_lookup(store, schema, FeatureFamily::CategoryId, item.category_id).unwrap(),
    );
    out.extend_from_slice(
        embed_lookup(store, schema, FeatureFamily::SellerId, item.seller_id).unwrap(),
    );
    out
}

/// Concatenated user embedding (user id ++ profile fields).
pub fn embed_user(
    store: &ParamStore,
    schema: &EmbeddingSchema,
    user: &UserProfile,
) -> Vec<f64> {
    assert_eq!(
        user.profile_fields.len(),
        schema.profile_fields,
        "profile has {} fields, schema expects {}",
        user.profile_fields.len(),
        schema.profile_fields
    );
    let mut out = Vec::with_capacity(schema.user_width());
    out.extend_from_slice(
        embed_lookup(store, schema, FeatureFamily::UserId, user.user_id).unwrap(),
    );
    for (i, &field) in user.profile_fields.iter().enumerate() {
        out.extend_from_slice(
            embed_lookup(store, schema, FeatureFamily::Profile(i), field).unwrap(),
        );
    }
    out
}

/// A behavior sequence padded/truncated to its cap: embedded items, a mask
/// marking real positions, and the surviving raw features (for the
/// category search).
#[derive(Clone, Debug)]
pub struct SeqTensors {
    pub embeds: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub feats: Vec<ItemFeatures>,
}

impl SeqTensors {
    fn build(
        store: &ParamStore,
        schema: &EmbeddingSchema,
        seq: &[ItemFeatures],
        cap: usize,
    ) -> SeqTensors {
        let feats: Vec<ItemFeatures> = seq.iter().take(cap).copied().collect();
        let mut embeds = Vec::with_capacity(cap);
        let mut mask = Vec::with_capacity(cap);
        for item in &feats {
            embeds.push(embed_item(store, schema, item));
            mask.push(true);
        }
        while embeds.len() < cap {
            embeds.push(vec![0.0; schema.item_width()]);
            mask.push(false);
        }
        SeqTensors { embeds, mask, feats }
    }

    pub fn real_len(&self) -> usize {
        self.feats.len()
    }
}

/// All bound embeddings for one training sample.
#[derive(Clone, Debug)]
pub struct SampleTensors {
    pub e_user: Vec<f64>,
    pub e_target: Vec<f64>,
    pub e_trigger: Vec<f64>,
    pub short: SeqTensors,
    pub long: SeqTensors,
    /// Embedded context items with their click labels, page order.
    pub context: Vec<(Vec<f64>, u8)>,
}

/// Assemble the embedding view of a sample. Sequences are truncated to the
/// most recent `l_short` / `l_long` entries (sequences are stored most
/// recent first) and padded with zero rows.
pub fn build_sample_tensors(
    sample: &TrainingSample,
    store: &ParamStore,
    schema: &EmbeddingSchema,
    l_short: usize,
    l_long: usize,
) -> SampleTensors {
    let page = &sample.page;
    let (target_item, _) = sample.target();
    SampleTensors {
        e_user: embed_user(store, schema, &page.user),
        e_target: embed_item(store, schema, target_item),
        e_trigger: embed_item(store, schema, &page.trigger),
        short: SeqTensors::build(store, schema, &page.sequences.short, l_short),
        long: SeqTensors::build(store, schema, &page.sequences.long, l_long),
        context: sample
            .context()
            .map(|(item, label)| (embed_item(store, schema, item), *label))
            .collect(),
    }
}
