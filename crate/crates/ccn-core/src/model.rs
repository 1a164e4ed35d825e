//! The full prediction network and its per-sample training loss.
//!
//! Prediction path (the inference contract): the click probability of a
//! target item is `sigmoid(MLP(E_user ++ E_target ++ E_trigger ++ H_tsi ++
//! s_target))`. Context items appear only inside the training loss; scoring
//! never reads them, which the eager [`predict_ctr`] route makes structural
//! — it has no context parameter at all.
//!
//! Ablation variants toggle feature blocks and loss terms on one backbone
//! rather than forking the code: the TAN variants drop the contrastive
//! terms (and optionally the collaborative module and sequence-interaction
//! block), the CCN variants re-enable them piecewise.

use std::collections::HashMap;
use std::sync::Arc;

use crate::attention::{mhta_eager, mhta_node, sim_category_search, HeadNodes, HeadWeights};
use crate::contrastive::{
    attraction_loss, attraction_node, repulsion_loss, repulsion_node, split_context_sets,
    squash_degree, squash_degree_node, HyperParams, PairPrior,
};
use crate::data::{BehaviorSequence, ItemFeatures, TrainingSample, UserProfile};
use crate::embedding::{self, EmbeddingSchema, FeatureFamily};
use crate::graph::{Graph, NodeId, Value};
use crate::kernels;
use crate::params::{ParamSlot, ParamStore};
use crate::rng::Rng64;

/// Which feature blocks and loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    /// Backbone without the collaborative module and without the
    /// sequence-interaction block.
    TanMinus,
    /// Full backbone, no contrastive losses.
    Tan,
    /// Contrastive training without the sequence-interaction block.
    CcnNoTsi,
    /// Repulsion only (attraction ablated).
    CcnNoAttraction,
    /// Attraction only (repulsion ablated).
    CcnNoRepulsion,
    /// The full method.
    Ccn,
}

impl ModelVariant {
    pub fn include_tsi(self) -> bool {
        !matches!(self, ModelVariant::TanMinus | ModelVariant::CcnNoTsi)
    }

    pub fn include_cm(self) -> bool {
        !matches!(self, ModelVariant::TanMinus)
    }

    pub fn use_repulsion(self) -> bool {
        matches!(
            self,
            ModelVariant::Ccn | ModelVariant::CcnNoTsi | ModelVariant::CcnNoAttraction
        )
    }

    pub fn use_attraction(self) -> bool {
        matches!(
            self,
            ModelVariant::Ccn | ModelVariant::CcnNoTsi | ModelVariant::CcnNoRepulsion
        )
    }

    pub fn uses_contrastive(self) -> bool {
        self.use_repulsion() || self.use_attraction()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::TanMinus => "tan-minus",
            ModelVariant::Tan => "tan",
            ModelVariant::CcnNoTsi => "ccn-no-tsi",
            ModelVariant::CcnNoAttraction => "ccn-no-attraction",
            ModelVariant::CcnNoRepulsion => "ccn-no-repulsion",
            ModelVariant::Ccn => "ccn",
        }
    }

    pub fn parse(s: &str) -> Option<ModelVariant> {
        match s {
            "tan-minus" => Some(ModelVariant::TanMinus),
            "tan" => Some(ModelVariant::Tan),
            "ccn-no-tsi" => Some(ModelVariant::CcnNoTsi),
            "ccn-no-attraction" => Some(ModelVariant::CcnNoAttraction),
            "ccn-no-repulsion" => Some(ModelVariant::CcnNoRepulsion),
            "ccn" => Some(ModelVariant::Ccn),
            _ => None,
        }
    }

    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::TanMinus,
        ModelVariant::Tan,
        ModelVariant::CcnNoTsi,
        ModelVariant::CcnNoAttraction,
        ModelVariant::CcnNoRepulsion,
        ModelVariant::Ccn,
    ];
}

/// Structural geometry: table sizes, attention heads, MLP widths, caps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSchema {
    pub embedding: EmbeddingSchema,
    pub heads: usize,
    /// Hidden widths of the collaborative-module MLP (final width-1 layer
    /// is implicit).
    pub cm_hidden: Vec<usize>,
    /// Hidden widths of the prediction MLP.
    pub pred_hidden: Vec<usize>,
    pub l_short: usize,
    pub l_long: usize,
}

impl ModelSchema {
    /// Geometry derived from hyperparameters plus desk-scale defaults.
    pub fn from_hyper(hyper: &HyperParams) -> ModelSchema {
        ModelSchema {
            embedding: EmbeddingSchema {
                dim: hyper.dim,
                item_buckets: 4096,
                category_buckets: 512,
                seller_buckets: 1024,
                user_buckets: 4096,
                profile_fields: 2,
                profile_buckets: 64,
            },
            heads: hyper.heads,
            cm_hidden: vec![32],
            pred_hidden: vec![64, 32],
            l_short: hyper.l_short,
            l_long: hyper.l_long,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim
    }

    pub fn head_dim(&self) -> usize {
        self.embedding.dim / self.heads
    }

    pub fn tsi_width(&self) -> usize {
        4 * self.embedding.dim
    }

    pub fn cm_input_width(&self) -> usize {
        self.embedding.user_width() + self.embedding.item_width()
    }

    pub fn pred_input_width(&self, variant: ModelVariant) -> usize {
        let mut w = self.embedding.user_width() + 2 * self.embedding.item_width();
        if variant.include_tsi() {
            w += self.tsi_width();
        }
        if variant.include_cm() {
            w += 1;
        }
        w
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.embedding.dim == 0 {
            return Err("embedding dim must be positive".into());
        }
        if self.heads == 0 || self.embedding.dim % self.heads != 0 {
            return Err(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.embedding.dim
            ));
        }
        Ok(())
    }
}

/// FNV-1a over bytes; the checkpoint schema fingerprint.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

const TSI_BLOCKS: [&str; 4] = ["t_short", "g_short", "t_long", "g_long"];

#[derive(Debug)]
pub enum ModelError {
    WidthMismatch(String),
    VariantMismatch { variant: &'static str, what: String },
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::WidthMismatch(detail) => write!(f, "width mismatch: {detail}"),
            ModelError::VariantMismatch { variant, what } => {
                write!(f, "variant `{variant}` does not support {what}")
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// Entry indices of every named parameter, resolved once so the per-sample
/// and per-prediction paths never do string lookups.
#[derive(Clone, Debug, Default)]
pub(crate) struct EntryMap {
    pub tables: Vec<usize>,
    pub proj: usize,
    /// Block-major, then head: `[wq, wk, wv]` entries.
    pub tsi: Vec<[usize; 3]>,
    /// `(weights, bias)` per layer.
    pub cm: Vec<(usize, usize)>,
    pub pred: Vec<(usize, usize)>,
}

impl EntryMap {
    fn resolve(store: &ParamStore, schema: &ModelSchema, variant: ModelVariant) -> EntryMap {
        let need = |name: &str| {
            store
                .index_of(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
        };
        let mut map = EntryMap {
            tables: schema
                .embedding
                .families()
                .iter()
                .map(|f| need(&f.table_name()))
                .collect(),
            ..EntryMap::default()
        };
        if variant.include_tsi() {
            map.proj = need("proj.item");
            for block in TSI_BLOCKS {
                for h in 0..schema.heads {
                    map.tsi.push([
                        need(&format!("tsi.{block}.h{h}.wq")),
                        need(&format!("tsi.{block}.h{h}.wk")),
                        need(&format!("tsi.{block}.h{h}.wv")),
                    ]);
                }
            }
        }
        if variant.include_cm() {
            for layer in 0..=schema.cm_hidden.len() {
                map.cm.push((need(&format!("cm.w{layer}")), need(&format!("cm.b{layer}"))));
            }
        }
        for layer in 0..=schema.pred_hidden.len() {
            map.pred
                .push((need(&format!("pred.w{layer}")), need(&format!("pred.b{layer}"))));
        }
        map
    }

    fn table(&self, family: FeatureFamily) -> usize {
        self.tables[family.code() as usize]
    }

    /// Heads of one TSI block (blocks indexed in `TSI_BLOCKS` order).
    fn block_heads(&self, block: usize, heads: usize) -> &[[usize; 3]] {
        &self.tsi[block * heads..(block + 1) * heads]
    }
}

/// All learnable state plus the metadata needed to rebuild it.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub schema: ModelSchema,
    pub hyper: HyperParams,
    pub variant: ModelVariant,
    pub store: ParamStore,
    /// Seed lineage: the seed parameters were initialized from.
    pub seed: u64,
    pub(crate) map: EntryMap,
}

impl ModelParams {
    /// The exact entry layout (names and shapes) for a schema/variant.
    pub fn expected_entries(schema: &ModelSchema, variant: ModelVariant) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let emb = &schema.embedding;
        for family in emb.families() {
            out.push((family.table_name(), (emb.bucket_count(family), emb.dim)));
        }
        let d = emb.dim;
        let dh = schema.head_dim();
        if variant.include_tsi() {
            out.push(("proj.item".to_string(), (d, emb.item_width())));
            for block in TSI_BLOCKS {
                for h in 0..schema.heads {
                    for w in ["wq", "wk", "wv"] {
                        out.push((format!("tsi.{block}.h{h}.{w}"), (dh, d)));
                    }
                }
            }
        }
        if variant.include_cm() {
            push_mlp_entries(&mut out, "cm", schema.cm_input_width(), &schema.cm_hidden);
        }
        push_mlp_entries(
            &mut out,
            "pred",
            schema.pred_input_width(variant),
            &schema.pred_hidden,
        );
        out
    }

    /// Deterministic initialization: embeddings uniform in the init range,
    /// weights uniform `+-1/sqrt(fan_in)`, biases zero. Parameter groups use
    /// independent seed streams, so variants sharing a group initialize it
    /// identically.
    pub fn init(
        schema: ModelSchema,
        hyper: HyperParams,
        variant: ModelVariant,
        seed: u64,
    ) -> ModelParams {
        schema.validate().expect("invalid schema");
        hyper.validate().expect("invalid hyperparameters");
        assert_eq!(schema.embedding.dim, hyper.dim, "schema dim != hyper dim");
        assert_eq!(schema.heads, hyper.heads, "schema heads != hyper heads");

        let mut store = ParamStore::new();
        let mut emb_rng = Rng64::derive(seed, &[1]);
        embedding::init_tables(&mut store, &schema.embedding, &mut emb_rng);

        let mut tsi_rng = Rng64::derive(seed, &[2]);
        let mut cm_rng = Rng64::derive(seed, &[3]);
        let mut pred_rng = Rng64::derive(seed, &[4]);

        for (name, (rows, cols)) in Self::expected_entries(&schema, variant) {
            if store.get(&name).is_some() {
                continue; // embedding tables already added
            }
            let rng = if name.starts_with("tsi.") || name.starts_with("proj.") {
                &mut tsi_rng
            } else if name.starts_with("cm.") {
                &mut cm_rng
            } else {
                &mut pred_rng
            };
            let is_bias = cols == 1
                && name
                    .rsplit('.')
                    .next()
                    .map(|s| s.starts_with('b'))
                    .unwrap_or(false);
            let value = if is_bias {
                Value::zeros(rows, cols)
            } else {
                let bound = 1.0 / (cols as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
                Value::new(rows, cols, data)
            };
            store.add(&name, value);
        }

        ModelParams::assemble(schema, hyper, variant, store, seed)
    }

    /// Finish construction from a populated store (also used by checkpoint
    /// loading): resolves the entry map.
    pub fn assemble(
        schema: ModelSchema,
        hyper: HyperParams,
        variant: ModelVariant,
        store: ParamStore,
        seed: u64,
    ) -> ModelParams {
        let map = EntryMap::resolve(&store, &schema, variant);
        ModelParams { schema, hyper, variant, store, seed, map }
    }

    /// Schema fingerprint covering geometry, variant, and loss scalars.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(&self.schema, &self.hyper, self.variant)
    }

    /// Eager repulsion/attraction components of one sample; errors when the
    /// variant trains no contrastive loss.
    pub fn contrastive_components(
        &self,
        sample: &TrainingSample,
    ) -> Result<(f64, f64), ModelError> {
        if !self.variant.uses_contrastive() {
            return Err(ModelError::VariantMismatch {
                variant: self.variant.name(),
                what: "contrastive loss computation".to_string(),
            });
        }
        let e_user = self.embed_user_fast(&sample.page.user);
        let e_trigger = self.embed_item_fast(&sample.page.trigger);
        let e_target = self.embed_item_fast(&sample.target().0);
        let s_target = self.cm_degree_eager(&e_user, &e_target, &e_trigger);
        let split = split_context_sets(sample);
        let ctx: Vec<&ItemFeatures> = sample.context().map(|(item, _)| item).collect();
        let degree_of = |idx: &usize| {
            let e_item = self.embed_item_fast(ctx[*idx]);
            self.cm_degree_eager(&e_user, &e_item, &e_trigger)
        };
        let neg: Vec<f64> = split.negative.iter().map(degree_of).collect();
        let pos: Vec<f64> = split.positive.iter().map(degree_of).collect();
        let rep = if self.variant.use_repulsion() {
            repulsion_loss(s_target, &neg, self.hyper.tau)
        } else {
            0.0
        };
        let att = if self.variant.use_attraction() {
            attraction_loss(s_target, &pos, self.hyper.xi)
        } else {
            0.0
        };
        Ok((rep, att))
    }

    /// The squashed collaborative degree of one item for a (user, trigger)
    /// pair; errors for variants without the collaborative module.
    pub fn collaborative_degree(
        &self,
        user: &UserProfile,
        trigger: &ItemFeatures,
        item: &ItemFeatures,
    ) -> Result<f64, ModelError> {
        if !self.variant.include_cm() {
            return Err(ModelError::VariantMismatch {
                variant: self.variant.name(),
                what: "collaborative degrees".to_string(),
            });
        }
        let emb = &self.schema.embedding;
        if user.profile_fields.len() != emb.profile_fields {
            return Err(ModelError::WidthMismatch(format!(
                "profile has {} fields, schema expects {}",
                user.profile_fields.len(),
                emb.profile_fields
            )));
        }
        let e_user = self.embed_user_fast(user);
        let e_item = self.embed_item_fast(item);
        let e_trigger = self.embed_item_fast(trigger);
        Ok(self.cm_degree_eager(&e_user, &e_item, &e_trigger))
    }

    fn cm_degree_eager(&self, e_user: &[f64], e_item: &[f64], e_trigger: &[f64]) -> f64 {
        let mut input = Vec::with_capacity(self.schema.cm_input_width());
        input.extend_from_slice(e_user);
        for (a, b) in e_item.iter().zip(e_trigger) {
            input.push(a * b);
        }
        let raw = mlp_eager(&self.store, &self.map.cm, &input)[0];
        squash_degree(raw, self.hyper.xi)
    }

    fn embed_item_fast(&self, item: &ItemFeatures) -> Vec<f64> {
        let emb = &self.schema.embedding;
        let d = emb.dim;
        let mut out = Vec::with_capacity(emb.item_width());
        for (family, id) in [
            (FeatureFamily::ItemId, item.item_id),
            (FeatureFamily::CategoryId, item.category_id),
            (FeatureFamily::SellerId, item.seller_id),
        ] {
            let row = emb.row_of(family, id);
            let table = self.store.value(self.map.table(family));
            out.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
        }
        out
    }

    fn embed_user_fast(&self, user: &UserProfile) -> Vec<f64> {
        let emb = &self.schema.embedding;
        let d = emb.dim;
        let mut out = Vec::with_capacity(emb.user_width());
        let row = emb.row_of(FeatureFamily::UserId, user.user_id);
        let table = self.store.value(self.map.table(FeatureFamily::UserId));
        out.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
        for (i, &field) in user.profile_fields.iter().enumerate() {
            let family = FeatureFamily::Profile(i);
            let row = emb.row_of(family, field);
            let table = self.store.value(self.map.table(family));
            out.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
        }
        out
    }
}

fn push_mlp_entries(
    out: &mut Vec<(String, (usize, usize))>,
    prefix: &str,
    input_width: usize,
    hidden: &[usize],
) {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(input_width);
    widths.extend_from_slice(hidden);
    widths.push(1);
    for layer in 0..widths.len() - 1 {
        out.push((format!("{prefix}.w{layer}"), (widths[layer + 1], widths[layer])));
        out.push((format!("{prefix}.b{layer}"), (widths[layer + 1], 1)));
    }
}

pub(crate) fn fingerprint_of(
    schema: &ModelSchema,
    hyper: &HyperParams,
    variant: ModelVariant,
) -> u64 {
    let emb = &schema.embedding;
    let canonical = format!(
        "v1|variant={}|d={}|h={}|buckets={},{},{},{},{}|profile_fields={}|cm={:?}|pred={:?}|caps={},{}|tau={}|xi={}|lambda={}",
        variant.name(),
        emb.dim,
        schema.heads,
        emb.item_buckets,
        emb.category_buckets,
        emb.seller_buckets,
        emb.user_buckets,
        emb.profile_buckets,
        emb.profile_fields,
        schema.cm_hidden,
        schema.pred_hidden,
        schema.l_short,
        schema.l_long,
        hyper.tau,
        hyper.xi,
        hyper.lambda,
    );
    fnv1a64(canonical.as_bytes())
}

/// Eager MLP with ReLU hidden activations; returns the final layer output.
fn mlp_eager(store: &ParamStore, layers: &[(usize, usize)], input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for (layer, &(w_idx, b_idx)) in layers.iter().enumerate() {
        let w = store.value(w_idx);
        let b = store.value(b_idx);
        let mut y = kernels::matvec(w.data(), w.rows(), w.cols(), &h);
        for (yi, bi) in y.iter_mut().zip(b.data()) {
            *yi += bi;
        }
        if layer + 1 < layers.len() {
            for yi in y.iter_mut() {
                *yi = yi.max(0.0);
            }
        }
        h = y;
    }
    h
}

// ── per-sample tape construction ─────────────────────────────────────

/// Dedups leaves while building one sample's tape and records where each
/// leaf's gradient belongs in the parameter store.
///
/// Training builds anonymous leaves (no name allocation or index insert);
/// the gradient checker builds named ones so finite differences can rebind
/// individual leaves.
pub(crate) struct LeafBinder<'p> {
    params: &'p ModelParams,
    named: bool,
    // (family code, row) -> node; small enough that a linear scan beats
    // hashing on the per-sample path
    emb_nodes: Vec<(u8, u32, NodeId)>,
    dense_nodes: Vec<Option<NodeId>>,
    pub slots: Vec<(NodeId, ParamSlot)>,
}

impl<'p> LeafBinder<'p> {
    pub fn new(params: &'p ModelParams, named: bool) -> LeafBinder<'p> {
        LeafBinder {
            params,
            named,
            emb_nodes: Vec::with_capacity(64),
            dense_nodes: vec![None; params.store.len()],
            slots: Vec::with_capacity(96),
        }
    }

    /// Leaf for one embedding row; repeated lookups share the node, so the
    /// backward pass accumulates their gradients row-wise.
    pub fn emb_row(&mut self, g: &mut Graph, family: FeatureFamily, id: u64) -> NodeId {
        let emb = &self.params.schema.embedding;
        let row = emb.row_of(family, id);
        let code = family.code();
        for &(c, r, node) in &self.emb_nodes {
            if c == code && r == row as u32 {
                return node;
            }
        }
        let entry = self
            .params
            .store
            .index_of(&family.table_name())
            .unwrap_or_else(|| panic!("missing table {}", family.table_name()));
        let d = emb.dim;
        let table = self.params.store.value(entry);
        let vec = Value::vector(table.data()[row * d..(row + 1) * d].to_vec());
        let node = if self.named {
            g.leaf(&format!("{}[{row}]", family.table_name()), vec)
        } else {
            g.leaf_anon(vec)
        };
        self.emb_nodes.push((code, row as u32, node));
        self.slots.push((node, ParamSlot { entry, row: Some(row) }));
        node
    }

    /// Item representation node: item ++ category ++ seller rows (3d).
    pub fn item_node(&mut self, g: &mut Graph, item: &ItemFeatures) -> NodeId {
        let i = self.emb_row(g, FeatureFamily::ItemId, item.item_id);
        let c = self.emb_row(g, FeatureFamily::CategoryId, item.category_id);
        let s = self.emb_row(g, FeatureFamily::SellerId, item.seller_id);
        g.concat(&[i, c, s])
    }

    pub fn user_node(&mut self, g: &mut Graph, user: &UserProfile) -> NodeId {
        let mut parts = vec![self.emb_row(g, FeatureFamily::UserId, user.user_id)];
        for (i, &field) in user.profile_fields.iter().enumerate() {
            parts.push(self.emb_row(g, FeatureFamily::Profile(i), field));
        }
        g.concat(&parts)
    }

    /// Whole-entry leaf (weight matrices, biases); shares the Arc, no copy.
    pub fn dense(&mut self, g: &mut Graph, entry: usize) -> NodeId {
        if let Some(node) = self.dense_nodes[entry] {
            return node;
        }
        let value = Arc::clone(self.params.store.value(entry));
        let node = if self.named {
            g.leaf_shared(self.params.store.name(entry), value)
        } else {
            g.leaf_anon_shared(value)
        };
        self.dense_nodes[entry] = Some(node);
        self.slots.push((node, ParamSlot { entry, row: None }));
        node
    }
}

fn mlp_node(
    g: &mut Graph,
    binder: &mut LeafBinder<'_>,
    layers: &[(usize, usize)],
    input: NodeId,
) -> NodeId {
    let mut h = input;
    for (layer, &(w_idx, b_idx)) in layers.iter().enumerate() {
        let w = binder.dense(g, w_idx);
        let b = binder.dense(g, b_idx);
        let lin = g.matmul(w, h);
        let biased = g.add(lin, b);
        h = if layer + 1 < layers.len() { g.relu(biased) } else { biased };
    }
    h
}

fn cm_degree_node(
    g: &mut Graph,
    binder: &mut LeafBinder<'_>,
    params: &ModelParams,
    e_user: NodeId,
    e_item: NodeId,
    e_trigger: NodeId,
) -> NodeId {
    let hadamard = g.mul(e_item, e_trigger);
    let input = g.concat(&[e_user, hadamard]);
    let raw = mlp_node(g, binder, &params.map.cm, input);
    squash_degree_node(g, raw, params.hyper.xi)
}

/// Project sequence items to d and attend; returns the 4d H_tsi node.
fn tsi_node(
    g: &mut Graph,
    binder: &mut LeafBinder<'_>,
    params: &ModelParams,
    target: &ItemFeatures,
    trigger: &ItemFeatures,
    e_target: NodeId,
    e_trigger: NodeId,
    sequences: &BehaviorSequence,
) -> NodeId {
    let schema = &params.schema;
    let proj = binder.dense(g, params.map.proj);
    let q_target = g.matmul(proj, e_target);
    let q_trigger = g.matmul(proj, e_trigger);

    let short_feats: Vec<ItemFeatures> =
        sequences.short.iter().take(schema.l_short).copied().collect();
    let long_feats: Vec<ItemFeatures> =
        sequences.long.iter().take(schema.l_long).copied().collect();

    let short_nodes: Vec<NodeId> = short_feats
        .iter()
        .map(|item| {
            let e = binder.item_node(g, item);
            g.matmul(proj, e)
        })
        .collect();

    // Project each long item at most once even when both searches hit it.
    let mut long_proj: HashMap<usize, NodeId> = HashMap::new();
    let mut project_long = |g: &mut Graph, binder: &mut LeafBinder<'_>, idx: usize| -> NodeId {
        if let Some(&node) = long_proj.get(&idx) {
            return node;
        }
        let e = binder.item_node(g, &long_feats[idx]);
        let node = g.matmul(proj, e);
        long_proj.insert(idx, node);
        node
    };
    let sub_target: Vec<NodeId> = sim_category_search(&long_feats, target)
        .into_iter()
        .map(|idx| project_long(g, binder, idx))
        .collect();
    let sub_trigger: Vec<NodeId> = sim_category_search(&long_feats, trigger)
        .into_iter()
        .map(|idx| project_long(g, binder, idx))
        .collect();

    let dh = schema.head_dim();
    let blocks = [
        (q_target, &short_nodes[..]),
        (q_trigger, &short_nodes[..]),
        (q_target, &sub_target[..]),
        (q_trigger, &sub_trigger[..]),
    ];
    let mut outputs = Vec::with_capacity(4);
    for (block_idx, (query, items)) in blocks.into_iter().enumerate() {
        let heads: Vec<HeadNodes> = params
            .map
            .block_heads(block_idx, schema.heads)
            .iter()
            .map(|&[wq, wk, wv]| HeadNodes {
                wq: binder.dense(g, wq),
                wk: binder.dense(g, wk),
                wv: binder.dense(g, wv),
            })
            .collect();
        outputs.push(mhta_node(g, query, items, &heads, dh));
    }
    g.concat(&outputs)
}

/// One sample's loss tape plus the handles needed to train on it.
pub struct SampleLoss {
    pub graph: Graph,
    pub root: NodeId,
    pub yhat: NodeId,
    pub ce: NodeId,
    pub repulsion: Option<NodeId>,
    pub attraction: Option<NodeId>,
    /// Leaf-to-parameter routing for gradient scatter.
    pub slots: Vec<(NodeId, ParamSlot)>,
}

/// Build the full Eq-style training loss of one sample:
/// `ce + lambda * (repulsion + (P-/P+) * attraction)`, with contrastive
/// terms omitted entirely for non-contrastive variants, `lambda = 0`, or
/// empty context sets (an omitted term contributes exactly 0).
pub fn build_sample_loss(
    params: &ModelParams,
    sample: &TrainingSample,
    prior: &PairPrior,
) -> SampleLoss {
    build_sample_loss_impl(params, sample, prior, true)
}

/// Training-path variant with anonymous leaves (cheaper construction; not
/// probe-able by the finite-difference checker).
pub(crate) fn build_sample_loss_fast(
    params: &ModelParams,
    sample: &TrainingSample,
    prior: &PairPrior,
) -> SampleLoss {
    build_sample_loss_impl(params, sample, prior, false)
}

fn build_sample_loss_impl(
    params: &ModelParams,
    sample: &TrainingSample,
    prior: &PairPrior,
    named: bool,
) -> SampleLoss {
    let variant = params.variant;
    let hyper = &params.hyper;
    let mut g = Graph::new();
    let mut binder = LeafBinder::new(params, named);

    let page = &sample.page;
    let (target_item, target_label) = sample.target();
    let e_user = binder.user_node(&mut g, &page.user);
    let e_target = binder.item_node(&mut g, target_item);
    let e_trigger = binder.item_node(&mut g, &page.trigger);

    let mut concat_parts = vec![e_user, e_target, e_trigger];
    if variant.include_tsi() {
        concat_parts.push(tsi_node(
            &mut g,
            &mut binder,
            params,
            target_item,
            &page.trigger,
            e_target,
            e_trigger,
            &page.sequences,
        ));
    }
    let s_target = if variant.include_cm() {
        let s = cm_degree_node(&mut g, &mut binder, params, e_user, e_target, e_trigger);
        concat_parts.push(s);
        Some(s)
    } else {
        None
    };

    let pred_input = g.concat(&concat_parts);
    let logit = mlp_node(&mut g, &mut binder, &params.map.pred, pred_input);
    let yhat = g.sigmoid(logit);

    let ce = if *target_label == 1 {
        let ln = g.log(yhat);
        g.scale(ln, -1.0)
    } else {
        let one = g.constant_scalar(1.0);
        let neg = g.scale(yhat, -1.0);
        let om = g.add(one, neg);
        let ln = g.log(om);
        g.scale(ln, -1.0)
    };

    let mut repulsion = None;
    let mut attraction = None;
    if variant.uses_contrastive() && hyper.lambda > 0.0 {
        let s_target = s_target.expect("contrastive variants include the collaborative module");
        let split = split_context_sets(sample);
        let ctx: Vec<&ItemFeatures> = sample.context().map(|(item, _)| item).collect();
        let mut degree_nodes: HashMap<usize, NodeId> = HashMap::new();
        let mut degree_of = |g: &mut Graph, binder: &mut LeafBinder<'_>, idx: usize| -> NodeId {
            if let Some(&node) = degree_nodes.get(&idx) {
                return node;
            }
            let e_item = binder.item_node(g, ctx[idx]);
            let node = cm_degree_node(g, binder, params, e_user, e_item, e_trigger);
            degree_nodes.insert(idx, node);
            node
        };
        if variant.use_repulsion() && !split.negative.is_empty() {
            let nodes: Vec<NodeId> = split
                .negative
                .iter()
                .map(|&i| degree_of(&mut g, &mut binder, i))
                .collect();
            let vec = g.concat(&nodes);
            repulsion = Some(repulsion_node(&mut g, s_target, vec, hyper.tau));
        }
        if variant.use_attraction() && !split.positive.is_empty() {
            let nodes: Vec<NodeId> = split
                .positive
                .iter()
                .map(|&i| degree_of(&mut g, &mut binder, i))
                .collect();
            let vec = g.concat(&nodes);
            attraction = Some(attraction_node(&mut g, s_target, vec, hyper.xi));
        }
    }

    let mut contrast: Option<NodeId> = repulsion;
    if let Some(att) = attraction {
        let weighted = g.scale(att, prior.attraction_weight);
        contrast = Some(match contrast {
            Some(c) => g.add(c, weighted),
            None => weighted,
        });
    }
    let root = match contrast {
        Some(c) => {
            let scaled = g.scale(c, hyper.lambda);
            g.add(ce, scaled)
        }
        None => ce,
    };

    SampleLoss {
        graph: g,
        root,
        yhat,
        ce,
        repulsion,
        attraction,
        slots: binder.slots,
    }
}

// ── eager inference ──────────────────────────────────────────────────

/// Pre-sigmoid logit of the prediction path. Pure function of (user,
/// trigger, target, sequences, parameters); context items have no input
/// here by construction.
pub fn predict_logit(
    params: &ModelParams,
    user: &UserProfile,
    trigger: &ItemFeatures,
    target: &ItemFeatures,
    sequences: &BehaviorSequence,
) -> Result<f64, ModelError> {
    let schema = &params.schema;
    let emb = &schema.embedding;
    if user.profile_fields.len() != emb.profile_fields {
        return Err(ModelError::WidthMismatch(format!(
            "profile has {} fields, schema expects {}",
            user.profile_fields.len(),
            emb.profile_fields
        )));
    }
    let e_user = params.embed_user_fast(user);
    let e_target = params.embed_item_fast(target);
    let e_trigger = params.embed_item_fast(trigger);

    let mut input = Vec::with_capacity(schema.pred_input_width(params.variant));
    input.extend_from_slice(&e_user);
    input.extend_from_slice(&e_target);
    input.extend_from_slice(&e_trigger);

    if params.variant.include_tsi() {
        input.extend_from_slice(&tsi_eager(params, target, trigger, &e_target, &e_trigger, sequences));
    }
    if params.variant.include_cm() {
        input.push(params.cm_degree_eager(&e_user, &e_target, &e_trigger));
    }
    Ok(mlp_eager(&params.store, &params.map.pred, &input)[0])
}

/// Click-through probability, strictly inside (0, 1).
pub fn predict_ctr(
    params: &ModelParams,
    user: &UserProfile,
    trigger: &ItemFeatures,
    target: &ItemFeatures,
    sequences: &BehaviorSequence,
) -> Result<f64, ModelError> {
    Ok(kernels::sigmoid(predict_logit(params, user, trigger, target, sequences)?))
}

fn tsi_eager(
    params: &ModelParams,
    target: &ItemFeatures,
    trigger: &ItemFeatures,
    e_target: &[f64],
    e_trigger: &[f64],
    sequences: &BehaviorSequence,
) -> Vec<f64> {
    let schema = &params.schema;
    let emb = &schema.embedding;
    let d = emb.dim;
    let proj = params.store.value(params.map.proj);
    let project = |e: &[f64]| kernels::matvec(proj.data(), d, emb.item_width(), e);

    let q_target = project(e_target);
    let q_trigger = project(e_trigger);

    let short_feats: Vec<ItemFeatures> =
        sequences.short.iter().take(schema.l_short).copied().collect();
    let long_feats: Vec<ItemFeatures> =
        sequences.long.iter().take(schema.l_long).copied().collect();

    let short_items: Vec<Vec<f64>> = short_feats
        .iter()
        .map(|item| project(&params.embed_item_fast(item)))
        .collect();
    let long_items: Vec<Vec<f64>> = long_feats
        .iter()
        .map(|item| project(&params.embed_item_fast(item)))
        .collect();

    let sub = |anchor: &ItemFeatures| -> Vec<&[f64]> {
        sim_category_search(&long_feats, anchor)
            .into_iter()
            .map(|i| long_items[i].as_slice())
            .collect()
    };
    let short_refs: Vec<&[f64]> = short_items.iter().map(|v| v.as_slice()).collect();
    let sub_target = sub(target);
    let sub_trigger = sub(trigger);

    let dh = schema.head_dim();
    let mut out = Vec::with_capacity(schema.tsi_width());
    let blocks: [(&[f64], &[&[f64]]); 4] = [
        (&q_target, &short_refs),
        (&q_trigger, &short_refs),
        (&q_target, &sub_target),
        (&q_trigger, &sub_trigger),
    ];
    for (block_idx, (query, items)) in blocks.into_iter().enumerate() {
        let weights: Vec<HeadWeights<'_>> = params
            .map
            .block_heads(block_idx, schema.heads)
            .iter()
            .map(|&[wq, wk, wv]| HeadWeights {
                wq: params.store.value(wq).data(),
                wk: params.store.value(wk).data(),
                wv: params.store.value(wv).data(),
            })
            .collect();
        let mask = vec![true; items.len()];
        out.extend_from_slice(&mhta_eager(query, items, &mask, &weights, dh));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImpressionPage;
    use crate::graph::Bindings;

    fn small_hyper() -> HyperParams {
        HyperParams { dim: 8, heads: 2, l_short: 4, l_long: 8, ..HyperParams::default() }
    }

    fn small_schema(hyper: &HyperParams) -> ModelSchema {
        let mut schema = ModelSchema::from_hyper(hyper);
        schema.embedding.item_buckets = 50;
        schema.embedding.category_buckets = 10;
        schema.embedding.seller_buckets = 20;
        schema.embedding.user_buckets = 30;
        schema.embedding.profile_buckets = 8;
        schema.cm_hidden = vec![8];
        schema.pred_hidden = vec![16, 8];
        schema
    }

    fn item(i: u64) -> ItemFeatures {
        ItemFeatures { item_id: i, category_id: i % 10, seller_id: i % 20 }
    }

    fn page() -> Arc<ImpressionPage> {
        Arc::new(ImpressionPage {
            page_id: 7,
            user: UserProfile { user_id: 11, profile_fields: vec![3, 1] },
            trigger: item(40),
            exposures: vec![
                (item(1), 1),
                (item(2), 0),
                (item(3), 0),
                (item(4), 1),
                (item(5), 0),
            ],
            sequences: BehaviorSequence {
                short: vec![item(20), item(21), item(30)],
                long: vec![item(22), item(23), item(24), item(41)],
            },
        })
    }

    fn model(variant: ModelVariant) -> ModelParams {
        let hyper = small_hyper();
        let schema = small_schema(&hyper);
        ModelParams::init(schema, hyper, variant, 99)
    }

    fn prior() -> PairPrior {
        PairPrior::from_counts(6.0, 2.0).unwrap()
    }

    #[test]
    fn zero_weights_predict_half() {
        let mut params = model(ModelVariant::Ccn);
        // zero the prediction MLP: logit collapses to the final bias (0)
        for layer in 0..=params.schema.pred_hidden.len() {
            for part in ["w", "b"] {
                let idx = params.store.index_of(&format!("pred.{part}{layer}")).unwrap();
                params.store.value_mut(idx).data_mut().fill(0.0);
            }
        }
        let p = page();
        let y = predict_ctr(&params, &p.user, &p.trigger, &item(1), &p.sequences).unwrap();
        assert_eq!(y, 0.5);
    }

    #[test]
    fn prediction_is_strictly_inside_unit_interval() {
        let params = model(ModelVariant::Ccn);
        let p = page();
        for target in [item(1), item(2), item(900)] {
            let y = predict_ctr(&params, &p.user, &p.trigger, &target, &p.sequences).unwrap();
            assert!(y > 0.0 && y < 1.0, "{y}");
        }
    }

    #[test]
    fn profile_width_mismatch_errors() {
        let params = model(ModelVariant::Tan);
        let p = page();
        let bad_user = UserProfile { user_id: 1, profile_fields: vec![1] };
        let err = predict_ctr(&params, &bad_user, &p.trigger, &item(1), &p.sequences).unwrap_err();
        assert!(matches!(err, ModelError::WidthMismatch(_)));
    }

    #[test]
    fn training_tape_prediction_equals_eager_prediction() {
        for variant in ModelVariant::ALL {
            let params = model(variant);
            let sample = TrainingSample::new(page(), 0);
            let loss = build_sample_loss(&params, &sample, &prior());
            let eval = loss.graph.forward(&Bindings::new()).unwrap();
            let tape_yhat = loss.graph.scalar_value(&eval, loss.yhat);
            let p = &sample.page;
            let eager =
                predict_ctr(&params, &p.user, &p.trigger, &sample.target().0, &p.sequences)
                    .unwrap();
            assert_eq!(tape_yhat, eager, "variant {}", variant.name());
        }
    }

    #[test]
    fn bias_shift_moves_logit_affinely() {
        let mut params = model(ModelVariant::Ccn);
        let p = page();
        let base = predict_logit(&params, &p.user, &p.trigger, &item(1), &p.sequences).unwrap();
        let last = params.schema.pred_hidden.len();
        let idx = params.store.index_of(&format!("pred.b{last}")).unwrap();
        params.store.value_mut(idx).data_mut()[0] += 0.37;
        let shifted = predict_logit(&params, &p.user, &p.trigger, &item(1), &p.sequences).unwrap();
        assert!(
            ((shifted - base) - 0.37).abs() < 1e-12,
            "shift {}",
            shifted - base
        );
    }

    #[test]
    fn variant_flags_follow_ablation_grid() {
        use ModelVariant::*;
        assert!(!TanMinus.include_cm() && !TanMinus.include_tsi());
        assert!(Tan.include_cm() && Tan.include_tsi() && !Tan.uses_contrastive());
        assert!(CcnNoTsi.include_cm() && !CcnNoTsi.include_tsi());
        assert!(CcnNoAttraction.use_repulsion() && !CcnNoAttraction.use_attraction());
        assert!(CcnNoRepulsion.use_attraction() && !CcnNoRepulsion.use_repulsion());
        assert!(Ccn.use_repulsion() && Ccn.use_attraction());
    }

    #[test]
    fn loss_parts_compose_into_root() {
        let params = model(ModelVariant::Ccn);
        let pr = prior();
        let sample = TrainingSample::new(page(), 0);
        let loss = build_sample_loss(&params, &sample, &pr);
        let eval = loss.graph.forward(&Bindings::new()).unwrap();
        let ce = loss.graph.scalar_value(&eval, loss.ce);
        let rep = loss.repulsion.map(|n| loss.graph.scalar_value(&eval, n)).unwrap_or(0.0);
        let att = loss.attraction.map(|n| loss.graph.scalar_value(&eval, n)).unwrap_or(0.0);
        let root = loss.graph.scalar_value(&eval, loss.root);
        let composed = ce + params.hyper.lambda * (rep + pr.attraction_weight * att);
        assert!((root - composed).abs() < 1e-12);
        assert!(rep > 0.0 && att >= 0.0);
    }

    #[test]
    fn lambda_zero_builds_the_tan_tape() {
        let mut hyper = small_hyper();
        hyper.lambda = 0.0;
        let schema = small_schema(&hyper);
        let ccn = ModelParams::init(schema.clone(), hyper.clone(), ModelVariant::Ccn, 5);
        let mut tan_hyper = small_hyper();
        tan_hyper.lambda = 0.0;
        let tan = ModelParams::init(schema, tan_hyper, ModelVariant::Tan, 5);

        let sample = TrainingSample::new(page(), 1);
        let pr = prior();
        let a = build_sample_loss(&ccn, &sample, &pr);
        let b = build_sample_loss(&tan, &sample, &pr);
        assert!(a.repulsion.is_none() && a.attraction.is_none());
        assert_eq!(a.graph.node_count(), b.graph.node_count());
        let ea = a.graph.forward(&Bindings::new()).unwrap();
        let eb = b.graph.forward(&Bindings::new()).unwrap();
        assert_eq!(
            a.graph.scalar_value(&ea, a.root),
            b.graph.scalar_value(&eb, b.root)
        );
    }

    #[test]
    fn empty_context_sets_contribute_nothing() {
        // all context labels equal the target's: no negatives, repulsion absent
        let p = Arc::new(ImpressionPage {
            page_id: 1,
            user: UserProfile { user_id: 2, profile_fields: vec![0, 0] },
            trigger: item(40),
            exposures: vec![(item(1), 1), (item(2), 1), (item(3), 1)],
            sequences: BehaviorSequence::default(),
        });
        let params = model(ModelVariant::Ccn);
        let loss = build_sample_loss(&params, &TrainingSample::new(p, 0), &prior());
        assert!(loss.repulsion.is_none());
        assert!(loss.attraction.is_some());
    }

    #[test]
    fn contrastive_components_reject_tan() {
        let params = model(ModelVariant::Tan);
        let sample = TrainingSample::new(page(), 0);
        let err = params.contrastive_components(&sample).unwrap_err();
        assert!(matches!(err, ModelError::VariantMismatch { .. }));
    }

    #[test]
    fn contrastive_components_match_tape_values() {
        let params = model(ModelVariant::Ccn);
        let pr = prior();
        let sample = TrainingSample::new(page(), 0);
        let (rep_eager, att_eager) = params.contrastive_components(&sample).unwrap();
        let loss = build_sample_loss(&params, &sample, &pr);
        let eval = loss.graph.forward(&Bindings::new()).unwrap();
        let rep = loss.repulsion.map(|n| loss.graph.scalar_value(&eval, n)).unwrap_or(0.0);
        let att = loss.attraction.map(|n| loss.graph.scalar_value(&eval, n)).unwrap_or(0.0);
        assert!((rep - rep_eager).abs() < 1e-12, "{rep} vs {rep_eager}");
        assert!((att - att_eager).abs() < 1e-12, "{att} vs {att_eager}");
    }

    #[test]
    fn init_is_deterministic_and_shared_groups_match_across_variants() {
        let mk = |variant| {
            let hyper = small_hyper();
            ModelParams::init(small_schema(&hyper), hyper, variant, 42)
        };
        let a = mk(ModelVariant::Ccn);
        let b = mk(ModelVariant::Ccn);
        for (ea, eb) in a.store.entries().zip(b.store.entries()) {
            assert_eq!(ea.0, eb.0);
            assert_eq!(ea.1.data(), eb.1.data());
        }
        // TAN and CCN share every entry (losses differ, parameters do not)
        let tan = mk(ModelVariant::Tan);
        assert_eq!(tan.store.len(), a.store.len());
        for (ea, eb) in a.store.entries().zip(tan.store.entries()) {
            assert_eq!(ea.1.data(), eb.1.data());
        }
    }

    #[test]
    fn fingerprint_distinguishes_geometry_and_variant() {
        let hyper = small_hyper();
        let base = fingerprint_of(&small_schema(&hyper), &hyper, ModelVariant::Ccn);
        assert_eq!(
            base,
            fingerprint_of(&small_schema(&hyper), &hyper, ModelVariant::Ccn)
        );
        let mut other_schema = small_schema(&hyper);
        other_schema.embedding.item_buckets += 1;
        assert_ne!(base, fingerprint_of(&other_schema, &hyper, ModelVariant::Ccn));
        assert_ne!(
            base,
            fingerprint_of(&small_schema(&hyper), &hyper, ModelVariant::Tan)
        );
    }

    #[test]
    fn sample_loss_gradients_pass_finite_differences() {
        let params = model(ModelVariant::Ccn);
        let sample = TrainingSample::new(page(), 2);
        let loss = build_sample_loss(&params, &sample, &prior());
        let report =
            crate::graph::finite_diff_check(&loss.graph, &Bindings::new(), loss.root).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at leaf {} coord {}",
            report.max_rel_err,
            report.worst_leaf,
            report.worst_coord
        );
        assert!(!report.non_finite);
    }
}
