//! Synthetic impression pages with known ground-truth click structure.
//!
//! The world draws latent vectors for users and items. Each page picks a
//! trigger from the user's high-affinity items, exposes a recommendation
//! slate biased toward both user and trigger affinity, then samples click
//! labels from
//!
//! ```text
//! p = sigmoid(BIAS + GAIN * (alpha * <u, v_item> + (1 - alpha) * <v_trigger, v_item>) + page_noise)
//! ```
//!
//! so clicks mix a user-driven and a trigger-driven component (`alpha`
//! interpolates). The page-level noise term is shared by all exposures of a
//! page, which makes same-page labels positively correlated beyond what the
//! marginal rates explain — the collaborative structure the contrastive
//! losses are meant to exploit.
//!
//! Behavior sequences are the user's previously clicked items, most recent
//! first, split into a short window and a long tail.
//!
//! Generation is seed-partitioned per user: any user's pages can be
//! produced in isolation and are bit-identical to their slice of the full
//! run.

use std::fmt;
use std::sync::Arc;

use crate::data::{BehaviorSequence, ImpressionPage, ItemFeatures, UserProfile};
use crate::rng::Rng64;

const BIAS: f64 = -2.5;
const GAIN: f64 = 3.0;
const TRIGGER_TEMP: f64 = 0.5;
const EXPOSURE_TEMP: f64 = 1.2;
const SHORT_WINDOW: usize = 20;
const LONG_WINDOW: usize = 100;

/// Knobs of the generative world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub sellers: usize,
    pub latent_dim: usize,
    pub pages_per_user: usize,
    /// Exposures per page, drawn uniformly from this inclusive range.
    pub exposures_min: usize,
    pub exposures_max: usize,
    /// 1 = purely user-driven clicks, 0 = purely trigger-driven.
    pub alpha: f64,
    /// Std-dev of the shared page-level logit noise.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> WorldSpec {
        WorldSpec {
            users: 100,
            items: 50,
            categories: 8,
            sellers: 12,
            latent_dim: 8,
            pages_per_user: 5,
            exposures_min: 6,
            exposures_max: 12,
            alpha: 0.5,
            label_noise: 0.3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthError(pub String);

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid world spec: {}", self.0)
    }
}

impl std::error::Error for SynthError {}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("users", self.users),
            ("items", self.items),
            ("categories", self.categories),
            ("sellers", self.sellers),
            ("latent_dim", self.latent_dim),
            ("pages_per_user", self.pages_per_user),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SynthError(format!("{name} must be at least 1")));
            }
        }
        if self.exposures_min < 2 {
            return Err(SynthError("exposures_min must be at least 2 (context must exist)".into()));
        }
        if self.exposures_max < self.exposures_min {
            return Err(SynthError(format!(
                "exposures_max {} < exposures_min {}",
                self.exposures_max, self.exposures_min
            )));
        }
        if self.items <= self.exposures_max {
            return Err(SynthError(format!(
                "items ({}) must exceed exposures_max ({}) plus the trigger",
                self.items, self.exposures_max
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SynthError(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.label_noise < 0.0 {
            return Err(SynthError("label_noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The latent state behind a generated dataset, for oracle checks.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub user_vecs: Vec<Vec<f64>>,
    pub item_vecs: Vec<Vec<f64>>,
    pub item_categories: Vec<u64>,
    pub item_sellers: Vec<u64>,
    /// Per page, the exact probabilities the labels were drawn from
    /// (parallel to each page's exposure list).
    pub page_click_probs: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gumbel(rng: &mut Rng64) -> f64 {
    let u = rng.next_f64().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

struct ItemWorld {
    vecs: Vec<Vec<f64>>,
    categories: Vec<u64>,
    sellers: Vec<u64>,
}

fn generate_items(spec: &WorldSpec) -> ItemWorld {
    let mut rng = Rng64::derive(spec.seed, &[1]);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let mut vecs = Vec::with_capacity(spec.items);
    let mut categories = Vec::with_capacity(spec.items);
    let mut sellers = Vec::with_capacity(spec.items);
    for _ in 0..spec.items {
        vecs.push((0..spec.latent_dim).map(|_| rng.normal() * scale).collect());
        categories.push(rng.next_below(spec.categories as u64));
        sellers.push(rng.next_below(spec.sellers as u64));
    }
    ItemWorld { vecs, categories, sellers }
}

fn item_features(world: &ItemWorld, idx: usize) -> ItemFeatures {
    ItemFeatures {
        item_id: idx as u64,
        category_id: world.categories[idx],
        seller_id: world.sellers[idx],
    }
}

/// Generate one user's pages (and their generative click probabilities).
/// Independent of every other user given the item world.
fn generate_user(
    spec: &WorldSpec,
    world: &ItemWorld,
    user_id: usize,
) -> (Vec<ImpressionPage>, Vec<Vec<f64>>, Vec<f64>) {
    let mut user_rng = Rng64::derive(spec.seed, &[2, user_id as u64]);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let user_vec: Vec<f64> = (0..spec.latent_dim).map(|_| user_rng.normal() * scale).collect();
    let profile = UserProfile {
        user_id: user_id as u64,
        profile_fields: vec![user_rng.next_below(8), user_rng.next_below(4)],
    };

    let user_affinity: Vec<f64> = world.vecs.iter().map(|v| dot(&user_vec, v)).collect();

    let mut pages = Vec::with_capacity(spec.pages_per_user);
    let mut probs = Vec::with_capacity(spec.pages_per_user);
    // clicked history, most recent first
    let mut history: Vec<ItemFeatures> = Vec::new();

    for page_idx in 0..spec.pages_per_user {
        let mut rng = Rng64::derive(spec.seed, &[3, user_id as u64, page_idx as u64]);

        // trigger ~ softmax(user affinity / temp) via Gumbel-max
        let mut best = f64::NEG_INFINITY;
        let mut trigger_idx = 0;
        for (i, &aff) in user_affinity.iter().enumerate() {
            let score = aff / TRIGGER_TEMP + gumbel(&mut rng);
            if score > best {
                best = score;
                trigger_idx = i;
            }
        }
        let trigger_affinity: Vec<f64> =
            world.vecs.iter().map(|v| dot(&world.vecs[trigger_idx], v)).collect();

        // slate ~ top-k of mixed affinity + Gumbel noise, trigger excluded
        let n_expo =
            rng.range_inclusive(spec.exposures_min as u64, spec.exposures_max as u64) as usize;
        let mut scored: Vec<(f64, usize)> = (0..spec.items)
            .filter(|&i| i != trigger_idx)
            .map(|i| {
                let mix = 0.5 * (user_affinity[i] + trigger_affinity[i]);
                (mix / EXPOSURE_TEMP + gumbel(&mut rng), i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(n_expo);
        let slate: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();

        let page_noise = page_noise_draw(&mut rng, spec.label_noise);
        let mut exposures = Vec::with_capacity(n_expo);
        let mut page_probs = Vec::with_capacity(n_expo);
        for &i in &slate {
            let logit = BIAS
                + GAIN * (spec.alpha * user_affinity[i] + (1.0 - spec.alpha) * trigger_affinity[i])
                + page_noise;
            let p = 1.0 / (1.0 + (-logit).exp());
            let label = rng.bernoulli(p) as u8;
            exposures.push((item_features(world, i), label));
            page_probs.push(p);
        }

        let sequences = BehaviorSequence {
            short: history.iter().take(SHORT_WINDOW).copied().collect(),
            long: history.iter().skip(SHORT_WINDOW).take(LONG_WINDOW).copied().collect(),
        };

        // newly clicked items become the most recent history
        let clicked: Vec<ItemFeatures> = exposures
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(f, _)| *f)
            .collect();
        for (pos, item) in clicked.into_iter().enumerate() {
            history.insert(pos, item);
        }

        pages.push(ImpressionPage {
            page_id: (user_id * spec.pages_per_user + page_idx) as u64,
            user: profile.clone(),
            trigger: item_features(world, trigger_idx),
            exposures,
            sequences,
        });
        probs.push(page_probs);
    }
    (pages, probs, user_vec)
}

fn page_noise_draw(rng: &mut Rng64, noise: f64) -> f64 {
    if noise == 0.0 {
        // keep the stream position independent of the noise setting
        let _ = rng.normal();
        0.0
    } else {
        rng.normal() * noise
    }
}

/// Generate the full dataset plus its hidden ground truth.
pub fn generate_dataset(spec: &WorldSpec) -> Result<(Vec<ImpressionPage>, GroundTruth), SynthError> {
    spec.validate()?;
    let world = generate_items(spec);
    let mut pages = Vec::with_capacity(spec.users * spec.pages_per_user);
    let mut page_click_probs = Vec::with_capacity(spec.users * spec.pages_per_user);
    let mut user_vecs = Vec::with_capacity(spec.users);
    for user_id in 0..spec.users {
        let (user_pages, user_probs, user_vec) = generate_user(spec, &world, user_id);
        pages.extend(user_pages);
        page_click_probs.extend(user_probs);
        user_vecs.push(user_vec);
    }
    Ok((
        pages,
        GroundTruth {
            user_vecs,
            item_vecs: world.vecs,
            item_categories: world.categories,
            item_sellers: world.sellers,
            page_click_probs,
        },
    ))
}

/// Split pages into train/test by user id (every k-th user held out), so
/// test users never leak training pages.
pub fn split_by_user(
    pages: Vec<ImpressionPage>,
    holdout_every: usize,
) -> (Vec<ImpressionPage>, Vec<ImpressionPage>) {
    assert!(holdout_every >= 2, "holdout_every must be at least 2");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for page in pages {
        if (page.user.user_id as usize) % holdout_every == holdout_every - 1 {
            test.push(page);
        } else {
            train.push(page);
        }
    }
    (train, test)
}

/// Temporal split: each user's last `holdout_last` pages become the test
/// set (train on history, test on the future). Page ids encode
/// `user * pages_per_user + page_index`.
pub fn split_last_pages(
    pages: Vec<ImpressionPage>,
    pages_per_user: usize,
    holdout_last: usize,
) -> (Vec<ImpressionPage>, Vec<ImpressionPage>) {
    assert!(holdout_last < pages_per_user, "holdout_last must leave training pages");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for page in pages {
        let idx = (page.page_id as usize) % pages_per_user;
        if idx >= pages_per_user - holdout_last {
            test.push(page);
        } else {
            train.push(page);
        }
    }
    (train, test)
}

/// Convenience for tests and the demo: pages wrapped in `Arc`.
pub fn arc_pages(pages: Vec<ImpressionPage>) -> Vec<Arc<ImpressionPage>> {
    pages.into_iter().map(Arc::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::page_to_line;

    #[test]
    fn fixed_seed_reproduces_bytes() {
        let spec = WorldSpec::default();
        let (a, _) = generate_dataset(&spec).unwrap();
        let (b, _) = generate_dataset(&spec).unwrap();
        let text_a: Vec<String> = a.iter().map(page_to_line).collect();
        let text_b: Vec<String> = b.iter().map(page_to_line).collect();
        assert_eq!(text_a, text_b);
    }

    #[test]
    fn page_and_exposure_counts_are_exact() {
        let spec = WorldSpec {
            users: 100,
            items: 50,
            pages_per_user: 5,
            exposures_min: 8,
            exposures_max: 8,
            ..WorldSpec::default()
        };
        let (pages, truth) = generate_dataset(&spec).unwrap();
        assert_eq!(pages.len(), 500);
        let exposures: usize = pages.iter().map(|p| p.exposures.len()).sum();
        assert_eq!(exposures, 4000);
        assert_eq!(truth.page_click_probs.len(), 500);
    }

    #[test]
    fn pages_pass_validation_and_exclude_trigger() {
        let (pages, _) = generate_dataset(&WorldSpec::default()).unwrap();
        for page in &pages {
            page.validate().unwrap();
        }
    }

    #[test]
    fn alpha_one_probabilities_ignore_trigger_identity() {
        // With alpha = 1 the generative logit drops the trigger term, so two
        // exposures of the same item for the same user on pages with
        // different triggers share their probability up to page noise.
        let spec = WorldSpec {
            alpha: 1.0,
            label_noise: 0.0,
            users: 30,
            pages_per_user: 6,
            ..WorldSpec::default()
        };
        let (pages, truth) = generate_dataset(&spec).unwrap();
        let mut seen: std::collections::HashMap<(u64, u64), f64> =
            std::collections::HashMap::new();
        let mut cross_trigger_pairs = 0;
        for (page, probs) in pages.iter().zip(&truth.page_click_probs) {
            for ((item, _), &p) in page.exposures.iter().zip(probs) {
                let key = (page.user.user_id, item.item_id);
                if let Some(&prev) = seen.get(&key) {
                    assert!((prev - p).abs() < 1e-12, "prob changed with trigger");
                    cross_trigger_pairs += 1;
                } else {
                    seen.insert(key, p);
                }
            }
        }
        assert!(cross_trigger_pairs > 50, "too few repeat exposures to test");
    }

    #[test]
    fn user_partition_matches_full_run() {
        let spec = WorldSpec { users: 20, ..WorldSpec::default() };
        let (full, _) = generate_dataset(&spec).unwrap();
        let world = generate_items(&spec);
        let (user7, _, _) = generate_user(&spec, &world, 7);
        let from_full: Vec<&ImpressionPage> =
            full.iter().filter(|p| p.user.user_id == 7).collect();
        assert_eq!(from_full.len(), user7.len());
        for (a, b) in from_full.iter().zip(&user7) {
            assert_eq!(**a, *b);
        }
    }

    #[test]
    fn empirical_click_rate_matches_generative_mean() {
        let spec = WorldSpec {
            users: 1000,
            pages_per_user: 10,
            items: 80,
            ..WorldSpec::default()
        };
        let (pages, truth) = generate_dataset(&spec).unwrap();
        assert_eq!(pages.len(), 10_000);
        let mut clicks = 0.0f64;
        let mut expected = 0.0f64;
        let mut variance = 0.0f64;
        let mut n = 0.0f64;
        for (page, probs) in pages.iter().zip(&truth.page_click_probs) {
            for ((_, label), &p) in page.exposures.iter().zip(probs) {
                clicks += *label as f64;
                expected += p;
                variance += p * (1.0 - p);
                n += 1.0;
            }
        }
        let diff = (clicks / n - expected / n).abs();
        let se = (variance).sqrt() / n;
        assert!(diff <= 3.0 * se, "diff {diff} > 3 se {se}");
    }

    #[test]
    fn same_page_labels_are_positively_correlated() {
        let spec = WorldSpec {
            users: 500,
            pages_per_user: 8,
            alpha: 0.5,
            label_noise: 1.2,
            ..WorldSpec::default()
        };
        let (pages, _) = generate_dataset(&spec).unwrap();

        let same_label_rate = |label_of: &dyn Fn(usize, usize) -> u8| -> f64 {
            let mut same = 0.0;
            let mut total = 0.0;
            for (pi, page) in pages.iter().enumerate() {
                let k = page.exposures.len();
                for a in 0..k {
                    for b in (a + 1)..k {
                        same += (label_of(pi, a) == label_of(pi, b)) as u64 as f64;
                        total += 1.0;
                    }
                }
            }
            same / total
        };

        let observed = same_label_rate(&|pi, e| pages[pi].exposures[e].1);

        // shuffled baseline: permute all labels across the dataset
        let mut flat: Vec<u8> = pages
            .iter()
            .flat_map(|p| p.exposures.iter().map(|(_, l)| *l))
            .collect();
        let mut rng = Rng64::new(987);
        rng.shuffle(&mut flat);
        let mut offsets = Vec::with_capacity(pages.len());
        let mut at = 0;
        for p in &pages {
            offsets.push(at);
            at += p.exposures.len();
        }
        let shuffled = same_label_rate(&|pi, e| flat[offsets[pi] + e]);

        assert!(
            observed > shuffled + 0.02,
            "no collaborative structure: page {observed} vs shuffled {shuffled}"
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = WorldSpec::default();
        spec.exposures_min = 1;
        assert!(generate_dataset(&spec).is_err());

        let mut spec = WorldSpec::default();
        spec.alpha = 1.5;
        assert!(generate_dataset(&spec).is_err());

        let mut spec = WorldSpec::default();
        spec.items = spec.exposures_max;
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn sequences_grow_from_clicks_and_stay_recent_first() {
        let spec = WorldSpec { users: 5, pages_per_user: 6, ..WorldSpec::default() };
        let (pages, _) = generate_dataset(&spec).unwrap();
        // first page of each user has empty history
        for page in pages.iter().filter(|p| p.page_id % 6 == 0) {
            assert!(page.sequences.short.is_empty());
            assert!(page.sequences.long.is_empty());
        }
        // every short sequence item was clicked on an earlier page
        for user in 0..5u64 {
            let user_pages: Vec<&ImpressionPage> =
                pages.iter().filter(|p| p.user.user_id == user).collect();
            for (idx, page) in user_pages.iter().enumerate() {
                let earlier_clicks: Vec<u64> = user_pages[..idx]
                    .iter()
                    .flat_map(|p| {
                        p.exposures.iter().filter(|(_, l)| *l == 1).map(|(f, _)| f.item_id)
                    })
                    .collect();
                for item in &page.sequences.short {
                    assert!(earlier_clicks.contains(&item.item_id));
                }
            }
        }
    }
}
