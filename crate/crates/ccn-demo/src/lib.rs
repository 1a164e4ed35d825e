//! Interactive browser demo over the core crate, exposed through
//! wasm-bindgen. Three operations, all returning JSON strings for a plain
//! static page to plot:
//!
//! - [`loss_landscape`]: repulsion/attraction losses as a function of the
//!   target's collaborative degree, given slider-set context degrees.
//! - [`pair_prior`]: the same-label pair probability and the attraction
//!   down-weighting it induces.
//! - [`train_demo`]: train the backbone (TAN) and the full method (CCN) on
//!   a small synthetic world and report per-epoch losses and test AUC.
//!
//! Build for the web with
//! `wasm-pack build crates/ccn-demo --target web --out-dir ../../www/pkg`.

use wasm_bindgen::prelude::wasm_bindgen;

use ccn_core::contrastive::{
    attraction_loss, importance_weights, repulsion_loss, squash_degree, HyperParams, PairPrior,
};
use ccn_core::model::{ModelSchema, ModelVariant};
use ccn_core::synth::{generate_dataset, split_by_user, WorldSpec};
use ccn_core::train::{train, TrainConfig};

fn json_f64(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        "null".to_string()
    }
}

fn json_array(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|&x| json_f64(x)).collect();
    format!("[{}]", items.join(","))
}

/// Repulsion and attraction losses over a sweep of the target degree.
///
/// `pos_raw`/`neg_raw` are raw collaborative-module outputs for the
/// positive/negative context sets; they pass through the same squashing map
/// the model uses. Returns `{s, repulsion, attraction, pos_weights,
/// neg_weights}` with `points` samples of the target's raw output in
/// [-6, 6].
#[wasm_bindgen]
pub fn loss_landscape(
    pos_raw: Vec<f64>,
    neg_raw: Vec<f64>,
    tau: f64,
    xi: f64,
    points: usize,
) -> String {
    let n = points.clamp(2, 2000);
    let pos: Vec<f64> = pos_raw.iter().map(|&r| squash_degree(r, xi)).collect();
    let neg: Vec<f64> = neg_raw.iter().map(|&r| squash_degree(r, xi)).collect();
    let mut s_grid = Vec::with_capacity(n);
    let mut rep = Vec::with_capacity(n);
    let mut att = Vec::with_capacity(n);
    for i in 0..n {
        let raw = -6.0 + 12.0 * i as f64 / (n - 1) as f64;
        let s = squash_degree(raw, xi);
        s_grid.push(s);
        rep.push(repulsion_loss(s, &neg, tau));
        att.push(attraction_loss(s, &pos, xi));
    }
    let pos_w = importance_weights(&pos, xi).unwrap_or_default();
    let neg_w = importance_weights(&neg, tau).unwrap_or_default();
    format!(
        "{{\"s\":{},\"repulsion\":{},\"attraction\":{},\"pos_weights\":{},\"neg_weights\":{}}}",
        json_array(&s_grid),
        json_array(&rep),
        json_array(&att),
        json_array(&pos_w),
        json_array(&neg_w)
    )
}

/// Pair-label prior from average unclicked (`n0`) and clicked (`n1`)
/// exposures per page.
#[wasm_bindgen]
pub fn pair_prior(n0: f64, n1: f64) -> String {
    match PairPrior::from_counts(n0, n1) {
        Ok(prior) => format!(
            "{{\"p_plus\":{},\"p_minus\":{},\"weight\":{}}}",
            json_f64(prior.p_plus),
            json_f64(prior.p_minus),
            json_f64(prior.attraction_weight)
        ),
        Err(e) => format!("{{\"error\":\"{e}\"}}"),
    }
}

fn demo_config(variant: ModelVariant, seed: u64, lambda: f64, epochs: usize) -> TrainConfig {
    let hyper = HyperParams {
        dim: 8,
        heads: 2,
        lambda,
        l_short: 6,
        l_long: 12,
        batch_size: 32,
        learning_rate: 0.02,
        ..HyperParams::default()
    };
    let mut schema = ModelSchema::from_hyper(&hyper);
    schema.embedding.item_buckets = 128;
    schema.embedding.category_buckets = 16;
    schema.embedding.seller_buckets = 16;
    schema.embedding.user_buckets = 64;
    schema.embedding.profile_buckets = 8;
    schema.cm_hidden = vec![8];
    schema.pred_hidden = vec![16, 8];
    TrainConfig {
        hyper,
        schema,
        variant,
        epochs,
        seed,
        lr_decay: 0.95,
        workers: 1,
        eval_each_epoch: true,
    }
}

/// Train TAN and CCN on a fresh synthetic world and report learning curves.
///
/// Returns `{pages, ctr, variants: [{name, auc: [...], ce: [...],
/// rep: [...], att: [...]}, ...]}` or `{"error": "..."}`.
#[wasm_bindgen]
pub fn train_demo(seed: u64, alpha: f64, lambda: f64, epochs: usize) -> String {
    let spec = WorldSpec {
        users: 60,
        items: 50,
        categories: 8,
        sellers: 12,
        latent_dim: 8,
        pages_per_user: 4,
        exposures_min: 4,
        exposures_max: 8,
        alpha: alpha.clamp(0.0, 1.0),
        label_noise: 0.4,
        seed,
    };
    let (pages, _) = match generate_dataset(&spec) {
        Ok(x) => x,
        Err(e) => return format!("{{\"error\":\"{e}\"}}"),
    };
    let n_pages = pages.len();
    let exposures: usize = pages.iter().map(|p| p.exposures.len()).sum();
    let clicks: usize = pages.iter().map(|p| p.clicked_count()).sum();
    let (train_pages, test_pages) = split_by_user(pages, 5);

    let epochs = epochs.clamp(1, 20);
    let mut variants_json = Vec::new();
    for variant in [ModelVariant::Tan, ModelVariant::Ccn] {
        let config = demo_config(variant, seed, lambda.max(0.0), epochs);
        let outcome = match train(&config, &train_pages, &test_pages) {
            Ok(o) => o,
            Err(e) => return format!("{{\"error\":\"{e}\"}}"),
        };
        let pick = |f: &dyn Fn(&ccn_core::train::EpochMetrics) -> f64| -> Vec<f64> {
            outcome.report.epochs.iter().map(|e| f(e)).collect()
        };
        variants_json.push(format!(
            "{{\"name\":\"{}\",\"auc\":{},\"ce\":{},\"rep\":{},\"att\":{}}}",
            variant.name(),
            json_array(&pick(&|e| e.test_auc.unwrap_or(f64::NAN))),
            json_array(&pick(&|e| e.loss_ce)),
            json_array(&pick(&|e| e.loss_rep)),
            json_array(&pick(&|e| e.loss_att)),
        ));
    }
    format!(
        "{{\"pages\":{},\"ctr\":{},\"variants\":[{}]}}",
        n_pages,
        json_f64(clicks as f64 / exposures as f64),
        variants_json.join(",")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landscape_has_expected_shape_and_limits() {
        let out = loss_landscape(vec![0.5, -0.5], vec![0.0], 0.5, 0.8, 50);
        assert!(out.starts_with("{\"s\":["), "{out}");
        assert!(out.contains("\"repulsion\":["));
        assert!(out.contains("\"attraction\":["));
        assert!(!out.contains("null"), "non-finite values leaked: {out}");
    }

    #[test]
    fn landscape_repulsion_decreases_along_grid() {
        // repulsion is strictly decreasing in the target degree
        let out = loss_landscape(vec![], vec![0.3, -0.3], 0.5, 0.8, 20);
        let rep_part = out.split("\"repulsion\":[").nth(1).unwrap();
        let rep_str = rep_part.split(']').next().unwrap();
        let rep: Vec<f64> = rep_str.split(',').map(|x| x.parse().unwrap()).collect();
        for w in rep.windows(2) {
            assert!(w[1] < w[0], "repulsion not decreasing: {rep:?}");
        }
    }

    #[test]
    fn pair_prior_handles_both_regimes() {
        let ok = pair_prior(9.0, 1.0);
        assert!(ok.contains("\"p_plus\":0.8"), "{ok}");
        let bad = pair_prior(0.25, 0.25);
        assert!(bad.contains("error"), "{bad}");
    }

    #[test]
    fn train_demo_returns_curves_for_both_variants() {
        let out = train_demo(3, 0.5, 0.1, 2);
        assert!(out.contains("\"variants\":["), "{out}");
        assert!(out.contains("\"name\":\"tan\""));
        assert!(out.contains("\"name\":\"ccn\""));
        assert!(!out.contains("error"), "{out}");
    }

    #[test]
    fn train_demo_is_deterministic() {
        assert_eq!(train_demo(5, 0.5, 0.1, 1), train_demo(5, 0.5, 0.1, 1));
    }
}
