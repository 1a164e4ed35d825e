//! Mini-batch training with AdaGrad, AUC evaluation, the ablation grid,
//! and the batch-level gradient check.
//!
//! Each page expands into one sample per exposure. Training builds one tape
//! per sample, reduces sample gradients in sample order, and applies one
//! AdaGrad step per mini-batch on the mean gradient. The optional
//! data-parallel mode computes sample tapes on worker threads but reduces
//! in the same order, so its results are bit-identical to single-threaded
//! runs with the same batch composition.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use crate::adagrad::AdaGradState;
use crate::contrastive::{ContrastiveError, HyperParams, PairPrior};
use crate::data::{ImpressionPage, TrainingSample};
use crate::embedding::EmbeddingSchema;
use crate::graph::{relative_error, Bindings, Value};
use crate::metrics::{compute_auc, MetricsError};
use crate::model::{
    build_sample_loss, predict_ctr, ModelParams, ModelSchema, ModelVariant,
};
use crate::params::ParamSlot;
use crate::rng::Rng64;
use crate::synth::{generate_dataset, WorldSpec};

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    Config(String),
    /// Loss or prediction became NaN/Inf.
    NonFinite { epoch: usize, detail: String },
    Metrics(MetricsError),
    Prior(ContrastiveError),
    Model(String),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainError::Config(detail) => write!(f, "bad config: {detail}"),
            TrainError::NonFinite { epoch, detail } => {
                write!(f, "non-finite value in epoch {epoch}: {detail}")
            }
            TrainError::Metrics(e) => write!(f, "{e}"),
            TrainError::Prior(e) => write!(f, "{e}"),
            TrainError::Model(detail) => write!(f, "{detail}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> TrainError {
        TrainError::Metrics(e)
    }
}

impl From<ContrastiveError> for TrainError {
    fn from(e: ContrastiveError) -> TrainError {
        TrainError::Prior(e)
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub schema: ModelSchema,
    pub variant: ModelVariant,
    pub epochs: usize,
    pub seed: u64,
    /// Learning-rate multiplier applied per epoch.
    pub lr_decay: f64,
    /// Worker threads for per-sample tapes (1 = sequential).
    pub workers: usize,
    /// Evaluate test AUC after every epoch.
    pub eval_each_epoch: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: d=16, h=4, batch 64, 5 epochs.
    pub fn desk(variant: ModelVariant) -> TrainConfig {
        let hyper = HyperParams::default();
        let schema = ModelSchema::from_hyper(&hyper);
        TrainConfig {
            hyper,
            schema,
            variant,
            epochs: 5,
            seed: 1,
            lr_decay: 0.95,
            workers: 1,
            eval_each_epoch: true,
        }
    }

    /// The reference industrial setting: batch 1024, initial rate 0.001,
    /// h=4 (model geometry stays desk-sized).
    pub fn paper_preset(variant: ModelVariant) -> TrainConfig {
        let mut config = TrainConfig::desk(variant);
        config.hyper.batch_size = 1024;
        config.hyper.learning_rate = 0.001;
        config
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.hyper.validate().map_err(TrainError::Config)?;
        self.schema.validate().map_err(TrainError::Config)?;
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(TrainError::Config("workers must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.schema.embedding.dim != self.hyper.dim
            || self.schema.heads != self.hyper.heads
            || self.schema.l_short != self.hyper.l_short
            || self.schema.l_long != self.hyper.l_long
        {
            return Err(TrainError::Config(
                "schema geometry disagrees with hyperparameters".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training record. `wall_secs` is informational and deliberately
/// excluded from the serialized metrics (files must be byte-reproducible).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_rep: f64,
    pub loss_att: f64,
    pub loss_total: f64,
    pub test_auc: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub variant: ModelVariant,
    pub seed: u64,
    pub attraction_weight: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsReport {
    /// Newline-delimited records, one per epoch; byte-stable across runs.
    pub fn to_ndtxt(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let auc = match e.test_auc {
                Some(a) => a.to_string(),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "epoch={}\tvariant={}\tseed={}\tlr={}\tloss_ce={}\tloss_rep={}\tloss_att={}\tloss_total={}\tauc={}\n",
                e.epoch,
                self.variant.name(),
                self.seed,
                e.lr,
                e.loss_ce,
                e.loss_rep,
                e.loss_att,
                e.loss_total,
                auc
            ));
        }
        out
    }

    pub fn final_auc(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.test_auc)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub prior: PairPrior,
    pub report: MetricsReport,
}

// ── per-sample gradients ─────────────────────────────────────────────

struct SamplePacket {
    ce: f64,
    rep: f64,
    att: f64,
    total: f64,
    grads: Vec<(ParamSlot, Vec<f64>)>,
}

/// Reusable forward/backward buffers for the per-sample hot path.
#[derive(Default)]
struct PacketScratch {
    eval: Vec<f64>,
    grad: Vec<f64>,
}

fn sample_packet(
    params: &ModelParams,
    sample: &TrainingSample,
    prior: &PairPrior,
    epoch: usize,
    scratch: &mut PacketScratch,
) -> Result<SamplePacket, TrainError> {
    let loss = crate::model::build_sample_loss_fast(params, sample, prior);
    let eval = loss
        .graph
        .forward_reusing(&Bindings::new(), std::mem::take(&mut scratch.eval))
        .map_err(|e| TrainError::Model(e.to_string()))?;
    let total = loss.graph.scalar_value(&eval, loss.root);
    if !total.is_finite() {
        return Err(TrainError::NonFinite {
            epoch,
            detail: format!("sample loss = {total}"),
        });
    }
    let store = loss
        .graph
        .backward_reusing(&eval, loss.root, std::mem::take(&mut scratch.grad))
        .map_err(|e| TrainError::Model(e.to_string()))?;
    let grads = loss
        .slots
        .iter()
        .map(|&(node, slot)| (slot, loss.graph.grad(&store, node).to_vec()))
        .collect();
    let packet = SamplePacket {
        ce: loss.graph.scalar_value(&eval, loss.ce),
        rep: loss.repulsion.map(|n| loss.graph.scalar_value(&eval, n)).unwrap_or(0.0),
        att: loss.attraction.map(|n| loss.graph.scalar_value(&eval, n)).unwrap_or(0.0),
        total,
        grads,
    };
    scratch.eval = eval.into_arena();
    scratch.grad = store.into_arena();
    Ok(packet)
}

/// Compute packets for one batch, optionally on worker threads. Packets
/// come back in batch order regardless of thread scheduling.
fn batch_packets(
    params: &ModelParams,
    samples: &[TrainingSample],
    batch: &[usize],
    prior: &PairPrior,
    epoch: usize,
    workers: usize,
) -> Result<Vec<SamplePacket>, TrainError> {
    if workers <= 1 || batch.len() < 2 * workers {
        let mut scratch = PacketScratch::default();
        return batch
            .iter()
            .map(|&i| sample_packet(params, &samples[i], prior, epoch, &mut scratch))
            .collect();
    }
    let chunk = batch.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut scratch = PacketScratch::default();
                    part.iter()
                        .map(|&i| sample_packet(params, &samples[i], prior, epoch, &mut scratch))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for handle in handles {
            out.extend(handle.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Mean-gradient accumulator with touched-region bookkeeping so table-sized
/// buffers are zeroed and updated only where the batch looked.
struct BatchGrads {
    bufs: Vec<Vec<f64>>,
    cols: Vec<usize>,
    dense_touched: Vec<bool>,
    rows_touched: Vec<Vec<usize>>,
}

impl BatchGrads {
    fn new(params: &ModelParams) -> BatchGrads {
        let n = params.store.len();
        BatchGrads {
            bufs: (0..n)
                .map(|i| vec![0.0; params.store.value(i).numel()])
                .collect(),
            cols: (0..n).map(|i| params.store.value(i).cols()).collect(),
            dense_touched: vec![false; n],
            rows_touched: vec![Vec::new(); n],
        }
    }

    fn accumulate(&mut self, packet: &SamplePacket) {
        for (slot, grad) in &packet.grads {
            match slot.row {
                None => {
                    self.dense_touched[slot.entry] = true;
                    let buf = &mut self.bufs[slot.entry];
                    for (b, g) in buf.iter_mut().zip(grad) {
                        *b += g;
                    }
                }
                Some(row) => {
                    self.rows_touched[slot.entry].push(row);
                    let width = self.cols[slot.entry];
                    let buf = &mut self.bufs[slot.entry][row * width..(row + 1) * width];
                    for (b, g) in buf.iter_mut().zip(grad) {
                        *b += g;
                    }
                }
            }
        }
    }

    /// One AdaGrad step on the mean gradient, then clear touched regions.
    fn apply(
        &mut self,
        params: &mut ModelParams,
        states: &mut [AdaGradState],
        inv_batch: f64,
    ) {
        for entry in 0..self.bufs.len() {
            if self.dense_touched[entry] {
                let buf = &mut self.bufs[entry];
                for g in buf.iter_mut() {
                    *g *= inv_batch;
                }
                states[entry]
                    .step(params.store.value_mut(entry).data_mut(), buf)
                    .expect("gradient buffer shape matches parameter");
                buf.fill(0.0);
                self.dense_touched[entry] = false;
            }
            if !self.rows_touched[entry].is_empty() {
                let rows = &mut self.rows_touched[entry];
                rows.sort_unstable();
                rows.dedup();
                let width = self.cols[entry];
                let value = params.store.value_mut(entry).data_mut();
                for &row in rows.iter() {
                    let range = row * width..(row + 1) * width;
                    let gslice = &mut self.bufs[entry][range.clone()];
                    for g in gslice.iter_mut() {
                        *g *= inv_batch;
                    }
                    states[entry].step_range(&mut value[range], gslice, row * width);
                    gslice.fill(0.0);
                }
                rows.clear();
            }
        }
    }
}

// ── training loop ────────────────────────────────────────────────────

/// Score every exposure of every page through the inference path and pool
/// them into one AUC.
pub fn evaluate_auc(params: &ModelParams, pages: &[ImpressionPage]) -> Result<f64, TrainError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for page in pages {
        for (item, label) in &page.exposures {
            let y = predict_ctr(params, &page.user, &page.trigger, item, &page.sequences)
                .map_err(|e| TrainError::Model(e.to_string()))?;
            scores.push(y);
            labels.push(*label);
        }
    }
    Ok(compute_auc(&scores, &labels)?)
}

/// Train a model from scratch; the pair prior is computed once from the
/// training split before epoch 1.
pub fn train(
    config: &TrainConfig,
    train_pages: &[ImpressionPage],
    test_pages: &[ImpressionPage],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_pages.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let prior = PairPrior::from_pages(train_pages)?;
    let mut params = ModelParams::init(
        config.schema.clone(),
        config.hyper.clone(),
        config.variant,
        config.seed,
    );

    let mut samples = Vec::new();
    for page in train_pages {
        let arc = Arc::new(page.clone());
        samples.extend(TrainingSample::expand_page(&arc));
    }

    let mut states: Vec<AdaGradState> = (0..params.store.len())
        .map(|i| AdaGradState::new(params.store.value(i).numel(), config.hyper.learning_rate))
        .collect();
    let mut grads = BatchGrads::new(&params);

    let mut report = MetricsReport {
        variant: config.variant,
        seed: config.seed,
        attraction_weight: prior.attraction_weight,
        epochs: Vec::with_capacity(config.epochs),
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = config.hyper.learning_rate * config.lr_decay.powi(epoch as i32 - 1);
        for state in &mut states {
            state.set_learning_rate(lr);
        }

        let mut rng = Rng64::derive(config.seed, &[10, epoch as u64]);
        rng.shuffle(&mut order);

        let mut sums = [0.0f64; 4]; // ce, rep, att, total
        for batch in order.chunks(config.hyper.batch_size) {
            let packets = batch_packets(&params, &samples, batch, &prior, epoch, config.workers)?;
            for packet in &packets {
                sums[0] += packet.ce;
                sums[1] += packet.rep;
                sums[2] += packet.att;
                sums[3] += packet.total;
                grads.accumulate(packet);
            }
            grads.apply(&mut params, &mut states, 1.0 / batch.len() as f64);
        }

        let n = samples.len() as f64;
        // cadence: every epoch, or the final epoch only
        let eval_now = config.eval_each_epoch || epoch == config.epochs;
        let test_auc = if eval_now && !test_pages.is_empty() {
            Some(evaluate_auc(&params, test_pages)?)
        } else {
            None
        };
        report.epochs.push(EpochMetrics {
            epoch,
            lr,
            loss_ce: sums[0] / n,
            loss_rep: sums[1] / n,
            loss_att: sums[2] / n,
            loss_total: sums[3] / n,
            test_auc,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome { params, prior, report })
}

// ── ablation grid ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: ModelVariant,
    /// `(seed, final test AUC or failure note)` per cell.
    pub cells: Vec<(u64, Result<f64, String>)>,
    /// Mean AUC over successful cells; best and worst dropped when five or
    /// more seeds succeeded.
    pub mean_auc: Option<f64>,
    pub trimmed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tmean_auc\tseeds_ok\ttrimmed\tper_seed\n");
        for row in &self.rows {
            let mean = row
                .mean_auc
                .map(|m| m.to_string())
                .unwrap_or_else(|| "-".to_string());
            let ok = row.cells.iter().filter(|(_, r)| r.is_ok()).count();
            let per_seed = row
                .cells
                .iter()
                .map(|(seed, r)| match r {
                    Ok(auc) => format!("{seed}:{auc}"),
                    Err(e) => format!("{seed}:failed({})", e.replace(['\t', '\n'], " ")),
                })
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                row.variant.name(),
                mean,
                ok,
                row.trimmed,
                per_seed
            ));
        }
        out
    }
}

fn trimmed_mean(aucs: &[f64]) -> (Option<f64>, bool) {
    if aucs.is_empty() {
        return (None, false);
    }
    if aucs.len() >= 5 {
        let mut sorted = aucs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let kept = &sorted[1..sorted.len() - 1];
        (Some(kept.iter().sum::<f64>() / kept.len() as f64), true)
    } else {
        (Some(aucs.iter().sum::<f64>() / aucs.len() as f64), false)
    }
}

/// Train every variant on identical data and seeds; failed cells are
/// recorded and the grid continues.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[ModelVariant],
    seeds: &[u64],
    train_pages: &[ImpressionPage],
    test_pages: &[ImpressionPage],
) -> AblationTable {
    let mut table = AblationTable::default();
    for &variant in variants {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            config.variant = variant;
            config.seed = seed;
            let outcome = train(&config, train_pages, test_pages).and_then(|o| {
                o.report
                    .final_auc()
                    .ok_or_else(|| TrainError::Config("no test AUC recorded".into()))
            });
            cells.push((seed, outcome.map_err(|e| e.to_string())));
        }
        let oks: Vec<f64> = cells.iter().filter_map(|(_, r)| r.as_ref().ok().copied()).collect();
        let (mean_auc, trimmed) = trimmed_mean(&oks);
        table.rows.push(AblationRow { variant, cells, mean_auc, trimmed });
    }
    table
}

// ── batch-level gradient check ───────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub batches: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> GradCheckConfig {
        GradCheckConfig { batches: 100, seed: 7, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub batches: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub non_finite: bool,
    /// Probes that straddled a relu kink; central differences are invalid
    /// across the non-differentiable point, so these are not scored.
    pub kink_skips: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_err < tolerance
    }

    pub fn summary(&self, tolerance: f64) -> String {
        format!(
            "batches={} coords={} kink_skips={} max_rel_err={:.3e} worst={}[{}] non_finite={} tolerance={:.1e} verdict={}\n",
            self.batches,
            self.coords_checked,
            self.kink_skips,
            self.max_rel_err,
            self.worst_param,
            self.worst_coord,
            self.non_finite,
            tolerance,
            if self.passed(tolerance) { "PASS" } else { "FAIL" }
        )
    }
}

fn gradcheck_world(seed: u64) -> WorldSpec {
    WorldSpec {
        users: 2,
        items: 12,
        categories: 4,
        sellers: 5,
        latent_dim: 4,
        pages_per_user: 1,
        exposures_min: 4,
        exposures_max: 6,
        alpha: 0.5,
        label_noise: 0.4,
        seed,
    }
}

fn gradcheck_params(seed: u64) -> ModelParams {
    let hyper = HyperParams {
        dim: 4,
        heads: 2,
        lambda: 1.0,
        l_short: 4,
        l_long: 6,
        ..HyperParams::default()
    };
    let schema = ModelSchema {
        embedding: EmbeddingSchema {
            dim: 4,
            item_buckets: 64,
            category_buckets: 16,
            seller_buckets: 16,
            user_buckets: 16,
            profile_fields: 2,
            profile_buckets: 8,
        },
        heads: 2,
        cm_hidden: vec![4],
        pred_hidden: vec![8, 4],
        l_short: 4,
        l_long: 6,
    };
    ModelParams::init(schema, hyper, ModelVariant::Ccn, seed)
}

fn slot_leaf_name(params: &ModelParams, slot: ParamSlot) -> String {
    match slot.row {
        Some(row) => format!("{}[{row}]", params.store.name(slot.entry)),
        None => params.store.name(slot.entry).to_string(),
    }
}

/// Check the analytic gradient of the full mini-batch training loss (the
/// exact path training uses: per-sample tapes reduced in order, scaled by
/// 1/B) against central finite differences, over `batches` random
/// micro-batches of 2 pages each.
pub fn gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport, TrainError> {
    let mut report = GradCheckReport {
        batches: config.batches,
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        non_finite: false,
        kink_skips: 0,
    };

    for batch_idx in 0..config.batches {
        let world_seed = config.seed.wrapping_mul(1000).wrapping_add(batch_idx as u64);
        let (pages, _) = generate_dataset(&gradcheck_world(world_seed))
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let prior = PairPrior::from_pages(&pages)?;
        let params = gradcheck_params(world_seed.wrapping_add(1));

        let mut samples = Vec::new();
        for page in &pages {
            let arc = Arc::new(page.clone());
            samples.extend(TrainingSample::expand_page(&arc));
        }
        let inv_b = 1.0 / samples.len() as f64;

        // analytic gradients via the training path
        let mut grad_sum: HashMap<ParamSlot, Vec<f64>> = HashMap::new();
        let mut affected: HashMap<ParamSlot, Vec<usize>> = HashMap::new();
        let mut losses = Vec::with_capacity(samples.len());
        let mut scratch = PacketScratch::default();
        for (i, sample) in samples.iter().enumerate() {
            let packet = sample_packet(&params, sample, &prior, 0, &mut scratch)?;
            losses.push(build_sample_loss(&params, sample, &prior));
            for (slot, grad) in packet.grads {
                affected.entry(slot).or_default().push(i);
                match grad_sum.entry(slot) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, g) in e.get_mut().iter_mut().zip(&grad) {
                            *a += g;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(grad);
                    }
                }
            }
        }

        let mut slots: Vec<ParamSlot> = grad_sum.keys().copied().collect();
        slots.sort_unstable();

        for slot in slots {
            let leaf = slot_leaf_name(&params, slot);
            let analytic = &grad_sum[&slot];
            let deps = &affected[&slot];
            let entry_value = params.store.value(slot.entry);
            let width = entry_value.cols();
            let base: Vec<f64> = match slot.row {
                Some(row) => entry_value.data()[row * width..(row + 1) * width].to_vec(),
                None => entry_value.data().to_vec(),
            };
            for coord in 0..base.len() {
                let x = base[coord];
                let h = 1e-4 * x.abs().max(1.0);
                let perturbed = |delta: f64| -> Value {
                    let mut v = Value::new(
                        if slot.row.is_some() { base.len() } else { entry_value.rows() },
                        if slot.row.is_some() { 1 } else { width },
                        base.clone(),
                    );
                    v.data_mut()[coord] = x + delta;
                    v
                };
                let vp = perturbed(h);
                let vm = perturbed(-h);
                let mut fp = 0.0;
                let mut fm = 0.0;
                let mut kink = false;
                for &i in deps {
                    let run = |v: &Value| {
                        let mut binds = Bindings::new();
                        binds.bind(&leaf, v.clone());
                        losses[i]
                            .graph
                            .forward(&binds)
                            .map_err(|e| TrainError::Model(e.to_string()))
                    };
                    let ep = run(&vp)?;
                    let em = run(&vm)?;
                    kink |= losses[i].graph.relu_crossing(&ep, &em);
                    fp += losses[i].graph.scalar_value(&ep, losses[i].root);
                    fm += losses[i].graph.scalar_value(&em, losses[i].root);
                }
                report.coords_checked += 1;
                if !fp.is_finite() || !fm.is_finite() {
                    report.non_finite = true;
                    continue;
                }
                if kink {
                    report.kink_skips += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h) * inv_b;
                let analytic_c = analytic[coord] * inv_b;
                let err = relative_error(analytic_c, numeric);
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst_param = leaf.clone();
                    report.worst_coord = coord;
                }
            }
        }
    }
    Ok(report)
}
