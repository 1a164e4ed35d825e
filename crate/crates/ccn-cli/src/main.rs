//! `ccn` — synthesize trigger-induced recommendation data, train and
//! evaluate the collaborative contrastive CTR model, run the ablation
//! grid, and gradient-check the training loss.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 numeric failure (NaN/divergence or a failed gradient check).

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ccn_core::checkpoint::{load_checkpoint, save_checkpoint};
use ccn_core::contrastive::HyperParams;
use ccn_core::data::{parse_dataset, parse_page_line, write_dataset};
use ccn_core::metrics::MetricsError;
use ccn_core::model::{predict_ctr, ModelSchema, ModelVariant};
use ccn_core::synth::{generate_dataset, split_by_user, WorldSpec};
use ccn_core::train::{
    evaluate_auc, gradcheck, run_ablation, train, GradCheckConfig, TrainConfig, TrainError,
};

mod args;
mod config;

use args::Args;
use config::ConfigFile;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

const USAGE: &str = "\
ccn — collaborative contrastive CTR prediction pipeline

USAGE:
  ccn synth     --out-dir DIR [--seed N --users N --items N --categories N
                --sellers N --latent-dim N --pages-per-user N
                --exposures-min N --exposures-max N --alpha F --noise F]
                [--config FILE]
  ccn train     --train FILE --test FILE --out-dir DIR
                [--variant V --epochs N --seed N --preset desk|paper
                 --lambda F --tau F --xi F --dim N --heads N --batch N
                 --lr F --lr-decay F --workers N --l-short N --l-long N]
                [--config FILE]
  ccn eval      --ckpt FILE --data FILE
  ccn score     --ckpt FILE            (one record on stdin; the first
                                        exposure is the scored target,
                                        everything else is ignored)
  ccn ablate    --train FILE --test FILE --out-dir DIR
                [--variants a,b,c --seeds 1,2,3 + train flags] [--config FILE]
  ccn gradcheck [--out-dir DIR --batches N --seed N --tolerance F]

Variants: tan-minus tan ccn-no-tsi ccn-no-attraction ccn-no-repulsion ccn
Outputs under --out-dir: dataset.tsv model.ckpt metrics.ndtxt ablation.tsv
gradcheck.txt

Exit codes: 0 ok, 1 usage, 2 data/validation, 3 numeric failure.
";

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if matches!(err, CliError::Usage(_)) {
                eprintln!("\n{USAGE}");
            }
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(argv: &[String]) -> Result<(), CliError> {
    match argv.first().map(String::as_str) {
        None | Some("help") | Some("--help") | Some("-h") => {
            print!("{USAGE}");
            Ok(())
        }
        Some("synth") => cmd_synth(&argv[1..]),
        Some("train") => cmd_train(&argv[1..]),
        Some("eval") => cmd_eval(&argv[1..]),
        Some("score") => cmd_score(&argv[1..]),
        Some("ablate") => cmd_ablate(&argv[1..]),
        Some("gradcheck") => cmd_gradcheck(&argv[1..]),
        Some(other) => Err(CliError::Usage(format!("unknown subcommand `{other}`"))),
    }
}

fn map_train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        TrainError::Metrics(MetricsError::NonFiniteScore { .. }) => {
            CliError::Numeric(e.to_string())
        }
        other => CliError::Data(other.to_string()),
    }
}

fn out_dir(args: &Args) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(args.require("out-dir")?);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_config(args: &Args) -> Result<ConfigFile, CliError> {
    match args.get("config") {
        Some(path) => ConfigFile::load(Path::new(path)),
        None => Ok(ConfigFile::default()),
    }
}

/// Flags override config-file values, which override defaults.
fn resolve<T: std::str::FromStr + Copy>(
    args: &Args,
    cfg: &ConfigFile,
    flag: &str,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    if let Some(v) = args.get_parsed::<T>(flag)? {
        return Ok(v);
    }
    if let Some(v) = cfg.get_parsed::<T>(key)? {
        return Ok(v);
    }
    Ok(default)
}

fn parse_usize_list(raw: &str, what: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Data(format!("{what}: `{p}` is not an integer")))
        })
        .collect()
}

// ── synth ────────────────────────────────────────────────────────────

const SYNTH_FLAGS: &[&str] = &[
    "out-dir", "config", "seed", "users", "items", "categories", "sellers",
    "latent-dim", "pages-per-user", "exposures-min", "exposures-max", "alpha", "noise",
    "holdout-every",
];

fn cmd_synth(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse(argv, SYNTH_FLAGS)?;
    let cfg = load_config(&args)?;
    let dir = out_dir(&args)?;
    let defaults = WorldSpec::default();
    let spec = WorldSpec {
        seed: resolve(&args, &cfg, "seed", "synth.seed", defaults.seed)?,
        users: resolve(&args, &cfg, "users", "synth.users", defaults.users)?,
        items: resolve(&args, &cfg, "items", "synth.items", defaults.items)?,
        categories: resolve(&args, &cfg, "categories", "synth.categories", defaults.categories)?,
        sellers: resolve(&args, &cfg, "sellers", "synth.sellers", defaults.sellers)?,
        latent_dim: resolve(&args, &cfg, "latent-dim", "synth.latent_dim", defaults.latent_dim)?,
        pages_per_user: resolve(
            &args, &cfg, "pages-per-user", "synth.pages_per_user", defaults.pages_per_user,
        )?,
        exposures_min: resolve(
            &args, &cfg, "exposures-min", "synth.exposures_min", defaults.exposures_min,
        )?,
        exposures_max: resolve(
            &args, &cfg, "exposures-max", "synth.exposures_max", defaults.exposures_max,
        )?,
        alpha: resolve(&args, &cfg, "alpha", "synth.alpha", defaults.alpha)?,
        label_noise: resolve(&args, &cfg, "noise", "synth.label_noise", defaults.label_noise)?,
    };
    let (pages, _truth) = generate_dataset(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    let path = dir.join("dataset.tsv");
    // --holdout-every N keeps every N-th user's pages out of dataset.tsv
    // and writes them to holdout.tsv, giving a same-world test split
    if let Some(every) = args.get_parsed::<usize>("holdout-every")? {
        if every < 2 {
            return Err(CliError::Usage("--holdout-every must be at least 2".into()));
        }
        let (train_pages, holdout) = split_by_user(pages, every);
        write_dataset(&train_pages, &path).map_err(|e| CliError::Data(e.to_string()))?;
        let holdout_path = dir.join("holdout.tsv");
        write_dataset(&holdout, &holdout_path).map_err(|e| CliError::Data(e.to_string()))?;
        println!(
            "wrote {} pages to {} and {} holdout pages to {}",
            train_pages.len(),
            path.display(),
            holdout.len(),
            holdout_path.display()
        );
    } else {
        write_dataset(&pages, &path).map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote {} pages to {}", pages.len(), path.display());
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

const TRAIN_FLAGS: &[&str] = &[
    "train", "test", "out-dir", "config", "variant", "epochs", "seed", "preset",
    "lambda", "tau", "xi", "dim", "heads", "batch", "lr", "lr-decay", "workers",
    "l-short", "l-long",
];

fn build_train_config(args: &Args, cfg: &ConfigFile) -> Result<TrainConfig, CliError> {
    let variant_name = args
        .get("variant")
        .map(str::to_string)
        .or_else(|| cfg.get("train.variant").map(str::to_string))
        .unwrap_or_else(|| "ccn".to_string());
    let variant = ModelVariant::parse(&variant_name)
        .ok_or_else(|| CliError::Usage(format!("unknown variant `{variant_name}`")))?;

    let mut base = match args.get("preset") {
        None | Some("desk") => TrainConfig::desk(variant),
        Some("paper") => TrainConfig::paper_preset(variant),
        Some(other) => return Err(CliError::Usage(format!("unknown preset `{other}`"))),
    };

    let hyper = HyperParams {
        tau: resolve(args, cfg, "tau", "hyper.tau", base.hyper.tau)?,
        xi: resolve(args, cfg, "xi", "hyper.xi", base.hyper.xi)?,
        lambda: resolve(args, cfg, "lambda", "hyper.lambda", base.hyper.lambda)?,
        dim: resolve(args, cfg, "dim", "hyper.dim", base.hyper.dim)?,
        heads: resolve(args, cfg, "heads", "hyper.heads", base.hyper.heads)?,
        learning_rate: resolve(args, cfg, "lr", "hyper.learning_rate", base.hyper.learning_rate)?,
        batch_size: resolve(args, cfg, "batch", "hyper.batch_size", base.hyper.batch_size)?,
        l_short: resolve(args, cfg, "l-short", "hyper.l_short", base.hyper.l_short)?,
        l_long: resolve(args, cfg, "l-long", "hyper.l_long", base.hyper.l_long)?,
    };
    let mut schema = ModelSchema::from_hyper(&hyper);
    schema.embedding.item_buckets = cfg
        .get_parsed::<usize>("schema.item_buckets")?
        .unwrap_or(schema.embedding.item_buckets);
    schema.embedding.category_buckets = cfg
        .get_parsed::<usize>("schema.category_buckets")?
        .unwrap_or(schema.embedding.category_buckets);
    schema.embedding.seller_buckets = cfg
        .get_parsed::<usize>("schema.seller_buckets")?
        .unwrap_or(schema.embedding.seller_buckets);
    schema.embedding.user_buckets = cfg
        .get_parsed::<usize>("schema.user_buckets")?
        .unwrap_or(schema.embedding.user_buckets);
    schema.embedding.profile_buckets = cfg
        .get_parsed::<usize>("schema.profile_buckets")?
        .unwrap_or(schema.embedding.profile_buckets);
    if let Some(raw) = cfg.get("schema.cm_hidden") {
        schema.cm_hidden = parse_usize_list(raw, "schema.cm_hidden")?;
    }
    if let Some(raw) = cfg.get("schema.pred_hidden") {
        schema.pred_hidden = parse_usize_list(raw, "schema.pred_hidden")?;
    }

    base.hyper = hyper;
    base.schema = schema;
    base.epochs = resolve(args, cfg, "epochs", "train.epochs", base.epochs)?;
    base.seed = resolve(args, cfg, "seed", "train.seed", base.seed)?;
    base.lr_decay = resolve(args, cfg, "lr-decay", "train.lr_decay", base.lr_decay)?;
    base.workers = resolve(args, cfg, "workers", "train.workers", base.workers)?;
    Ok(base)
}

fn load_pages(path: &str) -> Result<Vec<ccn_core::data::ImpressionPage>, CliError> {
    parse_dataset(Path::new(path)).map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_train(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse(argv, TRAIN_FLAGS)?;
    let cfg = load_config(&args)?;
    let dir = out_dir(&args)?;
    let train_path = args.require("train")?;
    let test_path = args.require("test")?;
    if train_path == test_path {
        return Err(CliError::Data(
            "train and test datasets must be distinct files".to_string(),
        ));
    }
    let config = build_train_config(&args, &cfg)?;
    let train_pages = load_pages(train_path)?;
    let test_pages = load_pages(test_path)?;

    let started = Instant::now();
    let outcome = train(&config, &train_pages, &test_pages).map_err(map_train_err)?;
    eprintln!(
        "trained {} epochs in {:.2}s",
        config.epochs,
        started.elapsed().as_secs_f64()
    );

    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&outcome.params, &ckpt).map_err(|e| CliError::Data(e.to_string()))?;
    let metrics = dir.join("metrics.ndtxt");
    std::fs::write(&metrics, outcome.report.to_ndtxt())
        .map_err(|e| CliError::Data(format!("{}: {e}", metrics.display())))?;

    let auc = outcome
        .report
        .final_auc()
        .map(|a| a.to_string())
        .unwrap_or_else(|| "-".to_string());
    println!(
        "variant={} seed={} epochs={} final_auc={auc}",
        config.variant.name(),
        config.seed,
        config.epochs
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn cmd_eval(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse(argv, &["ckpt", "data"])?;
    let params = load_checkpoint(Path::new(args.require("ckpt")?))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let pages = load_pages(args.require("data")?)?;
    let auc = evaluate_auc(&params, &pages).map_err(map_train_err)?;
    println!("auc={auc}");
    Ok(())
}

// ── score ────────────────────────────────────────────────────────────

fn cmd_score(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse(argv, &["ckpt"])?;
    let params = load_checkpoint(Path::new(args.require("ckpt")?))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut input = String::new();
    std::io::stdin()
        .read_to_string(&mut input)
        .map_err(|e| CliError::Data(format!("stdin: {e}")))?;
    let line = input
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| CliError::Data("no record on stdin".to_string()))?;
    // single records may carry any number of exposures; only the first is
    // scored and context plays no part in the prediction path
    let page = parse_page_line(line, 1, 1).map_err(|e| CliError::Data(e.to_string()))?;
    let (target, _) = &page.exposures[0];
    let y = predict_ctr(&params, &page.user, &page.trigger, target, &page.sequences)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if !y.is_finite() {
        return Err(CliError::Numeric(format!("prediction is not finite: {y}")));
    }
    println!("{y}");
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

const ABLATE_FLAGS: &[&str] = &[
    "train", "test", "out-dir", "config", "variants", "seeds", "epochs", "preset",
    "lambda", "tau", "xi", "dim", "heads", "batch", "lr", "lr-decay", "workers",
    "l-short", "l-long",
];

fn cmd_ablate(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse(argv, ABLATE_FLAGS)?;
    let cfg = load_config(&args)?;
    let dir = out_dir(&args)?;
    let base = build_train_config(&args, &cfg)?;

    let variants_raw = args
        .get("variants")
        .map(str::to_string)
        .or_else(|| cfg.get("ablate.variants").map(str::to_string))
        .unwrap_or_else(|| "tan-minus,tan,ccn-no-tsi,ccn-no-attraction,ccn-no-repulsion,ccn".into());
    let variants: Vec<ModelVariant> = variants_raw
        .split(',')
        .map(|name| {
            ModelVariant::parse(name.trim())
                .ok_or_else(|| CliError::Usage(format!("unknown variant `{name}`")))
        })
        .collect::<Result<_, _>>()?;

    let seeds_raw = args
        .get("seeds")
        .map(str::to_string)
        .or_else(|| cfg.get("ablate.seeds").map(str::to_string))
        .unwrap_or_else(|| "1,2,3,4,5".into());
    let seeds: Vec<u64> = seeds_raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("bad seed `{p}`")))
        })
        .collect::<Result<_, _>>()?;

    let train_pages = load_pages(args.require("train")?)?;
    let test_pages = load_pages(args.require("test")?)?;

    let table = run_ablation(&base, &variants, &seeds, &train_pages, &test_pages);
    let tsv = table.to_tsv();
    let path = dir.join("ablation.tsv");
    std::fs::write(&path, &tsv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    print!("{tsv}");
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

fn cmd_gradcheck(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse(argv, &["out-dir", "batches", "seed", "tolerance"])?;
    let defaults = GradCheckConfig::default();
    let config = GradCheckConfig {
        batches: args.get_parsed("batches")?.unwrap_or(defaults.batches),
        seed: args.get_parsed("seed")?.unwrap_or(defaults.seed),
        tolerance: args.get_parsed("tolerance")?.unwrap_or(defaults.tolerance),
    };
    let report = gradcheck(&config).map_err(map_train_err)?;
    let summary = report.summary(config.tolerance);
    if let Some(dir) = args.get("out-dir") {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join("gradcheck.txt");
        std::fs::write(&path, &summary)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    print!("{summary}");
    if !report.passed(config.tolerance) {
        return Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            report.max_rel_err, config.tolerance
        )));
    }
    Ok(())
}
