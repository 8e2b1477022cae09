//! Operator front end for the appliance detection pipeline: synthesize or
//! ingest data, pretrain, finetune, tune the merge quantile, detect,
//! evaluate, and run sensitivity sweeps.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use transapp::adf::{
    build_window_store, default_alpha_grid, detect_all, tune_alpha, windows_for_training,
    AlphaParameter, SliceOptions,
};
use transapp::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use transapp::data::{
    load_csv, split, synthesize, undersample, write_labels_csv, write_series_csv,
    ConsumptionSeries, LabeledDataset, Scaler, SplitSpec, SyntheticConfig,
};
use transapp::metrics::MetricsReport;
use transapp::model::{ConfigPatch, TransAppConfig, TransAppModel};
use transapp::pretrain::{pretrain, write_pretrain_trace_csv, MaskSpec, PretrainConfig};
use transapp::train::{finetune, write_history_csv, FinetuneConfig};
use transapp::{Error, Result};

const EVAL_BATCH: usize = 16;

#[derive(Parser)]
#[command(name = "adf", about = "Appliance detection in low-frequency load curves", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset
    Synth(SynthArgs),
    /// Masked-reconstruction pretraining on unlabeled windows
    Pretrain(PretrainArgs),
    /// Supervised training of the classification head (optionally from a
    /// pretrained checkpoint)
    Finetune(FinetuneArgs),
    /// Pick the merge quantile on the validation split
    TuneAlpha(TuneAlphaArgs),
    /// Per-series detection with a trained model and a tuned quantile
    Detect(DetectArgs),
    /// Tune on validation, then report metrics on a chosen split
    Evaluate(EvaluateArgs),
    /// Rerun the pipeline along one axis and tabulate scores
    Sweep(SweepArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Output directory for readings.csv and labels.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    households: usize,
    /// Slots per series
    #[arg(long, default_value_t = 9600)]
    len: usize,
    #[arg(long, default_value_t = 30)]
    period_minutes: u32,
    /// Appliance pulse height in kW
    #[arg(long, default_value_t = 2.0)]
    signature_kw: f64,
    #[arg(long, default_value_t = 3)]
    signature_slots: usize,
    #[arg(long, default_value_t = 0.08)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long, default_value = "dishwasher")]
    appliance: String,
}

#[derive(Args, Serialize)]
struct PretrainArgs {
    /// Readings CSV (series_id,timestamp,value)
    #[arg(long)]
    data: PathBuf,
    /// Labels CSV; when given, the test split of the labeled series is kept
    /// out of the pretraining pool
    #[arg(long, requires = "appliance")]
    labels: Option<PathBuf>,
    #[arg(long)]
    appliance: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 24.0)]
    mean_masked_len: f64,
    /// JSON file of model overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep the labeled test split in the pretraining pool
    #[arg(long, default_value_t = false)]
    include_test: bool,
    /// Fraction of the pool to use, selected by seeded shuffle
    #[arg(long, default_value_t = 1.0)]
    pretrain_fraction: f64,
    /// Drop calendar channels
    #[arg(long, default_value_t = false)]
    no_time_channels: bool,
}

#[derive(Args, Serialize)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    appliance: String,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained checkpoint to start from
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    no_time_channels: bool,
}

#[derive(Args, Serialize)]
struct TuneAlphaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    appliance: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tuned quantile JSON written by tune-alpha or evaluate
    #[arg(long)]
    alpha: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    appliance: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split to score after tuning on validation
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SweepAxis {
    W,
    DModel,
    PositionalEncoding,
    DiagMask,
    TimeChannels,
    PretrainFraction,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    appliance: String,
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Comma-separated axis values; defaults depend on the axis
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Pretraining epochs for the pretrain-fraction axis
    #[arg(long, default_value_t = 5)]
    pretrain_epochs: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::TuneAlpha(a) => cmd_tune_alpha(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

// --- shared plumbing -------------------------------------------------------------

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Reproducibility snapshot written next to every command's outputs.
fn write_snapshot<A: Serialize>(out: &Path, command: &str, args: &A, extra: serde_json::Value) -> Result<()> {
    let snapshot = serde_json::json!({
        "command": command,
        "args": args,
        "resolved": extra,
    });
    let body = serde_json::to_string_pretty(&snapshot)?;
    std::fs::write(out.join("config.json"), body)?;
    Ok(())
}

fn set_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // a later global-pool init (e.g. second call in-process) is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_patch(path: Option<&PathBuf>) -> Result<ConfigPatch> {
    match path {
        None => Ok(ConfigPatch::default()),
        Some(p) => {
            let body = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&body)?)
        }
    }
}

fn resolve_model_cfg(patch: &ConfigPatch, time_channels: bool) -> TransAppConfig {
    let mut base = TransAppConfig::default();
    base.in_channels = if time_channels { 5 } else { 1 };
    patch.apply(&base)
}

fn load_labeled(data: &Path, labels: &Path, appliance: &str) -> Result<LabeledDataset> {
    let (labeled, _) = load_csv(data, Some(labels), appliance)?;
    if labeled.series.is_empty() {
        return Err(Error::Config(format!(
            "no series labeled for appliance {appliance} in {}",
            labels.display()
        )));
    }
    Ok(labeled)
}

fn checkpoint_window(meta: &CheckpointMeta) -> Result<usize> {
    meta.window.ok_or_else(|| {
        Error::Checkpoint("checkpoint does not record its training window".to_string())
    })
}

fn slice_opts(meta: &CheckpointMeta, model_cfg: &TransAppConfig) -> SliceOptions {
    SliceOptions {
        time_channels: model_cfg.in_channels == 5,
        scaler: meta.scaler,
    }
}

// --- commands --------------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let cfg = SyntheticConfig {
        n_households: a.households,
        series_len: a.len,
        period_minutes: a.period_minutes,
        signature_kw: a.signature_kw,
        signature_slots: a.signature_slots,
        noise_sigma: a.noise_sigma,
        positive_fraction: a.positive_fraction,
        seed: a.seed,
        ..Default::default()
    };
    let ds = synthesize(&cfg)?;
    write_series_csv(&ds.series, &a.out.join("readings.csv"))?;
    write_labels_csv(&ds.series, &a.appliance, &a.out.join("labels.csv"))?;
    let (neg, pos) = ds.class_counts();
    write_snapshot(&a.out, "synth", &a, serde_json::json!({ "negatives": neg, "positives": pos }))?;
    println!(
        "wrote {} series ({} positive, {} negative) to {}",
        ds.series.len(),
        pos,
        neg,
        a.out.display()
    );
    Ok(())
}

/// Pool assembly for pretraining: unlabeled series plus, when labels are
/// given, the labeled train and validation splits; the labeled test split
/// stays out unless explicitly included.
fn pretrain_pool(a: &PretrainArgs) -> Result<Vec<ConsumptionSeries>> {
    let appliance = a.appliance.as_deref().unwrap_or("");
    let (labeled, unlabeled) = load_csv(&a.data, a.labels.as_deref(), appliance)?;
    let mut pool = unlabeled;
    if a.labels.is_some() {
        if a.include_test {
            pool.extend(labeled.series);
        } else {
            let (tr, va, _test) = split(&labeled, &SplitSpec::new(a.seed))?;
            pool.extend(tr.series);
            pool.extend(va.series);
        }
    }
    if !(0.0..=1.0).contains(&a.pretrain_fraction) {
        return Err(Error::InvalidParam {
            name: "pretrain_fraction".to_string(),
            msg: format!("must be in [0, 1], got {}", a.pretrain_fraction),
        });
    }
    if a.pretrain_fraction < 1.0 {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        pool.shuffle(&mut rng);
        let keep = (a.pretrain_fraction * pool.len() as f64).round() as usize;
        pool.truncate(keep);
    }
    if pool.is_empty() {
        return Err(Error::Config("pretraining pool is empty".to_string()));
    }
    Ok(pool)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let pool = pretrain_pool(&a)?;
    let patch = load_patch(a.config.as_ref())?;
    let model_cfg = resolve_model_cfg(&patch, !a.no_time_channels);
    let scaler = Scaler::fit(&pool);
    let opts = SliceOptions { time_channels: !a.no_time_channels, scaler };
    let (store, skipped) = build_window_store(&pool, a.window, &opts)?;
    if store.n == 0 {
        return Err(Error::Config(format!(
            "no series in the pool reaches one window of {} slots",
            a.window
        )));
    }
    let mut model = TransAppModel::<f32>::new(model_cfg.clone(), a.window, a.seed)?;
    let cfg = PretrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        mask: MaskSpec { mask_ratio: a.mask_ratio, mean_masked_len: a.mean_masked_len, seed: a.seed },
        seed: a.seed,
    };
    let trace = pretrain(&mut model, &store, &cfg)?;
    let meta = CheckpointMeta {
        scaler,
        window: Some(a.window),
        appliance: a.appliance.clone(),
    };
    save_checkpoint(&model, &meta, &a.out.join("pretrained.ckpt"))?;
    write_pretrain_trace_csv(&trace, &a.out.join("pretrain_trace.csv"))?;
    write_snapshot(
        &a.out,
        "pretrain",
        &a,
        serde_json::json!({
            "model": model_cfg,
            "pool_series": pool.len(),
            "windows": store.n,
            "skipped_series": skipped,
            "scaler": scaler,
        }),
    )?;
    let last = trace.last().expect("at least one epoch ran");
    println!(
        "pretrained {} epochs on {} windows, final masked mae {:.6}",
        trace.len(),
        store.n,
        last.train_mae
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let labeled = load_labeled(&a.data, &a.labels, &a.appliance)?;
    let (train_ds, val_ds, _test) = split(&labeled, &SplitSpec::new(a.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let train_bal = undersample(&train_ds, &mut rng)?;

    let (mut model, scaler) = match &a.pretrained {
        Some(path) => {
            let (model, meta) = load_checkpoint::<f32>(path)?;
            let ckpt_w = checkpoint_window(&meta)?;
            if ckpt_w != a.window {
                return Err(Error::Config(format!(
                    "checkpoint was trained with window {ckpt_w} but --window is {}",
                    a.window
                )));
            }
            if a.config.is_some() {
                return Err(Error::Config(
                    "--config conflicts with --pretrained; the checkpoint fixes the model".to_string(),
                ));
            }
            (model, meta.scaler)
        }
        None => {
            let patch = load_patch(a.config.as_ref())?;
            let model_cfg = resolve_model_cfg(&patch, !a.no_time_channels);
            let model = TransAppModel::<f32>::new(model_cfg, a.window, a.seed)?;
            (model, Scaler::fit(&train_bal.series))
        }
    };
    let opts = SliceOptions {
        time_channels: model.cfg.in_channels == 5,
        scaler,
    };
    let (train_w, train_skipped) = windows_for_training(&train_bal, a.window, &opts)?;
    let (val_w, val_skipped) = windows_for_training(&val_ds, a.window, &opts)?;
    let cfg = FinetuneConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        patience: a.patience,
        eval_batch: EVAL_BATCH,
        seed: a.seed,
    };
    let report = finetune(&mut model, &train_w, &val_w, &cfg)?;
    let meta = CheckpointMeta {
        scaler,
        window: Some(a.window),
        appliance: Some(a.appliance.clone()),
    };
    save_checkpoint(&model, &meta, &a.out.join("model.ckpt"))?;
    write_history_csv(&report.history, &a.out.join("history.csv"))?;
    write_snapshot(
        &a.out,
        "finetune",
        &a,
        serde_json::json!({
            "model": model.cfg,
            "train_windows": train_w.n,
            "val_windows": val_w.n,
            "skipped_series": train_skipped + val_skipped,
            "scaler": scaler,
            "best_epoch": report.best_epoch,
            "best_val_macro_f1": report.best_val_f1,
        }),
    )?;
    println!(
        "finetuned {} epochs, best epoch {} with window-level val macro F1 {:.4}",
        report.history.len(),
        report.best_epoch,
        report.best_val_f1
    );
    Ok(())
}

fn cmd_tune_alpha(a: TuneAlphaArgs) -> Result<()> {
    set_jobs(a.jobs);
    ensure_out(&a.out)?;
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    let w = checkpoint_window(&meta)?;
    let labeled = load_labeled(&a.data, &a.labels, &a.appliance)?;
    let (_train, val_ds, _test) = split(&labeled, &SplitSpec::new(a.seed))?;
    let opts = slice_opts(&meta, &model.cfg);
    let grid = default_alpha_grid();
    let (alpha, skipped) = tune_alpha(&model, &val_ds, w, &opts, &grid, EVAL_BATCH)?;
    std::fs::write(a.out.join("alpha.json"), serde_json::to_string_pretty(&alpha)?)?;
    write_snapshot(
        &a.out,
        "tune-alpha",
        &a,
        serde_json::json!({ "window": w, "skipped_series": skipped, "alpha_star": alpha.alpha_star }),
    )?;
    println!(
        "alpha* = {} with validation macro F1 {:.4} ({} series skipped)",
        alpha.alpha_star, alpha.tuning_score, skipped
    );
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    set_jobs(a.jobs);
    ensure_out(&a.out)?;
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    let w = checkpoint_window(&meta)?;
    let alpha: AlphaParameter = serde_json::from_str(&std::fs::read_to_string(&a.alpha)?)?;
    let (labeled, unlabeled) = load_csv(&a.data, None, &alpha.appliance)?;
    let mut series = labeled.series;
    series.extend(unlabeled);
    let opts = slice_opts(&meta, &model.cfg);
    let (results, skipped) = detect_all(&model, &series, &alpha, w, &opts, EVAL_BATCH)?;
    transapp::adf::write_results_csv(&results, &alpha.appliance, &a.out.join("results.csv"))?;
    write_snapshot(
        &a.out,
        "detect",
        &a,
        serde_json::json!({
            "window": w,
            "alpha_star": alpha.alpha_star,
            "series": results.len(),
            "skipped_series": skipped,
        }),
    )?;
    let positives = results.iter().filter(|r| r.label == 1).count();
    println!(
        "detected {} of {} series positive ({} skipped)",
        positives,
        results.len(),
        skipped
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    appliance: String,
    split: String,
    alpha_star: f64,
    tuning_score: f64,
    metrics: MetricsReport,
    skipped_series: usize,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    set_jobs(a.jobs);
    ensure_out(&a.out)?;
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    let w = checkpoint_window(&meta)?;
    let labeled = load_labeled(&a.data, &a.labels, &a.appliance)?;
    let (train_ds, val_ds, test_ds) = split(&labeled, &SplitSpec::new(a.seed))?;
    let opts = slice_opts(&meta, &model.cfg);
    let grid = default_alpha_grid();
    let (alpha, tune_skipped) = tune_alpha(&model, &val_ds, w, &opts, &grid, EVAL_BATCH)?;

    let scored = match a.split {
        SplitName::Train => &train_ds,
        SplitName::Val => &val_ds,
        SplitName::Test => &test_ds,
    };
    let (results, skipped) = detect_all(&model, &scored.series, &alpha, w, &opts, EVAL_BATCH)?;
    let mut y_true = Vec::with_capacity(results.len());
    let mut y_pred = Vec::with_capacity(results.len());
    let by_id: std::collections::HashMap<&str, u8> = scored
        .series
        .iter()
        .filter_map(|s| s.label.map(|l| (s.series_id.as_str(), l)))
        .collect();
    for r in &results {
        let t = by_id.get(r.series_id.as_str()).ok_or_else(|| Error::Ingestion {
            series_id: r.series_id.clone(),
            msg: "scored series has no label".to_string(),
        })?;
        y_true.push(*t);
        y_pred.push(r.label);
    }
    let metrics = MetricsReport::from_labels(&a.appliance, a.split.as_str(), &y_true, &y_pred)?;
    let report = EvaluationReport {
        appliance: a.appliance.clone(),
        split: a.split.as_str().to_string(),
        alpha_star: alpha.alpha_star,
        tuning_score: alpha.tuning_score,
        metrics,
        skipped_series: tune_skipped + skipped,
    };
    std::fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(a.out.join("alpha.json"), serde_json::to_string_pretty(&alpha)?)?;
    transapp::adf::write_results_csv(&results, &a.appliance, &a.out.join("results.csv"))?;
    write_snapshot(
        &a.out,
        "evaluate",
        &a,
        serde_json::json!({ "window": w, "alpha_star": alpha.alpha_star }),
    )?;
    println!(
        "{} split macro F1 {:.4} (alpha* = {})",
        a.split.as_str(),
        report.metrics.macro_f1,
        alpha.alpha_star
    );
    Ok(())
}

// --- sweep -----------------------------------------------------------------------

struct SweepPoint {
    value: String,
    window: usize,
    patch: ConfigPatch,
    time_channels: bool,
    pretrain_fraction: f64,
}

fn axis_points(axis: SweepAxis, values: Option<&str>, base_w: usize) -> Result<Vec<SweepPoint>> {
    let defaults: &str = match axis {
        SweepAxis::W => "256,512,1024",
        SweepAxis::DModel => "48,96",
        SweepAxis::PositionalEncoding => "none,fixed_sinusoidal,learnable",
        SweepAxis::DiagMask => "true,false",
        SweepAxis::TimeChannels => "true,false",
        SweepAxis::PretrainFraction => "0,0.5,1.0",
    };
    let raw = values.unwrap_or(defaults);
    let mut out = Vec::new();
    for tok in raw.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let mut point = SweepPoint {
            value: tok.to_string(),
            window: base_w,
            patch: ConfigPatch::default(),
            time_channels: true,
            pretrain_fraction: 0.0,
        };
        let bad = |axis: &str| {
            Error::Config(format!("value {tok} is not valid for sweep axis {axis}"))
        };
        match axis {
            SweepAxis::W => point.window = tok.parse().map_err(|_| bad("w"))?,
            SweepAxis::DModel => point.patch.d_model = Some(tok.parse().map_err(|_| bad("d-model"))?),
            SweepAxis::PositionalEncoding => {
                point.patch.positional_encoding =
                    Some(serde_json::from_value(serde_json::Value::String(tok.to_string()))
                        .map_err(|_| bad("positional-encoding"))?)
            }
            SweepAxis::DiagMask => point.patch.diag_mask = Some(tok.parse().map_err(|_| bad("diag-mask"))?),
            SweepAxis::TimeChannels => point.time_channels = tok.parse().map_err(|_| bad("time-channels"))?,
            SweepAxis::PretrainFraction => {
                let f: f64 = tok.parse().map_err(|_| bad("pretrain-fraction"))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(bad("pretrain-fraction"));
                }
                point.pretrain_fraction = f;
            }
        }
        out.push(point);
    }
    if out.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".to_string()));
    }
    Ok(out)
}

/// One pipeline run: optional pretraining, finetune, evaluate on test.
fn sweep_run(
    a: &SweepArgs,
    labeled: &LabeledDataset,
    point: &SweepPoint,
    base_patch: &ConfigPatch,
    seed: u64,
) -> Result<f64> {
    let (train_ds, val_ds, test_ds) = split(labeled, &SplitSpec::new(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_bal = undersample(&train_ds, &mut rng)?;

    let mut patch = base_patch.clone();
    if point.patch.d_model.is_some() {
        patch.d_model = point.patch.d_model;
    }
    if point.patch.positional_encoding.is_some() {
        patch.positional_encoding = point.patch.positional_encoding;
    }
    if point.patch.diag_mask.is_some() {
        patch.diag_mask = point.patch.diag_mask;
    }
    let model_cfg = resolve_model_cfg(&patch, point.time_channels);
    let scaler = Scaler::fit(&train_bal.series);
    let opts = SliceOptions { time_channels: point.time_channels, scaler };
    let mut model = TransAppModel::<f32>::new(model_cfg, point.window, seed)?;

    if point.pretrain_fraction > 0.0 {
        use rand::seq::SliceRandom;
        let mut pool: Vec<ConsumptionSeries> = Vec::new();
        pool.extend(train_ds.series.iter().cloned());
        pool.extend(val_ds.series.iter().cloned());
        pool.shuffle(&mut rng);
        let keep = (point.pretrain_fraction * pool.len() as f64).round() as usize;
        pool.truncate(keep.max(1));
        let (store, _) = build_window_store(&pool, point.window, &opts)?;
        if store.n > 0 {
            let cfg = PretrainConfig {
                epochs: a.pretrain_epochs,
                seed,
                ..Default::default()
            };
            pretrain(&mut model, &store, &cfg)?;
        }
    }

    let (train_w, _) = windows_for_training(&train_bal, point.window, &opts)?;
    let (val_w, _) = windows_for_training(&val_ds, point.window, &opts)?;
    let cfg = FinetuneConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        patience: a.patience,
        eval_batch: EVAL_BATCH,
        seed,
    };
    finetune(&mut model, &train_w, &val_w, &cfg)?;

    let grid = default_alpha_grid();
    let (alpha, _) = tune_alpha(&model, &val_ds, point.window, &opts, &grid, EVAL_BATCH)?;
    let (results, _) = detect_all(&model, &test_ds.series, &alpha, point.window, &opts, EVAL_BATCH)?;
    let by_id: std::collections::HashMap<&str, u8> = test_ds
        .series
        .iter()
        .filter_map(|s| s.label.map(|l| (s.series_id.as_str(), l)))
        .collect();
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for r in &results {
        if let Some(t) = by_id.get(r.series_id.as_str()) {
            y_true.push(*t);
            y_pred.push(r.label);
        }
    }
    transapp::metrics::macro_f1(&y_true, &y_pred)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    use std::io::Write;
    set_jobs(a.jobs);
    ensure_out(&a.out)?;
    let labeled = load_labeled(&a.data, &a.labels, &a.appliance)?;
    let base_patch = load_patch(a.config.as_ref())?;
    let points = axis_points(a.axis, a.values.as_deref(), a.window)?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| Error::Config(format!("seed list entry {t} is not an integer")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".to_string()));
    }

    let axis_name = serde_json::to_value(a.axis)?
        .as_str()
        .expect("axis serializes as a string")
        .to_string();
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for point in &points {
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let f1 = sweep_run(&a, &labeled, point, &base_patch, seed)?;
            println!("{axis_name}={} seed={seed} macro_f1={f1:.4}", point.value);
            rows.push((point.value.clone(), seed.to_string(), f1));
            scores.push(f1);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        rows.push((point.value.clone(), "mean".to_string(), mean));
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(a.out.join("sweep.csv"))?);
    writeln!(out, "axis,value,seed,macro_f1")?;
    for (value, seed, f1) in &rows {
        writeln!(out, "{axis_name},{value},{seed},{f1}")?;
    }
    out.flush()?;
    write_snapshot(
        &a.out,
        "sweep",
        &a,
        serde_json::json!({ "axis": axis_name, "points": points.len(), "seeds": seeds }),
    )?;
    println!("wrote {} rows to {}", rows.len(), a.out.join("sweep.csv").display());
    Ok(())
}
