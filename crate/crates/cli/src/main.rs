//! Command-line front end: synthesize datasets, train, evaluate, sweep, and
//! verify gradients.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Logs go to stderr; stdout carries machine-readable CSV only.

use clap::{Args, Parser, Subcommand, ValueEnum};
use coop_predict_core::autodiff::Scalar;
use coop_predict_core::metrics::{self, SweepAxis};
use coop_predict_core::network::ModelConfig;
use coop_predict_core::plot::{line_plot_svg, Series};
use coop_predict_core::scene::{load_dataset, write_dataset, Dataset, EvalConfig, Split};
use coop_predict_core::synth::{generate_dataset, WorldSpec};
use coop_predict_core::training::{
    load_checkpoint, peek_checkpoint, train, Checkpoint, Precision, TrainConfig, TrainError,
};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

const SEED_ENV: &str = "COOP_PREDICT_SEED";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

impl From<coop_predict_core::scene::SceneError> for CliError {
    fn from(e: coop_predict_core::scene::SceneError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<coop_predict_core::synth::SynthError> for CliError {
    fn from(e: coop_predict_core::synth::SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => CliError::Numeric(n.to_string()),
            TrainError::Ad(a) => CliError::Numeric(a.to_string()),
            TrainError::Metrics(m) => CliError::from(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<coop_predict_core::metrics::MetricsError> for CliError {
    fn from(e: coop_predict_core::metrics::MetricsError) -> Self {
        use coop_predict_core::metrics::MetricsError::*;
        match e {
            InvalidK { .. } => CliError::Usage(e.to_string()),
            Net(n) => CliError::Numeric(n.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "coop-predict",
    about = "Cooperative trajectory prediction: synthesize scenes, train, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one cooperative configuration.
    Eval(EvalArgs),
    /// Evaluate a checkpoint along a parameter grid; emits CSV and SVG.
    Sweep(SweepArgs),
    /// Run the gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Print every default configuration as JSON.
    DumpDefaults,
}

#[derive(Args)]
struct SynthArgs {
    /// World spec JSON; defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base architecture/training profile; file and flag overrides apply on
    /// top.
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from <out>/checkpoint_latest.ckpt with its stored configs.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Which split to evaluate.
    #[arg(long, default_value = "val")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.0)]
    theta_gt: f64,
    #[arg(long, default_value_t = 0.0)]
    theta_type: f64,
    /// Give the AOI its own cooperative path.
    #[arg(long)]
    theta_aoi: bool,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for metrics.csv and the run manifest (stdout always gets
    /// the CSV).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Label for the CSV rows.
    #[arg(long, default_value = "eval")]
    label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Grid: comma list ("0,0.5,1") or range "start:end:step" (inclusive).
    #[arg(long)]
    grid: String,
    #[arg(long, default_value = "val")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.0)]
    theta_gt: f64,
    #[arg(long, default_value_t = 0.0)]
    theta_type: f64,
    #[arg(long)]
    theta_aoi: bool,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV, SVG plot, and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the SVG plot.
    #[arg(long)]
    no_plot: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    ThetaGt,
    Beta,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check profile; only the micro profile exists.
    #[arg(long, default_value = "micro")]
    profile: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    inputs_hash: String,
    seed: u64,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn resolve_seed(cli: Option<u64>, fallback: u64) -> u64 {
    cli.or_else(env_seed).unwrap_or(fallback)
}

fn hash_files(paths: &[&Path]) -> String {
    let mut hasher = Sha256::new();
    for p in paths {
        if let Ok(bytes) = std::fs::read(p) {
            hasher.update(p.to_string_lossy().as_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    inputs_hash: String,
    seed: u64,
    started_at: String,
    outputs: Vec<String>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        inputs_hash,
        seed,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        outputs,
    };
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Data(format!("manifest: {e}")))?,
    )?;
    Ok(())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {what} {path:?}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad {what} {path:?}: {e}")))
}

fn init_workers(workers: usize) {
    if workers > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    } else {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let started = now();
    let mut spec: WorldSpec = match &args.spec {
        Some(p) => load_json(p, "world spec")?,
        None => WorldSpec::default(),
    };
    if let Some(n) = args.n_scenes {
        spec.n_scenes = n;
    }
    spec.seed = resolve_seed(args.seed, spec.seed);
    spec.validate()?;
    let scenes = generate_dataset(&spec)?;
    let spec_json = serde_json::to_value(&spec).expect("spec serializes");
    let written = write_dataset(&args.out, &scenes, Some(spec_json.clone()))?;
    log::info!(
        "wrote {} scenes ({} train / {} val) to {:?}",
        scenes.len(),
        scenes.iter().filter(|(_, s)| *s == Split::Train).count(),
        scenes.iter().filter(|(_, s)| *s == Split::Val).count(),
        args.out
    );
    let inputs_hash = match &args.spec {
        Some(p) => hash_files(&[p]),
        None => hash_files(&[]),
    };
    write_manifest(
        &args.out,
        "synth",
        spec_json,
        inputs_hash,
        spec.seed,
        started,
        written
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
    )
}

fn load_dataset_checked(dir: &Path) -> Result<Dataset, CliError> {
    let ds = load_dataset(dir)?;
    log::info!(
        "dataset {:?}: {} train, {} val",
        dir,
        ds.train.len(),
        ds.val.len()
    );
    Ok(ds)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let started = now();
    std::fs::create_dir_all(&args.out)?;
    init_workers(args.workers.unwrap_or(1));
    let dataset = load_dataset_checked(&args.dataset)?;

    if args.resume {
        let latest = args.out.join("checkpoint_latest.ckpt");
        let manifest = peek_checkpoint(&latest)?;
        log::info!(
            "resuming from iteration {} of {}",
            manifest.iteration,
            manifest.train_config.iterations
        );
        return match manifest.train_config.precision {
            Precision::F32 => run_train::<f32>(&dataset, args, Some(latest), started),
            Precision::F64 => run_train::<f64>(&dataset, args, Some(latest), started),
        };
    }

    let precision = match &args.train_config {
        Some(p) => load_json::<TrainConfig>(p, "train config")?.precision,
        None => Precision::F32,
    };
    match precision {
        Precision::F32 => run_train::<f32>(&dataset, args, None, started),
        Precision::F64 => run_train::<f64>(&dataset, args, None, started),
    }
}

fn run_train<F: Scalar>(
    dataset: &Dataset,
    args: TrainArgs,
    resume_path: Option<PathBuf>,
    started: String,
) -> Result<(), CliError> {
    let resume: Option<Checkpoint<F>> = match &resume_path {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let (model_cfg, train_cfg) = match &resume {
        Some(ck) => (ck.model_config.clone(), ck.train_config.clone()),
        None => {
            let mut mc = match args.profile {
                Profile::Desk => ModelConfig::desk(),
                Profile::Full => ModelConfig::full(),
            };
            let mut tc = match args.profile {
                Profile::Desk => TrainConfig::desk(),
                Profile::Full => TrainConfig::full(),
            };
            if let Some(p) = &args.model_config {
                mc = load_json(p, "model config")?;
            }
            if let Some(p) = &args.train_config {
                tc = load_json(p, "train config")?;
            }
            if let Some(v) = args.iterations {
                tc.iterations = v;
            }
            if let Some(v) = args.batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = args.max_lr {
                tc.max_lr = v;
            }
            tc.seed = resolve_seed(args.seed, tc.seed);
            if let Some(w) = args.workers {
                tc.workers = w;
            }
            (mc, tc)
        }
    };
    model_cfg
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let out = train::<F>(dataset, &model_cfg, &train_cfg, resume, Some(&args.out))?;
    log::info!(
        "training done at iteration {}; final loss {:.4}; skipped items {}",
        out.checkpoint.iteration,
        out.curve.last().map(|c| c.total).unwrap_or(f64::NAN),
        out.skipped_items
    );
    if let Some(best) = out.best {
        log::info!(
            "best val minFDE {:.4} at iteration {}",
            best.min_fde,
            best.iteration
        );
    }
    let seed = train_cfg.seed;
    let config = serde_json::json!({
        "model_config": model_cfg,
        "train_config": train_cfg,
    });
    let inputs_hash = hash_files(&[&args.dataset.join(coop_predict_core::scene::MANIFEST_FILE)]);
    write_manifest(
        &args.out,
        "train",
        config,
        inputs_hash,
        seed,
        started,
        vec![
            args.out
                .join("checkpoint_latest.ckpt")
                .to_string_lossy()
                .into_owned(),
            args.out.join("loss_curve.csv").to_string_lossy().into_owned(),
        ],
    )
}

fn eval_config_from(
    theta_gt: f64,
    theta_type: f64,
    theta_aoi: bool,
    beta: f64,
    k: Option<usize>,
    seed: Option<u64>,
    modes: usize,
) -> EvalConfig {
    EvalConfig {
        theta_gt,
        theta_type,
        theta_aoi,
        beta,
        k: k.unwrap_or(modes),
        seed: resolve_seed(seed, 0),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let started = now();
    init_workers(args.workers);
    let manifest = peek_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset_checked(&args.dataset)?;
    let scenes = match args.split {
        SplitArg::Train => &dataset.train,
        SplitArg::Val => &dataset.val,
    };
    let ecfg = eval_config_from(
        args.theta_gt,
        args.theta_type,
        args.theta_aoi,
        args.beta,
        args.k,
        args.seed,
        manifest.model_config.modes,
    );
    ecfg.validate(manifest.model_config.modes)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let report = match manifest.dtype.as_str() {
        "f32" => {
            let ck: Checkpoint<f32> = load_checkpoint(&args.checkpoint)?;
            metrics::evaluate(&ck.params, &ck.model_config, scenes, &ecfg, &args.label)?
        }
        "f64" => {
            let ck: Checkpoint<f64> = load_checkpoint(&args.checkpoint)?;
            metrics::evaluate(&ck.params, &ck.model_config, scenes, &ecfg, &args.label)?
        }
        other => return Err(CliError::Data(format!("unknown dtype {other}"))),
    };
    let csv = metrics::rows_to_csv(&report.rows);
    print!("{csv}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        write_manifest(
            dir,
            "eval",
            serde_json::json!({ "eval_config": ecfg, "split": format!("{:?}", args.split) }),
            hash_files(&[
                &args.checkpoint,
                &args.dataset.join(coop_predict_core::scene::MANIFEST_FILE),
            ]),
            ecfg.seed,
            started,
            vec![dir.join("metrics.csv").to_string_lossy().into_owned()],
        )?;
    }
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |m: String| CliError::Usage(format!("bad grid {spec:?}: {m}"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:end:step".into()));
        }
        let start: f64 = parts[0].parse().map_err(|e| bad(format!("{e}")))?;
        let end: f64 = parts[1].parse().map_err(|e| bad(format!("{e}")))?;
        let step: f64 = parts[2].parse().map_err(|e| bad(format!("{e}")))?;
        if step <= 0.0 || end < start {
            return Err(bad("need step > 0 and end >= start".into()));
        }
        let n = ((end - start) / step).round() as usize;
        Ok((0..=n).map(|i| start + i as f64 * step).collect())
    } else {
        spec.split(',')
            .map(|v| v.trim().parse().map_err(|e| bad(format!("{e}"))))
            .collect()
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let started = now();
    init_workers(args.workers);
    let grid = parse_grid(&args.grid)?;
    if grid.is_empty() {
        return Err(CliError::Usage("empty grid".into()));
    }
    let manifest = peek_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset_checked(&args.dataset)?;
    let scenes = match args.split {
        SplitArg::Train => &dataset.train,
        SplitArg::Val => &dataset.val,
    };
    let base = eval_config_from(
        args.theta_gt,
        args.theta_type,
        args.theta_aoi,
        args.beta,
        args.k,
        args.seed,
        manifest.model_config.modes,
    );
    base.validate(manifest.model_config.modes)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let axis = match args.axis {
        AxisArg::ThetaGt => SweepAxis::ThetaGt,
        AxisArg::Beta => SweepAxis::Beta,
    };
    for &v in &grid {
        let ok = match axis {
            SweepAxis::ThetaGt => (0.0..=1.0).contains(&v),
            SweepAxis::Beta => v > 0.0 && v <= 2.0,
        };
        if !ok {
            return Err(CliError::Usage(format!(
                "grid value {v} outside the domain of {}",
                axis.name()
            )));
        }
    }
    let results = match manifest.dtype.as_str() {
        "f32" => {
            let ck: Checkpoint<f32> = load_checkpoint(&args.checkpoint)?;
            metrics::sweep(&ck.params, &ck.model_config, scenes, &base, axis, &grid)?
        }
        "f64" => {
            let ck: Checkpoint<f64> = load_checkpoint(&args.checkpoint)?;
            metrics::sweep(&ck.params, &ck.model_config, scenes, &base, axis, &grid)?
        }
        other => return Err(CliError::Data(format!("unknown dtype {other}"))),
    };
    let rows: Vec<metrics::MetricsRow> = results
        .iter()
        .flat_map(|(_, r)| r.rows.clone())
        .collect();
    let csv = metrics::rows_to_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("sweep_{}.csv", axis.name()));
        std::fs::write(&csv_path, &csv)?;
        let mut outputs = vec![csv_path.to_string_lossy().into_owned()];
        if !args.no_plot {
            let k = base.k;
            let mk_series = |kk: usize, label: &str| Series {
                label: label.into(),
                points: results
                    .iter()
                    .filter_map(|(v, r)| r.row(kk).map(|row| (*v, row.min_fde)))
                    .collect(),
            };
            let series = vec![
                mk_series(k, &format!("minFDE @ K={k}")),
                mk_series(1, "minFDE @ K=1"),
            ];
            let svg = line_plot_svg(
                &format!("minFDE vs {}", axis.name()),
                axis.name(),
                "minFDE [m]",
                &series,
            );
            let svg_path = dir.join(format!("sweep_{}.svg", axis.name()));
            std::fs::write(&svg_path, svg)?;
            outputs.push(svg_path.to_string_lossy().into_owned());
        }
        write_manifest(
            dir,
            "sweep",
            serde_json::json!({
                "eval_config": base,
                "axis": axis.name(),
                "grid": grid,
            }),
            hash_files(&[
                &args.checkpoint,
                &args.dataset.join(coop_predict_core::scene::MANIFEST_FILE),
            ]),
            base.seed,
            started,
            outputs,
        )?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if args.profile != "micro" {
        return Err(CliError::Usage(format!(
            "unknown gradcheck profile {:?} (only \"micro\")",
            args.profile
        )));
    }
    let start = std::time::Instant::now();
    let mut all_ok = true;
    for report in coop_predict_core::checks::gradient_check_suite() {
        println!("{report}");
        all_ok &= report.passed();
    }
    // The harness must notice a deliberately corrupted gradient.
    let control = coop_predict_core::checks::negative_control_report();
    if control.passed() {
        println!("negative-control: NOT detected -> FAIL");
        all_ok = false;
    } else {
        println!(
            "negative-control: corrupted gradient detected (err {:.3e}) -> pass",
            control.max_rel_err
        );
    }
    println!("elapsed: {:.1}s", start.elapsed().as_secs_f64());
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Numeric("gradient check failure".into()))
    }
}

fn cmd_dump_defaults() -> Result<(), CliError> {
    let value = serde_json::json!({
        "world_spec": WorldSpec::default(),
        "model_config": { "desk": ModelConfig::desk(), "full": ModelConfig::full() },
        "train_config": { "desk": TrainConfig::desk(), "full": TrainConfig::full() },
        "eval_config": EvalConfig::default(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&value).expect("defaults serialize")
    );
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap already formats help/version output
        if e.use_stderr() {
            CliError::Usage(e.to_string())
        } else {
            print!("{e}");
            std::process::exit(0);
        }
    })?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DumpDefaults => cmd_dump_defaults(),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}
