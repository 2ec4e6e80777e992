use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use testvol::cohort::WINDOW_DIMS;
use testvol::inference::graph::write_threshold_graph;
use testvol::inference::ModelMetadata;
use testvol::phantom::{generate_cohort, CohortDesign, CohortLayout, ExclusionInjection, STUB_THRESHOLD};
use testvol::pipeline::{
    resolve_model, run_agreement, run_evaluate, run_infer, run_scan, run_split, run_stats,
    InferOptions, ModelSource, PipelineConfig,
};
use testvol::preprocess::Axis;

/// Testis volumetry from water/fat/in-phase MRI.
#[derive(Debug, Parser)]
#[command(name = "testvol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Pipeline config (TOML).
    #[arg(short, long, default_value = "testvol.toml")]
    config: PathBuf,

    /// Worker threads; overrides the config.
    #[arg(short, long, env = "TESTVOL_WORKERS")]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify subjects as valid or excluded and write the catalog report.
    Scan(ConfigArgs),
    /// Write the train/test/re-test split and cross-validation folds.
    Split(ConfigArgs),
    /// Segment every valid subject and write masks and volumes.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Recompute subjects that already have outputs.
        #[arg(long)]
        force: bool,
        /// Stop after this many subjects.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Dice of predicted masks against ground truth.
    Evaluate(ConfigArgs),
    /// Dice between two raters' masks.
    Agreement(ConfigArgs),
    /// Population summary and volume histograms.
    Stats(ConfigArgs),
    /// Generate a synthetic cohort with known volumes.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Output directory.
    out: PathBuf,
    #[arg(short = 'n', long, default_value_t = 6)]
    subjects: usize,
    /// Volume size as X,Y,Z.
    #[arg(long, value_delimiter = ',', default_values_t = WINDOW_DIMS)]
    dims: Vec<usize>,
    /// Voxel spacing in mm as X,Y,Z.
    #[arg(long, value_delimiter = ',', default_values_t = [2.232, 2.232, 3.0])]
    spacing: Vec<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Every k-th subject touches the window boundary; 0 disables.
    #[arg(long, default_value_t = 3)]
    margin_every: usize,
    #[arg(long, default_value_t = 0)]
    missing_all: usize,
    #[arg(long, default_value_t = 0)]
    missing_channel: usize,
    #[arg(long, default_value_t = 0)]
    bad_dims: usize,
    /// Skip second-rater masks.
    #[arg(long)]
    no_rater: bool,
    /// Also write an ONNX threshold graph and point the config at it.
    #[arg(long)]
    onnx: bool,
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Scan(args) => {
            let cfg = load_config(&args)?;
            let out = run_scan(&cfg)?;
            print_json(&out.summary)?;
        }
        Command::Split(args) => {
            let cfg = load_config(&args)?;
            let m = run_split(&cfg)?;
            print_json(&json!({
                "seed": m.seed,
                "train": m.train.len(),
                "test": m.test.len(),
                "rt": m.rt.len(),
                "folds": m.folds.iter().map(Vec::len).collect::<Vec<_>>(),
            }))?;
        }
        Command::Infer { config, force, limit } => {
            let cfg = load_config(&config)?;
            let model = resolve_model(&cfg)?;
            let out = run_infer(&cfg, &model, InferOptions { force, limit })?;
            print_json(&json!({
                "model_id": model.model_id(),
                "processed": out.processed,
                "reused": out.reused,
                "failed": out.failed,
                "pending": out.pending,
                "volumes_csv": cfg.volumes_csv_path(),
            }))?;
            if out.failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate(args) => {
            let cfg = load_config(&args)?;
            let r = run_evaluate(&cfg)?;
            print_json(&json!({
                "pairs": r.pairs.len(),
                "skipped": r.skipped.len(),
                "median_dice": r.median,
                "mean_dice": r.mean,
            }))?;
        }
        Command::Agreement(args) => {
            let cfg = load_config(&args)?;
            let r = run_agreement(&cfg)?;
            print_json(&json!({
                "pairs": r.pairs.len(),
                "skipped": r.skipped.len(),
                "median_dice": r.median,
                "mean_dice": r.mean,
            }))?;
        }
        Command::Stats(args) => {
            let cfg = load_config(&args)?;
            print_json(&run_stats(&cfg)?)?;
        }
        Command::Phantom(args) => phantom(args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn phantom(args: PhantomArgs) -> anyhow::Result<()> {
    let dims: [usize; 3] = args
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| anyhow::anyhow!("--dims needs 3 values, got {}", args.dims.len()))?;
    let spacing: [f64; 3] = args
        .spacing
        .as_slice()
        .try_into()
        .map_err(|_| anyhow::anyhow!("--spacing needs 3 values, got {}", args.spacing.len()))?;
    let design = CohortDesign {
        n_subjects: args.subjects,
        dims,
        spacing,
        seed: args.seed,
        margin_every: (args.margin_every > 0).then_some(args.margin_every),
        exclusions: ExclusionInjection {
            missing_all: args.missing_all,
            missing_channel: args.missing_channel,
            bad_dims: args.bad_dims,
        },
        rater_masks: !args.no_rater,
    };
    let manifest = generate_cohort(&args.out, &design)?;
    let layout = CohortLayout::new(&args.out);

    let model = if args.onnx {
        let path = args.out.join("threshold.onnx");
        let (h, w) = Axis::Z.plane_axes();
        write_threshold_graph(&path, STUB_THRESHOLD, 2, Some(dims[h]), Some(dims[w]))?;
        ModelMetadata::new("threshold-onnx").write(ModelMetadata::sidecar_path(&path))?;
        ModelSource::Onnx {
            path: PathBuf::from("threshold.onnx"),
        }
    } else {
        ModelSource::Stub {
            threshold: STUB_THRESHOLD,
        }
    };
    let mut cfg = PipelineConfig {
        catalog_root: relative(&layout.catalog(), &args.out),
        expected_dims: dims,
        model,
        output_dir: PathBuf::from("out"),
        seed: args.seed,
        ..Default::default()
    };
    cfg.evaluate.ground_truth_dir = Some(relative(&layout.ground_truth(), &args.out));
    if design.rater_masks {
        cfg.agreement.rater_a_dir = Some(relative(&layout.ground_truth(), &args.out));
        cfg.agreement.rater_b_dir = Some(relative(&layout.rater_b(), &args.out));
    }
    let config_path = args.out.join("testvol.toml");
    std::fs::write(&config_path, cfg.to_toml()?)?;

    print_json(&json!({
        "subjects": manifest.subjects.len(),
        "excluded": manifest.excluded.len(),
        "flagged": manifest.subjects.iter().filter(|s| s.margin_flagged).count(),
        "manifest": layout.manifest(),
        "config": config_path,
    }))
}

fn relative(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let kind = e.downcast_ref::<testvol::Error>().map_or("other", testvol::Error::kind);
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
