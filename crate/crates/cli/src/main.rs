//! `cyclefill`: train, run and evaluate cycle-consistent completion and
//! extrapolation models.
//!
//! Subcommands mirror the library surface: `train`, `complete`,
//! `extrapolate`, `evaluate`, `make-masks`, `render`. Configuration comes
//! from an optional JSON file overridden by repeatable `--override KEY=VALUE`
//! pairs (dotted paths, e.g. `generator.base_channels=8`); the effective
//! config is echoed into the output directory. Runtime failures exit 1 with
//! a single machine-parseable line `error[<category>]: <message>`; usage
//! errors exit 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclefill_core::data::{self, DatasetHandle};
use cyclefill_core::evaluation::{self, GridRow};
use cyclefill_core::masking::{self, MaskSpec};
use cyclefill_core::networks::ModelBundle;
use cyclefill_core::training::{self, TrainingConfig};
use cyclefill_core::{load_checkpoint, Error};

#[derive(Parser)]
#[command(name = "cyclefill", version, about = "Cycle-consistent image completion and extrapolation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train C, E and D jointly on a folder or synthetic dataset.
    Train(TrainArgs),
    /// Fill the masked interior of one image with the completion network.
    Complete(InferArgs),
    /// Paint outward from the mask interior with the extrapolation network.
    Extrapolate(InferArgs),
    /// Score PSNR in both directions over a test set.
    Evaluate(EvalArgs),
    /// Emit sampled masks as 1-bit PNGs plus a JSONL sidecar.
    MakeMasks(MakeMasksArgs),
    /// Render rows of (masked | raw | restored | ground truth) tiles.
    Render(RenderArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; defaults apply for absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key: KEY=VALUE with dotted paths.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset: a folder of images or `synth:<kind>:<n>`.
    #[arg(long, default_value = "synth:checkers:64")]
    data: String,
    /// Output directory for checkpoints, logs and the echoed config.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint (config must match).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (any size; center-cropped and resized to the model).
    #[arg(long)]
    image: PathBuf,
    /// Explicit mask PNG; must match the model resolution exactly.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Seed for a sampled mask when no --mask is given.
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    /// Restored output path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the raw network output here.
    #[arg(long)]
    raw_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Test set: a folder of images or `synth:<kind>:<n>`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path (JSONL); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeMasksArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Mask height and width in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    min_fraction: f64,
    #[arg(long, default_value_t = 0.35)]
    max_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Source images: a folder or `synth:<kind>:<n>`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of grid rows (one image per row).
    #[arg(long, default_value_t = 4)]
    rows: usize,
    /// inpaint | outpaint | both (both: outpaint rows first).
    #[arg(long, default_value = "both")]
    direction: String,
    #[arg(long, default_value_t = 2)]
    gutter: usize,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    /// Bad invocation (unknown keys, malformed overrides): exit 2.
    Usage(String),
    /// Runtime failure with a stable category: exit 1.
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Train(args) => cmd_train(args),
        Command::Complete(args) => cmd_infer(args, true),
        Command::Extrapolate(args) => cmd_infer(args, false),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::MakeMasks(args) => cmd_make_masks(args),
        Command::Render(args) => cmd_render(args),
    }
}

/// File config (or defaults) with CLI overrides applied.
fn effective_config(
    config: Option<&Path>,
    overrides: &[String],
) -> Result<TrainingConfig, CliError> {
    let base: TrainingConfig = match config {
        None => TrainingConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(Error::from)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut tree = serde_json::to_value(&base).expect("config serializes");
    for pair in overrides {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{pair}' is not KEY=VALUE")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_path(&mut tree, key, value)?;
    }
    let cfg: TrainingConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Usage(format!("override produced an invalid config: {e}")))?;
    Ok(cfg)
}

/// Replaces the value at a dotted path that must already exist.
fn set_path(tree: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<(), CliError> {
    fn descend<'a>(
        node: &'a mut serde_json::Value,
        part: &str,
        key: &str,
    ) -> Result<&'a mut serde_json::Value, CliError> {
        match node {
            serde_json::Value::Object(map) => map.get_mut(part).ok_or_else(|| {
                CliError::Usage(format!("unknown config key '{key}' (no field '{part}')"))
            }),
            _ => Err(CliError::Usage(format!("override key '{key}' descends into a non-object"))),
        }
    }
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split_once guarantees a key");
    let mut node = tree;
    for part in parents {
        node = descend(node, part, key)?;
    }
    match node {
        serde_json::Value::Object(map) if map.contains_key(*last) => {
            map.insert((*last).to_string(), value);
            Ok(())
        }
        serde_json::Value::Object(_) => {
            Err(CliError::Usage(format!("unknown config key '{key}' (no field '{last}')")))
        }
        _ => Err(CliError::Usage(format!("override key '{key}' descends into a non-object"))),
    }
}

/// `synth:<kind>:<n>` or a folder path, at the given resolution.
fn resolve_dataset(spec: &str, resolution: usize, seed: u64) -> Result<DatasetHandle, Error> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let (kind, n) = rest
            .split_once(':')
            .ok_or_else(|| Error::Data(format!("data spec '{spec}' is not synth:<kind>:<n>")))?;
        let kind = kind.parse()?;
        let n: usize = n
            .parse()
            .map_err(|_| Error::Data(format!("data spec '{spec}': '{n}' is not a count")))?;
        data::synth_toy_dataset(kind, n, resolution, seed)
    } else {
        data::load_folder_all(Path::new(spec), resolution)
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = effective_config(args.config.as_deref(), &args.overrides)?;
    cfg.validate()?;
    let dataset = resolve_dataset(&args.data, cfg.resolution, cfg.seed)?;
    let outcome = training::train(&cfg, &dataset, &args.out, args.resume.as_deref())?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    if let Some(last) = outcome.reports.last() {
        println!(
            "step {}: grand_total {:.4} disc {:.4}",
            last.step, last.losses.grand_total, last.losses.disc_loss
        );
    }
    Ok(())
}

fn load_bundle(path: &Path) -> Result<(ModelBundle<f32>, TrainingConfig), Error> {
    let ck = load_checkpoint(path)?;
    Ok((ck.bundle, ck.config))
}

fn cmd_infer(args: InferArgs, inpaint: bool) -> Result<(), CliError> {
    let (bundle, cfg) = load_bundle(&args.ckpt)?;
    let res = bundle.gen_cfg.resolution;
    let img = data::load_image_tensor(&args.image, res)?;
    let mask = match &args.mask {
        Some(path) => masking::read_mask_png(path)?,
        None => {
            let spec = cfg.mask_spec;
            let mut stream = cyclefill_core::rng::stream(args.mask_seed, "cli-mask", 0);
            masking::sample_mask(&spec, res, res, &mut stream)?
        }
    };
    let mut x = ndarray::Array4::<f32>::zeros((1, 3, res, res));
    x.index_axis_mut(ndarray::Axis(0), 0).assign(&img);
    let (raw, restored) = if inpaint {
        evaluation::run_inpaint(&bundle, &x, &mask)?
    } else {
        evaluation::run_outpaint(&bundle, &x, &mask)?
    };
    data::save_image_png(&restored.index_axis(ndarray::Axis(0), 0).to_owned(), &args.out)?;
    if let Some(raw_path) = &args.raw_out {
        data::save_image_png(&raw.index_axis(ndarray::Axis(0), 0).to_owned(), raw_path)?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<(), CliError> {
    let (bundle, cfg) = load_bundle(&args.ckpt)?;
    let testset = resolve_dataset(&args.data, bundle.gen_cfg.resolution, args.seed)?;
    let report = evaluation::evaluate(&bundle, &testset, &cfg.mask_spec, args.seed)?;
    match &args.out {
        Some(path) => report.write_jsonl(path)?,
        None => print!("{}", report.to_jsonl()),
    }
    eprintln!("mean PSNR over {} entries: {:.3} dB", report.per_image.len(), report.mean_psnr);
    Ok(())
}

fn cmd_make_masks(args: MakeMasksArgs) -> Result<(), CliError> {
    let spec = MaskSpec {
        min_fraction: args.min_fraction,
        max_fraction: args.max_fraction,
        seed: args.seed,
    };
    spec.validate()?;
    let paths = masking::emit_masks(&args.out, &spec, args.count, args.size, args.size)?;
    println!("wrote {} masks to {}", paths.len(), args.out.display());
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    let (bundle, cfg) = load_bundle(&args.ckpt)?;
    let res = bundle.gen_cfg.resolution;
    let dataset = resolve_dataset(&args.data, res, args.seed)?;
    if args.rows == 0 {
        return Err(CliError::Usage("--rows must be >= 1".into()));
    }
    if dataset.len() < args.rows {
        return Err(Error::Data(format!(
            "dataset has {} images, need {} rows",
            dataset.len(),
            args.rows
        ))
        .into());
    }
    let outpaint_rows = match args.direction.as_str() {
        "inpaint" => 0,
        "outpaint" => args.rows,
        "both" => args.rows / 2 + args.rows % 2,
        other => return Err(CliError::Usage(format!("unknown direction '{other}'"))),
    };
    let mut rows = Vec::with_capacity(args.rows);
    for i in 0..args.rows {
        let id = dataset.id(i).to_string();
        let mut mask_rng = cyclefill_core::rng::stream(
            cyclefill_core::rng::item_seed(args.seed, "eval-mask", &id),
            "eval-mask",
            0,
        );
        let mask = masking::sample_mask(&cfg.mask_spec, res, res, &mut mask_rng)?;
        let batch = dataset.gather(&[i]);
        let x = &batch.data;
        let outpaint = i < outpaint_rows;
        let (masked, raw, restored) = if outpaint {
            let masked = masking::outside_masked(x, mask.grid())?;
            let (raw, restored) = evaluation::run_outpaint(&bundle, x, &mask)?;
            (masked, raw, restored)
        } else {
            let masked = masking::inside_masked(x, mask.grid())?;
            let (raw, restored) = evaluation::run_inpaint(&bundle, x, &mask)?;
            (masked, raw, restored)
        };
        let take = |a: &ndarray::Array4<f32>| a.index_axis(ndarray::Axis(0), 0).to_owned();
        rows.push(GridRow {
            masked: take(&masked),
            raw: take(&raw),
            restored: take(&restored),
            ground_truth: take(x),
        });
    }
    evaluation::render_grid(&rows, &args.out, args.gutter)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
