use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use futurist::checkpoint::{load_checkpoint, save_checkpoint};
use futurist::datasets::{
    self, context_frame_indices, read_manifest, write_label_png, write_synthetic_split, DiskWindows, GenerationSpec,
    Horizon, SequenceSource, SplitSpec,
};
use futurist::evaluation::{evaluate, write_colorized, EvalSetup, Method, MetricReport};
use futurist::inference::rollout;
use futurist::training::{self, Checkpoint, StepReport, TrainOptions};
use futurist::{Error, ModelConfig};

#[derive(Parser)]
#[command(name = "futurist", version, about = "Semantic future prediction with a masked visual sequence transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic moving-shape sequences and a manifest.
    GenData(GenDataArgs),
    /// Train a model on a manifest of on-disk sequences.
    Train(TrainArgs),
    /// Score a checkpoint and/or the Copy-Last baseline on a split.
    Eval(EvalArgs),
    /// Roll a checkpoint forward and write colourised frames.
    Rollout(RolloutArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Model configuration file (`key = value` lines); defaults to the desk setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set fusion=ADD`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; falls back to FUTURIST_SEED, then to the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Scene distribution file (`key = value` lines).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    num_sequences: usize,
    /// Frames written per sequence.
    #[arg(long, default_value_t = 30)]
    frames: u32,
    /// Target frame listed in the manifest.
    #[arg(long, default_value_t = 20)]
    target: u32,
    /// Split name: city directory and manifest stem.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Manifest of training windows; defaults to `<data>/train.txt`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint written periodically and at the end.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint (its configuration wins).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss log CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    /// Worker threads for data loading and per-item gradients.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum HorizonArg {
    Short,
    Mid,
}

impl From<HorizonArg> for Horizon {
    fn from(h: HorizonArg) -> Self {
        match h {
            HorizonArg::Short => Horizon::Short,
            HorizonArg::Mid => Horizon::Mid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    CopyLast,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained checkpoint; omit for baseline-only evaluation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `<data>/val.txt`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "short")]
    horizon: HorizonArg,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Report path; writes `<report>.csv` and `<report>.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `<data>/val.txt`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Sequence id as listed in the manifest.
    #[arg(long)]
    sequence: String,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    emit_frames: PathBuf,
}

/// A failure with its exit status: 2 for usage or configuration, 3 at run time.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("FUTURIST_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("FUTURIST_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn resolve_config(args: &ConfigArgs) -> CliResult<ModelConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            ModelConfig::parse(&text)?
        }
        None => ModelConfig::desk(),
    };
    let mut pairs = Vec::new();
    for (i, o) in args.overrides.iter().enumerate() {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    cfg.apply_overrides(pairs.iter().map(|(i, k, v)| (*i, k.as_str(), v.as_str())))?;
    if let Some(seed) = args.seed.or(env_seed()?) {
        cfg.seed = seed;
    }
    cfg.ensure_valid()?;
    Ok(cfg)
}

fn gen_data(args: GenDataArgs) -> CliResult {
    let spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read spec {}: {e}", path.display())))?;
            GenerationSpec::parse(&text)?
        }
        None => GenerationSpec::default(),
    };
    let seed = args.seed.or(env_seed()?).unwrap_or(0);
    let split = SplitSpec {
        name: args.split,
        count: args.num_sequences,
        frames: args.frames,
        target: args.target,
        height: spec.height,
        width: spec.width,
        seed,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", args.out.display())))?;
    let entries = write_synthetic_split(&args.out, &split, &spec.distribution).map_err(|e| match e {
        Error::Io(io) => Failure::usage(format!("cannot write under {}: {io}", args.out.display())),
        Error::Range { .. } | Error::Scene(_) => Failure::usage(e.to_string()),
        other => other.into(),
    })?;
    println!(
        "wrote {} sequences x {} frames to {} (manifest {}.txt)",
        entries.len(),
        split.frames,
        args.out.display(),
        split.name
    );
    Ok(())
}

fn manifest_path(data: &Path, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| data.join(default))
}

fn train(args: TrainArgs) -> CliResult {
    let ckpt = match &args.resume {
        Some(path) => load_checkpoint::<f32>(path)?,
        None => Checkpoint::new(resolve_config(&args.config)?)?,
    };
    let cfg = ckpt.config().clone();
    let manifest = manifest_path(&args.data, &args.manifest, "train.txt");
    let entries = read_manifest(&manifest).map_err(|e| Failure::usage(e.to_string()))?;
    if entries.is_empty() {
        return Err(Failure::usage(format!("manifest {} lists no sequences", manifest.display())));
    }
    let source = DiskWindows {
        root: args.data.clone(),
        entries,
        layout: cfg.layout,
        modalities: cfg.modalities.clone(),
    };
    let log_path = args.loss_log.clone().unwrap_or_else(|| args.out.with_extension("loss.csv"));
    let fresh = args.resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", log_path.display())))?;
    if fresh {
        let names: Vec<String> = cfg.modalities.iter().map(|m| format!("{}_loss", m.name)).collect();
        writeln!(log, "step,epoch,lr,total,{},grad_norm", names.join(",")).map_err(Error::from)?;
    }

    let total = training::planned_steps(&cfg.optimizer, source.len());
    let mut ckpt = ckpt;
    let mut log_err = None;
    while ckpt.step < total {
        let stop = (ckpt.step / args.checkpoint_every.max(1) + 1) * args.checkpoint_every.max(1);
        let opts = TrainOptions {
            stop_at: Some(stop),
            workers: args.workers,
        };
        ckpt = training::run(ckpt, &source, opts, &mut |r: &StepReport| {
            let losses: Vec<String> = r.loss.per_modality.iter().map(|m| format!("{:.6}", m.loss)).collect();
            if let Err(e) = writeln!(
                log,
                "{},{},{:.6e},{:.6},{},{:.6}",
                r.step,
                r.epoch,
                r.learning_rate,
                r.loss.total,
                losses.join(","),
                r.grad_norm
            ) {
                log_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = log_err.take() {
            return Err(Error::from(e).into());
        }
        save_checkpoint(&ckpt, &args.out)?;
        eprintln!("step {}/{} saved to {}", ckpt.step, total, args.out.display());
    }
    save_checkpoint(&ckpt, &args.out)?;
    println!("training complete at step {} ({})", ckpt.step, args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    if args.checkpoint.is_none() && args.baseline.is_none() {
        return Err(Failure::usage("eval needs --checkpoint, --baseline copy-last, or both"));
    }
    let ckpt = args.checkpoint.as_deref().map(load_checkpoint::<f32>).transpose()?;
    let cfg = match &ckpt {
        Some(c) => c.config().clone(),
        None => resolve_config(&args.config)?,
    };
    if cfg.layout.future_frames != 1 {
        return Err(Failure::usage("evaluation needs a layout with exactly one future frame"));
    }
    let manifest = manifest_path(&args.data, &args.manifest, "val.txt");
    let entries = read_manifest(&manifest).map_err(|e| Failure::usage(e.to_string()))?;
    if entries.is_empty() {
        return Err(Failure::usage(format!("manifest {} lists no sequences", manifest.display())));
    }
    let horizon: Horizon = args.horizon.into();
    for e in &entries {
        context_frame_indices(e.target, horizon, cfg.layout.context_frames).map_err(|err| {
            Failure::usage(format!(
                "{} {}: {err} (layout has {} context frames)",
                e.city, e.sequence, cfg.layout.context_frames
            ))
        })?;
    }
    let setup = EvalSetup {
        root: args.data.clone(),
        entries,
        horizon,
        layout: cfg.layout,
        modalities: cfg.modalities.clone(),
        denominator: cfg.absrel_denominator,
        ignore_label: None,
        workers: args.workers,
    };
    let mut report = MetricReport::default();
    if let Some(c) = &ckpt {
        report.rows.push(evaluate(Method::Model(&c.model), &setup)?);
    }
    if args.baseline.is_some() {
        report.rows.push(evaluate::<f32>(Method::CopyLast, &setup)?);
    }
    print!("{}", report.to_table());
    if let Some(path) = &args.report {
        let (csv, txt) = (path.with_extension("csv"), path.with_extension("txt"));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
        }
        std::fs::write(&csv, report.to_csv()).map_err(Error::from)?;
        std::fs::write(&txt, report.to_table()).map_err(Error::from)?;
    }
    Ok(())
}

fn rollout_cmd(args: RolloutArgs) -> CliResult {
    if args.steps == 0 {
        return Err(Failure::usage("--steps must be at least 1"));
    }
    let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
    let cfg = ckpt.config();
    let manifest = manifest_path(&args.data, &args.manifest, "val.txt");
    let entries = read_manifest(&manifest).map_err(|e| Failure::usage(e.to_string()))?;
    let entry = entries
        .iter()
        .find(|e| e.sequence == args.sequence)
        .ok_or_else(|| Failure::usage(format!("sequence {:?} is not in {}", args.sequence, manifest.display())))?;
    let context = datasets::load_sequence(
        &args.data,
        &entry.city,
        &entry.sequence,
        entry.target,
        Horizon::Short,
        &cfg.layout,
        &cfg.modalities,
    )?;
    let last = *context.frame_indices().last().expect("non-empty context");
    let predictions = rollout(&ckpt.model, &context, args.steps)?;
    let raw = args.emit_frames.join("raw");
    let mut written = 0;
    for pred in &predictions {
        let offset = pred.frame_index - last;
        for (spec, map) in cfg.modalities.iter().zip(&pred.maps) {
            let stem = format!("{}_{}_t+{offset:02}_{}", entry.city, entry.sequence, spec.name);
            write_colorized(&args.emit_frames.join(format!("{stem}.png")), spec, map)?;
            write_label_png(&raw.join(format!("{stem}.png")), map)?;
            written += 1;
        }
    }
    println!("wrote {written} frames to {}", args.emit_frames.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rollout(a) => rollout_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
