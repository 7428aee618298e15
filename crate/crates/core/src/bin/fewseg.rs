//! Command-line surface for the few-shot segmentation toolkit.
//!
//! Exit codes: 0 success, 1 validation errors found (or runtime failure),
//! 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fewseg_core::dataset::{
    binarize_multiclass_dataset, build_splits, build_synthetic_dataset, compute_stats,
    read_splits_file, scan_registry, validate_registry, write_splits_file,
};
use fewseg_core::model::{EncoderConfig, ModelConfig};
use fewseg_core::objectives::LossKind;
use fewseg_core::runconfig::RunConfig;
use fewseg_core::train::{
    self, ablation_table_csv, cross_dataset_protocol, evaluate, kshot_ablation, Checkpoint,
    EvalSet, EvalSettings, TrainConfig, TrainOptions, TrainStage,
};
use fewseg_core::workflow::{
    auto_label, merge_support_set, mine_hard_cases, read_corrections, save_label_outputs,
    write_hard_case_csv, SupportSet,
};

#[derive(Parser)]
#[command(
    name = "fewseg",
    about = "Few-shot binary segmentation: datasets, training, evaluation, auto-labeling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset root against the collection rules
    Validate(ValidateArgs),
    /// Build train/val/test splits by per-superclass sampling
    Splits(SplitsArgs),
    /// Per-class counts and the per-superclass distribution
    Stats(StatsArgs),
    /// Generate a synthetic shapes corpus
    Synth(SynthArgs),
    /// Convert a multi-class labelled dataset into a binary class
    Binarize(BinarizeArgs),
    /// Train a model episodically
    Train(TrainArgs),
    /// Evaluate a checkpoint on a class list
    Eval(EvalArgs),
    /// Train and evaluate one model per k value
    AblateK(AblateArgs),
    /// Staged multi-dataset training protocol
    Protocol(ProtocolArgs),
    /// Auto-label a corpus from a few support examples
    Label(LabelArgs),
    /// Rank the hardest predictions for correction
    Mine(MineArgs),
    /// Merge corrected pairs into a new support-set version
    MergeSupport(MergeArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset root
    #[arg(long)]
    dataset: PathBuf,
    /// Report CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap the per-file validation parallelism
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SplitsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    per_super_val: Option<usize>,
    #[arg(long, value_name = "N")]
    per_super_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Splits file (default `<dataset>/splits-<seed>.txt`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of classes to generate
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset root
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BinarizeArgs {
    /// Directory of `<stem>.(jpg|png)` images with `<stem>.labels.png` maps
    #[arg(long)]
    images: PathBuf,
    /// Label id to mark as foreground
    #[arg(long)]
    target_class: u16,
    /// Name of the emitted class
    #[arg(long)]
    class_name: String,
    /// Output dataset root
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Model preset: tiny, small, desk, vgg16
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    n_stages: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    channel_growth: Option<usize>,
    #[arg(long)]
    convs_per_stage: Option<usize>,
    #[arg(long)]
    relation_channels: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    splits_file: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    halve_every: Option<u64>,
    /// bce or mse
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Resume from this checkpoint instead of initializing
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Output directory (trace, checkpoints, resolved config)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model_flags: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    splits_file: Option<PathBuf>,
    /// Which split to evaluate: train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Explicit comma-separated class list (overrides --splits-file)
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long, default_value_t = 5)]
    episodes_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    splits_file: PathBuf,
    /// Comma-separated support sizes, e.g. 1,3,5,7
    #[arg(long)]
    k_values: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long, default_value_t = 5)]
    episodes_per_class: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model_flags: ModelFlags,
}

#[derive(Args)]
struct ProtocolArgs {
    /// Training stage as `<dataset>=<splits-file>`; repeatable, in order
    #[arg(long = "stage", required = true)]
    stages: Vec<String>,
    /// Evaluation set as `<name>=<dataset>=<splits-file>` (its test split)
    #[arg(long = "eval-set")]
    eval_sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long, default_value_t = 5)]
    episodes_per_class: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model_flags: ModelFlags,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of numbered support pairs (`k.jpg` + `k.png`)
    #[arg(long)]
    support_dir: PathBuf,
    /// Directory of corpus images to label
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    support_dir: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Optional directory of ground-truth masks mirroring corpus stems
    #[arg(long)]
    truths: Option<PathBuf>,
    /// How many hard cases to keep
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Manifest CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    support_dir: PathBuf,
    /// Directory of corrected masks mirroring corpus filenames
    #[arg(long)]
    corrections: PathBuf,
    /// Corpus the corrections refer to
    #[arg(long)]
    corpus: PathBuf,
    /// Output support-set directory
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Splits(args) => cmd_splits(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Binarize(args) => cmd_binarize(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AblateK(args) => cmd_ablate(args),
        Command::Protocol(args) => cmd_protocol(args),
        Command::Label(args) => cmd_label(args),
        Command::Mine(args) => cmd_mine(args),
        Command::MergeSupport(args) => cmd_merge(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    let run = || {
        validate_registry(&args.dataset)
            .with_context(|| format!("validating {}", args.dataset.display()))
    };
    let report = match args.workers {
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .context("worker pool")?
            .install(run)?,
        None => run()?,
    };
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            report.write_csv(file)?;
            write_sibling_config(path, |cfg| {
                cfg.set("dataset", args.dataset.display());
            })?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    eprintln!(
        "{} errors, {} warnings",
        report.n_errors(),
        report.n_warnings()
    );
    Ok(if report.conforms() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_splits(args: SplitsArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new();
    if let Some(v) = args.per_super_val {
        cfg.set("per-super-val", v);
    }
    if let Some(v) = args.per_super_test {
        cfg.set("per-super-test", v);
    }
    if let Some(v) = args.seed {
        cfg.set("seed", v);
    }
    merge_config_file(&mut cfg, args.config.as_deref())?;
    cfg.check_keys(&["per-super-val", "per-super-test", "seed"])?;
    let per_val = cfg.get_parsed::<usize>("per-super-val")?.unwrap_or(20);
    let per_test = cfg.get_parsed::<usize>("per-super-test")?.unwrap_or(20);
    let seed = cfg.get_parsed::<u64>("seed")?.unwrap_or(0);

    let registry = scan_registry(&args.dataset)?;
    let spec = build_splits(&registry, per_val, per_test, seed)?;
    let out = args
        .out
        .unwrap_or_else(|| args.dataset.join(format!("splits-{seed}.txt")));
    write_splits_file(&out, &spec)?;
    write_sibling_config(&out, |resolved| {
        resolved.set("dataset", args.dataset.display());
        resolved.set("per-super-val", per_val);
        resolved.set("per-super-test", per_test);
        resolved.set("seed", seed);
    })?;
    println!(
        "train/val/test: {}/{}/{} classes -> {}",
        spec.train.len(),
        spec.val.len(),
        spec.test.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(args: StatsArgs) -> Result<ExitCode> {
    let registry = scan_registry(&args.dataset)?;
    let stats = compute_stats(&registry)?;
    let mut out = String::from("kind,name,value\n");
    out.push_str(&format!("summary,mean,{}\n", stats.mean));
    out.push_str(&format!("summary,stddev,{}\n", stats.stddev));
    for (name, count) in &stats.per_class {
        out.push_str(&format!("class,{name},{count}\n"));
    }
    for (name, fraction) in &stats.per_super {
        out.push_str(&format!("superclass,{name},{fraction:.6}\n"));
    }
    match &args.out {
        Some(path) => std::fs::write(path, out)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{out}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let registry = build_synthetic_dataset(args.classes, args.seed, &args.out)?;
    let mut cfg = RunConfig::new();
    cfg.set("classes", args.classes);
    cfg.set("seed", args.seed);
    cfg.set("out", args.out.display());
    cfg.save(&args.out.join("run-config.txt"))?;
    println!(
        "wrote {} classes / {} pairs under {}",
        registry.n_classes(),
        registry.n_pairs(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_binarize(args: BinarizeArgs) -> Result<ExitCode> {
    let mut items = Vec::new();
    for entry in std::fs::read_dir(&args.images)
        .with_context(|| format!("reading {}", args.images.display()))?
    {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.ends_with(".labels.png") {
            continue;
        }
        if !(name.ends_with(".jpg") || name.ends_with(".png") || name.ends_with(".jpeg")) {
            continue;
        }
        let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
        let labels = args.images.join(format!("{stem}.labels.png"));
        if labels.exists() {
            items.push((path, labels));
        }
    }
    items.sort();
    if items.is_empty() {
        bail!("no `<stem>.labels.png` pairs found in {}", args.images.display());
    }
    let outcome =
        binarize_multiclass_dataset(&items, args.target_class, &args.class_name, &args.out)?;
    let mut cfg = RunConfig::new();
    cfg.set("images", args.images.display());
    cfg.set("target-class", args.target_class);
    cfg.set("class-name", &args.class_name);
    cfg.save(&args.out.join("run-config.txt"))?;
    println!(
        "kept {} pairs ({} without target, {} filtered)",
        outcome.entry.pairs.len(),
        outcome.excluded_no_target.len(),
        outcome.excluded_filtered.len()
    );
    Ok(ExitCode::SUCCESS)
}

const TRAIN_KEYS: &[&str] = &[
    "seed",
    "k-shot",
    "n-query",
    "episodes",
    "lr0",
    "halve-every",
    "loss",
    "checkpoint-every",
    "eval-every",
    "model",
    "input-size",
    "n-stages",
    "base-channels",
    "channel-growth",
    "convs-per-stage",
    "relation-channels",
];

fn model_config_from(cfg: &RunConfig) -> Result<ModelConfig> {
    let mut model = match cfg.get("model").unwrap_or("desk") {
        "tiny" => ModelConfig::tiny(),
        "desk" => ModelConfig::desk(),
        "vgg16" => ModelConfig::vgg16_scale(),
        "small" => ModelConfig {
            encoder: EncoderConfig {
                input_size: 224,
                n_stages: 4,
                base_channels: 8,
                channel_growth: 2,
                convs_per_stage: 1,
            },
            relation_channels: None,
            decoder_channels: None,
        },
        other => bail!("unknown model preset {other:?} (tiny, small, desk, vgg16)"),
    };
    if let Some(v) = cfg.get_parsed::<usize>("input-size")? {
        model.encoder.input_size = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("n-stages")? {
        model.encoder.n_stages = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("base-channels")? {
        model.encoder.base_channels = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("channel-growth")? {
        model.encoder.channel_growth = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("convs-per-stage")? {
        model.encoder.convs_per_stage = v;
    }
    if let Some(v) = cfg.get_parsed::<usize>("relation-channels")? {
        model.relation_channels = Some(v);
    }
    Ok(model)
}

fn apply_model_flags(cfg: &mut RunConfig, flags: &ModelFlags) {
    if let Some(v) = &flags.model {
        cfg.set("model", v);
    }
    if let Some(v) = flags.input_size {
        cfg.set("input-size", v);
    }
    if let Some(v) = flags.n_stages {
        cfg.set("n-stages", v);
    }
    if let Some(v) = flags.base_channels {
        cfg.set("base-channels", v);
    }
    if let Some(v) = flags.channel_growth {
        cfg.set("channel-growth", v);
    }
    if let Some(v) = flags.convs_per_stage {
        cfg.set("convs-per-stage", v);
    }
    if let Some(v) = flags.relation_channels {
        cfg.set("relation-channels", v);
    }
}

fn train_config_from(cfg: &RunConfig) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let loss = match cfg.get("loss") {
        None => defaults.loss,
        Some(raw) => raw.parse::<LossKind>().map_err(|e| anyhow!(e))?,
    };
    Ok(TrainConfig {
        loss,
        lr0: cfg.get_parsed::<f64>("lr0")?.unwrap_or(defaults.lr0),
        halve_every: cfg
            .get_parsed::<u64>("halve-every")?
            .unwrap_or(defaults.halve_every),
        n_episodes: cfg
            .get_parsed::<u64>("episodes")?
            .unwrap_or(defaults.n_episodes),
        k_shot: cfg.get_parsed::<usize>("k-shot")?.unwrap_or(defaults.k_shot),
        n_query: cfg
            .get_parsed::<usize>("n-query")?
            .unwrap_or(defaults.n_query),
        seed: cfg.get_parsed::<u64>("seed")?.unwrap_or(defaults.seed),
        checkpoint_every: cfg
            .get_parsed::<u64>("checkpoint-every")?
            .unwrap_or(defaults.checkpoint_every),
        eval_every: cfg
            .get_parsed::<u64>("eval-every")?
            .unwrap_or(defaults.eval_every),
        eval_episodes_per_class: defaults.eval_episodes_per_class,
    })
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new();
    if let Some(v) = args.seed {
        cfg.set("seed", v);
    }
    if let Some(v) = args.k_shot {
        cfg.set("k-shot", v);
    }
    if let Some(v) = args.n_query {
        cfg.set("n-query", v);
    }
    if let Some(v) = args.episodes {
        cfg.set("episodes", v);
    }
    if let Some(v) = args.lr0 {
        cfg.set("lr0", v);
    }
    if let Some(v) = args.halve_every {
        cfg.set("halve-every", v);
    }
    if let Some(v) = &args.loss {
        cfg.set("loss", v);
    }
    if let Some(v) = args.checkpoint_every {
        cfg.set("checkpoint-every", v);
    }
    if let Some(v) = args.eval_every {
        cfg.set("eval-every", v);
    }
    apply_model_flags(&mut cfg, &args.model_flags);
    merge_config_file(&mut cfg, args.config.as_deref())?;
    cfg.check_keys(TRAIN_KEYS)?;

    let registry = scan_registry(&args.dataset)?;
    let split = read_splits_file(&args.splits_file)?;
    let options = TrainOptions {
        out_dir: Some(args.out.clone()),
        log_every: args.log_every.unwrap_or(0),
    };

    let result = match &args.checkpoint {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            train::resume(checkpoint, &registry, &split, &options)?
        }
        None => {
            let model_config = model_config_from(&cfg)?;
            let train_config = train_config_from(&cfg)?;
            train::train(&registry, &split, &model_config, &train_config, &options)?
        }
    };

    emit_resolved(&args.out, &cfg, |resolved| {
        resolved.set("dataset", args.dataset.display());
        resolved.set("splits-file", args.splits_file.display());
    })?;
    println!(
        "trained to episode {}; final loss {:.5}",
        result.checkpoint.episode,
        result.trace.last().map(|r| r.loss).unwrap_or(f32::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_classes(args: &EvalArgs) -> Result<Vec<String>> {
    if let Some(raw) = &args.classes {
        return Ok(raw.split(',').map(|s| s.trim().to_string()).collect());
    }
    let Some(path) = &args.splits_file else {
        bail!("provide --classes or --splits-file");
    };
    let split = read_splits_file(path)?;
    Ok(match args.split.as_str() {
        "train" => split.train,
        "val" => split.val,
        "test" => split.test,
        other => bail!("unknown split {other:?}"),
    })
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let registry = scan_registry(&args.dataset)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let classes = eval_classes(&args)?;
    let settings = EvalSettings {
        k_shot: args.k_shot.unwrap_or(checkpoint.train_config.k_shot),
        episodes_per_class: args.episodes_per_class,
        seed: args.seed,
        threshold: 0.5,
    };
    let (report, _) = evaluate(
        &checkpoint.params,
        &checkpoint.model_config,
        &registry,
        &classes,
        &settings,
    )?;
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            report.write_csv(file)?;
            write_sibling_config(path, |cfg| {
                cfg.set("dataset", args.dataset.display());
                cfg.set("checkpoint", args.checkpoint.display());
                cfg.set("k-shot", settings.k_shot);
                cfg.set("episodes-per-class", settings.episodes_per_class);
                cfg.set("seed", settings.seed);
            })?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    println!(
        "macro meanIoU {:.4} / micro {:.4} over {} records",
        report.macro_mean, report.micro_mean, report.n_records
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let k_values: Vec<usize> = args
        .k_values
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| anyhow!("bad k value: {e}")))
        .collect::<Result<_>>()?;
    let mut cfg = RunConfig::new();
    if let Some(v) = args.seed {
        cfg.set("seed", v);
    }
    if let Some(v) = args.episodes {
        cfg.set("episodes", v);
    }
    if let Some(v) = args.lr0 {
        cfg.set("lr0", v);
    }
    apply_model_flags(&mut cfg, &args.model_flags);
    cfg.check_keys(TRAIN_KEYS)?;
    let model_config = model_config_from(&cfg)?;
    let train_config = train_config_from(&cfg)?;

    let registry = scan_registry(&args.dataset)?;
    let split = read_splits_file(&args.splits_file)?;
    let eval = EvalSettings {
        k_shot: 0, // overridden per k
        episodes_per_class: args.episodes_per_class,
        seed: train_config.seed ^ 0xe7a1,
        threshold: 0.5,
    };
    let reports = kshot_ablation(&registry, &split, &model_config, &train_config, &k_values, &eval)?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("ablation.csv"), ablation_table_csv(&reports))?;
    for r in &reports {
        let file = std::fs::File::create(args.out.join(format!("eval-k{}.csv", r.k)))?;
        r.report.write_csv(file)?;
        println!("k={}: macro meanIoU {:.4}", r.k, r.report.macro_mean);
    }
    emit_resolved(&args.out, &cfg, |resolved| {
        resolved.set("dataset", args.dataset.display());
        resolved.set("splits-file", args.splits_file.display());
        resolved.set("k-values", &args.k_values);
    })?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_protocol(args: ProtocolArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new();
    if let Some(v) = args.seed {
        cfg.set("seed", v);
    }
    if let Some(v) = args.episodes {
        cfg.set("episodes", v);
    }
    if let Some(v) = args.k_shot {
        cfg.set("k-shot", v);
    }
    apply_model_flags(&mut cfg, &args.model_flags);
    cfg.check_keys(TRAIN_KEYS)?;
    let model_config = model_config_from(&cfg)?;
    let train_config = train_config_from(&cfg)?;

    let mut stage_data = Vec::new();
    for (idx, raw) in args.stages.iter().enumerate() {
        let (dataset, splits) = raw
            .split_once('=')
            .ok_or_else(|| anyhow!("--stage expects <dataset>=<splits-file>, got {raw:?}"))?;
        let registry = scan_registry(Path::new(dataset))?;
        let split = read_splits_file(Path::new(splits))?;
        stage_data.push((format!("stage{}", idx + 1), registry, split));
    }
    let mut eval_data = Vec::new();
    for raw in &args.eval_sets {
        let mut parts = raw.splitn(3, '=');
        let (Some(name), Some(dataset), Some(splits)) =
            (parts.next(), parts.next(), parts.next())
        else {
            bail!("--eval-set expects <name>=<dataset>=<splits-file>, got {raw:?}");
        };
        let registry = scan_registry(Path::new(dataset))?;
        let split = read_splits_file(Path::new(splits))?;
        eval_data.push((name.to_string(), registry, split.test));
    }

    let stages: Vec<TrainStage<'_>> = stage_data
        .iter()
        .map(|(name, registry, split)| TrainStage {
            name: name.clone(),
            registry,
            split,
        })
        .collect();
    let eval_sets: Vec<EvalSet<'_>> = eval_data
        .iter()
        .map(|(name, registry, classes)| EvalSet {
            name: name.clone(),
            registry,
            classes: classes.clone(),
        })
        .collect();

    let eval = EvalSettings {
        k_shot: train_config.k_shot,
        episodes_per_class: args.episodes_per_class,
        seed: train_config.seed ^ 0x9e0c,
        threshold: 0.5,
    };
    let result = cross_dataset_protocol(&stages, &eval_sets, &model_config, &train_config, &eval)?;

    std::fs::create_dir_all(&args.out)?;
    for stage in &result.stages {
        println!(
            "{}: lr0 {:.1e}, {} episodes, final loss {:.5}",
            stage.name, stage.lr0, stage.episodes, stage.final_loss
        );
    }
    for (name, report) in &result.reports {
        let file = std::fs::File::create(args.out.join(format!("eval-{name}.csv")))?;
        report.write_csv(file)?;
        println!("{name}: macro meanIoU {:.4}", report.macro_mean);
    }
    result
        .checkpoint
        .save(&args.out.join("checkpoint-final.ckpt"))?;
    emit_resolved(&args.out, &cfg, |resolved| {
        resolved.set("stages", args.stages.join(";"));
        resolved.set("eval-sets", args.eval_sets.join(";"));
    })?;
    Ok(ExitCode::SUCCESS)
}

/// Read a support directory: numbered pairs plus an optional
/// `support.json` carrying version and provenance.
fn load_support_dir(dir: &Path) -> Result<SupportSet> {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Manifest {
        version: u32,
        corrected: Vec<String>,
    }
    let mut pairs = Vec::new();
    let mut stems = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(".jpg") {
            let mask = dir.join(format!("{stem}.png"));
            if mask.exists() {
                pairs.push(fewseg_core::dataset::load_pair(&path, &mask)?);
                stems.push(stem.to_string());
            }
        }
    }
    if pairs.is_empty() {
        bail!("no support pairs (k.jpg + k.png) in {}", dir.display());
    }
    let mut set = SupportSet::initial(pairs)?;
    let manifest_path = dir.join("support.json");
    if manifest_path.exists() {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        set.version = manifest.version;
        for (pair_idx, stem) in stems.iter().enumerate() {
            if manifest.corrected.contains(stem) {
                set.pairs[pair_idx].1 = fewseg_core::workflow::Provenance::Corrected;
            }
        }
    }
    Ok(set)
}

fn save_support_dir(set: &SupportSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut corrected = Vec::new();
    for (idx, (pair, provenance)) in set.pairs.iter().enumerate() {
        let stem = (idx + 1).to_string();
        fewseg_core::dataset::write_pair(dir, &stem, pair)?;
        if *provenance == fewseg_core::workflow::Provenance::Corrected {
            corrected.push(stem);
        }
    }
    let manifest = serde_json::json!({
        "version": set.version,
        "corrected": corrected,
    });
    std::fs::write(
        dir.join("support.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn corpus_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?
    {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.ends_with(".jpg") || name.ends_with(".jpeg") || name.ends_with(".png") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no images in {}", dir.display());
    }
    Ok(out)
}

fn cmd_label(args: LabelArgs) -> Result<ExitCode> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let support = load_support_dir(&args.support_dir)?;
    let corpus = corpus_images(&args.corpus)?;
    let results = auto_label(
        &checkpoint.params,
        &checkpoint.model_config,
        &support,
        &corpus,
        args.threshold,
        args.workers,
    )?;
    save_label_outputs(&results, true, &args.out)?;
    emit_resolved(&args.out, &RunConfig::new(), |cfg| {
        cfg.set("checkpoint", args.checkpoint.display());
        cfg.set("support-dir", args.support_dir.display());
        cfg.set("corpus", args.corpus.display());
        cfg.set("threshold", args.threshold);
        cfg.set("workers", args.workers);
    })?;
    println!("labeled {} images -> {}", results.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_mine(args: MineArgs) -> Result<ExitCode> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let support = load_support_dir(&args.support_dir)?;
    let corpus = corpus_images(&args.corpus)?;
    let results = auto_label(
        &checkpoint.params,
        &checkpoint.model_config,
        &support,
        &corpus,
        0.5,
        args.workers,
    )?;

    let truths = match &args.truths {
        None => None,
        Some(dir) => {
            let mut masks = Vec::with_capacity(corpus.len());
            for image in &corpus {
                let stem = image
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| anyhow!("bad corpus path {image:?}"))?;
                let mask_path = dir.join(format!("{stem}.png"));
                let pair = fewseg_core::dataset::load_pair(image, &mask_path)
                    .with_context(|| format!("truth for {stem}"))?;
                masks.push(pair.mask);
            }
            Some(masks)
        }
    };
    let cases = mine_hard_cases(&results, truths.as_deref(), args.n)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_hard_case_csv(&cases, file)?;
    for (rank, case) in cases.iter().enumerate() {
        println!(
            "{:>3}. {}  score {:.4}",
            rank + 1,
            case.image_path.display(),
            case.score
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_merge(args: MergeArgs) -> Result<ExitCode> {
    let support = load_support_dir(&args.support_dir)?;
    let corpus = corpus_images(&args.corpus)?;
    let corrected = read_corrections(&corpus, &args.corrections)?;
    let n_corrected = corrected.len();
    let merged = merge_support_set(&support, corrected)?;
    save_support_dir(&merged, &args.out)?;
    println!(
        "support set v{} -> v{}: {} pairs ({} corrected)",
        support.version,
        merged.version,
        merged.pairs.len(),
        n_corrected
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------

fn merge_config_file(cfg: &mut RunConfig, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        let file = RunConfig::load(path)?;
        // flags already present win; file fills the rest
        for line in file.render().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                cfg.set_default(k, v);
            }
        }
    }
    Ok(())
}

fn emit_resolved(
    out_dir: &Path,
    cfg: &RunConfig,
    extra: impl FnOnce(&mut RunConfig),
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut resolved = cfg.clone();
    extra(&mut resolved);
    resolved.save(&out_dir.join("run-config.txt"))?;
    Ok(())
}

fn write_sibling_config(out_file: &Path, fill: impl FnOnce(&mut RunConfig)) -> Result<()> {
    let mut cfg = RunConfig::new();
    fill(&mut cfg);
    let sibling = out_file.with_extension(match out_file.extension() {
        Some(ext) => format!("{}.config.txt", ext.to_string_lossy()),
        None => "config.txt".to_string(),
    });
    cfg.save(&sibling)?;
    Ok(())
}
