//! `hwdnet` command-line tool: dataset generation, training, evaluation,
//! component ablation and plotting.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, bad config,
//! missing files), 2 for runtime failures (I/O, divergence).

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hwdnet::dataset::{load_ucm_veid_index, DatasetIndex, Direction, ImageCache, Shot, SynthSpec};
use hwdnet::metrics::{test_records, Embedder, EvalOptions, EvalReport};
use hwdnet::trainer::{load_model, resume, run_ablation, train, ModelEmbedder, Preset, TrainConfig};
use serde::{Deserialize, Serialize};

/// Error caused by the invocation rather than the environment.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "hwdnet", version, about = "RGB-infrared cross-modality vehicle re-identification toolkit")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired RGB/IR dataset.
    Synth(SynthArgs),
    /// Train a model (or resume a run) and write a checkpoint and metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate the component ablation grid.
    Ablate(AblateArgs),
    /// Plot a CMC curve and a 2-D embedding scatter.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Training identities.
    #[arg(long)]
    num_ids: usize,
    /// Images per identity per modality.
    #[arg(long)]
    spm: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra identities labeled as test (IR query, RGB gallery).
    #[arg(long, default_value_t = 0)]
    test_ids: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with rgb/ and ir/ subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Labels file; defaults to <data>/labels.tsv when present.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Starting point: paper or desk. Without it `train` uses the built-in
    /// defaults and `ablate` uses desk.
    #[arg(long)]
    preset: Option<String>,
    /// Config file of `key = value` lines, applied over the preset.
    #[arg(long, env = "HWDNET_CONFIG")]
    config: Option<PathBuf>,
    /// Single config override `key=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for `--set epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from this checkpoint; `--set` overrides apply to its config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for the checkpoint, metric log and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// ir2rgb, rgb2ir or all.
    #[arg(long, default_value = "ir2rgb")]
    direction: String,
    /// single, multi or all.
    #[arg(long, default_value = "single")]
    shot: String,
    /// Number of single-shot gallery draws (seeds 0..N).
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// CMC curve length.
    #[arg(long, default_value_t = 20)]
    max_rank: usize,
    /// Drop same-identity gallery items from the query's camera.
    #[arg(long)]
    exclude_same_camera: bool,
    /// Architecture expectations `key=value` (e.g. encoder.dim=128); a
    /// mismatch with the checkpoint is an error.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write test-set embeddings (JSON) for `plot`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Training seeds, comma separated.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// ir2rgb or rgb2ir.
    #[arg(long, default_value = "ir2rgb")]
    direction: String,
    /// Directory for per-run outputs and the table (ablation.txt, ablation.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// EvalReport JSON; draws cmc.svg.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Embedding dump from `eval --embeddings`; draws embedding.svg.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing plot files.
    #[arg(long)]
    force: bool,
}

/// One test record's retrieval feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub identity: usize,
    pub modality: hwdnet::dataset::Modality,
    pub feature: Vec<f32>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<hwdnet::Error>() {
        Some(he) if he.is_validation() => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => plot::cmd_plot(&a),
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec { num_ids: a.num_ids, samples_per_id_per_modality: a.spm, seed: a.seed, test_ids: a.test_ids, height: a.height, width: a.width };
    let index = spec.generate(&a.out)?;
    println!("{} images, {} identities", index.len(), index.num_identities());
    Ok(())
}

fn load_data(d: &DataArgs) -> anyhow::Result<DatasetIndex> {
    if !d.data.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", d.data.display())));
    }
    if let Some(l) = &d.labels {
        if !l.is_file() {
            return Err(usage(format!("labels file {} does not exist", l.display())));
        }
    }
    Ok(load_ucm_veid_index(&d.data, d.labels.as_deref())?)
}

fn parse_sets(sets: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

fn overrides(c: &ConfigArgs) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = parse_sets(&c.set)?;
    if let Some(s) = c.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(e) = c.epochs {
        out.push(("epochs".into(), e.to_string()));
    }
    Ok(out)
}

/// Preset (or `fallback`), then config file, then overrides.
fn resolve_config(c: &ConfigArgs, fallback: Option<Preset>) -> anyhow::Result<TrainConfig> {
    let mut cfg = match (&c.preset, fallback) {
        (Some(p), _) => TrainConfig::preset(p.parse()?),
        (None, Some(p)) => TrainConfig::preset(p),
        (None, None) => TrainConfig::default(),
    };
    if let Some(path) = &c.config {
        if !path.is_file() {
            return Err(usage(format!("config file {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| hwdnet::Error::Parse { path: path.clone(), reason: e.to_string() })?;
    }
    for (k, v) in overrides(c)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let index = load_data(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let trainer = match &a.resume {
        Some(ckpt) => {
            if !ckpt.is_file() {
                return Err(usage(format!("checkpoint {} does not exist", ckpt.display())));
            }
            if a.config.preset.is_some() || a.config.config.is_some() {
                log::warn!("--preset and --config are ignored when resuming; the checkpoint's config is used");
            }
            resume(ckpt, &overrides(&a.config)?, &index, &a.out)?
        }
        None => train(resolve_config(&a.config, None)?, &index, &a.out)?,
    };
    let cfg_path = a.out.join("config.txt");
    fs::write(&cfg_path, trainer.config.to_text()).with_context(|| format!("writing {}", cfg_path.display()))?;
    println!("trained {} epochs ({} steps); checkpoint in {}", trainer.epoch, trainer.step, a.out.display());
    Ok(())
}

fn directions(s: &str) -> anyhow::Result<Vec<Direction>> {
    Ok(if s == "all" { Direction::ALL.to_vec() } else { vec![s.parse()?] })
}

fn shots(s: &str) -> anyhow::Result<Vec<Shot>> {
    Ok(match s {
        "all" => vec![Shot::Single, Shot::Multi],
        other => vec![other.parse()?],
    })
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    if !a.ckpt.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", a.ckpt.display())));
    }
    let dirs = directions(&a.direction)?;
    let shots = shots(&a.shot)?;
    let index = load_data(&a.data)?;
    let (model, store, cfg) = load_model(&a.ckpt)?;
    let mut expected = cfg.clone();
    for (k, v) in parse_sets(&a.set)? {
        expected.set(&k, &v)?;
        let (have, want) = (lookup(&cfg, &k), lookup(&expected, &k));
        if have != want {
            return Err(hwdnet::Error::Dimension(format!("checkpoint has {k}={have}, flags demand {k}={want}")).into());
        }
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let opts = EvalOptions { max_rank: a.max_rank, exclude_same_camera: a.exclude_same_camera };
    let mut cache = ImageCache::new(cfg.batch.image_height, cfg.batch.image_width);
    let mut emb = ModelEmbedder { model: &model, store: &store, cache: &mut cache, chunk: 64 };
    let records = test_records(&index);
    let feats = emb.embed(&index, &records)?;
    let bank = hwdnet::metrics::FeatureBank::new(&records, feats.clone())?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for &d in &dirs {
        for &s in &shots {
            reports.push(hwdnet::metrics::evaluate_features(&index, &bank, d, s, &seeds, &opts)?);
        }
    }
    let text = if reports.len() == 1 {
        reports[0].to_json()
    } else {
        format!("[\n{}\n]", reports.iter().map(|r| r.to_json()).collect::<Vec<_>>().join(",\n"))
    };
    match &a.out {
        Some(p) => fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    if let Some(p) = &a.embeddings {
        let rows: Vec<EmbeddingRow> = records
            .iter()
            .enumerate()
            .map(|(k, &r)| EmbeddingRow { identity: index.record(r).identity, modality: index.record(r).modality, feature: feats.row(k).to_vec() })
            .collect();
        fs::write(p, serde_json::to_string(&rows)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn lookup(cfg: &TrainConfig, key: &str) -> String {
    cfg.entries().into_iter().find(|(k, _)| k == key).map(|(_, v)| v).unwrap_or_default()
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let index = load_data(&a.data)?;
    let base = resolve_config(&a.config, Some(Preset::Desk))?;
    let seeds = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| usage(format!("--seeds: `{s}` is not an integer"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let direction: Direction = a.direction.parse()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let table = run_ablation(&base, &index, &a.out, &seeds, direction)?;
    let text = table.to_text();
    write_file(&a.out.join("ablation.txt"), &text)?;
    write_file(&a.out.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    print!("{text}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
