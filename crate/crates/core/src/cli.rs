//! The `urn` command line: data generation, attacks, two-phase training,
//! evaluation, robustness sweeps and plotting.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{attack_dir, save_attacked, AttackSpec, Family};
use crate::config::ExperimentConfig;
use crate::data::{forge, load_dataset, load_manifest, load_sources, procedural_sources, save_dataset, ImageSample, SplitName};
use crate::metrics::{evaluate, plot_families, read_reports, write_reports, ImageResult, MetricsReport, THRESHOLD};
use crate::uggc::write_adjacency_csv;
use crate::urn::{self, config_hash, CheckpointMeta, UrnModel, Variant};

#[derive(Parser, Debug)]
#[command(name = "urn", version, about = "Splice localization in scientific images")]
pub struct Cli {
    /// Experiment config (JSON). Defaults to the built-in toy setup.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a spliced/pristine dataset with a train/test split.
    GenData(GenDataArgs),
    /// Write attacked copies of the test split under `<root>/attacks/`.
    Attack(AttackArgs),
    /// Train stage 1, stage 2 or both.
    Train(TrainArgs),
    /// Score a checkpoint on a (possibly attacked) split.
    Eval(EvalArgs),
    /// Score a checkpoint across one degradation family and plot it.
    Sweep(SweepArgs),
    /// Draw family charts from a `report.json`.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Dataset root; defaults to the first configured root.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub per_approach: Option<usize>,
    /// Directory of pristine source images.
    #[arg(long)]
    pub sources: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Attack slug such as `blur-k7`; repeatable. Defaults to the config list.
    #[arg(long = "spec")]
    pub specs: Vec<String>,
    /// Adds every spec of a degradation family.
    #[arg(long)]
    pub family: Option<Family>,
    /// Directory of externally inpainted images for `inpaint-external`.
    #[arg(long)]
    pub external_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub stage: Stage,
    /// Epochs for every selected stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epochs_stage1: Option<usize>,
    #[arg(long)]
    pub epochs_stage2: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Directory holding the stage-1 checkpoint for `--stage 2`; defaults to
    /// the output directory.
    #[arg(long)]
    pub stage1_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory; defaults to the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the attacked copy named by this slug, generating it if needed.
    #[arg(long)]
    pub attack: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Write per-image adjacency CSVs here.
    #[arg(long)]
    pub dump_graph: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub family: Family,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub report: PathBuf,
}

/// Parses the environment's worker bound and sizes the global thread pool.
fn init_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("URN_NUM_WORKERS") {
        let n: usize = v.parse().with_context(|| format!("URN_NUM_WORKERS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("URN_NUM_WORKERS must be positive");
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    init_workers()?;
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Attack(a) => attack(&cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Sweep(a) => sweep(&cfg, a),
        Command::Plot(a) => plot(&cfg, a),
    }
}

fn gen_data(cfg: &ExperimentConfig, a: GenDataArgs) -> anyhow::Result<()> {
    let root = a.root.unwrap_or_else(|| cfg.dataset_roots[0].clone());
    let mut fc = cfg.data.clone();
    if let Some(n) = a.per_approach {
        fc.per_approach = n;
    }
    let sources = match a.sources.or_else(|| cfg.sources.clone()) {
        Some(dir) => load_sources(&dir, fc.size).with_context(|| format!("reading sources in {}", dir.display()))?,
        None => procedural_sources(fc.sources_needed(), fc.size, crate::derive_seed(cfg.seed, "sources"))?,
    };
    let forged = forge(&sources, &fc, cfg.seed)?;
    save_dataset(&root, &forged.samples, &forged.split)?;
    for (approach, n) in &forged.counts {
        println!("{:<20} {n}", approach.name());
    }
    let spliced = forged.samples.iter().filter(|s| s.label.is_spliced()).count();
    println!(
        "wrote {} images ({spliced} spliced, {} pristine; {} train / {} test) to {}",
        forged.samples.len(),
        forged.samples.len() - spliced,
        forged.split.train_ids.len(),
        forged.split.test_ids.len(),
        root.display()
    );
    Ok(())
}

fn parse_spec(slug: &str, seed: u64, external: Option<&Path>) -> anyhow::Result<AttackSpec> {
    let mut spec: AttackSpec = slug.parse()?;
    spec = spec.with_seed(seed);
    if let Some(dir) = external {
        spec = spec.with_external_dir(dir);
    }
    spec.validate()?;
    Ok(spec)
}

fn load_split(root: &Path, split: SplitName) -> anyhow::Result<Vec<ImageSample>> {
    let manifest = load_manifest(root).with_context(|| format!("dataset at {}", root.display()))?;
    Ok(load_dataset(root, &manifest.split_manifest(), split)?)
}

/// Writes the attacked test split of `root` unless it already exists.
fn ensure_attacked(root: &Path, spec: &AttackSpec) -> anyhow::Result<PathBuf> {
    let dir = attack_dir(root, spec);
    if dir.join("manifest.json").exists() {
        return Ok(dir);
    }
    let manifest = load_manifest(root).with_context(|| format!("dataset at {}", root.display()))?;
    let split = manifest.split_manifest();
    let test = load_dataset(root, &split, SplitName::Test)?;
    let attacked = crate::attack::sweep(&test, std::slice::from_ref(spec))?.remove(0);
    Ok(save_attacked(root, spec, &attacked, &split)?)
}

fn attack(cfg: &ExperimentConfig, a: AttackArgs) -> anyhow::Result<()> {
    let root = a.root.unwrap_or_else(|| cfg.dataset_roots[0].clone());
    let mut specs = Vec::new();
    let slugs = if a.specs.is_empty() && a.family.is_none() { cfg.attacks.clone() } else { a.specs };
    for slug in &slugs {
        specs.push(parse_spec(slug, cfg.seed, a.external_dir.as_deref())?);
    }
    if let Some(f) = a.family {
        specs.extend(f.specs(cfg.seed));
    }
    for spec in &specs {
        let dir = ensure_attacked(&root, spec)?;
        println!("{:<20} {}", spec.slug(), dir.display());
    }
    Ok(())
}

/// Merged training split of every dataset root, then a seeded hold-out.
fn training_data(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let mut all = Vec::new();
    for root in &cfg.dataset_roots {
        all.extend(load_split(root, SplitName::Train)?);
    }
    if all.is_empty() {
        bail!("no training samples in {:?}", cfg.dataset_roots);
    }
    let n_val = (cfg.val_fraction * all.len() as f64).round() as usize;
    if n_val == 0 {
        return Ok((all, Vec::new()));
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, "holdout")));
    let val = all.split_off(all.len() - n_val);
    Ok((all, val))
}

fn train(mut cfg: ExperimentConfig, a: TrainArgs) -> anyhow::Result<()> {
    let tc = &mut cfg.train;
    if let Some(e) = a.epochs {
        (tc.epochs_stage1, tc.epochs_stage2) = (e, e);
    }
    tc.epochs_stage1 = a.epochs_stage1.unwrap_or(tc.epochs_stage1);
    tc.epochs_stage2 = a.epochs_stage2.unwrap_or(tc.epochs_stage2);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    if let Some(v) = a.variant {
        cfg.network.variant = v;
    }
    cfg.validate()?;
    let (train_set, val) = training_data(&cfg)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut model = UrnModel::new(&cfg.network, cfg.seed)?;
    let report = match a.stage {
        Stage::Both => urn::train(&mut model, &train_set, &val, &cfg.train, cfg.seed, Some(&out))?,
        Stage::One => {
            std::fs::write(out.join("network.json"), serde_json::to_string_pretty(&cfg.network)?)?;
            let stage1 = urn::train_stage1(&mut model, &train_set, &val, &cfg.train, cfg.seed, Some(&out))?;
            urn::TrainReport {
                stage1,
                stage2: Vec::new(),
                stage1_fingerprint: Default::default(),
            }
        }
        Stage::Two => {
            let from = a.stage1_from.unwrap_or_else(|| out.clone());
            let weights = urn::weights_path(&from, 1).context("stage 2 needs a trained stage-1 checkpoint")?;
            model.stage1.store.load(&weights)?;
            std::fs::write(out.join("network.json"), serde_json::to_string_pretty(&cfg.network)?)?;
            if from != out {
                model.stage1.store.save(&out.join("stage1.safetensors"))?;
            }
            model.stage2.init_from(&model.stage1.store);
            let before = model.stage1.store.fingerprint();
            let stage2 = urn::train_stage2(&mut model, &train_set, &val, &cfg.train, cfg.seed, Some(&out))?;
            urn::TrainReport {
                stage1: Vec::new(),
                stage2,
                stage1_fingerprint: (before, model.stage1.store.fingerprint()),
            }
        }
    };
    std::fs::write(out.join("train_log.json"), serde_json::to_string_pretty(&report)?)?;
    for (name, logs) in [("stage 1", &report.stage1), ("stage 2", &report.stage2)] {
        if let Some(last) = logs.last() {
            println!("{name}: {} epochs, final loss {:.5}", logs.len(), last.train_loss);
        }
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

/// Loads a model and warns when a checkpoint sidecar was written for a
/// different network configuration.
fn load_model(dir: &Path) -> anyhow::Result<UrnModel> {
    let model = UrnModel::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let expect = config_hash(&model.cfg);
    for stage in [1, 2] {
        let side = dir.join(format!("stage{stage}_best.json"));
        let Ok(text) = std::fs::read_to_string(&side) else { continue };
        match serde_json::from_str::<CheckpointMeta>(&text) {
            Ok(meta) if meta.config_hash != expect => {
                log::warn!("{} was written for a different network config", side.display())
            }
            Ok(_) => {}
            Err(e) => log::warn!("unreadable sidecar {}: {e}", side.display()),
        }
    }
    Ok(model)
}

fn eval(cfg: &ExperimentConfig, a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.out_dir.clone());
    let model = load_model(&ckpt)?;
    if model.cfg != cfg.network {
        log::warn!("checkpoint network differs from the config; using the checkpoint's");
    }
    let spec = a.attack.as_deref().map(|s| parse_spec(s, cfg.seed, None)).transpose()?;
    let slug = spec.as_ref().map_or("none".to_owned(), AttackSpec::slug);
    if let Some(dir) = &a.dump_graph {
        std::fs::create_dir_all(dir)?;
    }
    let mut images = Vec::new();
    for root in cfg.eval_roots() {
        let root = match &spec {
            Some(s) => ensure_attacked(root, s)?,
            None => root.clone(),
        };
        for s in load_split(&root, a.split)? {
            let out = model.infer_sample(&s, cfg.seed)?;
            if let Some(dir) = &a.dump_graph {
                for (k, adj) in out.adjacency.iter().enumerate() {
                    write_adjacency_csv(&dir.join(format!("{}-level{}.csv", s.id, k + 1)), adj)?;
                }
            }
            images.push(ImageResult::new(&s.id, s.label.is_spliced(), &out.y_v, &s.mask, THRESHOLD)?);
        }
    }
    let report = MetricsReport::from_images(slug.clone(), images, THRESHOLD)?;
    let split = match a.split {
        SplitName::Train => "train",
        SplitName::Test => "test",
    };
    let dir = cfg.out_dir.join("eval").join(format!("{split}-{slug}"));
    write_reports(&dir, std::slice::from_ref(&report))?;
    print_report(&report);
    println!("report in {}", dir.display());
    Ok(())
}

fn print_report(r: &MetricsReport) {
    let auc = r.auc.map_or("n/a".to_owned(), |a| format!("{a:.4}"));
    println!(
        "{:<20} F1 {:.4}  MCC {:.4}  AUC {auc}  Acc {:.4}  ({} images)",
        r.spec,
        r.f1,
        r.mcc,
        r.acc,
        r.images.len()
    );
}

fn sweep(cfg: &ExperimentConfig, a: SweepArgs) -> anyhow::Result<()> {
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.out_dir.clone());
    let model = load_model(&ckpt)?;
    let mut reports = Vec::new();
    for spec in a.family.specs(cfg.seed) {
        let mut samples = Vec::new();
        for root in cfg.eval_roots() {
            samples.extend(load_split(&ensure_attacked(root, &spec)?, SplitName::Test)?);
        }
        let report = evaluate(&model, &samples, cfg.seed, &spec.slug())?;
        print_report(&report);
        reports.push(report);
    }
    let dir = cfg.out_dir.join("sweep").join(a.family.name());
    write_reports(&dir, &reports)?;
    for p in plot_families(&dir.join("plots"), &reports)? {
        println!("plot {}", p.display());
    }
    Ok(())
}

fn plot(cfg: &ExperimentConfig, a: PlotArgs) -> anyhow::Result<()> {
    let reports = read_reports(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let written = plot_families(&cfg.out_dir.join("plots"), &reports)?;
    if written.is_empty() {
        bail!("{} holds no degradation-family results", a.report.display());
    }
    for p in written {
        println!("plot {}", p.display());
    }
    Ok(())
}
