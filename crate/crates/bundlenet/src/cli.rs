//! Command-line surface: generate, train, evaluate, ablate, serve-precompute.
//!
//! All options live in a flat key-value config file; command-line flags
//! override file values, which override the documented defaults. Every key
//! is schema-checked and unknown keys are errors. Commands are fully
//! deterministic given (config, seed, inputs).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{
    self, generate_synthetic, load_dir, save_checkpoint, save_split, DataError, SyntheticSpec,
};
use crate::eval::{self, EvalError, EvalSplit};
use crate::graph::{EdgeSet, EdgeType, TripartiteGraph};
use crate::model::{ModelConfig, ModelError, ModelParams, Variant};
use crate::training::{self, Schedule, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while doing the work; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "bundlenet", version, about = "Tripartite-graph bundle recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset into the output directory.
    Generate(CommonArgs),
    /// Train a model and write checkpoint, split, and report files.
    Train(CommonArgs),
    /// Evaluate a checkpoint against a saved split.
    Evaluate(CommonArgs),
    /// Train the 2x2x2 REL/MTL/MBT toggle grid and report NDCG@5.
    Ablate(CommonArgs),
    /// Precompute per-user top-K bundle rankings from a checkpoint.
    ServePrecompute(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Generate(a)
            | Command::Train(a)
            | Command::Evaluate(a)
            | Command::Ablate(a)
            | Command::ServePrecompute(a) => a,
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed (model init, sampling, splits, generation).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model variant: bundlenet | gcn-tri | gcn-bi | bpr-mf.
    #[arg(long)]
    pub variant: Option<String>,
    /// Mini-batch sampling-deleting-predict (true) or full-batch (false).
    #[arg(long)]
    pub minibatch: Option<bool>,
    /// Task schedule: pretrain | alternating | bundle-only.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Comma-separated K list for ranking metrics, e.g. "5,10".
    #[arg(long)]
    pub k: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory with the three TSV files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path (defaults to <out>/model.bnet).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split path (defaults to <out>/split.json).
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Warm-start training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Fully resolved run options: defaults, then config file, then flags.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    /// Sampled negatives per held-out positive.
    pub negatives: usize,
    /// List length for serve-precompute.
    pub top_k: usize,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            split: None,
            resume: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ks: vec![5],
            negatives: 99,
            top_k: 10,
            synth: SyntheticSpec {
                n_users: 2000,
                n_items: 300,
                n_bundles: 150,
                bundle_size_min: 2,
                bundle_size_max: 4,
                n_themes: 50,
                ui_rate: 0.06,
                ub_rate: 0.02,
                noise_rate: 0.1,
                seed: 0,
            },
        }
    }
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.bnet"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.split
            .clone()
            .unwrap_or_else(|| self.out_dir.join("split.json"))
    }

    fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Apply one `key=value` pair from a config file.
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |what: &str| CliError::Usage(format!("config key {key}: bad {what} {value:?}"));
        macro_rules! num {
            ($what:expr) => {
                value.parse().map_err(|_| bad($what))?
            };
        }
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "split" => self.split = Some(PathBuf::from(value)),
            "resume" => self.resume = Some(PathBuf::from(value)),
            "variant" => {
                self.model.variant =
                    Variant::parse(value).map_err(|e| CliError::Usage(e.to_string()))?
            }
            "embed_dim" => self.model.embed_dim = num!("integer"),
            "layer_count" => self.model.layer_count = num!("integer"),
            "hidden_dim" => self.model.hidden_dim = num!("integer"),
            "head_hidden_dim" => self.model.head_hidden_dim = num!("integer"),
            "head_out_dim" => self.model.head_out_dim = num!("integer"),
            "dropout" => self.model.dropout = num!("float"),
            "learning_rate" => self.train.learning_rate = num!("float"),
            "l2" => self.train.l2 = num!("float"),
            "batch_size" => self.train.batch_size = num!("integer"),
            "schedule" => {
                self.train.schedule =
                    Schedule::parse(value).map_err(|e| CliError::Usage(e.to_string()))?
            }
            "minibatch" => self.train.minibatch = num!("boolean"),
            "max_epochs" => self.train.max_epochs = num!("integer"),
            "pretrain_epochs" => self.train.pretrain_epochs = Some(num!("integer")),
            "patience" => self.train.patience = num!("integer"),
            "seed" => self.set_seed(num!("integer")),
            "k" => self.ks = parse_k_list(value)?,
            "negatives" => self.negatives = num!("integer"),
            "top_k" => self.top_k = num!("integer"),
            "n_users" => self.synth.n_users = num!("integer"),
            "n_items" => self.synth.n_items = num!("integer"),
            "n_bundles" => self.synth.n_bundles = num!("integer"),
            "bundle_size_min" => self.synth.bundle_size_min = num!("integer"),
            "bundle_size_max" => self.synth.bundle_size_max = num!("integer"),
            "n_themes" => self.synth.n_themes = num!("integer"),
            "ui_rate" => self.synth.ui_rate = num!("float"),
            "ub_rate" => self.synth.ub_rate = num!("float"),
            "noise_rate" => self.synth.noise_rate = num!("float"),
            other => {
                return Err(CliError::Usage(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Defaults <- config file <- command-line flags.
    pub fn resolve(args: &CommonArgs) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        idx + 1
                    ))
                })?;
                cfg.apply_kv(k.trim(), v.trim())?;
            }
        }
        if let Some(seed) = args.seed {
            cfg.set_seed(seed);
        }
        if let Some(v) = &args.variant {
            cfg.model.variant = Variant::parse(v).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(m) = args.minibatch {
            cfg.train.minibatch = m;
        }
        if let Some(s) = &args.schedule {
            cfg.train.schedule =
                Schedule::parse(s).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(k) = &args.k {
            cfg.ks = parse_k_list(k)?;
        }
        if let Some(out) = &args.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &args.data {
            cfg.data_dir = data.clone();
        }
        if let Some(p) = &args.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(p) = &args.split {
            cfg.split = Some(p.clone());
        }
        if let Some(p) = &args.resume {
            cfg.resume = Some(p.clone());
        }
        cfg.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if cfg.ks.is_empty() {
            return Err(CliError::Usage("k list must be non-empty".into()));
        }
        if cfg.negatives == 0 || cfg.top_k == 0 {
            return Err(CliError::Usage("negatives and top_k must be >= 1".into()));
        }
        Ok(cfg)
    }
}

fn parse_k_list(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| CliError::Usage(format!("bad K value {p:?}")))
        })
        .collect()
}

/// Run one parsed invocation, writing artifacts and returning printed output.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = RunConfig::resolve(cli.command.args())?;
    match &cli.command {
        Command::Generate(_) => cmd_generate(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::ServePrecompute(_) => cmd_serve_precompute(&cfg),
    }
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// Load the dataset directory, or fail with usage text when it is missing.
fn load_dataset(cfg: &RunConfig) -> Result<(data::DatasetBundle, String), CliError> {
    if !cfg.data_dir.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} not found\n\
             usage: provide --data DIR (or data_dir= in the config file) pointing at \
             user_bundle.tsv, user_item.tsv, bundle_item.tsv",
            cfg.data_dir.display()
        )));
    }
    let (dataset, warnings) = load_dir(&cfg.data_dir)?;
    let mut log = String::new();
    for w in warnings {
        writeln!(log, "warning: {w}").unwrap();
    }
    Ok((dataset, log))
}

fn build_graph_logged(
    dataset: &data::DatasetBundle,
    log: &mut String,
) -> Result<TripartiteGraph, CliError> {
    let (g, warnings) = dataset
        .to_graph()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if !warnings.small_bundles.is_empty() {
        writeln!(
            log,
            "warning: {} bundle(s) with fewer than 2 items",
            warnings.small_bundles.len()
        )
        .unwrap();
    }
    Ok(g)
}

fn check_checkpoint_layout(params: &ModelParams, g: &TripartiteGraph) -> Result<(), CliError> {
    if params.n_users != g.n_users()
        || params.n_items != g.n_items()
        || params.n_bundles != g.n_bundles()
    {
        return Err(CliError::Runtime(format!(
            "checkpoint node layout ({}, {}, {}) does not match dataset ({}, {}, {})",
            params.n_users,
            params.n_items,
            params.n_bundles,
            g.n_users(),
            g.n_items(),
            g.n_bundles()
        )));
    }
    Ok(())
}

/// Seed for the held-out split RNG, offset so it is decoupled from the
/// model-init/sampling streams inside fit().
fn split_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000))
}

#[derive(Serialize)]
struct GenerateSummary {
    n_users: usize,
    n_items: usize,
    n_bundles: usize,
    edges_user_bundle: usize,
    edges_user_item: usize,
    edges_bundle_item: usize,
    seed: u64,
    noise_rate: f64,
}

fn cmd_generate(cfg: &RunConfig) -> Result<String, CliError> {
    let dataset = generate_synthetic(&cfg.synth)?;
    ensure_out(&cfg.out_dir)?;
    dataset.write_tsv(&cfg.out_dir)?;
    let table = dataset.stats_table();
    write_file(&cfg.out_dir.join("stats.txt"), table.as_bytes())?;
    write_json(
        &cfg.out_dir.join("stats.json"),
        &GenerateSummary {
            n_users: dataset.n_users,
            n_items: dataset.n_items,
            n_bundles: dataset.n_bundles,
            edges_user_bundle: dataset.edges_ub.len(),
            edges_user_item: dataset.edges_ui.len(),
            edges_bundle_item: dataset.edges_bi.len(),
            seed: cfg.synth.seed,
            noise_rate: cfg.synth.noise_rate,
        },
    )?;
    Ok(format!(
        "{table}wrote dataset to {}\n",
        cfg.out_dir.display()
    ))
}

fn train_once(
    cfg: &RunConfig,
    g: &TripartiteGraph,
) -> Result<(ModelParams, TrainReport, EvalSplit, TripartiteGraph), CliError> {
    let (split, train_graph) = eval::make_split(g, cfg.negatives, &mut split_rng(cfg.train.seed))?;
    let (params, report) = match &cfg.resume {
        Some(path) => {
            let init = data::load_checkpoint(path)?;
            training::fit_resume(&train_graph, init, &cfg.train, Some(&split))?
        }
        None => training::fit(&train_graph, &cfg.model, &cfg.train, Some(&split))?,
    };
    Ok((params, report, split, train_graph))
}

fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let (dataset, mut log) = load_dataset(cfg)?;
    let g = build_graph_logged(&dataset, &mut log)?;
    let (params, report, split, _) = train_once(cfg, &g)?;
    ensure_out(&cfg.out_dir)?;
    save_checkpoint(&params, &cfg.checkpoint_path())?;
    save_split(&split, &cfg.split_path())?;
    write_json(&cfg.out_dir.join("train_report.json"), &report)?;
    log.push_str(&report.to_log_lines());
    writeln!(
        log,
        "stopped after epoch {}; best val-ndcg@5 {}",
        report.stopping_epoch,
        report
            .best_val_ndcg5
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into())
    )
    .unwrap();
    writeln!(log, "wrote {}", cfg.checkpoint_path().display()).unwrap();
    Ok(log)
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<String, CliError> {
    let (dataset, mut log) = load_dataset(cfg)?;
    let g = build_graph_logged(&dataset, &mut log)?;
    let params = data::load_checkpoint(&cfg.checkpoint_path())?;
    check_checkpoint_layout(&params, &g)?;
    let split = data::load_split(&cfg.split_path())?;
    // Reconstruct the training graph: held-out edges must not propagate.
    let mut held = EdgeSet::default();
    for h in &split.heldout {
        held.ub.insert((h.user, h.bundle));
    }
    let train_graph = g
        .without_edges(&held)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = eval::evaluate(&params, &split, &train_graph, &cfg.ks)?;
    ensure_out(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("eval_report.json"), &report)?;
    log.push_str(&report.to_table());
    Ok(log)
}

#[derive(Serialize)]
struct AblationRow {
    relational: bool,
    multi_task: bool,
    minibatch: bool,
    variant: String,
    schedule: String,
    ndcg5: f64,
}

fn cmd_ablate(cfg: &RunConfig) -> Result<String, CliError> {
    let (dataset, mut log) = load_dataset(cfg)?;
    let g = build_graph_logged(&dataset, &mut log)?;
    let mut rows = Vec::new();
    for rel in [true, false] {
        for mtl in [true, false] {
            for mbt in [true, false] {
                let mut run = cfg.clone();
                run.model.variant = if rel { Variant::BundleNet } else { Variant::GcnTri };
                run.train.schedule = if mtl {
                    Schedule::PretrainFinetune
                } else {
                    Schedule::BundleOnly
                };
                run.train.minibatch = mbt;
                let (params, _, split, train_graph) = train_once(&run, &g)?;
                let report = eval::evaluate(&params, &split, &train_graph, &[5])?;
                rows.push(AblationRow {
                    relational: rel,
                    multi_task: mtl,
                    minibatch: mbt,
                    variant: run.model.variant.as_str().into(),
                    schedule: run.train.schedule.as_str().into(),
                    ndcg5: report.get("ndcg", 5).expect("ndcg@5 present"),
                });
            }
        }
    }
    ensure_out(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("ablation.json"), &rows)?;
    writeln!(log, "{:<6}{:<6}{:<6}{:>10}", "REL", "MTL", "MBT", "NDCG@5").unwrap();
    let onoff = |b: bool| if b { "on" } else { "off" };
    for r in &rows {
        writeln!(
            log,
            "{:<6}{:<6}{:<6}{:>10.4}",
            onoff(r.relational),
            onoff(r.multi_task),
            onoff(r.minibatch),
            r.ndcg5
        )
        .unwrap();
    }
    Ok(log)
}

fn cmd_serve_precompute(cfg: &RunConfig) -> Result<String, CliError> {
    let (dataset, mut log) = load_dataset(cfg)?;
    let g = build_graph_logged(&dataset, &mut log)?;
    let params = data::load_checkpoint(&cfg.checkpoint_path())?;
    check_checkpoint_layout(&params, &g)?;
    let reps = eval::representations(&params, &g)?;

    let mut bundle_has_interaction = vec![false; g.n_bundles()];
    for &(_, b) in g.edges(EdgeType::UserBundle) {
        bundle_has_interaction[b as usize] = true;
    }
    let bundle_items: Vec<Vec<u32>> = (0..g.n_bundles() as u32).map(|b| g.bundle_items(b)).collect();
    let candidates: Vec<u32> = (0..g.n_bundles() as u32).collect();

    let mut out = String::new();
    for u in 0..g.n_users() as u32 {
        let scores = eval::score_candidates(
            &params,
            reps.as_ref(),
            u,
            &candidates,
            &bundle_items,
            &bundle_has_interaction,
        )?;
        let mut order: Vec<u32> = candidates.clone();
        // Descending score; ties broken by ascending bundle id.
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        for &b in order.iter().take(cfg.top_k) {
            writeln!(
                out,
                "{}\t{}\t{:?}",
                dataset.user_ids[u as usize],
                dataset.bundle_ids[b as usize],
                scores[b as usize]
            )
            .unwrap();
        }
    }
    ensure_out(&cfg.out_dir)?;
    let path = cfg.out_dir.join("topk.tsv");
    write_file(&path, out.as_bytes())?;
    writeln!(
        log,
        "wrote top-{} rankings for {} users to {}",
        cfg.top_k,
        g.n_users(),
        path.display()
    )
    .unwrap();
    Ok(log)
}
