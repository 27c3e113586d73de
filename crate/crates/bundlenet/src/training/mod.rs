//! Triplet sampling, BPR loss, the multi-task schedule, and the
//! sampling-deleting-predict mini-batch loop.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalSplit};
use crate::graph::{
    build_adjacency, Adjacency, AdjacencyKind, EdgeSet, EdgeType, TripartiteGraph,
};
use crate::model::forward::{self, TapedModel};
use crate::model::{ModelConfig, ModelError, ModelParams, Task, Variant};
use crate::numcore::{adam_step, AdamState, DenseMatrix, NodeId, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("graph error: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("numeric error: {0}")]
    Num(#[from] crate::numcore::NumError),
    #[error("eval error: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Task scheduling across the two BPR losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// Item-task epochs to convergence, then bundle-task epochs.
    PretrainFinetune,
    /// One epoch of each task in turn.
    Alternating,
    /// Bundle-task triplets only (the MTL-off ablation).
    BundleOnly,
}

impl Schedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Schedule::PretrainFinetune => "pretrain",
            Schedule::Alternating => "alternating",
            Schedule::BundleOnly => "bundle-only",
        }
    }

    pub fn parse(s: &str) -> Result<Schedule, TrainError> {
        match s {
            "pretrain" => Ok(Schedule::PretrainFinetune),
            "alternating" => Ok(Schedule::Alternating),
            "bundle-only" => Ok(Schedule::BundleOnly),
            other => Err(TrainError::Contract(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 coefficient λ over embeddings and weights (biases excluded).
    pub l2: f64,
    /// Edge batch size for triplet sampling.
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Mini-batch sampling-deleting-predict when true; leaky full-batch when false.
    pub minibatch: bool,
    pub max_epochs: usize,
    /// Epoch cap for the item-task pretraining phase of the
    /// pretrain-finetune schedule; `None` falls back to `max_epochs`. The
    /// item relation usually has far more edges per epoch than the bundle
    /// relation, so its head converges in fewer passes.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2: 1e-5,
            batch_size: 1024,
            schedule: Schedule::PretrainFinetune,
            minibatch: true,
            max_epochs: 100,
            pretrain_epochs: None,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 || self.l2 < 0.0 {
            return Err(TrainError::Contract(
                "learning rate must be positive and l2 non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::Contract(
                "batch_size, max_epochs and patience must be >= 1".into(),
            ));
        }
        if self.pretrain_epochs == Some(0) {
            return Err(TrainError::Contract(
                "pretrain_epochs must be >= 1 when set".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled (user, positive, negative) triplets of one task plus the positive
/// edges to delete before propagation.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub task: Task,
    pub triplets: Vec<(u32, u32, u32)>,
    pub deletable_edges: EdgeSet,
}

const NEGATIVE_RETRIES: usize = 64;
const POSITIVE_RETRIES: usize = 16;

/// Reusable sampler with per-user interaction sets prebuilt.
pub struct TripletSampler<'g> {
    g: &'g TripartiteGraph,
    user_items: Vec<Vec<u32>>,
    user_bundles: Vec<Vec<u32>>,
}

impl<'g> TripletSampler<'g> {
    pub fn new(g: &'g TripartiteGraph) -> Self {
        let mut user_items = vec![Vec::new(); g.n_users()];
        let mut user_bundles = vec![Vec::new(); g.n_users()];
        for &(u, i) in g.edges(EdgeType::UserItem) {
            user_items[u as usize].push(i);
        }
        for &(u, b) in g.edges(EdgeType::UserBundle) {
            user_bundles[u as usize].push(b);
        }
        TripletSampler {
            g,
            user_items,
            user_bundles,
        }
    }

    fn interactions(&self, task: Task, u: u32) -> &[u32] {
        match task {
            Task::Item => &self.user_items[u as usize],
            Task::Bundle => &self.user_bundles[u as usize],
        }
    }

    fn candidate_count(&self, task: Task) -> usize {
        match task {
            Task::Item => self.g.n_items(),
            Task::Bundle => self.g.n_bundles(),
        }
    }

    /// Positives uniform over the task's edges; negatives rejection-sampled
    /// from that user's non-interactions. A user interacting with every
    /// candidate triggers a bounded resample of a different positive edge,
    /// then a skip.
    pub fn sample(
        &self,
        task: Task,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TripletBatch, TrainError> {
        let etype = match task {
            Task::Item => EdgeType::UserItem,
            Task::Bundle => EdgeType::UserBundle,
        };
        let edges = self.g.edges(etype);
        if edges.is_empty() {
            return Err(TrainError::Contract(format!(
                "no {etype:?} edges to sample from"
            )));
        }
        let n_candidates = self.candidate_count(task) as u32;
        let mut triplets = Vec::with_capacity(batch_size);
        let mut deletable = EdgeSet::default();
        for _ in 0..batch_size {
            let mut found = None;
            for _ in 0..POSITIVE_RETRIES {
                let (u, pos) = edges[rng.gen_range(0..edges.len())];
                let interacted = self.interactions(task, u);
                if interacted.len() as u32 >= n_candidates {
                    continue; // user saturates the candidate set
                }
                for _ in 0..NEGATIVE_RETRIES {
                    let neg = rng.gen_range(0..n_candidates);
                    if !interacted.contains(&neg) {
                        found = Some((u, pos, neg));
                        break;
                    }
                }
                if found.is_some() {
                    break;
                }
            }
            if let Some((u, pos, neg)) = found {
                triplets.push((u, pos, neg));
                deletable.insert(etype, (u, pos));
            }
        }
        if triplets.is_empty() {
            return Err(TrainError::Contract(
                "could not sample any triplet (all users saturate the candidate set)".into(),
            ));
        }
        Ok(TripletBatch {
            task,
            triplets,
            deletable_edges: deletable,
        })
    }
}

/// One-shot wrapper over [`TripletSampler`].
pub fn sample_triplets(
    g: &TripartiteGraph,
    task: Task,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TripletBatch, TrainError> {
    TripletSampler::new(g).sample(task, batch_size, rng)
}

/// Mean over triplets of −ln σ(p̂_pos − p̂_neg), plus λ‖Θ‖₂².
pub fn bpr_loss(
    tape: &mut Tape,
    scores_pos: NodeId,
    scores_neg: NodeId,
    model: &TapedModel,
    l2: f64,
) -> Result<NodeId, TrainError> {
    let n = tape.shape(scores_pos).0;
    if n == 0 {
        return Err(TrainError::Contract("empty batch in bpr_loss".into()));
    }
    if tape.shape(scores_pos) != tape.shape(scores_neg) {
        return Err(TrainError::Contract(format!(
            "score lists of different lengths: {:?} vs {:?}",
            tape.shape(scores_pos),
            tape.shape(scores_neg)
        )));
    }
    let neg = tape.scale(scores_neg, -1.0);
    let diff = tape.add(scores_pos, neg)?;
    let ls = tape.log_sigmoid(diff);
    let total = tape.sum(ls);
    let data = tape.scale(total, -1.0 / n as f64);
    if l2 == 0.0 {
        return Ok(data);
    }
    let penalty = forward::l2_penalty(tape, model);
    let reg = tape.scale(penalty, l2);
    Ok(tape.add(data, reg)?)
}

/// The propagation graph for a variant: gcn-bi drops item edges.
pub fn propagation_graph(g: &TripartiteGraph, variant: Variant) -> TripartiteGraph {
    if variant == Variant::GcnBi {
        g.user_bundle_only()
    } else {
        g.clone()
    }
}

pub fn adjacency_kind(variant: Variant) -> AdjacencyKind {
    match variant {
        Variant::BundleNet => AdjacencyKind::Relational,
        _ => AdjacencyKind::Block,
    }
}

/// Taped loss and gradients for one batch against a fixed adjacency.
/// No dropout; used by the gradient spot-check and tests.
pub fn batch_loss(
    params: &ModelParams,
    adj: Option<&Adjacency>,
    batch: &TripletBatch,
    l2: f64,
) -> Result<(f64, Vec<DenseMatrix>), TrainError> {
    let mut tape = Tape::new();
    let model = forward::stage(&mut tape, params);
    let (loss, flat) = taped_batch_loss(&mut tape, &model, adj, batch, l2, None)?;
    let grads = tape.backward(loss)?;
    let flat_grads = flat
        .iter()
        .map(|&id| grads.get(id, tape.shape(id)))
        .collect();
    Ok((tape.scalar_value(loss)?, flat_grads))
}

fn taped_batch_loss(
    tape: &mut Tape,
    model: &TapedModel,
    adj: Option<&Adjacency>,
    batch: &TripletBatch,
    l2: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, Vec<NodeId>), TrainError> {
    let reps = match adj {
        Some(adj) => Some(forward::forward_propagate(tape, model, adj, dropout_rng)?),
        None => None,
    };
    let pos_pairs: Vec<(u32, u32)> = batch.triplets.iter().map(|&(u, p, _)| (u, p)).collect();
    let neg_pairs: Vec<(u32, u32)> = batch.triplets.iter().map(|&(u, _, n)| (u, n)).collect();
    let s_pos = forward::score_pairs(tape, model, reps.as_ref(), &pos_pairs, batch.task)?;
    let s_neg = forward::score_pairs(tape, model, reps.as_ref(), &neg_pairs, batch.task)?;
    let loss = bpr_loss(tape, s_pos, s_neg, model, l2)?;
    Ok((loss, model.flat.clone()))
}

/// One gradient step. Returns the batch loss.
fn gradient_step(
    params: &mut ModelParams,
    adj: Option<&Adjacency>,
    batch: &TripletBatch,
    l2: f64,
    adam: &mut AdamState,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let model = forward::stage(&mut tape, params);
    let (loss, flat_ids) = taped_batch_loss(&mut tape, &model, adj, batch, l2, dropout_rng)?;
    let grads = tape.backward(loss)?;
    let flat_grads: Vec<DenseMatrix> = flat_ids
        .iter()
        .map(|&id| grads.get(id, tape.shape(id)))
        .collect();
    let mut flat_params = params.to_flat();
    adam_step(&mut flat_params, &flat_grads, adam)?;
    params.set_from_flat(&flat_params)?;
    tape.scalar_value(loss).map_err(Into::into)
}

fn task_edge_count(g: &TripartiteGraph, task: Task) -> usize {
    match task {
        Task::Item => g.edges(EdgeType::UserItem).len(),
        Task::Bundle => g.edges(EdgeType::UserBundle).len(),
    }
}

/// Steps per mini-batch epoch: ⌈|edges_task| / batch_size⌉, at least 1.
pub fn epoch_steps(g: &TripartiteGraph, task: Task, batch_size: usize) -> usize {
    task_edge_count(g, task).div_ceil(batch_size).max(1)
}

/// Restrict a deletable edge set to edges present in the propagation graph
/// (gcn-bi's projection drops item edges, which therefore need no deletion).
fn present_edges(g: &TripartiteGraph, deleted: &EdgeSet) -> EdgeSet {
    let mut out = EdgeSet::default();
    for (etype, set) in [
        (EdgeType::UserBundle, &deleted.ub),
        (EdgeType::UserItem, &deleted.ui),
        (EdgeType::BundleItem, &deleted.bi),
    ] {
        for &pair in set {
            if g.has_edge(etype, pair) {
                out.insert(etype, pair);
            }
        }
    }
    out
}

/// Sampling-deleting-predict epoch: ⌈|edges|/batch⌉ steps, each deleting its
/// batch's positive edges from the propagation graph before the forward pass.
pub fn train_epoch_minibatch(
    params: &mut ModelParams,
    g: &TripartiteGraph,
    task: Task,
    config: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let sampler = TripletSampler::new(g);
    let prop = propagation_graph(g, params.config.variant);
    let kind = adjacency_kind(params.config.variant);
    let steps = epoch_steps(g, task, config.batch_size);
    let mut total = 0.0;
    for _ in 0..steps {
        let batch = sampler.sample(task, config.batch_size, rng)?;
        let adj = if params.config.variant.propagates() {
            let deletable = present_edges(&prop, &batch.deletable_edges);
            let view = crate::graph::delete_edges(&prop, kind, &deletable)?;
            Some(view.adjacency)
        } else {
            None
        };
        let dr = if params.config.dropout > 0.0 {
            Some(&mut *dropout_rng)
        } else {
            None
        };
        total += gradient_step(params, adj.as_ref(), &batch, config.l2, adam, dr)?;
    }
    Ok(total / steps as f64)
}

/// Vanilla full-batch epoch: one step predicting every training edge of the
/// task with the full (undeleted) graph — deliberately reproduces the leaky
/// baseline regime.
pub fn train_epoch_fullbatch(
    params: &mut ModelParams,
    g: &TripartiteGraph,
    task: Task,
    config: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let etype = match task {
        Task::Item => EdgeType::UserItem,
        Task::Bundle => EdgeType::UserBundle,
    };
    let edges = g.edges(etype);
    if edges.is_empty() {
        return Err(TrainError::Contract(format!("no {etype:?} edges to train on")));
    }
    let sampler = TripletSampler::new(g);
    let n_candidates = sampler.candidate_count(task) as u32;
    let mut triplets = Vec::with_capacity(edges.len());
    for &(u, pos) in edges {
        let interacted = sampler.interactions(task, u);
        if interacted.len() as u32 >= n_candidates {
            continue;
        }
        for _ in 0..NEGATIVE_RETRIES {
            let neg = rng.gen_range(0..n_candidates);
            if !interacted.contains(&neg) {
                triplets.push((u, pos, neg));
                break;
            }
        }
    }
    if triplets.is_empty() {
        return Err(TrainError::Contract("no trainable edges".into()));
    }
    let batch = TripletBatch {
        task,
        triplets,
        deletable_edges: EdgeSet::default(),
    };
    let adj = if params.config.variant.propagates() {
        let prop = propagation_graph(g, params.config.variant);
        Some(build_adjacency(&prop, adjacency_kind(params.config.variant)))
    } else {
        None
    };
    let dr = if params.config.dropout > 0.0 {
        Some(dropout_rng)
    } else {
        None
    };
    gradient_step(params, adj.as_ref(), &batch, config.l2, adam, dr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    pub val_ndcg5: Option<f64>,
}

/// Per-epoch trajectory of one fit. Wall-clock is kept out of the
/// serialized form so identical runs produce identical report bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopping_epoch: usize,
    pub best_val_ndcg5: Option<f64>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// One epoch per line: epoch, task, loss, val-NDCG@5.
    pub fn to_log_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            match e.val_ndcg5 {
                Some(v) => out.push_str(&format!(
                    "epoch {:>4}  task {:<6}  loss {:.6}  val-ndcg@5 {:.4}\n",
                    e.epoch, e.task, e.loss, v
                )),
                None => out.push_str(&format!(
                    "epoch {:>4}  task {:<6}  loss {:.6}\n",
                    e.epoch, e.task, e.loss
                )),
            }
        }
        out
    }
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Item => "item",
        Task::Bundle => "bundle",
    }
}

/// Run the configured schedule with early stopping on validation NDCG@5
/// (bundle task), returning the best-validation parameters.
///
/// Without a validation split, runs the fixed `max_epochs` per phase and
/// returns the final parameters (a warning is recorded in the report task
/// stream implicitly by the absent val column).
pub fn fit(
    g: &TripartiteGraph,
    model_config: &ModelConfig,
    config: &TrainConfig,
    validation: Option<&EvalSplit>,
) -> Result<(ModelParams, TrainReport), TrainError> {
    let params = ModelParams::init(
        model_config,
        g.n_users(),
        g.n_items(),
        g.n_bundles(),
        config.seed,
    )?;
    fit_resume(g, params, config, validation)
}

/// As [`fit`], but starting from existing parameters (fine-tune resume).
pub fn fit_resume(
    g: &TripartiteGraph,
    init: ModelParams,
    config: &TrainConfig,
    validation: Option<&EvalSplit>,
) -> Result<(ModelParams, TrainReport), TrainError> {
    config.validate()?;
    if init.n_users != g.n_users() || init.n_items != g.n_items() || init.n_bundles != g.n_bundles()
    {
        return Err(TrainError::Contract(format!(
            "checkpoint node layout ({}, {}, {}) does not match graph ({}, {}, {})",
            init.n_users,
            init.n_items,
            init.n_bundles,
            g.n_users(),
            g.n_items(),
            g.n_bundles()
        )));
    }
    let start = std::time::Instant::now();
    let mut params = init;
    let mut adam = AdamState::new(&params.to_flat(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let mut report = TrainReport {
        epochs: Vec::new(),
        stopping_epoch: 0,
        best_val_ndcg5: None,
        wall_clock_secs: 0.0,
    };
    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut epoch_no = 0usize;

    let mtl = config.schedule != Schedule::BundleOnly && task_edge_count(g, Task::Item) > 0;
    let pretrain_epochs = config.pretrain_epochs.unwrap_or(config.max_epochs);
    let phases: Vec<(Vec<Task>, usize)> = match config.schedule {
        Schedule::PretrainFinetune if mtl => {
            vec![
                (vec![Task::Item], pretrain_epochs),
                (vec![Task::Bundle], config.max_epochs),
            ]
        }
        Schedule::Alternating if mtl => vec![(vec![Task::Item, Task::Bundle], config.max_epochs)],
        _ => vec![(vec![Task::Bundle], config.max_epochs)],
    };

    for (phase_tasks, phase_epochs) in phases {
        let mut phase_best = f64::NEG_INFINITY;
        let mut since_improvement = 0usize;
        for _ in 0..phase_epochs {
            let mut phase_loss = 0.0;
            for &task in &phase_tasks {
                let loss = if config.minibatch {
                    train_epoch_minibatch(
                        &mut params,
                        g,
                        task,
                        config,
                        &mut adam,
                        &mut rng,
                        &mut dropout_rng,
                    )?
                } else {
                    train_epoch_fullbatch(
                        &mut params,
                        g,
                        task,
                        config,
                        &mut adam,
                        &mut rng,
                        &mut dropout_rng,
                    )?
                };
                phase_loss = loss;
                epoch_no += 1;
                let val = match validation {
                    Some(split) => Some(
                        eval::evaluate(&params, split, g, &[5])?
                            .get("ndcg", 5)
                            .expect("ndcg@5 present"),
                    ),
                    None => None,
                };
                report.epochs.push(EpochRecord {
                    epoch: epoch_no,
                    task: task_name(task).into(),
                    loss,
                    val_ndcg5: val,
                });
                if let Some(v) = val {
                    if v > best_val {
                        best_val = v;
                        best_params = params.clone();
                    }
                }
            }
            let _ = phase_loss;
            match validation {
                Some(_) => {
                    let v = report.epochs.last().and_then(|e| e.val_ndcg5).unwrap();
                    if v > phase_best {
                        phase_best = v;
                        since_improvement = 0;
                    } else {
                        since_improvement += 1;
                        if since_improvement >= config.patience {
                            break;
                        }
                    }
                }
                None => {}
            }
        }
        if validation.is_some() {
            // fine-tuning resumes from the best pretrained state
            params = best_params.clone();
        }
    }

    report.stopping_epoch = epoch_no;
    report.best_val_ndcg5 = if best_val.is_finite() {
        Some(best_val)
    } else {
        None
    };
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let final_params = if validation.is_some() {
        best_params
    } else {
        params
    };
    Ok((final_params, report))
}

/// Central finite-difference spot check of `batch_loss` gradients on
/// `n_checks` randomly chosen scalar parameters. Returns the max relative
/// error observed.
pub fn finite_difference_spot_check(
    params: &ModelParams,
    adj: Option<&Adjacency>,
    batch: &TripletBatch,
    l2: f64,
    n_checks: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let (_, grads) = batch_loss(params, adj, batch, l2)?;
    let flat = params.to_flat();
    let mut max_rel = 0.0f64;
    for _ in 0..n_checks {
        let pi = rng.gen_range(0..flat.len());
        let ei = rng.gen_range(0..flat[pi].data().len());
        let mut perturbed = params.clone();
        let bump = |delta: f64, perturbed: &mut ModelParams| -> Result<f64, TrainError> {
            let mut f = flat.clone();
            f[pi].data_mut()[ei] += delta;
            perturbed.set_from_flat(&f)?;
            Ok(batch_loss(perturbed, adj, batch, l2)?.0)
        };
        let up = bump(h, &mut perturbed)?;
        let down = bump(-h, &mut perturbed)?;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[pi].data()[ei];
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(max_rel)
}
