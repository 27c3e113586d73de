//! Taped (differentiable) forward pass used during training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{HeadParams, LayerParams, ModelConfig, ModelError, ModelParams, Task, Variant};
use crate::graph::{Adjacency, RELATIONS};
use crate::numcore::{DenseMatrix, NodeId, Tape};

/// Parameter tensors registered on a tape, mirroring [`ModelParams`].
pub struct TapedModel {
    pub config: ModelConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub n_bundles: usize,
    pub embedding: NodeId,
    pub layers: Vec<TapedLayer>,
    pub heads: Option<TapedHeads>,
    /// All parameter nodes in the same canonical order as `ModelParams::param_refs`.
    pub flat: Vec<NodeId>,
    /// Parallel to `flat`: whether the tensor participates in L2 regularization.
    pub regularize: Vec<bool>,
}

pub enum TapedLayer {
    Relational {
        w_self: NodeId,
        w_rel: Vec<NodeId>,
    },
    Shared {
        w: NodeId,
    },
}

pub struct TapedHeads {
    pub item: TapedHead,
    pub bundle: TapedHead,
}

pub struct TapedHead {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Register every parameter of `params` as a differentiable leaf.
pub fn stage(tape: &mut Tape, params: &ModelParams) -> TapedModel {
    let mut flat = Vec::new();
    let mut regularize = Vec::new();
    let mut reg_param = |tape: &mut Tape, m: &DenseMatrix, reg: bool| {
        let id = tape.param(m.clone());
        flat.push(id);
        regularize.push(reg);
        id
    };
    let embedding = reg_param(tape, &params.embedding, true);
    let layers = params
        .layers
        .iter()
        .map(|layer| match layer {
            LayerParams::Relational { w_self, w_rel } => TapedLayer::Relational {
                w_self: reg_param(tape, w_self, true),
                w_rel: w_rel.iter().map(|w| reg_param(tape, w, true)).collect(),
            },
            LayerParams::Shared { w } => TapedLayer::Shared {
                w: reg_param(tape, w, true),
            },
        })
        .collect();
    let heads = params.heads.as_ref().map(|heads| {
        let mut stage_head = |tape: &mut Tape, h: &HeadParams| TapedHead {
            w1: reg_param(tape, &h.w1, true),
            b1: reg_param(tape, &h.b1, false),
            w2: reg_param(tape, &h.w2, true),
            b2: reg_param(tape, &h.b2, false),
        };
        TapedHeads {
            item: stage_head(tape, &heads.item),
            bundle: stage_head(tape, &heads.bundle),
        }
    });
    TapedModel {
        config: params.config.clone(),
        n_users: params.n_users,
        n_items: params.n_items,
        n_bundles: params.n_bundles,
        embedding,
        layers,
        heads,
        flat,
        regularize,
    }
}

/// Per-layer representation nodes plus their concatenation.
pub struct TapedReps {
    pub per_layer: Vec<NodeId>,
    pub concat: NodeId,
}

/// Run the stacked propagation layers on the tape.
///
/// Relational layers compute `relu(H W_self + Σ_r A_r H W_r)`; shared layers
/// compute `relu(Â H W)`. Feature dropout is applied to each layer's output
/// when a training RNG is supplied.
pub fn forward_propagate(
    tape: &mut Tape,
    model: &TapedModel,
    adj: &Adjacency,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TapedReps, ModelError> {
    if !model.config.variant.propagates() {
        return Err(ModelError::Contract(
            "bpr-mf does not propagate; score it directly on embeddings".into(),
        ));
    }
    let n = model.n_users + model.n_items + model.n_bundles;
    if adj.n_nodes() != n {
        return Err(ModelError::Shape(format!(
            "adjacency over {} nodes, embedding over {}",
            adj.n_nodes(),
            n
        )));
    }
    let mut dropout_rng = dropout_rng;
    let mut h = model.embedding;
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let z = match (layer, adj) {
            (TapedLayer::Shared { w }, Adjacency::Block(block)) => {
                let agg = tape.spmm(block.a_hat().clone(), h).map_err(wrap)?;
                tape.matmul(agg, *w).map_err(wrap)?
            }
            (TapedLayer::Relational { w_self, w_rel }, Adjacency::Relational(rel)) => {
                let mut z = tape.matmul(h, *w_self).map_err(wrap)?;
                for r in RELATIONS {
                    let agg = tape.spmm(rel.relation(r).clone(), h).map_err(wrap)?;
                    let term = tape.matmul(agg, w_rel[r.index()]).map_err(wrap)?;
                    z = tape.add(z, term).map_err(wrap)?;
                }
                z
            }
            _ => {
                return Err(ModelError::Contract(
                    "layer kind does not match adjacency kind".into(),
                ))
            }
        };
        h = tape.relu(z);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            let p = model.config.dropout;
            if p > 0.0 {
                let (rows, cols) = tape.shape(h);
                let keep = 1.0 / (1.0 - p);
                let mask_data = (0..rows * cols)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let mask = DenseMatrix::from_vec(rows, cols, mask_data).expect("finite mask");
                let mask = tape.constant(mask);
                h = tape.hadamard(h, mask).map_err(wrap)?;
            }
        }
        per_layer.push(h);
    }
    let mut concat = per_layer[0];
    for &next in &per_layer[1..] {
        concat = tape.concat_cols(concat, next).map_err(wrap)?;
    }
    Ok(TapedReps { per_layer, concat })
}

fn wrap(e: crate::numcore::NumError) -> ModelError {
    ModelError::Shape(e.to_string())
}

fn target_global(model: &TapedModel, task: Task, t: u32) -> Result<usize, ModelError> {
    match task {
        Task::Item => {
            if (t as usize) < model.n_items {
                Ok(model.n_users + t as usize)
            } else {
                Err(ModelError::Contract(format!(
                    "item index {t} out of {} items",
                    model.n_items
                )))
            }
        }
        Task::Bundle => {
            if (t as usize) < model.n_bundles {
                Ok(model.n_users + model.n_items + t as usize)
            } else {
                Err(ModelError::Contract(format!(
                    "bundle index {t} out of {} bundles",
                    model.n_bundles
                )))
            }
        }
    }
}

/// Score (user, target) pairs on the tape: an nx1 column of preferences.
///
/// Head variants return sigmoid MLP probabilities in (0,1); the bpr-mf
/// variant returns raw embedding dot products.
pub fn score_pairs(
    tape: &mut Tape,
    model: &TapedModel,
    reps: Option<&TapedReps>,
    pairs: &[(u32, u32)],
    task: Task,
) -> Result<NodeId, ModelError> {
    let mut user_rows = Vec::with_capacity(pairs.len());
    let mut target_rows = Vec::with_capacity(pairs.len());
    for &(u, t) in pairs {
        if u as usize >= model.n_users {
            return Err(ModelError::Contract(format!(
                "user index {u} out of {} users",
                model.n_users
            )));
        }
        user_rows.push(u as usize);
        target_rows.push(target_global(model, task, t)?);
    }
    if model.config.variant == Variant::BprMf {
        let hu = tape.row_select(model.embedding, &user_rows).map_err(wrap)?;
        let ht = tape
            .row_select(model.embedding, &target_rows)
            .map_err(wrap)?;
        let prod = tape.hadamard(hu, ht).map_err(wrap)?;
        return Ok(tape.row_sum(prod));
    }
    let reps = reps.ok_or_else(|| {
        ModelError::Contract("head variants require propagated representations".into())
    })?;
    let heads = model
        .heads
        .as_ref()
        .expect("propagating variants carry heads");
    let head = match task {
        Task::Item => &heads.item,
        Task::Bundle => &heads.bundle,
    };
    let hu = tape.row_select(reps.concat, &user_rows).map_err(wrap)?;
    let ht = tape.row_select(reps.concat, &target_rows).map_err(wrap)?;
    let x = tape.concat_cols(hu, ht).map_err(wrap)?;
    let z1 = tape.matmul(x, head.w1).map_err(wrap)?;
    let z1 = tape.add(z1, head.b1).map_err(wrap)?;
    let a1 = tape.relu(z1);
    let logits = tape.matmul(a1, head.w2).map_err(wrap)?;
    let logits = tape.add(logits, head.b2).map_err(wrap)?;
    Ok(tape.sigmoid(logits))
}

/// Σ ‖W‖₂² over every regularized tensor (biases excluded).
pub fn l2_penalty(tape: &mut Tape, model: &TapedModel) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (&id, &reg) in model.flat.iter().zip(&model.regularize) {
        if !reg {
            continue;
        }
        let sq = tape.hadamard(id, id).expect("same shape");
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s).expect("scalars"),
            None => s,
        });
    }
    acc.expect("at least one regularized parameter")
}
