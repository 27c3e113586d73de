//! Tape-free forward pass for evaluation and serving.
//!
//! Mirrors the taped path through the same dense/sparse kernels, without
//! recording intermediates. Dropout is never applied here.

use super::{LayerParams, ModelError, ModelParams, NodeRepresentations, Task, Variant};
use crate::graph::{Adjacency, RELATIONS};
use crate::numcore::{dense, sparse};

fn wrap(e: crate::numcore::NumError) -> ModelError {
    ModelError::Shape(e.to_string())
}

/// Deterministic propagation over immutable params: pure in (params, adj).
pub fn propagate(params: &ModelParams, adj: &Adjacency) -> Result<NodeRepresentations, ModelError> {
    if !params.config.variant.propagates() {
        return Err(ModelError::Contract(
            "bpr-mf does not propagate; score it directly on embeddings".into(),
        ));
    }
    if adj.n_nodes() != params.n_nodes() {
        return Err(ModelError::Shape(format!(
            "adjacency over {} nodes, embedding over {}",
            adj.n_nodes(),
            params.n_nodes()
        )));
    }
    let mut h = params.embedding.clone();
    let mut per_layer = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let z = match (layer, adj) {
            (LayerParams::Shared { w }, Adjacency::Block(block)) => {
                let agg = sparse::spmm(block.a_hat(), &h).map_err(wrap)?;
                dense::matmul(&agg, w).map_err(wrap)?
            }
            (LayerParams::Relational { w_self, w_rel }, Adjacency::Relational(rel)) => {
                let mut z = dense::matmul(&h, w_self).map_err(wrap)?;
                for r in RELATIONS {
                    let agg = sparse::spmm(rel.relation(r), &h).map_err(wrap)?;
                    let term = dense::matmul(&agg, &w_rel[r.index()]).map_err(wrap)?;
                    z = dense::add(&z, &term).map_err(wrap)?;
                }
                z
            }
            _ => {
                return Err(ModelError::Contract(
                    "layer kind does not match adjacency kind".into(),
                ))
            }
        };
        h = dense::relu(&z);
        per_layer.push(h.clone());
    }
    let mut concat = per_layer[0].clone();
    for next in &per_layer[1..] {
        concat = dense::concat_cols(&concat, next).map_err(wrap)?;
    }
    Ok(NodeRepresentations { per_layer, concat })
}

fn target_global(params: &ModelParams, task: Task, t: u32) -> Result<usize, ModelError> {
    match task {
        Task::Item if (t as usize) < params.n_items => Ok(params.item_global(t)),
        Task::Bundle if (t as usize) < params.n_bundles => Ok(params.bundle_global(t)),
        Task::Item => Err(ModelError::Lookup(format!(
            "item {t} out of {}",
            params.n_items
        ))),
        Task::Bundle => Err(ModelError::Lookup(format!(
            "bundle {t} out of {}",
            params.n_bundles
        ))),
    }
}

/// Score a batch of (user, target) pairs. Head variants return sigmoid MLP
/// probabilities; bpr-mf returns embedding dot products (reps may be None).
pub fn score_pairs(
    params: &ModelParams,
    reps: Option<&NodeRepresentations>,
    pairs: &[(u32, u32)],
    task: Task,
) -> Result<Vec<f64>, ModelError> {
    let mut user_rows = Vec::with_capacity(pairs.len());
    let mut target_rows = Vec::with_capacity(pairs.len());
    for &(u, t) in pairs {
        if u as usize >= params.n_users {
            return Err(ModelError::Lookup(format!(
                "user {u} out of {}",
                params.n_users
            )));
        }
        user_rows.push(u as usize);
        target_rows.push(target_global(params, task, t)?);
    }
    if params.config.variant == Variant::BprMf {
        let e = &params.embedding;
        return Ok(user_rows
            .iter()
            .zip(&target_rows)
            .map(|(&ur, &tr)| {
                e.row(ur)
                    .iter()
                    .zip(e.row(tr))
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect());
    }
    let reps = reps.ok_or_else(|| {
        ModelError::Contract("head variants require propagated representations".into())
    })?;
    let heads = params.heads.as_ref().expect("propagating variants carry heads");
    let head = match task {
        Task::Item => &heads.item,
        Task::Bundle => &heads.bundle,
    };
    let hu = dense::row_select(&reps.concat, &user_rows).map_err(wrap)?;
    let ht = dense::row_select(&reps.concat, &target_rows).map_err(wrap)?;
    let x = dense::concat_cols(&hu, &ht).map_err(wrap)?;
    let z1 = dense::matmul(&x, &head.w1).map_err(wrap)?;
    let z1 = dense::add(&z1, &head.b1).map_err(wrap)?;
    let a1 = dense::relu(&z1);
    let logits = dense::matmul(&a1, &head.w2).map_err(wrap)?;
    let logits = dense::add(&logits, &head.b2).map_err(wrap)?;
    Ok(dense::sigmoid(&logits).data().to_vec())
}

/// Baseline matrix-factorization score: e_u · e_b.
pub fn bpr_mf_score(params: &ModelParams, user: u32, bundle: u32) -> Result<f64, ModelError> {
    if user as usize >= params.n_users {
        return Err(ModelError::Lookup(format!("user {user}")));
    }
    if bundle as usize >= params.n_bundles {
        return Err(ModelError::Lookup(format!("bundle {bundle}")));
    }
    let e = &params.embedding;
    Ok(e.row(user as usize)
        .iter()
        .zip(e.row(params.bundle_global(bundle)))
        .map(|(a, b)| a * b)
        .sum())
}

/// Final preference: p̂_ub + mean over bundle items of p̂_ui.
///
/// With `cold_start`, the bundle term is forced to 0 so a bundle with no
/// interaction history is scored purely from its items. Returns the score and
/// whether the empty-items warning fired. For bpr-mf the score is the plain
/// embedding dot product (the baseline has no item head).
pub fn inference_score(
    params: &ModelParams,
    reps: Option<&NodeRepresentations>,
    user: u32,
    bundle: u32,
    bundle_items: &[u32],
    cold_start: bool,
) -> Result<(f64, bool), ModelError> {
    if bundle as usize >= params.n_bundles {
        return Err(ModelError::Lookup(format!(
            "bundle {bundle} out of {}",
            params.n_bundles
        )));
    }
    if params.config.variant == Variant::BprMf {
        return Ok((bpr_mf_score(params, user, bundle)?, false));
    }
    let p_ub = if cold_start {
        0.0
    } else {
        score_pairs(params, reps, &[(user, bundle)], Task::Bundle)?[0]
    };
    if bundle_items.is_empty() {
        return Ok((p_ub, true));
    }
    let pairs: Vec<(u32, u32)> = bundle_items.iter().map(|&i| (user, i)).collect();
    let item_scores = score_pairs(params, reps, &pairs, Task::Item)?;
    let item_term = item_scores.iter().sum::<f64>() / bundle_items.len() as f64;
    Ok((p_ub + item_term, false))
}
