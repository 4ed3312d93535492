//! Training orchestration: per-epoch edge dropout, message passing, the
//! variational pass, edge-wise imputation on the held-out cells, the hybrid
//! loss, optimizer step, and periodic graph refinement; plus checkpointing
//! and the final fill of missing cells.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{AdjInit, Config, EmbeddingMode};
use crate::data::{self, ColumnKind, Dataset, NormParams};
use crate::embed::{self, OneHot};
use crate::error::{Error, Result};
use crate::graph::{self, BipartiteGraph, GraphEmbeddings};
use crate::missing::MaskMatrix;
use crate::rng::{normals, RngState};
use crate::tensor::{
    adam_step, AdamConfig, AdamState, NodeId, ParamStore, Tape, TapeParams, Tensor,
};
use crate::vgae;

/// Blend factor for graph refinement: new layer-0 sample inputs are
/// α·lift(h) + (1−α)·p̂.
pub const REFINE_ALPHA: f64 = 0.5;

/// All trainable parameters, optimizer state, and the bookkeeping needed to
/// resume a run exactly.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
    pub epoch: usize,
    pub config: Config,
    /// Snapshot of p̂ from the last refinement; blended into layer-0 inputs.
    pub refined_p0: Option<Tensor>,
    /// Cumulative isolated-node zero-vector fallbacks.
    pub fallback_count: u64,
    /// Cumulative epochs whose held-out set came up empty.
    pub empty_holdout_count: u64,
}

/// Per-epoch loss components for the progress log.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_imp: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub held_out: usize,
    pub isolated_fallbacks: usize,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,l_imp,recon,kl,total,held_out,isolated_fallbacks"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.l_imp,
            self.recon,
            self.kl,
            self.total,
            self.held_out,
            self.isolated_fallbacks
        )
    }
}

/// Imputed table plus the raw model outputs the metrics need.
#[derive(Clone, Debug)]
pub struct FillResult {
    /// Original scale; observed cells copied verbatim from the input.
    pub data: Dataset,
    /// Softmax distribution per imputed categorical cell (one-hot mode).
    pub cat_probs: BTreeMap<(usize, usize), Vec<f64>>,
    /// Raw head scalar per imputed categorical cell (hetero mode).
    pub cat_scalars: BTreeMap<(usize, usize), f64>,
    /// Learned category-embedding tables (hetero mode), keyed by column.
    pub embedding_tables: BTreeMap<usize, Vec<f64>>,
}

/// Registers every parameter group for a dataset and returns the initial
/// state. The dataset must already be normalized.
pub fn init_state(d_norm: &Dataset, mask: &MaskMatrix, cfg: &Config) -> Result<ModelState> {
    cfg.validate()?;
    let rng = RngState::new(cfg.train.seed);
    let mut params = ParamStore::new();

    let (h_width, n_slots) = match cfg.embedding.mode {
        EmbeddingMode::Hetero => (d_norm.n_cols(), d_norm.n_cols()),
        EmbeddingMode::Onehot => {
            let w = embed::one_hot_width(d_norm);
            (w, w)
        }
    };
    if cfg.embedding.mode == EmbeddingMode::Hetero {
        embed::register_params(&mut params, d_norm, &cfg.embedding, &rng)?;
    }
    graph::register_params(&mut params, h_width, n_slots, &cfg.encoder, &rng)?;

    let knn_feats = if cfg.vgae.adj_init == AdjInit::Knn {
        Some(embed::one_hot_encode(d_norm, mask)?.matrix)
    } else {
        None
    };
    vgae::register_params(
        &mut params,
        d_norm.n_rows(),
        cfg.encoder.hidden,
        h_width,
        &cfg.vgae,
        &rng,
        knn_feats.as_ref(),
    )?;

    // Imputation head: shared trunk (2d → 64) with biases, then per-kind
    // output layers.
    let mut r = rng.stream("init-head");
    let d = cfg.encoder.hidden;
    params.insert("head.w1", crate::init::xavier(&mut r, 2 * d, 64))?;
    params.insert("head.b1", Tensor::zeros(vec![64]))?;
    let has_cont = !d_norm.continuous_columns().is_empty();
    let has_cat = !d_norm.categorical_columns().is_empty();
    if has_cont {
        params.insert("head.out_cont", crate::init::xavier(&mut r, 64, 1))?;
        params.insert("head.out_cont_b", Tensor::zeros(vec![1]))?;
    }
    if has_cat {
        match cfg.embedding.mode {
            EmbeddingMode::Hetero => {
                params.insert("head.out_cat", crate::init::xavier(&mut r, 64, 1))?;
                params.insert("head.out_cat_b", Tensor::zeros(vec![1]))?;
            }
            EmbeddingMode::Onehot => {
                params.insert("head.out_score", crate::init::xavier(&mut r, 64, 1))?;
                params.insert("head.out_score_b", Tensor::zeros(vec![1]))?;
            }
        }
    }

    let adam = AdamState::for_params(&params);
    Ok(ModelState {
        params,
        adam,
        rng,
        epoch: 0,
        config: *cfg,
        refined_p0: None,
        fallback_count: 0,
        empty_holdout_count: 0,
    })
}

/// Everything one forward pass produces that later stages consume.
pub(crate) struct ForwardPass {
    pub(crate) tape: Tape,
    pub(crate) tp: TapeParams,
    pub(crate) h: NodeId,
    pub(crate) emb: GraphEmbeddings,
    pub(crate) latent: vgae::GaussianLatent,
    pub(crate) adj_target: Vec<f64>,
    pub(crate) adj_logits_hat: NodeId,
    pub(crate) p_hat: NodeId,
    pub(crate) isolated: usize,
}

pub(crate) fn forward(
    state: &ModelState,
    d_norm: &Dataset,
    mask: &MaskMatrix,
    g: &BipartiteGraph,
    onehot: Option<&OneHot>,
    eps_epoch: u64,
) -> Result<ForwardPass> {
    let cfg = &state.config;
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &state.params);

    let h = match cfg.embedding.mode {
        EmbeddingMode::Hetero => {
            let h_cat = embed::embed_categorical(&mut tape, &tp, d_norm, mask, &cfg.embedding)?;
            embed::integrate(&mut tape, h_cat, d_norm, mask)?
        }
        EmbeddingMode::Onehot => {
            let oh = onehot.ok_or_else(|| {
                Error::Contract("one-hot mode requires the expanded encoding".into())
            })?;
            tape.constant(oh.matrix.clone())
        }
    };

    let mut emb = graph::init_embeddings(&mut tape, &tp, g, h)?;
    if let Some(snapshot) = &state.refined_p0 {
        let lifted = tape.scale(emb.p, REFINE_ALPHA);
        let frozen = tape.constant(snapshot.clone());
        let scaled = tape.scale(frozen, 1.0 - REFINE_ALPHA);
        emb.p = tape.add(lifted, scaled)?;
    }
    for l in 0..cfg.encoder.layers {
        let update_edges = l + 1 < cfg.encoder.layers;
        emb = graph::message_pass_layer(&mut tape, &tp, g, emb, l, update_edges)?;
    }
    let isolated = {
        let (s, f) = graph::isolated_counts(g);
        s + f
    };

    let adj = vgae::adjacency(&mut tape, &tp, d_norm.n_rows())?;
    let eps = {
        let mut r = state.rng.stream_indexed("reparam", eps_epoch);
        Tensor::new(
            vec![d_norm.n_rows(), cfg.vgae.latent],
            normals(&mut r, d_norm.n_rows() * cfg.vgae.latent, 0.0, 1.0),
        )?
    };
    let latent = vgae::gcn_encode(&mut tape, &tp, emb.p, adj.normalized, &eps)?;
    let (adj_logits_hat, _probs) = vgae::decode_adjacency(&mut tape, latent.z)?;
    let p_hat = vgae::decode_features(&mut tape, &tp, latent.z, adj.normalized, h)?;
    let adj_target = tape.values(adj.weights).to_vec();

    Ok(ForwardPass {
        tape,
        tp,
        h,
        emb,
        latent,
        adj_target,
        adj_logits_hat,
        p_hat,
        isolated,
    })
}

/// Edge-wise head: trunk = ReLU(W1·[p̂_i; q_j] + b1), then the per-kind
/// output layer. Returns the trunk activations for a batch of cells.
fn head_trunk(
    tape: &mut Tape,
    tp: &TapeParams,
    p_hat: NodeId,
    q: NodeId,
    g: &BipartiteGraph,
    cells: &[(usize, usize)],
) -> Result<NodeId> {
    let rows: Vec<usize> = cells.iter().map(|&(i, _)| i).collect();
    let slots: Vec<usize> = cells.iter().map(|&(_, j)| g.col_to_slot[j]).collect();
    let p_rows = tape.gather_rows(p_hat, &rows)?;
    let q_rows = tape.gather_rows(q, &slots)?;
    let inputs = tape.concat(&[p_rows, q_rows], 1)?;
    let w1 = tp.id("head.w1")?;
    let b1 = tp.id("head.b1")?;
    let lin = tape.matmul(inputs, w1)?;
    let lin = tape.add_bias_row(lin, b1)?;
    Ok(tape.relu(lin))
}

/// Trunk for one-hot categorical scoring: each cell contributes one row per
/// candidate category slot of its column.
fn head_trunk_candidates(
    tape: &mut Tape,
    tp: &TapeParams,
    p_hat: NodeId,
    q: NodeId,
    cells: &[(usize, usize)],
    col_slots: &[usize],
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(cells.len() * col_slots.len());
    let mut slots = Vec::with_capacity(cells.len() * col_slots.len());
    for &(i, _) in cells {
        for &s in col_slots {
            rows.push(i);
            slots.push(s);
        }
    }
    let p_rows = tape.gather_rows(p_hat, &rows)?;
    let q_rows = tape.gather_rows(q, &slots)?;
    let inputs = tape.concat(&[p_rows, q_rows], 1)?;
    let w1 = tp.id("head.w1")?;
    let b1 = tp.id("head.b1")?;
    let lin = tape.matmul(inputs, w1)?;
    let lin = tape.add_bias_row(lin, b1)?;
    Ok(tape.relu(lin))
}

fn apply_output(
    tape: &mut Tape,
    tp: &TapeParams,
    trunk: NodeId,
    weight: &str,
    bias: &str,
) -> Result<NodeId> {
    let w = tp.id(weight)?;
    let b = tp.id(bias)?;
    let out = tape.matmul(trunk, w)?;
    tape.add_bias_row(out, b)
}

/// Predictions and loss for a set of supervision cells. Used with the
/// held-out cells during training and the missing cells at fill time.
pub(crate) struct CellPredictions {
    /// Sigmoid outputs for continuous cells, aligned with `cont_cells`.
    pub(crate) cont: Option<NodeId>,
    pub(crate) cont_cells: Vec<(usize, usize)>,
    /// Raw scalars (hetero) aligned with `cat_cells`.
    pub(crate) cat_scalar: Option<NodeId>,
    /// Per-column softmax score matrices (one-hot): (cells, scores H×C).
    pub(crate) cat_scores: Vec<(Vec<(usize, usize)>, NodeId)>,
    pub(crate) cat_cells: Vec<(usize, usize)>,
}

pub(crate) fn predict_cells(
    tape: &mut Tape,
    tp: &TapeParams,
    fp_p_hat: NodeId,
    fp_q: NodeId,
    g: &BipartiteGraph,
    d_norm: &Dataset,
    cells: &[(usize, usize)],
    mode: EmbeddingMode,
) -> Result<CellPredictions> {
    let cont_cells: Vec<(usize, usize)> = cells
        .iter()
        .copied()
        .filter(|&(_, j)| !d_norm.is_categorical(j))
        .collect();
    let cat_cells: Vec<(usize, usize)> = cells
        .iter()
        .copied()
        .filter(|&(_, j)| d_norm.is_categorical(j))
        .collect();

    let cont = if cont_cells.is_empty() {
        None
    } else {
        let trunk = head_trunk(tape, tp, fp_p_hat, fp_q, g, &cont_cells)?;
        let out = apply_output(tape, tp, trunk, "head.out_cont", "head.out_cont_b")?;
        Some(tape.sigmoid(out))
    };

    let mut cat_scalar = None;
    let mut cat_scores = Vec::new();
    if !cat_cells.is_empty() {
        match mode {
            EmbeddingMode::Hetero => {
                let trunk = head_trunk(tape, tp, fp_p_hat, fp_q, g, &cat_cells)?;
                // Targets are unbounded embedding scalars, so no squashing.
                cat_scalar =
                    Some(apply_output(tape, tp, trunk, "head.out_cat", "head.out_cat_b")?);
            }
            EmbeddingMode::Onehot => {
                // Group by original column; score every candidate category.
                let mut by_col: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
                for &(i, j) in &cat_cells {
                    by_col.entry(j).or_default().push((i, j));
                }
                for (j, col_cells) in by_col {
                    let col_slots: Vec<usize> = g
                        .slot_origin
                        .iter()
                        .enumerate()
                        .filter(|(_, &(col, _))| col == j)
                        .map(|(slot, _)| slot)
                        .collect();
                    let trunk =
                        head_trunk_candidates(tape, tp, fp_p_hat, fp_q, &col_cells, &col_slots)?;
                    let scores =
                        apply_output(tape, tp, trunk, "head.out_score", "head.out_score_b")?;
                    let mat = tape.reshape(scores, vec![col_cells.len(), col_slots.len()])?;
                    cat_scores.push((col_cells, mat));
                }
            }
        }
    }
    Ok(CellPredictions {
        cont,
        cont_cells,
        cat_scalar,
        cat_scores,
        cat_cells,
    })
}

/// Detached supervision targets for hetero-mode categorical cells: the
/// current scalar embedding of each cell's true category, read from the
/// store so the table cannot chase its own predictions.
pub(crate) fn hetero_cat_targets(
    cells: &[(usize, usize)],
    d_norm: &Dataset,
    params: &ParamStore,
) -> Result<Vec<f64>> {
    cells
        .iter()
        .map(|&(i, j)| {
            let table = params
                .get(&format!("embed.cat{j}.table"))
                .ok_or_else(|| Error::Contract(format!("no table for column {j}")))?;
            Ok(table.values()[d_norm.category(i, j)])
        })
        .collect()
}

/// Hybrid imputation loss over the supervision cells. Hetero mode is a
/// single MSE where categorical targets are the (detached) scalar embeddings
/// of the true categories; one-hot mode sums a cross-entropy term over
/// categorical cells and an MSE term over continuous cells.
pub(crate) fn imputation_loss(
    tape: &mut Tape,
    preds: &CellPredictions,
    d_norm: &Dataset,
    cat_targets: &[f64],
    mode: EmbeddingMode,
) -> Result<NodeId> {
    let mut parts: Vec<NodeId> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();

    if let Some(cont) = preds.cont {
        let flat = tape.reshape(cont, vec![preds.cont_cells.len()])?;
        parts.push(flat);
        for &(i, j) in &preds.cont_cells {
            targets.push(d_norm.get(i, j));
        }
    }

    match mode {
        EmbeddingMode::Hetero => {
            if let Some(scalars) = preds.cat_scalar {
                if cat_targets.len() != preds.cat_cells.len() {
                    return Err(Error::Contract(format!(
                        "{} categorical targets for {} cells",
                        cat_targets.len(),
                        preds.cat_cells.len()
                    )));
                }
                let flat = tape.reshape(scalars, vec![preds.cat_cells.len()])?;
                parts.push(flat);
                targets.extend_from_slice(cat_targets);
            }
            if parts.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            let pred = if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat(&parts, 0)?
            };
            let target = tape.constant(Tensor::new(vec![targets.len()], targets)?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean_all(sq)
        }
        EmbeddingMode::Onehot => {
            let mut total: Option<NodeId> = None;
            if let Some(cont) = preds.cont {
                let flat = tape.reshape(cont, vec![preds.cont_cells.len()])?;
                let target = tape.constant(Tensor::new(vec![targets.len()], targets)?);
                let diff = tape.sub(flat, target)?;
                let sq = tape.mul(diff, diff)?;
                total = Some(tape.mean_all(sq)?);
            }
            if !preds.cat_scores.is_empty() {
                let mut ce_parts = Vec::new();
                for (cells, scores) in &preds.cat_scores {
                    let classes: Vec<usize> =
                        cells.iter().map(|&(i, j)| d_norm.category(i, j)).collect();
                    ce_parts.push(tape.ce_softmax_rows(*scores, &classes)?);
                }
                let all = if ce_parts.len() == 1 {
                    ce_parts[0]
                } else {
                    tape.concat(&ce_parts, 0)?
                };
                let ce = tape.mean_all(all)?;
                total = Some(match total {
                    Some(t) => tape.add(t, ce)?,
                    None => ce,
                });
            }
            match total {
                Some(t) => Ok(t),
                None => Ok(tape.constant(Tensor::scalar(0.0))),
            }
        }
    }
}

/// One full training step. The graph `g` carries every observed edge; edge
/// dropout, the forward pass, losses, backward, and the optimizer update all
/// happen here. Refinement fires every `refine_period` epochs.
pub fn train_epoch(
    state: &mut ModelState,
    d_norm: &Dataset,
    mask: &MaskMatrix,
    g: &BipartiteGraph,
    onehot: Option<&OneHot>,
) -> Result<EpochMetrics> {
    let cfg = state.config;
    let epoch = state.epoch;
    let (train_g, held_cells) =
        graph::edge_dropout(g, cfg.encoder.edge_dropout, &state.rng, epoch as u64)?;

    let mut fp = forward(state, d_norm, mask, &train_g, onehot, epoch as u64)?;
    if held_cells.is_empty() {
        state.empty_holdout_count += 1;
    }

    let preds = predict_cells(
        &mut fp.tape,
        &fp.tp,
        fp.p_hat,
        fp.emb.q,
        g,
        d_norm,
        &held_cells,
        cfg.embedding.mode,
    )?;
    let cat_targets = match cfg.embedding.mode {
        EmbeddingMode::Hetero => hetero_cat_targets(&preds.cat_cells, d_norm, &state.params)?,
        EmbeddingMode::Onehot => Vec::new(),
    };
    let l_imp = imputation_loss(
        &mut fp.tape,
        &preds,
        d_norm,
        &cat_targets,
        cfg.embedding.mode,
    )?;

    let pw = vgae::pos_weight_for(&fp.adj_target);
    let (_, recon, kl) = vgae::elbo(
        &mut fp.tape,
        &fp.latent,
        fp.adj_logits_hat,
        &fp.adj_target,
        pw,
    )?;
    let kl_scale = if cfg.vgae.kl_warmup {
        let ramp = (cfg.train.epochs as f64 * 0.1).max(1.0);
        (epoch as f64 / ramp).min(1.0)
    } else {
        1.0
    };
    let kl_scaled = fp.tape.scale(kl, kl_scale);
    let vgae_term = fp.tape.add(recon, kl_scaled)?;
    let weighted = fp.tape.scale(vgae_term, cfg.vgae.beta);
    let total = fp.tape.add(l_imp, weighted)?;

    let metrics = EpochMetrics {
        epoch,
        l_imp: fp.tape.values(l_imp)[0],
        recon: fp.tape.values(recon)[0],
        kl: fp.tape.values(kl)[0],
        total: fp.tape.values(total)[0],
        held_out: held_cells.len(),
        isolated_fallbacks: fp.isolated,
    };
    state.fallback_count += fp.isolated as u64;

    if !metrics.total.is_finite() {
        fp.tape.backward(total).ok();
        let max_grad = fp
            .tp
            .collect_grads(&fp.tape)
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        return Err(Error::Domain(format!(
            "non-finite loss at epoch {epoch}: l_imp={}, recon={}, kl={}, max|grad|={max_grad}",
            metrics.l_imp, metrics.recon, metrics.kl
        )));
    }

    fp.tape.backward(total)?;
    let grads = fp.tp.collect_grads(&fp.tape);
    adam_step(
        &mut state.params,
        &grads,
        &mut state.adam,
        &AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        },
    )?;

    state.epoch += 1;
    if state.epoch % cfg.train.refine_period == 0 {
        refine_graph(state, d_norm, mask, g, onehot)?;
    }
    Ok(metrics)
}

/// Recomputes p̂ on the full observed graph and stores it; subsequent
/// layer-0 sample inputs become the convex blend `α·lift(h) + (1−α)·p̂`.
/// The observed edge set itself never changes.
pub fn refine_graph(
    state: &mut ModelState,
    d_norm: &Dataset,
    mask: &MaskMatrix,
    g: &BipartiteGraph,
    onehot: Option<&OneHot>,
) -> Result<()> {
    let fp = forward(state, d_norm, mask, g, onehot, state.epoch as u64)?;
    let p_hat = fp.tape.tensor(fp.p_hat).clone();
    state.refined_p0 = Some(p_hat);
    Ok(())
}

/// Imputes every missing cell. Observed cells are copied verbatim from the
/// input; continuous predictions are denormalized, categorical predictions
/// snap to the nearest embedding scalar (hetero) or the argmax category
/// (one-hot), ties to the lower index.
pub fn fill(state: &ModelState, raw: &Dataset, mask: &MaskMatrix) -> Result<FillResult> {
    let d_norm = data::normalize(raw, state.config.train.normalization, Some(mask))?;
    let (g, onehot) = build_graph_for(&d_norm, mask, &state.config)?;

    let mut fp = forward(
        state,
        &d_norm,
        mask,
        &g,
        onehot.as_ref(),
        state.epoch as u64,
    )?;
    let missing: Vec<(usize, usize)> = (0..raw.n_rows())
        .flat_map(|i| (0..raw.n_cols()).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.is_missing(i, j))
        .collect();
    let preds = predict_cells(
        &mut fp.tape,
        &fp.tp,
        fp.p_hat,
        fp.emb.q,
        &g,
        &d_norm,
        &missing,
        state.config.embedding.mode,
    )?;

    let mut out = raw.clone();
    let mut cat_probs = BTreeMap::new();
    let mut cat_scalars = BTreeMap::new();

    if let Some(cont) = preds.cont {
        let values = fp.tape.values(cont);
        for (k, &(i, j)) in preds.cont_cells.iter().enumerate() {
            let norm = d_norm.column(j).norm.unwrap_or(NormParams::Minmax {
                min: 0.0,
                max: 1.0,
            });
            out.set(i, j, data::invert_norm(norm, values[k]));
        }
    }
    if let Some(scalars) = preds.cat_scalar {
        let values = fp.tape.values(scalars);
        for (k, &(i, j)) in preds.cat_cells.iter().enumerate() {
            let table = state
                .params
                .get(&format!("embed.cat{j}.table"))
                .ok_or_else(|| Error::Contract(format!("no table for column {j}")))?;
            let c = raw.column(j).n_categories();
            let pred = values[k];
            // Nearest category scalar; the missing-token slot is excluded.
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (cat, &emb) in table.values()[..c].iter().enumerate() {
                let dist = (emb - pred).abs();
                if dist < best_d {
                    best_d = dist;
                    best = cat;
                }
            }
            out.set(i, j, best as f64);
            cat_scalars.insert((i, j), pred);
        }
    }
    for (cells, scores) in &preds.cat_scores {
        let probs = fp.tape.softmax_rows(*scores)?;
        let values = fp.tape.values(probs).to_vec();
        let c = fp.tape.shape(probs)[1];
        for (k, &(i, j)) in cells.iter().enumerate() {
            let row = &values[k * c..(k + 1) * c];
            let mut best = 0usize;
            for (cat, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = cat;
                }
            }
            out.set(i, j, best as f64);
            cat_probs.insert((i, j), row.to_vec());
        }
    }

    let mut embedding_tables = BTreeMap::new();
    for j in raw.categorical_columns() {
        if let Some(t) = state.params.get(&format!("embed.cat{j}.table")) {
            embedding_tables.insert(j, t.values().to_vec());
        }
    }

    Ok(FillResult {
        data: out,
        cat_probs,
        cat_scalars,
        embedding_tables,
    })
}

/// Builds the observation graph for the configured embedding mode.
pub fn build_graph_for(
    d_norm: &Dataset,
    mask: &MaskMatrix,
    cfg: &Config,
) -> Result<(BipartiteGraph, Option<OneHot>)> {
    match cfg.embedding.mode {
        EmbeddingMode::Hetero => Ok((graph::build_graph(d_norm, mask)?, None)),
        EmbeddingMode::Onehot => {
            let oh = embed::one_hot_encode(d_norm, mask)?;
            let g = graph::build_graph_onehot(d_norm, mask, &oh)?;
            Ok((g, Some(oh)))
        }
    }
}

/// Full training run: normalize, build the graph, iterate epochs (optionally
/// logging one CSV row per epoch), and fill the missing cells.
pub fn train(
    raw: &Dataset,
    mask: &MaskMatrix,
    cfg: &Config,
    progress_path: Option<&Path>,
) -> Result<(ModelState, FillResult)> {
    let d_norm = data::normalize(raw, cfg.train.normalization, Some(mask))?;
    let (g, onehot) = build_graph_for(&d_norm, mask, cfg)?;
    let mut state = init_state(&d_norm, mask, cfg)?;

    let mut log: Option<std::io::BufWriter<std::fs::File>> = match progress_path {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(w, "{}", EpochMetrics::csv_header())?;
            Some(w)
        }
        None => None,
    };
    for _ in 0..cfg.train.epochs {
        let metrics = train_epoch(&mut state, &d_norm, mask, &g, onehot.as_ref())?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", metrics.csv_row())?;
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let filled = fill(&state, raw, mask)?;
    Ok((state, filled))
}

// ── Checkpointing ───────────────────────────────────────────────────
//
// Binary layout (all integers little-endian):
//   magic  [u8; 8]  = "IVGAE\0v1"
//   epoch  u64
//   seed   u64
//   fallback_count u64, empty_holdout_count u64
//   adam_t u64
//   config_len u32, config JSON bytes
//   refined flag u8 [+ shape (u32 rank, u64 dims...) + f64 values]
//   param_count u32, then per parameter:
//     name_len u32, name bytes, rank u32, dims u64..., values f64...,
//     adam_m f64..., adam_v f64...

const CKPT_MAGIC: &[u8; 8] = b"IVGAE\0v1";

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(state.epoch as u64).to_le_bytes())?;
    w.write_all(&state.rng.seed().to_le_bytes())?;
    w.write_all(&state.fallback_count.to_le_bytes())?;
    w.write_all(&state.empty_holdout_count.to_le_bytes())?;
    w.write_all(&state.adam.t.to_le_bytes())?;
    let cfg = serde_json::to_vec(&state.config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    match &state.refined_p0 {
        Some(t) => {
            w.write_all(&[1u8])?;
            write_tensor(&mut w, t)?;
        }
        None => w.write_all(&[0u8])?,
    }
    w.write_all(&(state.params.len() as u32).to_le_bytes())?;
    for (idx, (name, tensor)) in state.params.iter().enumerate() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, tensor)?;
        for &v in &state.adam.m[idx] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &state.adam.v[idx] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(self.bytes()?));
        }
        Ok(out)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape.iter().product();
        Tensor::new(shape, self.f64s(n)?)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut r = Reader {
        inner: std::io::BufReader::new(std::fs::File::open(path)?),
    };
    let magic: [u8; 8] = r.bytes()?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Contract(format!(
            "not a checkpoint file (magic {magic:?})"
        )));
    }
    let epoch = r.u64()? as usize;
    let seed = r.u64()?;
    let fallback_count = r.u64()?;
    let empty_holdout_count = r.u64()?;
    let adam_t = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.inner.read_exact(&mut cfg_bytes)?;
    let config: Config = serde_json::from_slice(&cfg_bytes)?;
    let refined_p0 = match r.bytes::<1>()?[0] {
        0 => None,
        _ => Some(r.tensor()?),
    };
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let mut name = vec![0u8; name_len];
        r.inner.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Contract(format!("bad parameter name: {e}")))?;
        let tensor = r.tensor()?;
        let len = tensor.len();
        params.insert(&name, tensor)?;
        m.push(r.f64s(len)?);
        v.push(r.f64s(len)?);
    }
    Ok(ModelState {
        params,
        adam: AdamState { m, v, t: adam_t },
        rng: RngState::new(seed),
        epoch,
        config,
        refined_p0,
        fallback_count,
        empty_holdout_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::missing::gen_mcar;
    use crate::synth;

    fn smoke_cfg(epochs: usize, seed: u64) -> Config {
        let mut cfg = Config::default();
        cfg.train.epochs = epochs;
        cfg.train.seed = seed;
        // Toy sizes keep unit tests fast; defaults are exercised in the
        // acceptance suite.
        cfg.encoder.hidden = 16;
        cfg.vgae.latent = 8;
        cfg
    }

    fn setup(
        n: usize,
        p: usize,
        seed: u64,
        cfg: &Config,
    ) -> (Dataset, Dataset, MaskMatrix, BipartiteGraph, ModelState) {
        let raw = synth::rank_factor(n, p, 1, 0.01, seed);
        let mask = gen_mcar(&raw, 0.3, seed).unwrap();
        let d_norm = data::normalize(&raw, cfg.train.normalization, Some(&mask)).unwrap();
        let g = graph::build_graph(&d_norm, &mask).unwrap();
        let state = init_state(&d_norm, &mask, cfg).unwrap();
        (raw, d_norm, mask, g, state)
    }

    #[test]
    fn first_epoch_loss_is_finite_across_seeds() {
        for seed in 0..3 {
            let cfg = smoke_cfg(1, seed);
            let (_raw, d_norm, mask, g, mut state) = setup(50, 6, seed, &cfg);
            let m = train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
            assert!(m.total.is_finite(), "seed {seed}: total {}", m.total);
            assert!(m.l_imp.is_finite() && m.recon.is_finite() && m.kl.is_finite());
            assert!(m.held_out > 0);
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_first_epochs() {
        let cfg = smoke_cfg(1, 7);
        let (_, d_norm, mask, g, mut s1) = setup(30, 5, 7, &cfg);
        let (_, d2, m2, g2, mut s2) = setup(30, 5, 7, &cfg);
        let e1 = train_epoch(&mut s1, &d_norm, &mask, &g, None).unwrap();
        let e2 = train_epoch(&mut s2, &d2, &m2, &g2, None).unwrap();
        assert_eq!(e1.total.to_bits(), e2.total.to_bits());
        assert_eq!(e1.l_imp.to_bits(), e2.l_imp.to_bits());
    }

    #[test]
    fn beta_zero_reduces_total_to_l_imp() {
        let mut cfg = smoke_cfg(1, 3);
        cfg.vgae.beta = 0.0;
        let (_, d_norm, mask, g, mut state) = setup(30, 5, 3, &cfg);
        let m = train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
        assert_eq!(m.total.to_bits(), m.l_imp.to_bits());
    }

    #[test]
    fn zero_head_weights_predict_half_for_continuous() {
        let cfg = smoke_cfg(1, 4);
        let (_, d_norm, mask, g, mut state) = setup(20, 4, 4, &cfg);
        for name in ["head.w1", "head.b1", "head.out_cont", "head.out_cont_b"] {
            let t = state.params.get_mut(name).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(shape);
        }
        let mut fp = forward(&state, &d_norm, &mask, &g, None, 0).unwrap();
        let cells = vec![(0usize, 0usize), (3, 2)];
        let preds = predict_cells(
            &mut fp.tape,
            &fp.tp,
            fp.p_hat,
            fp.emb.q,
            &g,
            &d_norm,
            &cells,
            EmbeddingMode::Hetero,
        )
        .unwrap();
        let values = fp.tape.values(preds.cont.unwrap());
        assert!(values.iter().all(|&v| v == 0.5), "{values:?}");
    }

    #[test]
    fn hetero_targets_are_detached_from_embedding_tables() {
        // With constant predictions, the only possible path from the loss to
        // an embedding table is through the targets; detachment means the
        // gradient must be exactly zero.
        let d = synth::mixed(12, 2, 1, 3, 0.05, 5).unwrap();
        let mask = gen_mcar(&d, 0.25, 5).unwrap();
        let cfg = smoke_cfg(1, 5);
        let d_norm = data::normalize(&d, cfg.train.normalization, Some(&mask)).unwrap();
        let state = init_state(&d_norm, &mask, &cfg).unwrap();

        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &state.params);
        let cat_cells: Vec<(usize, usize)> = (0..12)
            .map(|i| (i, 2usize))
            .filter(|&(i, j)| mask.is_missing(i, j))
            .collect();
        assert!(!cat_cells.is_empty());
        let preds = CellPredictions {
            cont: None,
            cont_cells: Vec::new(),
            cat_scalar: Some(tape.constant(Tensor::zeros(vec![cat_cells.len(), 1]))),
            cat_scores: Vec::new(),
            cat_cells,
        };
        let cat_targets = hetero_cat_targets(&preds.cat_cells, &d_norm, &state.params).unwrap();
        let loss =
            imputation_loss(&mut tape, &preds, &d_norm, &cat_targets, EmbeddingMode::Hetero)
                .unwrap();
        tape.backward(loss).unwrap();
        let table = tp.id("embed.cat2.table").unwrap();
        assert!(tape.grad(table).is_none() || tape.grad(table).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn refinement_keeps_edge_set_and_loss_finite() {
        let mut cfg = smoke_cfg(6, 6);
        cfg.train.refine_period = 3;
        let (_, d_norm, mask, g, mut state) = setup(25, 5, 6, &cfg);
        let edges_before = g.n_edges();
        for _ in 0..6 {
            let m = train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
            assert!(m.total.is_finite());
        }
        assert!(state.refined_p0.is_some(), "refinement never fired");
        assert_eq!(g.n_edges(), edges_before);
    }

    #[test]
    fn fill_preserves_observed_cells_bit_exactly() {
        let cfg = smoke_cfg(3, 8);
        let (raw, d_norm, mask, g, mut state) = setup(20, 4, 8, &cfg);
        for _ in 0..3 {
            train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
        }
        let filled = fill(&state, &raw, &mask).unwrap();
        for i in 0..raw.n_rows() {
            for j in 0..raw.n_cols() {
                if mask.is_observed(i, j) {
                    assert_eq!(
                        filled.data.get(i, j).to_bits(),
                        raw.get(i, j).to_bits(),
                        "observed cell ({i},{j}) was altered"
                    );
                }
            }
        }
    }

    #[test]
    fn fill_respects_category_domains() {
        let d = synth::mixed(30, 2, 2, 4, 0.05, 9).unwrap();
        let mask = gen_mcar(&d, 0.3, 9).unwrap();
        let cfg = smoke_cfg(3, 9);
        let d_norm = data::normalize(&d, cfg.train.normalization, Some(&mask)).unwrap();
        let g = graph::build_graph(&d_norm, &mask).unwrap();
        let mut state = init_state(&d_norm, &mask, &cfg).unwrap();
        for _ in 0..3 {
            train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
        }
        let filled = fill(&state, &d, &mask).unwrap();
        for j in filled.data.categorical_columns() {
            let c = filled.data.column(j).n_categories();
            for i in 0..filled.data.n_rows() {
                assert!(filled.data.category(i, j) < c);
            }
        }
    }

    #[test]
    fn onehot_mode_trains_and_fills() {
        let d = synth::mixed(25, 2, 2, 3, 0.05, 10).unwrap();
        let mask = gen_mcar(&d, 0.3, 10).unwrap();
        let mut cfg = smoke_cfg(3, 10);
        cfg.embedding.mode = EmbeddingMode::Onehot;
        let d_norm = data::normalize(&d, cfg.train.normalization, Some(&mask)).unwrap();
        let (g, onehot) = build_graph_for(&d_norm, &mask, &cfg).unwrap();
        let mut state = init_state(&d_norm, &mask, &cfg).unwrap();
        for _ in 0..3 {
            let m = train_epoch(&mut state, &d_norm, &mask, &g, onehot.as_ref()).unwrap();
            assert!(m.total.is_finite());
        }
        let filled = fill(&state, &d, &mask).unwrap();
        // Every imputed categorical cell carries its softmax distribution.
        for (&(_, _), probs) in &filled.cat_probs {
            let s: f64 = probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_resumes_identically() {
        let cfg = smoke_cfg(4, 11);
        let (_, d_norm, mask, g, mut state) = setup(20, 4, 11, &cfg);
        for _ in 0..2 {
            train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let mut restored = load_checkpoint(&path).unwrap();

        // Bit-identical parameters and moments.
        for ((n1, t1), (n2, t2)) in state.params.iter().zip(restored.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.values(), t2.values());
        }
        assert_eq!(state.adam.t, restored.adam.t);
        for (a, b) in state.adam.m.iter().zip(&restored.adam.m) {
            assert_eq!(a, b);
        }

        // One epoch after restore equals one epoch without the round trip.
        let m1 = train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
        let m2 = train_epoch(&mut restored, &d_norm, &mask, &g, None).unwrap();
        assert_eq!(m1.total.to_bits(), m2.total.to_bits());
        for ((_, t1), (_, t2)) in state.params.iter().zip(restored.params.iter()) {
            assert_eq!(t1.values(), t2.values());
        }
    }

    #[test]
    fn rank_one_imputation_beats_mean_filling() {
        // Structured data, a few dozen epochs: the model must already beat
        // the column-mean imputer on filled-cell MSE.
        let raw = synth::rank_factor(40, 6, 1, 0.01, 12);
        let mask = gen_mcar(&raw, 0.3, 12).unwrap();
        let mut cfg = smoke_cfg(60, 12);
        cfg.encoder.hidden = 16;
        let (state, filled) = {
            let d_norm = data::normalize(&raw, cfg.train.normalization, Some(&mask)).unwrap();
            let g = graph::build_graph(&d_norm, &mask).unwrap();
            let mut state = init_state(&d_norm, &mask, &cfg).unwrap();
            for _ in 0..cfg.train.epochs {
                train_epoch(&mut state, &d_norm, &mask, &g, None).unwrap();
            }
            let filled = fill(&state, &raw, &mask).unwrap();
            (state, filled)
        };
        let _ = state;
        let stats = data::observed_statistics(&raw, &mask).unwrap();
        let (mut model_se, mut mean_se, mut count) = (0.0, 0.0, 0);
        for j in 0..raw.n_cols() {
            let mean = match stats[j] {
                data::ColumnStat::Mean(m) => m,
                _ => unreachable!(),
            };
            for i in 0..raw.n_rows() {
                if mask.is_missing(i, j) {
                    model_se += (filled.data.get(i, j) - raw.get(i, j)).powi(2);
                    mean_se += (mean - raw.get(i, j)).powi(2);
                    count += 1;
                }
            }
        }
        assert!(count > 0);
        assert!(
            model_se < mean_se,
            "model MSE {model_se} not below mean-imputer MSE {mean_se}"
        );
    }
}
