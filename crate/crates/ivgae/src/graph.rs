//! Bipartite observation graph and trilateral message passing.
//!
//! One node per sample, one node per feature slot, one edge per observed
//! cell (per observed cell × category slot under one-hot). Each layer sends
//! messages along edges in both directions, mean-aggregates them per node,
//! and refines sample, feature, and edge embeddings jointly.
//!
//! Feature slots are ordered to match the unified feature vector h:
//! categorical columns first, then continuous, each in schema order.

use crate::config::EncoderConfig;
use crate::data::Dataset;
use crate::embed::OneHot;
use crate::error::{Error, Result};
use crate::missing::MaskMatrix;
use crate::rng::{sample_without_replacement, RngState};
use crate::tensor::{NodeId, ParamStore, Tape, TapeParams};
use crate::init;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub sample: usize,
    /// Feature-slot index (h-column order).
    pub slot: usize,
    /// Raw value carried by the edge (normalized cell value, or the 0/1
    /// indicator under one-hot).
    pub value: f64,
    /// Originating table cell.
    pub cell: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    pub n_samples: usize,
    pub n_slots: usize,
    /// Sorted by (sample, slot); aggregation always walks this order.
    pub edges: Vec<Edge>,
    /// Edge indices per sample node.
    pub sample_adj: Vec<Vec<usize>>,
    /// Edge indices per feature slot.
    pub slot_adj: Vec<Vec<usize>>,
    /// Original column for each slot and, under one-hot, the encoded
    /// category.
    pub slot_origin: Vec<(usize, Option<usize>)>,
    /// h-column index for each original column (hetero layout).
    pub col_to_slot: Vec<usize>,
}

impl BipartiteGraph {
    fn from_edges(
        n_samples: usize,
        n_slots: usize,
        mut edges: Vec<Edge>,
        slot_origin: Vec<(usize, Option<usize>)>,
        col_to_slot: Vec<usize>,
    ) -> Result<Self> {
        edges.sort_by_key(|e| (e.sample, e.slot));
        let mut sample_adj = vec![Vec::new(); n_samples];
        let mut slot_adj = vec![Vec::new(); n_slots];
        for (idx, e) in edges.iter().enumerate() {
            sample_adj[e.sample].push(idx);
            slot_adj[e.slot].push(idx);
        }
        if let Some(i) = sample_adj.iter().position(Vec::is_empty) {
            return Err(Error::GraphConstruction(format!(
                "sample node {i} has no observed edges"
            )));
        }
        if let Some(j) = slot_adj.iter().position(Vec::is_empty) {
            return Err(Error::GraphConstruction(format!(
                "feature slot {j} has no observed edges"
            )));
        }
        Ok(BipartiteGraph {
            n_samples,
            n_slots,
            edges,
            sample_adj,
            slot_adj,
            slot_origin,
            col_to_slot,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Hetero slot order: categorical columns, then continuous.
    pub fn hetero_slots(d: &Dataset) -> (Vec<(usize, Option<usize>)>, Vec<usize>) {
        let mut slot_origin = Vec::with_capacity(d.n_cols());
        for j in d.categorical_columns() {
            slot_origin.push((j, None));
        }
        for j in d.continuous_columns() {
            slot_origin.push((j, None));
        }
        let mut col_to_slot = vec![0usize; d.n_cols()];
        for (slot, &(j, _)) in slot_origin.iter().enumerate() {
            col_to_slot[j] = slot;
        }
        (slot_origin, col_to_slot)
    }
}

/// One feature node per column; an edge per observed cell carrying the
/// normalized cell value (categorical cells carry their category index; the
/// differentiable layer-0 edge features are gathered from h instead).
pub fn build_graph(d: &Dataset, mask: &MaskMatrix) -> Result<BipartiteGraph> {
    mask.check_shape(d.n_rows(), d.n_cols())?;
    let (slot_origin, col_to_slot) = BipartiteGraph::hetero_slots(d);
    let mut edges = Vec::with_capacity(mask.n_observed());
    for i in 0..d.n_rows() {
        for j in 0..d.n_cols() {
            if mask.is_observed(i, j) {
                edges.push(Edge {
                    sample: i,
                    slot: col_to_slot[j],
                    value: d.get(i, j),
                    cell: (i, j),
                });
            }
        }
    }
    BipartiteGraph::from_edges(d.n_rows(), d.n_cols(), edges, slot_origin, col_to_slot)
}

/// One feature node per expanded one-hot slot; every observed categorical
/// cell contributes one edge to each of its column's category slots.
pub fn build_graph_onehot(
    d: &Dataset,
    mask: &MaskMatrix,
    onehot: &OneHot,
) -> Result<BipartiteGraph> {
    mask.check_shape(d.n_rows(), d.n_cols())?;
    let width = onehot.width();
    let mut edges = Vec::new();
    for i in 0..d.n_rows() {
        for (slot, &(j, _)) in onehot.slot_origin.iter().enumerate() {
            if mask.is_observed(i, j) {
                edges.push(Edge {
                    sample: i,
                    slot,
                    value: onehot.matrix.values()[i * width + slot],
                    cell: (i, j),
                });
            }
        }
    }
    // For the expanded layout every column's first slot stands in for it.
    let mut col_to_slot = vec![usize::MAX; d.n_cols()];
    for (slot, &(j, _)) in onehot.slot_origin.iter().enumerate() {
        if col_to_slot[j] == usize::MAX {
            col_to_slot[j] = slot;
        }
    }
    BipartiteGraph::from_edges(
        d.n_rows(),
        width,
        edges,
        onehot.slot_origin.clone(),
        col_to_slot,
    )
}

/// Removes `floor(rate·cells)` observed cells from message passing for one
/// epoch; the dropped cells become the supervision set (their ground truth
/// is known). Dropout resamples from the epoch-indexed stream. If dropping
/// isolates a node the draw is retried up to 10 times, after which the last
/// draw stands and aggregation falls back to zero vectors for the isolated
/// nodes.
pub fn edge_dropout(
    g: &BipartiteGraph,
    rate: f64,
    rng_state: &RngState,
    epoch: u64,
) -> Result<(BipartiteGraph, Vec<(usize, usize)>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "edge dropout rate must lie in [0,1), got {rate}"
        )));
    }
    // Distinct observed cells, in edge order (one-hot groups slots per cell).
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for e in &g.edges {
        if cells.last() != Some(&e.cell) {
            cells.push(e.cell);
        }
    }
    cells.sort_unstable();
    cells.dedup();
    let k = (rate * cells.len() as f64).floor() as usize;
    if k == 0 {
        return Ok((g.clone(), Vec::new()));
    }

    let mut rng = rng_state.stream_indexed("dropout", epoch);
    let mut kept_graph = None;
    let mut dropped_cells = Vec::new();
    for _attempt in 0..10 {
        let picks = sample_without_replacement(&mut rng, cells.len(), k);
        let mut dropped: Vec<(usize, usize)> = picks.iter().map(|&i| cells[i]).collect();
        dropped.sort_unstable();
        let kept_edges: Vec<Edge> = g
            .edges
            .iter()
            .filter(|e| dropped.binary_search(&e.cell).is_err())
            .copied()
            .collect();
        let isolated = has_isolated(g, &kept_edges);
        let train = BipartiteGraph {
            n_samples: g.n_samples,
            n_slots: g.n_slots,
            sample_adj: adjacency(g.n_samples, &kept_edges, |e| e.sample),
            slot_adj: adjacency(g.n_slots, &kept_edges, |e| e.slot),
            edges: kept_edges,
            slot_origin: g.slot_origin.clone(),
            col_to_slot: g.col_to_slot.clone(),
        };
        dropped_cells = dropped;
        kept_graph = Some(train);
        if !isolated {
            break;
        }
    }
    Ok((kept_graph.expect("at least one attempt"), dropped_cells))
}

fn adjacency(n: usize, edges: &[Edge], key: impl Fn(&Edge) -> usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (idx, e) in edges.iter().enumerate() {
        adj[key(e)].push(idx);
    }
    adj
}

fn has_isolated(g: &BipartiteGraph, kept: &[Edge]) -> bool {
    let mut sample_seen = vec![false; g.n_samples];
    let mut slot_seen = vec![false; g.n_slots];
    for e in kept {
        sample_seen[e.sample] = true;
        slot_seen[e.slot] = true;
    }
    !(sample_seen.iter().all(|&s| s) && slot_seen.iter().all(|&s| s))
}

/// Nodes with no live edges (sample count, slot count).
pub fn isolated_counts(g: &BipartiteGraph) -> (usize, usize) {
    let samples = g.sample_adj.iter().filter(|a| a.is_empty()).count();
    let slots = g.slot_adj.iter().filter(|a| a.is_empty()).count();
    (samples, slots)
}

/// Sample, feature, and edge embeddings at one message-passing layer.
#[derive(Clone, Copy, Debug)]
pub struct GraphEmbeddings {
    pub p: NodeId,
    pub q: NodeId,
    pub e: NodeId,
    pub layer: usize,
}

/// Registers the layer-0 lifts, the free feature-node vectors, and the
/// per-layer transforms. Each concat-then-multiply of the update rules is
/// stored as its per-block weight matrices (`W·[x; y] = x·Wx + y·Wy`), which
/// is the same linear map with fewer flops on the per-edge path.
pub fn register_params(
    params: &mut ParamStore,
    h_width: usize,
    n_slots: usize,
    cfg: &EncoderConfig,
    rng: &RngState,
) -> Result<()> {
    let mut r = rng.stream("init-encoder");
    let d = cfg.hidden;
    params.insert("enc.p0.lift", init::xavier(&mut r, h_width, d))?;
    params.insert("enc.q0", init::xavier(&mut r, n_slots, d))?;
    params.insert("enc.e0.lift", init::xavier(&mut r, 1, d))?;
    for l in 0..cfg.layers {
        for name in [
            "msg_s.q", "msg_s.e", // sample-side message W over [q; e]
            "msg_f.p", "msg_f.e", // feature-side message over [p; e]
            "upd_p.p", "upd_p.h", // sample update Ŵ over [p; h]
            "upd_q.q", "upd_q.h", // feature update Q over [q; h]
            "upd_e.e", "upd_e.p", "upd_e.q", // edge update U over [e; p; q]
        ] {
            params.insert(&format!("enc.l{l}.{name}"), init::xavier(&mut r, d, d))?;
        }
    }
    Ok(())
}

/// Layer-0 embeddings: p⁰ a linear lift of h, q⁰ the free per-slot vectors,
/// e⁰ a linear lift of each edge's scalar taken from h (so categorical edge
/// values stay differentiable through the embedding tables).
pub fn init_embeddings(
    tape: &mut Tape,
    tp: &TapeParams,
    g: &BipartiteGraph,
    h: NodeId,
) -> Result<GraphEmbeddings> {
    let h_width = tape.shape(h)[1];
    let p0_lift = tp.id("enc.p0.lift")?;
    let p = tape.matmul(h, p0_lift)?;
    let q = tp.id("enc.q0")?;
    let flat = tape.reshape(h, vec![tape.shape(h)[0] * h_width, 1])?;
    let edge_cells: Vec<usize> = g
        .edges
        .iter()
        .map(|e| e.sample * h_width + e.slot)
        .collect();
    let scalars = tape.gather_rows(flat, &edge_cells)?;
    let e0_lift = tp.id("enc.e0.lift")?;
    let e = tape.matmul(scalars, e0_lift)?;
    Ok(GraphEmbeddings { p, q, e, layer: 0 })
}

/// One trilateral layer: mean-aggregated edge messages refresh each side,
/// then sample, feature, and (optionally) edge embeddings update. The edge
/// update may be skipped at the last layer, where its output feeds nothing.
pub fn message_pass_layer(
    tape: &mut Tape,
    tp: &TapeParams,
    g: &BipartiteGraph,
    emb: GraphEmbeddings,
    layer: usize,
    update_edges: bool,
) -> Result<GraphEmbeddings> {
    let sample_ids: Vec<usize> = g.edges.iter().map(|e| e.sample).collect();
    let slot_ids: Vec<usize> = g.edges.iter().map(|e| e.slot).collect();
    let name = |part: &str| format!("enc.l{layer}.{part}");

    // Sample-side digest: mean over incident edges of
    // ReLU(q_j·Wq + e_ij·We).
    let w_q = tp.id(&name("msg_s.q"))?;
    let w_e = tp.id(&name("msg_s.e"))?;
    let qw = tape.matmul(emb.q, w_q)?;
    let qw_edges = tape.gather_rows(qw, &slot_ids)?;
    let ew = tape.matmul(emb.e, w_e)?;
    let pre = tape.add(qw_edges, ew)?;
    let msg_s = tape.relu(pre);
    let h_s = tape.segment_mean_rows(msg_s, &sample_ids, g.n_samples)?;

    // Feature-side digest, roles swapped.
    let w_p = tp.id(&name("msg_f.p"))?;
    let w_e2 = tp.id(&name("msg_f.e"))?;
    let pw = tape.matmul(emb.p, w_p)?;
    let pw_edges = tape.gather_rows(pw, &sample_ids)?;
    let ew2 = tape.matmul(emb.e, w_e2)?;
    let pre_f = tape.add(pw_edges, ew2)?;
    let msg_f = tape.relu(pre_f);
    let h_f = tape.segment_mean_rows(msg_f, &slot_ids, g.n_slots)?;

    // Node updates.
    let up_p = tp.id(&name("upd_p.p"))?;
    let up_h = tp.id(&name("upd_p.h"))?;
    let a = tape.matmul(emb.p, up_p)?;
    let b = tape.matmul(h_s, up_h)?;
    let s = tape.add(a, b)?;
    let p_new = tape.relu(s);

    let uq_q = tp.id(&name("upd_q.q"))?;
    let uq_h = tp.id(&name("upd_q.h"))?;
    let a = tape.matmul(emb.q, uq_q)?;
    let b = tape.matmul(h_f, uq_h)?;
    let s = tape.add(a, b)?;
    let q_new = tape.relu(s);

    let e_new = if update_edges {
        let ue_e = tp.id(&name("upd_e.e"))?;
        let ue_p = tp.id(&name("upd_e.p"))?;
        let ue_q = tp.id(&name("upd_e.q"))?;
        let ee = tape.matmul(emb.e, ue_e)?;
        let pn = tape.matmul(p_new, ue_p)?;
        let pn_edges = tape.gather_rows(pn, &sample_ids)?;
        let qn = tape.matmul(q_new, ue_q)?;
        let qn_edges = tape.gather_rows(qn, &slot_ids)?;
        let s1 = tape.add(ee, pn_edges)?;
        let s2 = tape.add(s1, qn_edges)?;
        tape.relu(s2)
    } else {
        emb.e
    };

    Ok(GraphEmbeddings {
        p: p_new,
        q: q_new,
        e: e_new,
        layer: layer + 1,
    })
}

/// Runs the full encoder stack over a graph.
pub fn encode(
    tape: &mut Tape,
    tp: &TapeParams,
    g: &BipartiteGraph,
    h: NodeId,
    cfg: &EncoderConfig,
) -> Result<GraphEmbeddings> {
    let mut emb = init_embeddings(tape, tp, g, h)?;
    for l in 0..cfg.layers {
        let update_edges = l + 1 < cfg.layers;
        emb = message_pass_layer(tape, tp, g, emb, l, update_edges)?;
    }
    Ok(emb)
}
