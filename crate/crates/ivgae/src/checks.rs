//! Gradient-fidelity suite: every differentiable tape operation checked
//! against central finite differences at random points away from kinks,
//! plus the composite training losses. Backs the `grad-check` CLI command.

use crate::config::{Config, EmbeddingMode};
use crate::data::{self, Dataset};
use crate::error::Result;
use crate::graph;
use crate::missing::gen_mcar;
use crate::rng::{normals, uniforms, RngState};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape, TapeParams, Tensor};
use crate::train;
use crate::vgae;
use crate::{init, synth};

pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Distance from zero enforced on ReLU inputs (and from clamp bounds) so
/// finite differences never straddle a kink.
const KINK_MARGIN: f64 = 1e-2;

const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-3;
/// Random points probed per primitive operation.
const POINTS: usize = 10;

fn away_from_kinks(vals: &mut [f64]) {
    for v in vals.iter_mut() {
        if v.abs() < KINK_MARGIN {
            *v = if *v >= 0.0 {
                *v + KINK_MARGIN
            } else {
                *v - KINK_MARGIN
            };
        }
    }
}

/// One primitive case: inputs named in `store`, scalarized via a constant
/// weighting so every output element has a distinct pullback.
fn check_primitive<F>(name: &str, seed: u64, entries: &mut Vec<SuiteEntry>, build: F) -> Result<()>
where
    F: Fn(&mut Tape, &TapeParams) -> Result<crate::tensor::NodeId>,
    F: Clone,
{
    let mut worst: Option<GradCheckReport> = None;
    for point in 0..POINTS {
        let store = primitive_inputs(name, seed + point as u64)?;
        let report = grad_check(&store, FD_STEP, PRIMITIVE_TOL, 16, build.clone())?;
        let replace = match &worst {
            Some(w) => report.max_rel_err() > w.max_rel_err(),
            None => true,
        };
        if replace {
            worst = Some(report);
        }
    }
    entries.push(SuiteEntry {
        name: name.to_string(),
        report: worst.expect("at least one point"),
    });
    Ok(())
}

/// Fresh random inputs for a primitive case; shapes fixed per case name.
fn primitive_inputs(name: &str, seed: u64) -> Result<ParamStore> {
    let state = RngState::new(0xC0FFEE ^ seed);
    let mut rng = state.stream(name);
    let mut store = ParamStore::new();
    let mut mat = |store: &mut ParamStore, key: &str, r: usize, c: usize| -> Result<()> {
        let mut vals = normals(&mut rng, r * c, 0.0, 1.0);
        away_from_kinks(&mut vals);
        store.insert(key, Tensor::new(vec![r, c], vals)?)
    };
    match name {
        "matmul" | "matmul_nt" => {
            mat(&mut store, "a", 3, 4)?;
            if name == "matmul" {
                mat(&mut store, "b", 4, 2)?;
            } else {
                mat(&mut store, "b", 2, 4)?;
            }
        }
        "add" | "sub" | "mul" => {
            mat(&mut store, "a", 3, 3)?;
            mat(&mut store, "b", 3, 3)?;
            store.insert("s", Tensor::scalar(0.7))?;
        }
        "scale" | "add_scalar" | "relu" | "sigmoid" | "clamp" | "softmax_rows" | "sum_all"
        | "mean_all" | "sum_axis" | "mean_axis" | "transpose" | "reshape" | "slice_rows"
        | "gather_rows" | "segment_mean_rows" | "add_bias_row" => {
            mat(&mut store, "a", 4, 3)?;
            if name == "add_bias_row" {
                mat(&mut store, "bias", 1, 3)?;
            }
        }
        "exp" => {
            let vals = uniforms(&mut rng, 12, -2.0, 2.0);
            store.insert("a", Tensor::new(vec![4, 3], vals)?)?;
        }
        "log" => {
            let vals = uniforms(&mut rng, 12, 0.1, 3.0);
            store.insert("a", Tensor::new(vec![4, 3], vals)?)?;
        }
        "concat" => {
            mat(&mut store, "a", 3, 2)?;
            mat(&mut store, "b", 3, 4)?;
        }
        "sym_expand" => {
            let mut vals = normals(&mut rng, 10, 0.0, 1.0);
            away_from_kinks(&mut vals);
            store.insert("a", Tensor::new(vec![10], vals)?)?;
        }
        "bce_with_logits" => {
            mat(&mut store, "a", 4, 3)?;
        }
        "ce_softmax_rows" => {
            mat(&mut store, "a", 4, 5)?;
        }
        other => {
            return Err(crate::Error::Contract(format!(
                "unknown primitive case {other}"
            )))
        }
    }
    Ok(store)
}

/// Runs every gradient check; returns one entry per case.
pub fn grad_check_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();

    // Constant weights detach the scalarization from the checked op.
    let weight = |tape: &mut Tape, rows: usize, cols: usize| {
        let vals: Vec<f64> = (0..rows * cols).map(|i| 0.3 + 0.1 * i as f64).collect();
        tape.constant(Tensor::new(vec![rows, cols], vals).expect("static shape"))
    };

    check_primitive("matmul", seed, &mut entries, move |tape, tp| {
        let c = tape.matmul(tp.id("a")?, tp.id("b")?)?;
        let w = weight(tape, 3, 2);
        let p = tape.mul(c, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("matmul_nt", seed, &mut entries, move |tape, tp| {
        let c = tape.matmul_nt(tp.id("a")?, tp.id("b")?)?;
        let w = weight(tape, 3, 2);
        let p = tape.mul(c, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("add", seed, &mut entries, move |tape, tp| {
        let c = tape.add(tp.id("a")?, tp.id("b")?)?;
        let c = tape.add(c, tp.id("s")?)?; // scalar broadcast branch
        let w = weight(tape, 3, 3);
        let p = tape.mul(c, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("sub", seed, &mut entries, move |tape, tp| {
        let c = tape.sub(tp.id("a")?, tp.id("b")?)?;
        let c = tape.sub(c, tp.id("s")?)?;
        let w = weight(tape, 3, 3);
        let p = tape.mul(c, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("mul", seed, &mut entries, move |tape, tp| {
        let c = tape.mul(tp.id("a")?, tp.id("b")?)?;
        let c = tape.mul(c, tp.id("s")?)?;
        let w = weight(tape, 3, 3);
        let p = tape.mul(c, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("scale", seed, &mut entries, |tape, tp| {
        let c = tape.scale(tp.id("a")?, -1.7);
        tape.sum_all(c)
    })?;
    check_primitive("add_scalar", seed, &mut entries, |tape, tp| {
        let c = tape.add_scalar(tp.id("a")?, 2.5);
        let sq = tape.mul(c, c)?;
        tape.sum_all(sq)
    })?;
    check_primitive("relu", seed, &mut entries, |tape, tp| {
        let c = tape.relu(tp.id("a")?);
        tape.sum_all(c)
    })?;
    check_primitive("sigmoid", seed, &mut entries, |tape, tp| {
        let c = tape.sigmoid(tp.id("a")?);
        let sq = tape.mul(c, c)?;
        tape.sum_all(sq)
    })?;
    check_primitive("exp", seed, &mut entries, |tape, tp| {
        let c = tape.exp(tp.id("a")?)?;
        tape.sum_all(c)
    })?;
    check_primitive("log", seed, &mut entries, |tape, tp| {
        let c = tape.log(tp.id("a")?)?;
        tape.sum_all(c)
    })?;
    check_primitive("clamp", seed, &mut entries, |tape, tp| {
        // Bounds far outside the sampled range: the identity region only.
        let c = tape.clamp(tp.id("a")?, -50.0, 50.0);
        let sq = tape.mul(c, c)?;
        tape.sum_all(sq)
    })?;
    check_primitive("softmax_rows", seed, &mut entries, move |tape, tp| {
        let c = tape.softmax_rows(tp.id("a")?)?;
        let w = weight(tape, 4, 3);
        let p = tape.mul(c, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("sum_all", seed, &mut entries, |tape, tp| {
        tape.sum_all(tp.id("a")?)
    })?;
    check_primitive("mean_all", seed, &mut entries, |tape, tp| {
        tape.mean_all(tp.id("a")?)
    })?;
    check_primitive("sum_axis", seed, &mut entries, |tape, tp| {
        let s0 = tape.sum_axis(tp.id("a")?, 0)?;
        let s1 = tape.sum_axis(tp.id("a")?, 1)?;
        let a = tape.sum_all(s0)?;
        let sq = tape.mul(s1, s1)?;
        let b = tape.sum_all(sq)?;
        tape.add(a, b)
    })?;
    check_primitive("mean_axis", seed, &mut entries, |tape, tp| {
        let s0 = tape.mean_axis(tp.id("a")?, 0)?;
        let s1 = tape.mean_axis(tp.id("a")?, 1)?;
        let sq = tape.mul(s0, s0)?;
        let a = tape.sum_all(sq)?;
        let b = tape.sum_all(s1)?;
        tape.add(a, b)
    })?;
    check_primitive("concat", seed, &mut entries, move |tape, tp| {
        let c = tape.concat(&[tp.id("a")?, tp.id("b")?], 1)?;
        let w = weight(tape, 3, 6);
        let p = tape.mul(c, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("gather_rows", seed, &mut entries, |tape, tp| {
        let g = tape.gather_rows(tp.id("a")?, &[3, 0, 3, 2])?;
        let sq = tape.mul(g, g)?;
        tape.sum_all(sq)
    })?;
    check_primitive("segment_mean_rows", seed, &mut entries, |tape, tp| {
        let g = tape.segment_mean_rows(tp.id("a")?, &[1, 0, 1, 1], 3)?;
        let sq = tape.mul(g, g)?;
        tape.sum_all(sq)
    })?;
    check_primitive("slice_rows", seed, &mut entries, |tape, tp| {
        let s = tape.slice_rows(tp.id("a")?, 1, 2)?;
        let sq = tape.mul(s, s)?;
        tape.sum_all(sq)
    })?;
    check_primitive("reshape", seed, &mut entries, |tape, tp| {
        let r = tape.reshape(tp.id("a")?, vec![2, 6])?;
        let sq = tape.mul(r, r)?;
        tape.sum_all(sq)
    })?;
    check_primitive("transpose", seed, &mut entries, move |tape, tp| {
        let t = tape.transpose(tp.id("a")?)?;
        let w = weight(tape, 3, 4);
        let p = tape.mul(t, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("sym_expand", seed, &mut entries, move |tape, tp| {
        let m = tape.sym_expand(tp.id("a")?, 5)?;
        let w = weight(tape, 5, 5);
        let p = tape.mul(m, w)?;
        tape.sum_all(p)
    })?;
    check_primitive("add_bias_row", seed, &mut entries, |tape, tp| {
        let c = tape.add_bias_row(tp.id("a")?, tp.id("bias")?)?;
        let sq = tape.mul(c, c)?;
        tape.sum_all(sq)
    })?;
    check_primitive("bce_with_logits", seed, &mut entries, |tape, tp| {
        let targets = [0.0, 1.0, 0.25, 0.5, 0.75, 1.0, 0.0, 0.5, 0.1, 0.9, 0.3, 0.6];
        tape.bce_with_logits(tp.id("a")?, &targets, 1.8, true)
    })?;
    check_primitive("ce_softmax_rows", seed, &mut entries, |tape, tp| {
        let ce = tape.ce_softmax_rows(tp.id("a")?, &[0, 2, 4, 1])?;
        tape.mean_all(ce)
    })?;

    entries.push(composite_imputation_loss(seed, EmbeddingMode::Hetero)?);
    entries.push(composite_imputation_loss(seed, EmbeddingMode::Onehot)?);
    entries.push(composite_elbo_six_nodes(seed)?);
    Ok(entries)
}

/// Small config so composite checks stay fast: the full forward pass runs,
/// only the widths shrink.
fn toy_config(mode: EmbeddingMode, seed: u64) -> Config {
    let mut cfg = Config::desk();
    cfg.embedding.mode = mode;
    cfg.embedding.d_tok = 4;
    cfg.encoder.hidden = 6;
    cfg.encoder.layers = 2;
    cfg.vgae.latent = 4;
    cfg.train.seed = seed;
    cfg
}

/// Full imputation-loss path: embedding → message passing → variational
/// decode → edge head → hybrid loss, differentiated w.r.t. every parameter.
fn composite_imputation_loss(seed: u64, mode: EmbeddingMode) -> Result<SuiteEntry> {
    let raw = synth::mixed(8, 2, 1, 3, 0.05, 0xFACE ^ seed)?;
    let mask = gen_mcar(&raw, 0.25, seed)?;
    let cfg = toy_config(mode, seed);
    let d_norm = data::normalize(&raw, cfg.train.normalization, Some(&mask))?;
    let (g, onehot) = train::build_graph_for(&d_norm, &mask, &cfg)?;
    let state = train::init_state(&d_norm, &mask, &cfg)?;

    let held: Vec<(usize, usize)> = (0..raw.n_rows())
        .flat_map(|i| (0..raw.n_cols()).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.is_missing(i, j))
        .collect();
    // Detached categorical targets, frozen at the base point.
    let cat_cells: Vec<(usize, usize)> = held
        .iter()
        .copied()
        .filter(|&(_, j)| d_norm.is_categorical(j))
        .collect();
    let cat_targets = match mode {
        EmbeddingMode::Hetero => train::hetero_cat_targets(&cat_cells, &d_norm, &state.params)?,
        EmbeddingMode::Onehot => Vec::new(),
    };

    let cfg2 = state.config;
    let report = grad_check_with(
        &state.params,
        FD_STEP,
        COMPOSITE_TOL,
        8,
        move |probe_store, need_grads| {
            let probe = train::ModelState {
                params: probe_store.clone(),
                adam: crate::tensor::AdamState::for_params(probe_store),
                rng: RngState::new(cfg2.train.seed),
                epoch: 0,
                config: cfg2,
                refined_p0: None,
                fallback_count: 0,
                empty_holdout_count: 0,
            };
            let mut fp = train::forward(&probe, &d_norm, &mask, &g, onehot.as_ref(), 0)?;
            let preds = train::predict_cells(
                &mut fp.tape,
                &fp.tp,
                fp.p_hat,
                fp.emb.q,
                &g,
                &d_norm,
                &held,
                mode,
            )?;
            let loss = train::imputation_loss(&mut fp.tape, &preds, &d_norm, &cat_targets, mode)?;
            let value = fp.tape.values(loss)[0];
            let grads = if need_grads {
                fp.tape.backward(loss)?;
                Some(fp.tp.collect_grads(&fp.tape))
            } else {
                None
            };
            Ok((value, grads))
        },
    )?;
    Ok(SuiteEntry {
        name: format!(
            "l_imp_{}",
            match mode {
                EmbeddingMode::Hetero => "hetero",
                EmbeddingMode::Onehot => "onehot",
            }
        ),
        report,
    })
}

/// Negated ELBO on a 6-node sample graph with frozen reconstruction target.
fn composite_elbo_six_nodes(seed: u64) -> Result<SuiteEntry> {
    let n = 6;
    let width = 5;
    let latent = 3;
    let rng = RngState::new(0xE1B0 ^ seed);
    let mut store = ParamStore::new();
    vgae::register_params(
        &mut store,
        n,
        width,
        width,
        &crate::config::VgaeConfig {
            latent,
            ..Default::default()
        },
        &rng,
        None,
    )?;
    let p_rows = init::gaussian(&mut rng.stream("p"), vec![n, width], 0.8);
    let eps = init::gaussian(&mut rng.stream("reparam"), vec![n, latent], 1.0);

    // Freeze the detached reconstruction target at the base point.
    let target = {
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &store);
        let adj = vgae::adjacency(&mut tape, &tp, n)?;
        tape.values(adj.weights).to_vec()
    };
    let pw = vgae::pos_weight_for(&target);

    let report = grad_check(&store, FD_STEP, COMPOSITE_TOL, 16, move |tape, tp| {
        let p = tape.constant(p_rows.clone());
        let adj = vgae::adjacency(tape, tp, n)?;
        let latent = vgae::gcn_encode(tape, tp, p, adj.normalized, &eps)?;
        let (logits, _) = vgae::decode_adjacency(tape, latent.z)?;
        let (total, _, _) = vgae::elbo(tape, &latent, logits, &target, pw)?;
        Ok(total)
    })?;
    Ok(SuiteEntry {
        name: "elbo_6_nodes".into(),
        report,
    })
}

/// Formats the suite as the pass/fail table the CLI prints.
pub fn format_table(entries: &[SuiteEntry]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>12}  result", "check", "max rel err");
    for e in entries {
        let _ = writeln!(
            out,
            "{:<24} {:>12.3e}  {}",
            e.name,
            e.report.max_rel_err(),
            if e.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}
