//! Central-finite-difference verification of tape gradients.

use super::adam::ParamStore;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Parameters registered on a tape, resolvable by name.
pub struct TapeParams {
    ids: Vec<NodeId>,
    names: Vec<String>,
}

impl TapeParams {
    /// Registers every parameter of the store as a trainable leaf, in store
    /// order.
    pub fn register(tape: &mut Tape, store: &ParamStore) -> TapeParams {
        let mut ids = Vec::with_capacity(store.len());
        let mut names = Vec::with_capacity(store.len());
        for (name, tensor) in store.iter() {
            ids.push(tape.leaf(tensor.clone()));
            names.push(name.to_string());
        }
        TapeParams { ids, names }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradients after backward, aligned with the originating store.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.ids
            .iter()
            .map(|&id| tape.grad(id).map(<[f64]>::to_vec))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub ok: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Compares analytic gradients of a scalar-valued tape function against
/// central finite differences.
///
/// `f` must be deterministic given the parameters: it is evaluated twice up
/// front and must reproduce the loss bit-for-bit. At most `max_per_param`
/// elements of each parameter are perturbed (strided, deterministic).
pub fn grad_check<F>(
    store: &ParamStore,
    step: f64,
    tol: f64,
    max_per_param: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &TapeParams) -> Result<NodeId>,
{
    grad_check_with(store, step, tol, max_per_param, |s, need_grads| {
        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, s);
        let root = f(&mut tape, &params)?;
        if tape.values(root).len() != 1 {
            return Err(Error::Contract("grad_check target must be scalar".into()));
        }
        let loss = tape.values(root)[0];
        let grads = if need_grads {
            tape.backward(root)?;
            Some(params.collect_grads(&tape))
        } else {
            None
        };
        Ok((loss, grads))
    })
}

/// Generalized form: the evaluator owns its tape(s) and returns the scalar
/// loss plus, when asked, analytic gradients aligned with the store.
pub fn grad_check_with<F>(
    store: &ParamStore,
    step: f64,
    tol: f64,
    max_per_param: usize,
    eval: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, bool) -> Result<(f64, Option<Vec<Option<Vec<f64>>>>)>,
{
    if step == 0.0 {
        return Err(Error::Contract("grad_check step must be nonzero".into()));
    }

    let (l1, _) = eval(store, false)?;
    let (l2, _) = eval(store, false)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Determinism(format!(
            "loss changed between evaluations under fixed inputs: {l1} vs {l2}"
        )));
    }

    let (_, grads) = eval(store, true)?;
    let analytic =
        grads.ok_or_else(|| Error::Contract("evaluator returned no gradients".into()))?;
    if analytic.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }

    let mut entries = Vec::new();
    for (i, (name, tensor)) in store.iter().enumerate() {
        let len = tensor.len();
        let stride = len.div_ceil(max_per_param).max(1);
        let mut max_err = 0.0f64;
        let mut checked = 0;
        for j in (0..len).step_by(stride) {
            let mut plus = store.clone();
            plus.get_mut(name).expect("exists").values_mut()[j] += step;
            let mut minus = store.clone();
            minus.get_mut(name).expect("exists").values_mut()[j] -= step;
            let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * step);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            max_err = max_err.max(rel_err(a, numeric));
            checked += 1;
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_err: max_err,
            checked,
            ok: max_err <= tol,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
