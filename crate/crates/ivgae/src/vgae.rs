//! Variational core: learnable sample-sample adjacency, GCN posterior over
//! sample latents, and the dual decoder (inner-product adjacency decoder +
//! neighborhood-aggregation feature decoder) trained by an ELBO.

use crate::config::{AdjInit, VgaeConfig};
use crate::error::{Error, Result};
use crate::init;
use crate::rng::{normals, RngState};
use crate::tensor::{NodeId, ParamStore, Tape, TapeParams, Tensor};

/// Clamp bounds for the posterior log-scale before exponentiation.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-6.0, 6.0);

/// Gaussian posterior over sample latents plus the reparameterized draw.
#[derive(Clone, Copy, Debug)]
pub struct GaussianLatent {
    pub mu: NodeId,
    pub log_sigma: NodeId,
    pub sigma: NodeId,
    pub z: NodeId,
}

/// Registers the upper-triangular adjacency logits and the GCN/decoder
/// weights. `knn_features` seeds the adjacency from nearest neighbors when
/// the config asks for it (mean-filled feature rows).
pub fn register_params(
    params: &mut ParamStore,
    n_samples: usize,
    p_width: usize,
    h_width: usize,
    cfg: &VgaeConfig,
    rng: &RngState,
    knn_features: Option<&Tensor>,
) -> Result<()> {
    let mut r = rng.stream("init-vgae");
    let n_logits = n_samples * (n_samples - 1) / 2;
    let logits = match cfg.adj_init {
        AdjInit::Random => init::gaussian(&mut r, vec![n_logits], 0.1),
        AdjInit::Knn => {
            let feats = knn_features.ok_or_else(|| {
                Error::Contract("knn adjacency init requires feature rows".into())
            })?;
            knn_logits(feats, n_samples, 10, &mut r)?
        }
    };
    params.insert("vgae.adj.logits", logits)?;
    let hidden = p_width;
    params.insert("vgae.gcn.w0", init::xavier(&mut r, p_width, hidden))?;
    params.insert("vgae.gcn.w1_mu", init::xavier(&mut r, hidden, cfg.latent))?;
    params.insert("vgae.gcn.w1_sigma", init::xavier(&mut r, hidden, cfg.latent))?;
    params.insert("vgae.dec.h_lift", init::xavier(&mut r, cfg.latent, hidden))?;
    params.insert("vgae.dec.theta_x", init::xavier(&mut r, h_width, hidden))?;
    params.insert("vgae.dec.theta_n", init::xavier(&mut r, hidden, hidden))?;
    Ok(())
}

/// Adjacency logits seeded at +2 for mutual-or-one-way k-nearest-neighbor
/// pairs (Euclidean on feature rows) and −2 elsewhere, plus a little noise.
fn knn_logits(
    feats: &Tensor,
    n: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    if feats.shape()[0] != n {
        return Err(Error::Dimension(format!(
            "knn features have {} rows for {n} samples",
            feats.shape()[0]
        )));
    }
    let w = feats.shape()[1];
    let dist2 = |a: usize, b: usize| -> f64 {
        let (ra, rb) = (&feats.values()[a * w..][..w], &feats.values()[b * w..][..w]);
        ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut neighbor = vec![false; n * n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist2(i, a)
                .partial_cmp(&dist2(i, b))
                .expect("finite features")
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k.min(n - 1)) {
            neighbor[i * n + j] = true;
            neighbor[j * n + i] = true;
        }
    }
    let noise = normals(rng, n * (n - 1) / 2, 0.0, 0.01);
    let mut vals = Vec::with_capacity(n * (n - 1) / 2);
    let mut idx = 0;
    for i in 0..n {
        for j in i + 1..n {
            let base = if neighbor[i * n + j] { 2.0 } else { -2.0 };
            vals.push(base + noise[idx]);
            idx += 1;
        }
    }
    Tensor::new(vec![n * (n - 1) / 2], vals)
}

/// Derived adjacency quantities, all differentiable through the logits.
#[derive(Clone, Copy, Debug)]
pub struct AdjacencyNodes {
    /// σ(logits) with zero diagonal.
    pub weights: NodeId,
    /// D^{−1/2}(A + I)D^{−1/2}.
    pub normalized: NodeId,
}

/// Expands the stored upper triangle to the symmetric weight matrix and its
/// symmetrically normalized form with self-loops.
pub fn adjacency(tape: &mut Tape, tp: &TapeParams, n: usize) -> Result<AdjacencyNodes> {
    let logits = tp.id("vgae.adj.logits")?;
    let full = tape.sym_expand(logits, n)?;
    let sig = tape.sigmoid(full);
    // sym_expand leaves zero logits on the diagonal, which sigmoid maps to
    // 0.5; mask the diagonal back to zero.
    let mut off = Tensor::ones(vec![n, n]);
    for i in 0..n {
        off.values_mut()[i * n + i] = 0.0;
    }
    let off = tape.constant(off);
    let weights = tape.mul(sig, off)?;

    let eye = tape.constant(Tensor::identity(n));
    let with_loops = tape.add(weights, eye)?;
    let deg = tape.sum_axis(with_loops, 1)?;
    let log_deg = tape.log(deg)?;
    let half_neg = tape.scale(log_deg, -0.5);
    let inv_sqrt = tape.exp(half_neg)?;
    let col = tape.reshape(inv_sqrt, vec![n, 1])?;
    let row = tape.reshape(inv_sqrt, vec![1, n])?;
    let outer = tape.matmul(col, row)?;
    let normalized = tape.mul(with_loops, outer)?;
    Ok(AdjacencyNodes {
        weights,
        normalized,
    })
}

/// Two-layer GCN posterior: a shared first layer, then separate mean and
/// log-scale heads; the latent draw is `μ + exp(logσ)⊙ε` with ε supplied by
/// the caller (one draw per epoch from the "reparam" stream).
pub fn gcn_encode(
    tape: &mut Tape,
    tp: &TapeParams,
    p: NodeId,
    a_norm: NodeId,
    eps: &Tensor,
) -> Result<GaussianLatent> {
    let w0 = tp.id("vgae.gcn.w0")?;
    let pw = tape.matmul(p, w0)?;
    let apw = tape.matmul(a_norm, pw)?;
    let h1 = tape.relu(apw);
    let ah = tape.matmul(a_norm, h1)?;

    let w1_mu = tp.id("vgae.gcn.w1_mu")?;
    let w1_sigma = tp.id("vgae.gcn.w1_sigma")?;
    let mu = tape.matmul(ah, w1_mu)?;
    let log_sigma_raw = tape.matmul(ah, w1_sigma)?;
    let log_sigma = tape.clamp(log_sigma_raw, LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1);
    let sigma = tape.exp(log_sigma)?;

    if eps.shape() != tape.shape(mu) {
        return Err(Error::Dimension(format!(
            "reparameterization noise {:?} vs latent {:?}",
            eps.shape(),
            tape.shape(mu)
        )));
    }
    let eps = tape.constant(eps.clone());
    let noise = tape.mul(sigma, eps)?;
    let z = tape.add(mu, noise)?;
    Ok(GaussianLatent {
        mu,
        log_sigma,
        sigma,
        z,
    })
}

/// Inner-product edge decoder. Returns the logit matrix Z·Zᵀ and the edge
/// probabilities σ(Z·Zᵀ); the logits feed the stable ELBO term.
pub fn decode_adjacency(tape: &mut Tape, z: NodeId) -> Result<(NodeId, NodeId)> {
    let logits = tape.matmul_nt(z, z)?;
    let probs = tape.sigmoid(logits);
    Ok((logits, probs))
}

/// One-step neighborhood-aggregation feature decoder:
/// p̂ = ReLU(X·Θx + (Ã·(Z·L))·Θn). The latent lift `L` resolves the
/// recursion of the aggregation rule with a single unrolled step.
pub fn decode_features(
    tape: &mut Tape,
    tp: &TapeParams,
    z: NodeId,
    a_norm: NodeId,
    x_input: NodeId,
) -> Result<NodeId> {
    let h_lift = tp.id("vgae.dec.h_lift")?;
    let theta_x = tp.id("vgae.dec.theta_x")?;
    let theta_n = tp.id("vgae.dec.theta_n")?;
    let h = tape.matmul(z, h_lift)?;
    let agg = tape.matmul(a_norm, h)?;
    let from_x = tape.matmul(x_input, theta_x)?;
    let from_n = tape.matmul(agg, theta_n)?;
    let pre = tape.add(from_x, from_n)?;
    Ok(tape.relu(pre))
}

/// Closed-form KL to the standard-normal prior, summed over samples and
/// latent dimensions: Σ 0.5·(μ² + σ² − 1 − 2logσ).
pub fn kl_divergence(tape: &mut Tape, latent: &GaussianLatent) -> Result<NodeId> {
    let mu2 = tape.mul(latent.mu, latent.mu)?;
    let two_logs = tape.scale(latent.log_sigma, 2.0);
    let sigma2 = tape.exp(two_logs)?;
    let a = tape.add(mu2, sigma2)?;
    let b = tape.add_scalar(a, -1.0);
    let c = tape.sub(b, two_logs)?;
    let total = tape.sum_all(c)?;
    Ok(tape.scale(total, 0.5))
}

/// Negated ELBO: weighted binary cross-entropy between the decoded edge
/// logits and a detached copy of the current adjacency weights, plus the
/// KL term. Both terms are averaged per element so the objective's scale
/// does not grow with n², keeping it commensurate with the imputation loss.
pub fn elbo(
    tape: &mut Tape,
    latent: &GaussianLatent,
    adj_logits: NodeId,
    target_weights: &[f64],
    pos_weight: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    if target_weights.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Contract(
            "adjacency targets must lie in [0,1]".into(),
        ));
    }
    let recon = tape.bce_with_logits(adj_logits, target_weights, pos_weight, true)?;
    let kl_sum = kl_divergence(tape, latent)?;
    let n_elems = tape.values(latent.mu).len() as f64;
    let kl = tape.scale(kl_sum, 1.0 / n_elems);
    let total = tape.add(recon, kl)?;
    Ok((total, recon, kl))
}

/// pos-weight for the ELBO reconstruction term: ratio of zero-mass to
/// one-mass in the (detached) target weights.
pub fn pos_weight_for(target_weights: &[f64]) -> f64 {
    let pos: f64 = target_weights.iter().sum();
    let neg = target_weights.len() as f64 - pos;
    if pos <= 0.0 {
        1.0
    } else {
        (neg / pos).max(1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::VgaeConfig;
    use crate::tensor::grad_check;

    fn cfg(latent: usize) -> VgaeConfig {
        VgaeConfig {
            latent,
            ..VgaeConfig::default()
        }
    }

    /// Parameters for an n-sample toy with identity-friendly sizes.
    fn toy_params(n: usize, width: usize, latent: usize, seed: u64) -> ParamStore {
        let mut params = ParamStore::new();
        register_params(
            &mut params,
            n,
            width,
            width,
            &cfg(latent),
            &RngState::new(seed),
            None,
        )
        .unwrap();
        params
    }

    #[test]
    fn identity_chain_reduces_to_relu() {
        // Ã ≈ I (strongly negative logits), W0 = I, W1μ = I ⟹ μ = ReLU(P).
        let n = 3;
        let mut params = toy_params(n, 2, 2, 0);
        *params.get_mut("vgae.adj.logits").unwrap() =
            Tensor::new(vec![3], vec![-60.0, -60.0, -60.0]).unwrap();
        *params.get_mut("vgae.gcn.w0").unwrap() = Tensor::identity(2);
        *params.get_mut("vgae.gcn.w1_mu").unwrap() = Tensor::identity(2);

        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let p = tape.constant(
            Tensor::from_rows(&[vec![0.5, -1.0], vec![-0.25, 2.0], vec![1.5, 0.0]]).unwrap(),
        );
        let adj = adjacency(&mut tape, &tp, n).unwrap();
        let eps = Tensor::zeros(vec![n, 2]);
        let latent = gcn_encode(&mut tape, &tp, p, adj.normalized, &eps).unwrap();
        let mu = tape.values(latent.mu);
        let expect = [0.5, 0.0, 0.0, 2.0, 1.5, 0.0];
        for (got, want) in mu.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "mu {got} vs {want}");
        }
    }

    #[test]
    fn identical_isolated_samples_share_mu_rows() {
        let n = 4;
        let mut params = toy_params(n, 3, 2, 1);
        *params.get_mut("vgae.adj.logits").unwrap() =
            Tensor::new(vec![6], vec![-60.0; 6]).unwrap();
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let rows = vec![
            vec![0.4, -0.2, 0.9],
            vec![0.4, -0.2, 0.9],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 0.5, -0.5],
        ];
        let p = tape.constant(Tensor::from_rows(&rows).unwrap());
        let adj = adjacency(&mut tape, &tp, n).unwrap();
        let eps = Tensor::zeros(vec![n, 2]);
        let latent = gcn_encode(&mut tape, &tp, p, adj.normalized, &eps).unwrap();
        let mu = tape.values(latent.mu);
        assert_eq!(&mu[0..2], &mu[2..4], "identical inputs, different mu");
    }

    #[test]
    fn normalization_matches_direct_recomputation() {
        let n = 5;
        let params = toy_params(n, 2, 2, 2);
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let adj = adjacency(&mut tape, &tp, n).unwrap();
        let a = tape.values(adj.weights).to_vec();
        let got = tape.values(adj.normalized);

        // Direct dense recomputation from the weight matrix.
        let mut with_loops = a.clone();
        for i in 0..n {
            with_loops[i * n + i] += 1.0;
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| with_loops[i * n..(i + 1) * n].iter().sum::<f64>())
            .collect();
        for i in 0..n {
            for j in 0..n {
                let want = with_loops[i * n + j] / (deg[i].sqrt() * deg[j].sqrt());
                let have = got[i * n + j];
                assert!(
                    (want - have).abs() < 1e-12,
                    "({i},{j}): {have} vs {want}"
                );
            }
        }
        // Weights: zero diagonal, entries in (0,1), symmetric.
        for i in 0..n {
            assert_eq!(a[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(a[i * n + j], a[j * n + i]);
                if i != j {
                    assert!(a[i * n + j] > 0.0 && a[i * n + j] < 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_latents_decode_to_half() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![3, 4]));
        let (_, probs) = decode_adjacency(&mut tape, z).unwrap();
        assert!(tape.values(probs).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_latents_stay_finite() {
        let mut tape = Tape::new();
        let z = tape.constant(
            Tensor::from_rows(&[vec![10.0, 0.0], vec![10.0, 0.0]]).unwrap(),
        );
        let (logits, probs) = decode_adjacency(&mut tape, z).unwrap();
        assert_eq!(tape.values(logits)[1], 100.0);
        let p = tape.values(probs)[1];
        assert!(p > 0.999_999 && p < 1.0);
    }

    #[test]
    fn decoded_adjacency_is_bit_symmetric() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..5 * 3).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.3).collect();
        let z = tape.constant(Tensor::new(vec![5, 3], vals).unwrap());
        let (_, probs) = decode_adjacency(&mut tape, z).unwrap();
        let a = tape.values(probs);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(a[i * 5 + j], a[j * 5 + i]);
            }
        }
    }

    #[test]
    fn feature_decoder_reduces_to_relu_linear_without_neighbors() {
        let n = 3;
        let mut params = toy_params(n, 2, 2, 3);
        *params.get_mut("vgae.dec.theta_n").unwrap() = Tensor::zeros(vec![2, 2]);
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let x = tape.constant(
            Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-0.5, 0.75]]).unwrap(),
        );
        let z = tape.constant(Tensor::zeros(vec![n, 2]));
        let adj = adjacency(&mut tape, &tp, n).unwrap();
        let p_hat = decode_features(&mut tape, &tp, z, adj.normalized, x).unwrap();

        let theta_x = tp.id("vgae.dec.theta_x").unwrap();
        let lin = tape.matmul(x, theta_x).unwrap();
        let want = tape.relu(lin);
        assert_eq!(tape.values(p_hat), tape.values(want));
    }

    #[test]
    fn doubling_latents_doubles_decoder_output_when_x_is_zero() {
        // With X = 0 the decoder is positively homogeneous in Z.
        let n = 4;
        let params = toy_params(n, 3, 2, 4);
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let x = tape.constant(Tensor::zeros(vec![n, 3]));
        let zv = Tensor::from_rows(&[
            vec![0.3, -0.7],
            vec![1.0, 0.2],
            vec![-0.4, 0.9],
            vec![0.1, 0.1],
        ])
        .unwrap();
        let z1 = tape.constant(zv.clone());
        let z2vals: Vec<f64> = zv.values().iter().map(|v| 2.0 * v).collect();
        let z2 = tape.constant(Tensor::new(vec![n, 2], z2vals).unwrap());
        let adj = adjacency(&mut tape, &tp, n).unwrap();
        let p1 = decode_features(&mut tape, &tp, z1, adj.normalized, x).unwrap();
        let p2 = decode_features(&mut tape, &tp, z2, adj.normalized, x).unwrap();
        for (a, b) in tape.values(p1).iter().zip(tape.values(p2)) {
            assert!((2.0 * a - b).abs() < 1e-12, "{b} is not twice {a}");
        }
    }

    #[test]
    fn kl_zero_at_prior_and_half_for_unit_mean() {
        let mut tape = Tape::new();
        // μ = 0, σ = 1 (logσ = 0) → KL = 0.
        let mu = tape.constant(Tensor::zeros(vec![2, 3]));
        let log_sigma = tape.constant(Tensor::zeros(vec![2, 3]));
        let sigma = tape.exp(log_sigma).unwrap();
        let z = mu;
        let latent = GaussianLatent {
            mu,
            log_sigma,
            sigma,
            z,
        };
        let kl = kl_divergence(&mut tape, &latent).unwrap();
        assert!(tape.values(kl)[0].abs() < 1e-10);

        // Single latent μ = 1, σ = 1 → KL = 0.5.
        let mu = tape.constant(Tensor::scalar(1.0));
        let log_sigma = tape.constant(Tensor::scalar(0.0));
        let sigma = tape.exp(log_sigma).unwrap();
        let latent = GaussianLatent {
            mu,
            log_sigma,
            sigma,
            z: mu,
        };
        let kl = kl_divergence(&mut tape, &latent).unwrap();
        assert!((tape.values(kl)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_at_random_points() {
        let state = RngState::new(5);
        let mut rng = state.stream("test");
        for _ in 0..10 {
            let mut tape = Tape::new();
            let mu = tape.constant(Tensor::new(vec![6], normals(&mut rng, 6, 0.0, 2.0)).unwrap());
            let log_sigma =
                tape.constant(Tensor::new(vec![6], normals(&mut rng, 6, 0.0, 1.5)).unwrap());
            let sigma = tape.exp(log_sigma).unwrap();
            let latent = GaussianLatent {
                mu,
                log_sigma,
                sigma,
                z: mu,
            };
            let kl = kl_divergence(&mut tape, &latent).unwrap();
            assert!(tape.values(kl)[0] >= 0.0);
        }
    }

    #[test]
    fn recon_floor_is_binary_entropy_and_decreases_in_sharpness() {
        // When σ(logits) equals the soft target exactly, the BCE sits at the
        // entropy floor H(t), which shrinks as targets sharpen.
        let entropy = |t: f64| -(t * t.ln() + (1.0 - t) * (1.0_f64 - t).ln());
        let mut floors = Vec::new();
        for t in [0.6f64, 0.9, 0.99] {
            let logit = (t / (1.0 - t)).ln();
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::new(vec![4], vec![logit; 4]).unwrap());
            let loss = tape
                .bce_with_logits(logits, &[t; 4], 1.0, true)
                .unwrap();
            let got = tape.values(loss)[0];
            assert!((got - entropy(t)).abs() < 1e-12, "floor {got} vs {}", entropy(t));
            floors.push(got);
        }
        assert!(floors[0] > floors[1] && floors[1] > floors[2]);
    }

    #[test]
    fn reparameterization_is_affine_in_mu() {
        let n = 3;
        let params = toy_params(n, 2, 2, 6);
        let eps_vals = {
            let state = RngState::new(7);
            Tensor::new(vec![n, 2], normals(&mut state.stream("reparam"), 6, 0.0, 1.0)).unwrap()
        };
        let run = |shift: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let tp = TapeParams::register(&mut tape, &params);
            let base = Tensor::from_rows(&[
                vec![0.2 + shift, -0.1],
                vec![0.5, 0.3 + shift],
                vec![-0.7, 0.9],
            ])
            .unwrap();
            let p = tape.constant(base);
            let adj = adjacency(&mut tape, &tp, n).unwrap();
            let latent = gcn_encode(&mut tape, &tp, p, adj.normalized, &eps_vals).unwrap();
            // z − μ = σ ⊙ ε up to the rounding of the final addition.
            let diff = tape.sub(latent.z, latent.mu).unwrap();
            let eps_node = tape.constant(eps_vals.clone());
            let want = tape.mul(latent.sigma, eps_node).unwrap();
            let d = tape.values(diff);
            let w = tape.values(want);
            for (a, b) in d.iter().zip(w) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
            tape.values(latent.z).to_vec()
        };
        let _ = run(0.0);
        let _ = run(0.1);
    }

    #[test]
    fn elbo_gradients_match_finite_differences_on_toy_graph() {
        // 4-node graph: gradient of the full negated ELBO w.r.t. every
        // parameter (including W0, per the module contract).
        let n = 4;
        let params = toy_params(n, 3, 2, 8);
        let p_rows = Tensor::from_rows(&[
            vec![0.5, -0.2, 0.8],
            vec![0.1, 0.9, -0.3],
            vec![-0.6, 0.4, 0.2],
            vec![0.3, 0.3, 0.3],
        ])
        .unwrap();
        let eps = {
            let state = RngState::new(9);
            Tensor::new(vec![n, 2], normals(&mut state.stream("reparam"), 8, 0.0, 1.0)).unwrap()
        };
        // The reconstruction target is a detached copy of the adjacency
        // weights; freeze it outside the closure so finite differences see
        // the same constant the analytic gradient does.
        let target = {
            let mut tape = Tape::new();
            let tp = TapeParams::register(&mut tape, &params);
            let adj = adjacency(&mut tape, &tp, n).unwrap();
            tape.values(adj.weights).to_vec()
        };
        let pw = pos_weight_for(&target);
        let report = grad_check(&params, 1e-3, 1e-3, 40, |tape, tp| {
            let p = tape.constant(p_rows.clone());
            let adj = adjacency(tape, tp, n)?;
            let latent = gcn_encode(tape, tp, p, adj.normalized, &eps)?;
            let (logits, _) = decode_adjacency(tape, latent.z)?;
            let (total, _, _) = elbo(tape, &latent, logits, &target, pw)?;
            Ok(total)
        })
        .unwrap();
        assert!(report.passed(), "{:#?}", report.entries);
    }

    #[test]
    fn negative_pos_weight_rejected() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        assert!(matches!(
            tape.bce_with_logits(logits, &[0.5, 0.5], 0.0, true),
            Err(Error::Config(_))
        ));
    }
}
