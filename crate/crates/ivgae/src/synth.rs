//! Synthetic dataset generators for validation and benchmarks.

use crate::data::{ColumnSchema, Dataset};
use crate::error::Result;
use crate::rng::{normals, RngState};

/// Low-rank factor model: X = U·Vᵀ + σ·ε with U ∈ ℝ^{n×r}, V ∈ ℝ^{p×r},
/// all entries standard normal. Columns are linear combinations of `rank`
/// shared factors, so rows carry strong mutual information.
pub fn rank_factor(n: usize, p: usize, rank: usize, noise_std: f64, seed: u64) -> Dataset {
    let state = RngState::new(seed);
    let u = normals(&mut state.stream("synth-u"), n * rank, 0.0, 1.0);
    let v = normals(&mut state.stream("synth-v"), p * rank, 0.0, 1.0);
    let eps = normals(&mut state.stream("synth-noise"), n * p, 0.0, 1.0);
    let mut cells = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for r in 0..rank {
                s += u[i * rank + r] * v[j * rank + r];
            }
            cells[i * p + j] = s + noise_std * eps[i * p + j];
        }
    }
    let schema = (0..p)
        .map(|j| ColumnSchema::continuous(&format!("f{j}")))
        .collect();
    Dataset::new(schema, cells, n).expect("consistent shape")
}

/// Independent standard-normal columns (no structure to exploit).
pub fn gaussian(n: usize, p: usize, seed: u64) -> Dataset {
    let state = RngState::new(seed);
    let cells = normals(&mut state.stream("synth-gauss"), n * p, 0.0, 1.0);
    let schema = (0..p)
        .map(|j| ColumnSchema::continuous(&format!("x{j}")))
        .collect();
    Dataset::new(schema, cells, n).expect("consistent shape")
}

/// Mixed-type generator: continuous columns follow a rank-2 factor model;
/// categorical columns quantile-bin their own latent projection, so the
/// categories correlate with the continuous block.
pub fn mixed(
    n: usize,
    p_num: usize,
    p_cat: usize,
    categories: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    let rank = 2;
    let p = p_num + p_cat;
    let state = RngState::new(seed);
    let u = normals(&mut state.stream("synth-u"), n * rank, 0.0, 1.0);
    let v = normals(&mut state.stream("synth-v"), p * rank, 0.0, 1.0);
    let eps = normals(&mut state.stream("synth-noise"), n * p, 0.0, 1.0);

    let score = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for r in 0..rank {
            s += u[i * rank + r] * v[j * rank + r];
        }
        s + noise_std * eps[i * p + j]
    };

    let mut schema: Vec<ColumnSchema> = Vec::with_capacity(p);
    let mut cells = vec![0.0; n * p];
    for j in 0..p_num {
        for i in 0..n {
            cells[i * p + j] = score(i, j);
        }
        schema.push(ColumnSchema::continuous(&format!("num{j}")));
    }
    for jc in 0..p_cat {
        let j = p_num + jc;
        let mut scores: Vec<f64> = (0..n).map(|i| score(i, j)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        // Quantile edges split rows evenly across categories.
        let edges: Vec<f64> = (1..categories)
            .map(|k| sorted[k * n / categories])
            .collect();
        for (i, s) in scores.iter_mut().enumerate() {
            let cat = edges.iter().filter(|&&e| *s >= e).count();
            cells[i * p + j] = cat as f64;
        }
        let labels: Vec<String> = (0..categories).map(|c| format!("c{c}")).collect();
        let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        schema.push(ColumnSchema::categorical(&format!("cat{jc}"), &label_refs));
    }
    Dataset::new(schema, cells, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_factor_shapes_and_determinism() {
        let a = rank_factor(50, 8, 2, 0.05, 7);
        let b = rank_factor(50, 8, 2, 0.05, 7);
        assert_eq!((a.n_rows(), a.n_cols()), (50, 8));
        assert_eq!(a.cells(), b.cells());
        assert_ne!(a.cells(), rank_factor(50, 8, 2, 0.05, 8).cells());
    }

    #[test]
    fn rank_one_columns_are_nearly_proportional() {
        let d = rank_factor(200, 4, 1, 0.0, 3);
        // With zero noise, column j equals v_j · u, so column correlations
        // are ±1.
        let col = |j: usize| -> Vec<f64> { (0..200).map(|i| d.get(i, j)).collect() };
        let (a, b) = (col(0), col(1));
        let corr = {
            let ma = a.iter().sum::<f64>() / 200.0;
            let mb = b.iter().sum::<f64>() / 200.0;
            let mut num = 0.0;
            let mut da = 0.0;
            let mut db = 0.0;
            for i in 0..200 {
                num += (a[i] - ma) * (b[i] - mb);
                da += (a[i] - ma).powi(2);
                db += (b[i] - mb).powi(2);
            }
            num / (da.sqrt() * db.sqrt())
        };
        assert!(corr.abs() > 0.999, "correlation {corr}");
    }

    #[test]
    fn mixed_has_declared_types_and_balanced_categories() {
        let d = mixed(300, 3, 2, 4, 0.05, 5).unwrap();
        assert_eq!(d.n_cols(), 5);
        assert_eq!(d.categorical_columns(), vec![3, 4]);
        for j in d.categorical_columns() {
            let mut counts = vec![0usize; 4];
            for i in 0..300 {
                counts[d.category(i, j)] += 1;
            }
            for (c, &cnt) in counts.iter().enumerate() {
                assert!(cnt > 30, "category {c} of column {j} has {cnt} rows");
            }
        }
    }
}
