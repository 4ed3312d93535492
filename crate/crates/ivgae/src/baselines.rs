//! Reference imputers: feature-wise mean/mode and K-nearest-neighbors.

use crate::data::{self, ColumnStat, Dataset, NormMode};
use crate::error::{Error, Result};
use crate::missing::MaskMatrix;

/// Fills missing continuous cells with the observed column mean and missing
/// categorical cells with the observed mode (ties to the lower index).
pub fn baseline_mean_mode(d: &Dataset, mask: &MaskMatrix) -> Result<Dataset> {
    mask.check_shape(d.n_rows(), d.n_cols())?;
    let stats = data::observed_statistics(d, mask)?;
    let mut out = d.clone();
    for j in 0..d.n_cols() {
        let fill = match stats[j] {
            ColumnStat::Mean(m) => m,
            ColumnStat::Mode(c) => c as f64,
        };
        for i in 0..d.n_rows() {
            if mask.is_missing(i, j) {
                out.set(i, j, fill);
            }
        }
    }
    Ok(out)
}

/// K-nearest-neighbor imputation. Distances are squared Euclidean over
/// co-observed normalized continuous features plus Hamming over co-observed
/// categorical features, divided by the co-observed count. Neighbors for a
/// cell are restricted to rows observing that column; continuous cells take
/// the neighbor mean, categorical the majority vote (ties to the lower
/// index). Rows sharing no observed features with any candidate fall back to
/// mean/mode.
pub fn baseline_knn(d: &Dataset, mask: &MaskMatrix, k: usize) -> Result<Dataset> {
    mask.check_shape(d.n_rows(), d.n_cols())?;
    let n = d.n_rows();
    if k == 0 || k > n - 1 {
        return Err(Error::Config(format!(
            "k must lie in 1..={}, got {k}",
            n - 1
        )));
    }
    // Distances use Min-Max-normalized continuous values so no column
    // dominates by scale.
    let d_norm = data::normalize(d, NormMode::Minmax, Some(mask))?;
    let fallback = baseline_mean_mode(d, mask)?;
    let mut out = d.clone();

    let p = d.n_cols();
    let pair_distance = |a: usize, b: usize| -> Option<f64> {
        let mut acc = 0.0;
        let mut co = 0usize;
        for j in 0..p {
            if mask.is_observed(a, j) && mask.is_observed(b, j) {
                co += 1;
                if d.is_categorical(j) {
                    if d.category(a, j) != d.category(b, j) {
                        acc += 1.0;
                    }
                } else {
                    let diff = d_norm.get(a, j) - d_norm.get(b, j);
                    acc += diff * diff;
                }
            }
        }
        (co > 0).then(|| acc / co as f64)
    };

    for i in 0..n {
        let missing_cols: Vec<usize> = (0..p).filter(|&j| mask.is_missing(i, j)).collect();
        if missing_cols.is_empty() {
            continue;
        }
        // One distance pass per row with missing cells.
        let dists: Vec<Option<f64>> = (0..n)
            .map(|r| if r == i { None } else { pair_distance(i, r) })
            .collect();
        for &j in &missing_cols {
            let mut candidates: Vec<(f64, usize)> = (0..n)
                .filter(|&r| mask.is_observed(r, j))
                .filter_map(|r| dists[r].map(|dist| (dist, r)))
                .collect();
            if candidates.is_empty() {
                out.set(i, j, fallback.get(i, j));
                continue;
            }
            candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
            let nearest = &candidates[..k.min(candidates.len())];
            if d.is_categorical(j) {
                let c = d.column(j).n_categories();
                let mut votes = vec![0usize; c];
                for &(_, r) in nearest {
                    votes[d.category(r, j)] += 1;
                }
                let winner = votes
                    .iter()
                    .enumerate()
                    .max_by(|(ia, va), (ib, vb)| va.cmp(vb).then(ib.cmp(ia)))
                    .map(|(c, _)| c)
                    .expect("non-empty votes");
                out.set(i, j, winner as f64);
            } else {
                let mean =
                    nearest.iter().map(|&(_, r)| d.get(r, j)).sum::<f64>() / nearest.len() as f64;
                out.set(i, j, mean);
            }
        }
    }
    Ok(out)
}
