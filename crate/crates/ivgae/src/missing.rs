//! Mechanism-controlled missingness injection.
//!
//! Three generators produce binary observation masks over a complete table:
//! MCAR removes an exact count of cells uniformly; MAR removes target-column
//! cells where a paired driver column exceeds a calibrated quantile; MNAR
//! removes cells with probability boosted in the column's own extreme ranges
//! (continuous) or in a growing set of categories (categorical). A repair
//! step guarantees every row and column keeps at least one observed cell.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{sample_without_replacement, shuffle, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mechanism::Mcar => write!(f, "mcar"),
            Mechanism::Mar => write!(f, "mar"),
            Mechanism::Mnar => write!(f, "mnar"),
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::Config(format!("unknown mechanism {other:?}"))),
        }
    }
}

/// How MAR paired drivers to targets and the calibrated threshold quantile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarConfig {
    pub driver_columns: Vec<usize>,
    pub target_columns: Vec<usize>,
    /// `pairing[k]` is the driver assigned to `target_columns[k]`.
    pub pairing: Vec<usize>,
    pub threshold_quantile: f64,
}

/// Binary observation indicator (1 = observed) with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    flags: Vec<u8>,
    n: usize,
    p: usize,
    pub mechanism: Mechanism,
    pub target_rate: f64,
    pub seed: u64,
    pub mar_config: Option<MarConfig>,
}

impl MaskMatrix {
    pub fn from_flags(flags: Vec<u8>, n: usize, p: usize) -> Result<Self> {
        if flags.len() != n * p {
            return Err(Error::Dimension(format!(
                "{} flags for {n}×{p} mask",
                flags.len()
            )));
        }
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::Contract("mask flags must be 0 or 1".into()));
        }
        Ok(MaskMatrix {
            flags,
            n,
            p,
            mechanism: Mechanism::Mcar,
            target_rate: 0.0,
            seed: 0,
            mar_config: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.p
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.flags[i * self.p + j] == 1
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        !self.is_observed(i, j)
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn n_missing(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 0).count()
    }

    pub fn n_observed(&self) -> usize {
        self.flags.len() - self.n_missing()
    }

    pub fn missing_rate(&self) -> f64 {
        self.n_missing() as f64 / self.flags.len() as f64
    }

    pub fn column_missing_count(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| self.is_missing(i, j)).count()
    }

    pub fn row_observed_count(&self, i: usize) -> usize {
        (0..self.p).filter(|&j| self.is_observed(i, j)).count()
    }

    pub fn check_shape(&self, n: usize, p: usize) -> Result<()> {
        if self.n != n || self.p != p {
            return Err(Error::Dimension(format!(
                "mask is {}×{}, data is {n}×{p}",
                self.n, self.p
            )));
        }
        Ok(())
    }

    /// 0/1 CSV mirroring the dataset header, plus a JSON sidecar recording
    /// mechanism, rate, seed, and MAR pairing.
    pub fn write_csv(&self, path: &Path, header: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for i in 0..self.n {
            let row: Vec<&str> = (0..self.p)
                .map(|j| if self.is_observed(i, j) { "1" } else { "0" })
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        let sidecar = MaskSidecar {
            mechanism: self.mechanism,
            rate: self.target_rate,
            seed: self.seed,
            mar_config: self.mar_config.clone(),
        };
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)?;
        let p = reader.headers()?.len();
        let mut flags = Vec::new();
        let mut n = 0;
        for record in reader.records() {
            let record = record?;
            for field in record.iter() {
                match field.trim() {
                    "0" => flags.push(0),
                    "1" => flags.push(1),
                    other => {
                        return Err(Error::Load {
                            row: n,
                            column: String::new(),
                            message: format!("mask cell {other:?} is not 0/1"),
                        })
                    }
                }
            }
            n += 1;
        }
        let mut mask = MaskMatrix::from_flags(flags, n, p)?;
        if let Ok(text) = std::fs::read_to_string(sidecar_path(path)) {
            if let Ok(sidecar) = serde_json::from_str::<MaskSidecar>(&text) {
                mask.mechanism = sidecar.mechanism;
                mask.target_rate = sidecar.rate;
                mask.seed = sidecar.seed;
                mask.mar_config = sidecar.mar_config;
            }
        }
        Ok(mask)
    }
}

#[derive(Serialize, Deserialize)]
struct MaskSidecar {
    mechanism: Mechanism,
    rate: f64,
    seed: u64,
    mar_config: Option<MarConfig>,
}

pub fn sidecar_path(mask_path: &Path) -> std::path::PathBuf {
    let mut os = mask_path.as_os_str().to_os_string();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InfeasibleRate(format!(
            "rate must lie in (0,1), got {rate}"
        )));
    }
    Ok(())
}

/// Uniform exact-count missingness: exactly `floor(rate·n·p)` cells removed.
pub fn gen_mcar(d: &Dataset, rate: f64, seed: u64) -> Result<MaskMatrix> {
    check_rate(rate)?;
    let (n, p) = (d.n_rows(), d.n_cols());
    let total = n * p;
    let k = (rate * total as f64).floor() as usize;
    if total - k < n.max(p) {
        return Err(Error::InfeasibleRate(format!(
            "rate {rate} leaves too few observed cells to cover every row and column"
        )));
    }
    let state = RngState::new(seed);
    let mut rng = state.stream("mask");
    let mut flags = vec![1u8; total];
    for idx in sample_without_replacement(&mut rng, total, k) {
        flags[idx] = 0;
    }
    let mut mask = MaskMatrix::from_flags(flags, n, p)?;
    mask.mechanism = Mechanism::Mcar;
    mask.target_rate = rate;
    mask.seed = seed;
    repair_coverage(&mut mask, &mut state.stream("repair"), None)?;
    Ok(mask)
}

/// Missing-at-random: a seeded subset of columns become fully observed
/// drivers; each remaining target column drops cells where its paired
/// driver exceeds a quantile threshold, with the quantile calibrated by
/// bisection so the global missing rate lands within ±0.01 of `rate`.
pub fn gen_mar(d: &Dataset, rate: f64, seed: u64, driver_frac: f64) -> Result<MaskMatrix> {
    check_rate(rate)?;
    let (n, p) = (d.n_rows(), d.n_cols());
    if p < 2 {
        return Err(Error::MechanismInfeasible(
            "MAR needs at least 2 columns (driver + target)".into(),
        ));
    }
    if !(driver_frac > 0.0 && driver_frac < 1.0) {
        return Err(Error::Config(format!(
            "driver_frac must lie in (0,1), got {driver_frac}"
        )));
    }
    let n_drivers = ((driver_frac * p as f64).ceil() as usize).clamp(1, p - 1);
    let state = RngState::new(seed);
    let mut pick_rng = state.stream("mar-drivers");
    let mut drivers = sample_without_replacement(&mut pick_rng, p, n_drivers);
    drivers.sort_unstable();
    let targets: Vec<usize> = (0..p).filter(|j| !drivers.contains(j)).collect();

    let want = (rate * (n * p) as f64).floor() as usize;
    if want > targets.len() * n {
        return Err(Error::InfeasibleRate(format!(
            "rate {rate} unreachable: only {} of {} columns are targets",
            targets.len(),
            p
        )));
    }

    // Round-robin pairing over a seeded driver order.
    let mut driver_order = drivers.clone();
    shuffle(&mut state.stream("mar-pairing"), &mut driver_order);
    let pairing: Vec<usize> = (0..targets.len())
        .map(|k| driver_order[k % driver_order.len()])
        .collect();

    // Per-target rows sorted by descending driver value; the top block of
    // each column goes missing. Ties are broken by a seeded shuffle so
    // boundary cells don't systematically favor low row indices.
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(targets.len());
    let mut tie_rng = state.stream("mar-ties");
    for &drv in &pairing {
        let mut rows: Vec<usize> = (0..n).collect();
        shuffle(&mut tie_rng, &mut rows);
        rows.sort_by(|&a, &b| {
            d.get(b, drv)
                .partial_cmp(&d.get(a, drv))
                .expect("finite driver values")
        });
        orders.push(rows);
    }

    // Bisection on the threshold quantile q: cells with driver value above
    // the per-column q-quantile are removed, i.e. the top (1−q)·n rows of
    // each target column.
    let total = (n * p) as f64;
    let count_for = |q: f64| -> usize {
        let per_col = ((1.0 - q) * n as f64).round() as usize;
        per_col.min(n) * targets.len()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best_q = 0.5;
    let mut best_gap = f64::INFINITY;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let achieved = count_for(mid) as f64 / total;
        let gap = (achieved - rate).abs();
        if gap < best_gap {
            best_gap = gap;
            best_q = mid;
        }
        if achieved > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let per_col = (((1.0 - best_q) * n as f64).round() as usize).min(n);

    let mut flags = vec![1u8; n * p];
    for (k, &t) in targets.iter().enumerate() {
        for &row in orders[k].iter().take(per_col) {
            flags[row * p + t] = 0;
        }
    }
    let mut mask = MaskMatrix::from_flags(flags, n, p)?;
    mask.mechanism = Mechanism::Mar;
    mask.target_rate = rate;
    mask.seed = seed;
    mask.mar_config = Some(MarConfig {
        driver_columns: drivers,
        target_columns: targets.clone(),
        pairing,
        threshold_quantile: best_q,
    });
    let achieved = mask.missing_rate();
    if (achieved - rate).abs() > 0.01 {
        return Err(Error::InfeasibleRate(format!(
            "MAR calibration reached {achieved:.4}, target {rate} ± 0.01"
        )));
    }
    repair_coverage(&mut mask, &mut state.stream("repair"), Some(&targets))?;
    Ok(mask)
}

/// Missing-not-at-random: cells in the top or bottom decile of their own
/// column (continuous) or in a seeded prefix of categories (categorical)
/// are `boost`× more likely to be removed; the base probability solves for
/// the column's expected missing rate equalling `rate`.
pub fn gen_mnar(d: &Dataset, rate: f64, seed: u64, boost: f64) -> Result<MaskMatrix> {
    check_rate(rate)?;
    if boost <= 1.0 {
        // boost = 1 degenerates to uniform Bernoulli(rate); values below 1
        // would invert the mechanism.
        if boost < 1.0 {
            return Err(Error::Config(format!("boost must be ≥ 1, got {boost}")));
        }
    }
    let (n, p) = (d.n_rows(), d.n_cols());
    let state = RngState::new(seed);
    let mut rng = state.stream("mask");
    let mut flags = vec![1u8; n * p];
    for j in 0..p {
        let boosted = mnar_boosted_cells(
            d,
            j,
            &mut state.stream_indexed("mnar-cats", j as u64),
            rate,
            boost,
        )?;
        let f_boost = boosted.iter().filter(|&&b| b).count() as f64 / n as f64;
        // Solve f·boost·p0 + (1−f)·p0 = rate. Categorical columns grew the
        // boosted set until this is solvable; for continuous columns the
        // decile fraction is fixed, so the boosted probability caps at 1 and
        // the base rate re-solves.
        let mut p_base = rate / (f_boost * boost + (1.0 - f_boost));
        let mut p_boosted = boost * p_base;
        if p_boosted > 1.0 {
            p_boosted = 1.0;
            p_base = (rate - f_boost) / (1.0 - f_boost);
        }
        if !(0.0..=1.0).contains(&p_base) || !(0.0..=1.0).contains(&p_boosted) {
            return Err(Error::InfeasibleRate(format!(
                "MNAR rate {rate} with boost {boost} unsolvable on column {j}"
            )));
        }
        for i in 0..n {
            let prob = if boosted[i] { p_boosted } else { p_base };
            if rng.gen_bool(prob) {
                flags[i * p + j] = 0;
            }
        }
    }
    let mut mask = MaskMatrix::from_flags(flags, n, p)?;
    mask.mechanism = Mechanism::Mnar;
    mask.target_rate = rate;
    mask.seed = seed;
    repair_coverage(&mut mask, &mut state.stream("repair"), None)?;
    Ok(mask)
}

/// Which cells of column `j` receive the boosted missing probability:
/// rank-based top/bottom deciles for continuous columns; for categorical
/// columns a seeded category order is consumed until the boosted mass is
/// large enough that `boost·p0 ≤ 1` has a solution (always at least one
/// category).
fn mnar_boosted_cells(
    d: &Dataset,
    j: usize,
    cat_rng: &mut ChaCha8Rng,
    rate: f64,
    boost: f64,
) -> Result<Vec<bool>> {
    let n = d.n_rows();
    let mut boosted = vec![false; n];
    if d.is_categorical(j) {
        let c = d.column(j).n_categories();
        let mut order: Vec<usize> = (0..c).collect();
        shuffle(cat_rng, &mut order);
        let mut counts = vec![0usize; c];
        for i in 0..n {
            counts[d.category(i, j)] += 1;
        }
        // boost·p0 ≤ 1 requires the boosted fraction f to satisfy
        // f ≥ (boost·rate − 1)/(boost − 1).
        let required_f = if boost > 1.0 {
            ((boost * rate - 1.0) / (boost - 1.0)).max(0.0)
        } else {
            0.0
        };
        let mut mass = 0usize;
        let mut selected = vec![false; c];
        for &cat in &order {
            selected[cat] = true;
            mass += counts[cat];
            if mass as f64 / n as f64 >= required_f {
                break;
            }
        }
        if (mass as f64 / n as f64) < required_f {
            return Err(Error::InfeasibleRate(format!(
                "MNAR rate {rate} with boost {boost} unsolvable on column {j} \
                 even with every category boosted"
            )));
        }
        for i in 0..n {
            boosted[i] = selected[d.category(i, j)];
        }
    } else {
        let tail = n / 10;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            d.get(a, j)
                .partial_cmp(&d.get(b, j))
                .expect("finite values")
                .then(a.cmp(&b))
        });
        for &i in idx.iter().take(tail) {
            boosted[i] = true;
        }
        for &i in idx.iter().rev().take(tail) {
            boosted[i] = true;
        }
    }
    Ok(boosted)
}

/// Restores row/column coverage by swapping a missing cell in the violating
/// line with an observed donor cell elsewhere, keeping the total missing
/// count unchanged. Donors always come from lines with at least two observed
/// cells; `allowed_cols` restricts donor and repair columns (used by MAR to
/// keep drivers fully observed).
fn repair_coverage(
    mask: &mut MaskMatrix,
    rng: &mut ChaCha8Rng,
    allowed_cols: Option<&[usize]>,
) -> Result<()> {
    let (n, p) = (mask.n, mask.p);
    let col_allowed =
        |j: usize| allowed_cols.is_none_or(|cols| cols.contains(&j));
    let mut row_obs: Vec<usize> = (0..n).map(|i| mask.row_observed_count(i)).collect();
    let mut col_obs: Vec<usize> = (0..p)
        .map(|j| (0..n).filter(|&i| mask.is_observed(i, j)).count())
        .collect();

    let mut fix = |mask: &mut MaskMatrix,
                   row_obs: &mut Vec<usize>,
                   col_obs: &mut Vec<usize>,
                   cell: (usize, usize),
                   rng: &mut ChaCha8Rng|
     -> Result<()> {
        // Donor: observed cell whose row and column both stay covered.
        for _ in 0..10_000 {
            let ri = rng.gen_range(0..n);
            let ci = rng.gen_range(0..p);
            if mask.is_observed(ri, ci)
                && col_allowed(ci)
                && row_obs[ri] >= 2
                && col_obs[ci] >= 2
                && (ri, ci) != cell
            {
                mask.flags[ri * p + ci] = 0;
                row_obs[ri] -= 1;
                col_obs[ci] -= 1;
                mask.flags[cell.0 * p + cell.1] = 1;
                row_obs[cell.0] += 1;
                col_obs[cell.1] += 1;
                return Ok(());
            }
        }
        Err(Error::InfeasibleRate(
            "coverage repair could not find a donor cell".into(),
        ))
    };

    for i in 0..n {
        if row_obs[i] == 0 {
            let candidates: Vec<usize> = (0..p).filter(|&j| col_allowed(j)).collect();
            let j = candidates[rng.gen_range(0..candidates.len())];
            fix(mask, &mut row_obs, &mut col_obs, (i, j), rng)?;
        }
    }
    for j in 0..p {
        if col_obs[j] == 0 {
            let i = rng.gen_range(0..n);
            fix(mask, &mut row_obs, &mut col_obs, (i, j), rng)?;
        }
    }
    Ok(())
}

/// Summary of a mask against its dataset, including the dependence
/// diagnostics used to validate each mechanism.
#[derive(Clone, Debug, Serialize)]
pub struct MaskStats {
    pub global_rate: f64,
    pub per_column_rates: Vec<f64>,
    pub per_row_min_observed: usize,
    /// MNAR: mean over continuous columns of (missing rate in the extreme
    /// deciles) / (missing rate in the middle 80%).
    pub extreme_decile_ratio: Option<f64>,
    /// MAR: mean over target columns of P(missing | driver > median) −
    /// P(missing | driver ≤ median).
    pub driver_conditional_gap: Option<f64>,
    /// Mean absolute point-biserial correlation between missingness and the
    /// column's own values (continuous columns).
    pub mean_abs_point_biserial: f64,
}

pub fn mask_stats(mask: &MaskMatrix, d: &Dataset) -> Result<MaskStats> {
    mask.check_shape(d.n_rows(), d.n_cols())?;
    let (n, p) = (d.n_rows(), d.n_cols());
    let per_column_rates: Vec<f64> = (0..p)
        .map(|j| mask.column_missing_count(j) as f64 / n as f64)
        .collect();
    let per_row_min_observed = (0..n)
        .map(|i| mask.row_observed_count(i))
        .min()
        .unwrap_or(0);

    let extreme_decile_ratio = match mask.mechanism {
        Mechanism::Mnar => Some(extreme_decile_ratio(mask, d)),
        _ => None,
    };
    let driver_conditional_gap = mask
        .mar_config
        .as_ref()
        .map(|cfg| driver_gap(mask, d, cfg));

    Ok(MaskStats {
        global_rate: mask.missing_rate(),
        per_column_rates,
        per_row_min_observed,
        extreme_decile_ratio,
        driver_conditional_gap,
        mean_abs_point_biserial: mean_abs_point_biserial(mask, d),
    })
}

/// Ratio of missing rates between a column's own extreme deciles and its
/// middle 80%, averaged over continuous columns.
pub fn extreme_decile_ratio(mask: &MaskMatrix, d: &Dataset) -> f64 {
    let mut ratios = Vec::new();
    for j in d.continuous_columns() {
        let n = d.n_rows();
        let tail = n / 10;
        if tail == 0 {
            continue;
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            d.get(a, j)
                .partial_cmp(&d.get(b, j))
                .expect("finite values")
                .then(a.cmp(&b))
        });
        let extreme: Vec<usize> = idx
            .iter()
            .take(tail)
            .chain(idx.iter().rev().take(tail))
            .copied()
            .collect();
        let middle: Vec<usize> = idx[tail..n - tail].to_vec();
        let rate_of = |rows: &[usize]| {
            rows.iter().filter(|&&i| mask.is_missing(i, j)).count() as f64 / rows.len() as f64
        };
        let (re, rm) = (rate_of(&extreme), rate_of(&middle));
        if rm > 0.0 {
            ratios.push(re / rm);
        } else if re > 0.0 {
            ratios.push(f64::INFINITY);
        }
    }
    if ratios.is_empty() {
        0.0
    } else {
        let finite: Vec<f64> = ratios.iter().copied().filter(|r| r.is_finite()).collect();
        if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    }
}

fn driver_gap(mask: &MaskMatrix, d: &Dataset, cfg: &MarConfig) -> f64 {
    let n = d.n_rows();
    let mut gaps = Vec::new();
    for (k, &t) in cfg.target_columns.iter().enumerate() {
        let drv = cfg.pairing[k];
        let mut vals: Vec<f64> = (0..n).map(|i| d.get(i, drv)).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite driver values"));
        let median = vals[n / 2];
        let (mut miss_hi, mut cnt_hi, mut miss_lo, mut cnt_lo) = (0, 0, 0, 0);
        for i in 0..n {
            if d.get(i, drv) > median {
                cnt_hi += 1;
                if mask.is_missing(i, t) {
                    miss_hi += 1;
                }
            } else {
                cnt_lo += 1;
                if mask.is_missing(i, t) {
                    miss_lo += 1;
                }
            }
        }
        if cnt_hi > 0 && cnt_lo > 0 {
            gaps.push(miss_hi as f64 / cnt_hi as f64 - miss_lo as f64 / cnt_lo as f64);
        }
    }
    if gaps.is_empty() {
        0.0
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    }
}

/// Point-biserial correlation between the missing indicator and cell values,
/// averaged (in absolute value) over continuous columns.
pub fn mean_abs_point_biserial(mask: &MaskMatrix, d: &Dataset) -> f64 {
    let n = d.n_rows();
    let mut rs = Vec::new();
    for j in d.continuous_columns() {
        let vals: Vec<f64> = (0..n).map(|i| d.get(i, j)).collect();
        let miss: Vec<f64> = (0..n)
            .map(|i| if mask.is_missing(i, j) { 1.0 } else { 0.0 })
            .collect();
        let mean_v = vals.iter().sum::<f64>() / n as f64;
        let mean_m = miss.iter().sum::<f64>() / n as f64;
        let mut cov = 0.0;
        let mut var_v = 0.0;
        let mut var_m = 0.0;
        for i in 0..n {
            cov += (vals[i] - mean_v) * (miss[i] - mean_m);
            var_v += (vals[i] - mean_v).powi(2);
            var_m += (miss[i] - mean_m).powi(2);
        }
        if var_v > 0.0 && var_m > 0.0 {
            rs.push((cov / (var_v.sqrt() * var_m.sqrt())).abs());
        }
    }
    if rs.is_empty() {
        0.0
    } else {
        rs.iter().sum::<f64>() / rs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnSchema, Dataset};
    use crate::rng::normals;

    fn gaussian_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let state = RngState::new(seed);
        let cells = normals(&mut state.stream("synth"), n * p, 0.0, 1.0);
        let schema = (0..p)
            .map(|j| ColumnSchema::continuous(&format!("x{j}")))
            .collect();
        Dataset::new(schema, cells, n).unwrap()
    }

    #[test]
    fn mcar_exact_count() {
        let d = gaussian_dataset(10, 10, 1);
        let mask = gen_mcar(&d, 0.3, 7).unwrap();
        assert_eq!(mask.n_missing(), 30);
        assert_eq!(mask.missing_rate(), 0.30);
    }

    #[test]
    fn mcar_deterministic_under_seed() {
        let d = gaussian_dataset(20, 5, 2);
        let a = gen_mcar(&d, 0.3, 42).unwrap();
        let b = gen_mcar(&d, 0.3, 42).unwrap();
        assert_eq!(a.flags(), b.flags());
        let c = gen_mcar(&d, 0.3, 43).unwrap();
        assert_ne!(a.flags(), c.flags());
    }

    #[test]
    fn mcar_column_counts_concentrate() {
        // Binomial-style concentration: each column of a 1000×10 table at
        // rate 0.3 expects 300 missing, sd ≈ 14; [250, 350] is ±3.6 sd.
        let d = gaussian_dataset(1000, 10, 3);
        let mut all_ok = 0;
        let seeds = 100;
        for seed in 0..seeds {
            let mask = gen_mcar(&d, 0.3, seed).unwrap();
            let within = (0..10)
                .filter(|&j| {
                    let c = mask.column_missing_count(j);
                    (250..=350).contains(&c)
                })
                .count();
            if within >= 9 {
                all_ok += 1;
            }
        }
        assert!(all_ok >= 99, "only {all_ok}/{seeds} seeds concentrated");
    }

    #[test]
    fn mcar_infeasible_rate_rejected() {
        let d = gaussian_dataset(4, 4, 1);
        // 1 − max(1/n, 1/p) = 0.75: at rate 0.8 coverage cannot hold.
        assert!(matches!(
            gen_mcar(&d, 0.8, 1),
            Err(Error::InfeasibleRate(_))
        ));
    }

    #[test]
    fn coverage_after_repair_at_high_rate() {
        let d = gaussian_dataset(30, 6, 4);
        for mech in 0..3 {
            // MAR keeps drivers fully observed, so a single driver is needed
            // for rate 0.7 to stay reachable on 6 columns.
            let mask = match mech {
                0 => gen_mcar(&d, 0.7, 11).unwrap(),
                1 => gen_mar(&d, 0.7, 11, 0.16).unwrap(),
                _ => gen_mnar(&d, 0.7, 11, 3.0).unwrap(),
            };
            for i in 0..30 {
                assert!(mask.row_observed_count(i) >= 1, "row {i} uncovered");
            }
            for j in 0..6 {
                assert!(
                    mask.column_missing_count(j) < 30,
                    "column {j} fully missing"
                );
            }
        }
    }

    #[test]
    fn mar_drivers_fully_observed() {
        let d = gaussian_dataset(200, 10, 5);
        let mask = gen_mar(&d, 0.3, 9, 0.3).unwrap();
        let cfg = mask.mar_config.as_ref().unwrap();
        assert!(!cfg.driver_columns.is_empty());
        for &j in &cfg.driver_columns {
            assert_eq!(mask.column_missing_count(j), 0, "driver {j} has holes");
        }
    }

    #[test]
    fn mar_hits_global_rate() {
        let d = gaussian_dataset(500, 8, 6);
        for &rate in &[0.1, 0.3, 0.5] {
            let mask = gen_mar(&d, rate, 3, 0.3).unwrap();
            assert!(
                (mask.missing_rate() - rate).abs() <= 0.01,
                "rate {rate}: achieved {}",
                mask.missing_rate()
            );
        }
    }

    #[test]
    fn mar_driver_dependence_gap() {
        // Two columns, uniform driver: the dependence gap at rate 0.3 must
        // exceed 0.3 by a wide margin.
        let state = RngState::new(8);
        let vals = crate::rng::uniforms(&mut state.stream("synth"), 2000, 0.0, 1.0);
        let schema = vec![
            ColumnSchema::continuous("driver"),
            ColumnSchema::continuous("target"),
        ];
        let d = Dataset::new(schema, vals, 1000).unwrap();
        let mask = gen_mar(&d, 0.3, 21, 0.5).unwrap();
        let stats = mask_stats(&mask, &d).unwrap();
        let gap = stats.driver_conditional_gap.unwrap();
        assert!(gap > 0.3, "gap {gap} too small");
    }

    #[test]
    fn mar_needs_two_columns() {
        let d = gaussian_dataset(50, 1, 7);
        assert!(matches!(
            gen_mar(&d, 0.3, 1, 0.3),
            Err(Error::MechanismInfeasible(_))
        ));
    }

    #[test]
    fn mar_unreachable_rate_errors() {
        let d = gaussian_dataset(50, 4, 7);
        // driver_frac 0.9 -> ceil(3.6)=4 clamped to 3 drivers, 1 target:
        // max achievable rate is 1/4.
        assert!(matches!(
            gen_mar(&d, 0.5, 1, 0.9),
            Err(Error::InfeasibleRate(_))
        ));
    }

    #[test]
    fn mnar_extreme_deciles_hit_harder() {
        let d = gaussian_dataset(1000, 2, 9);
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let mask = gen_mnar(&d, 0.3, seed, 3.0).unwrap();
            ratios.push(extreme_decile_ratio(&mask, &d));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean >= 2.0, "mean extreme/middle ratio {mean} below 2");
    }

    #[test]
    fn mnar_global_rate_close_over_seeds() {
        let d = gaussian_dataset(500, 6, 10);
        let mut rates = Vec::new();
        for seed in 0..20 {
            rates.push(gen_mnar(&d, 0.3, seed, 3.0).unwrap().missing_rate());
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((mean - 0.3).abs() <= 0.02, "mean rate {mean}");
    }

    #[test]
    fn mnar_boost_one_is_uniform() {
        // With boost = 1 every cell has probability exactly `rate`,
        // regardless of its value.
        let d = gaussian_dataset(2000, 2, 11);
        let mut rates = Vec::new();
        for seed in 0..10 {
            let mask = gen_mnar(&d, 0.3, seed, 1.0).unwrap();
            rates.push(mask.missing_rate());
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((mean - 0.3).abs() < 0.02);
        // And the value-dependence vanishes on average.
        let d_big = gaussian_dataset(5000, 2, 12);
        let mut r_sum = 0.0;
        for seed in 0..10 {
            let mask = gen_mnar(&d_big, 0.3, seed, 1.0).unwrap();
            r_sum += mean_abs_point_biserial(&mask, &d_big);
        }
        assert!(r_sum / 10.0 < 0.05);
    }

    #[test]
    fn mnar_categorical_concentrates_on_selected_categories() {
        let schema = vec![
            ColumnSchema::categorical("c", &["a", "b", "x", "y"]),
            ColumnSchema::continuous("z"),
        ];
        let cells: Vec<f64> = (0..1000)
            .flat_map(|i| [(i % 4) as f64, i as f64 * 0.01])
            .collect();
        let d = Dataset::new(schema, cells, 1000).unwrap();
        let mask = gen_mnar(&d, 0.3, 5, 3.0).unwrap();
        let mut per_cat = vec![(0usize, 0usize); 4];
        for i in 0..1000 {
            let c = d.category(i, 0);
            per_cat[c].1 += 1;
            if mask.is_missing(i, 0) {
                per_cat[c].0 += 1;
            }
        }
        let rates: Vec<f64> = per_cat
            .iter()
            .map(|&(m, t)| m as f64 / t as f64)
            .collect();
        let hi = rates.iter().cloned().fold(0.0, f64::max);
        let lo = rates.iter().cloned().fold(1.0, f64::min);
        assert!(
            hi > 2.0 * lo,
            "category rates {rates:?} show no concentration"
        );
    }

    #[test]
    fn stats_for_all_ones_mask() {
        let d = gaussian_dataset(5, 4, 13);
        let mask = MaskMatrix::from_flags(vec![1; 20], 5, 4).unwrap();
        let stats = mask_stats(&mask, &d).unwrap();
        assert_eq!(stats.global_rate, 0.0);
        assert_eq!(stats.per_row_min_observed, 4);
    }

    #[test]
    fn stats_exact_rate_for_mcar() {
        let d = gaussian_dataset(10, 10, 14);
        let mask = gen_mcar(&d, 0.3, 2).unwrap();
        let stats = mask_stats(&mask, &d).unwrap();
        assert_eq!(stats.global_rate, 0.30);
    }

    #[test]
    fn mnar_stats_include_extreme_ratio() {
        let d = gaussian_dataset(100, 2, 15);
        let mask = gen_mnar(&d, 0.3, 3, 3.0).unwrap();
        let stats = mask_stats(&mask, &d).unwrap();
        assert!(stats.extreme_decile_ratio.is_some());
    }

    #[test]
    fn mcar_value_independence() {
        let d = gaussian_dataset(1000, 10, 16);
        let mut total = 0.0;
        for seed in 0..50 {
            let mask = gen_mcar(&d, 0.3, seed).unwrap();
            total += mean_abs_point_biserial(&mask, &d);
        }
        let mean = total / 50.0;
        assert!(mean < 0.05, "MCAR value dependence {mean} too high");
    }

    #[test]
    fn mask_csv_round_trip() {
        let d = gaussian_dataset(8, 3, 17);
        let mask = gen_mcar(&d, 0.3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.csv");
        let header: Vec<String> = d.schema().iter().map(|c| c.name.clone()).collect();
        mask.write_csv(&path, &header).unwrap();
        let loaded = MaskMatrix::read_csv(&path).unwrap();
        assert_eq!(loaded.flags(), mask.flags());
        assert_eq!(loaded.mechanism, Mechanism::Mcar);
        assert_eq!(loaded.seed, 5);
    }
}
