//! Per-variable imputation error, evaluated strictly on masked cells.
//!
//! Continuous columns: mean squared difference on the Min-Max-normalized
//! scale (the report also carries the mean-absolute variant, which is the
//! form published benchmark tables use). Categorical columns: squared
//! distance in embedding space (hetero) or cross-entropy against the
//! predicted category distribution (one-hot).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{self, Dataset, NormMode, NormParams};
use crate::error::{Error, Result};
use crate::missing::MaskMatrix;
use crate::train::FillResult;

/// Point-mass probability floor when a method supplies no distribution.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CatEvalMode {
    Hetero,
    Onehot,
}

/// Rich prediction view: the imputed table plus whatever raw outputs the
/// method exposes. Plain imputers wrap just the dataset.
pub struct Prediction<'a> {
    pub data: &'a Dataset,
    pub cat_probs: Option<&'a BTreeMap<(usize, usize), Vec<f64>>>,
    pub cat_scalars: Option<&'a BTreeMap<(usize, usize), f64>>,
    pub embedding_tables: Option<&'a BTreeMap<usize, Vec<f64>>>,
}

impl<'a> Prediction<'a> {
    pub fn plain(data: &'a Dataset) -> Self {
        Prediction {
            data,
            cat_probs: None,
            cat_scalars: None,
            embedding_tables: None,
        }
    }
}

impl<'a> From<&'a FillResult> for Prediction<'a> {
    fn from(fr: &'a FillResult) -> Self {
        Prediction {
            data: &fr.data,
            cat_probs: Some(&fr.cat_probs),
            cat_scalars: Some(&fr.cat_scalars),
            embedding_tables: Some(&fr.embedding_tables),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ColumnError {
    pub column: String,
    pub avg_err: f64,
    /// Mean absolute variant (identical to `avg_err` for categorical
    /// columns, where the metric is already an entropy).
    pub abs_err: f64,
    pub n_masked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub per_column: Vec<ColumnError>,
    /// Unweighted mean of per-column `avg_err` over columns with masked
    /// cells.
    pub macro_avg_err: f64,
    pub macro_abs_err: f64,
    /// Columns with zero masked cells, excluded from the macro average.
    pub excluded_columns: Vec<String>,
}

/// Per-variable error over masked cells only.
pub fn avg_err(
    truth: &Dataset,
    pred: &Prediction,
    mask: &MaskMatrix,
    mode: CatEvalMode,
) -> Result<MetricsReport> {
    mask.check_shape(truth.n_rows(), truth.n_cols())?;
    if pred.data.n_rows() != truth.n_rows() || pred.data.n_cols() != truth.n_cols() {
        return Err(Error::Dimension(format!(
            "imputed table is {}×{}, truth is {}×{}",
            pred.data.n_rows(),
            pred.data.n_cols(),
            truth.n_rows(),
            truth.n_cols()
        )));
    }
    let norm_params = continuous_norm_params(truth, mask)?;

    let mut per_column = Vec::new();
    let mut excluded = Vec::new();
    for j in 0..truth.n_cols() {
        let masked: Vec<usize> = (0..truth.n_rows())
            .filter(|&i| mask.is_missing(i, j))
            .collect();
        if masked.is_empty() {
            excluded.push(truth.column(j).name.clone());
            continue;
        }
        let (sq_sum, abs_sum) = if truth.is_categorical(j) {
            match mode {
                CatEvalMode::Hetero => {
                    let table = pred
                        .embedding_tables
                        .and_then(|t| t.get(&j))
                        .ok_or_else(|| {
                            Error::Contract(format!(
                                "hetero categorical evaluation needs an embedding table \
                                 for column {j}"
                            ))
                        })?;
                    let mut sq = 0.0;
                    let mut ab = 0.0;
                    for &i in &masked {
                        let truth_emb = table[truth.category(i, j)];
                        let scalar = pred
                            .cat_scalars
                            .and_then(|m| m.get(&(i, j)).copied())
                            .unwrap_or_else(|| table[pred.data.category(i, j)]);
                        sq += (truth_emb - scalar).powi(2);
                        ab += (truth_emb - scalar).abs();
                    }
                    (sq, ab)
                }
                CatEvalMode::Onehot => {
                    let mut ce_sum = 0.0;
                    for &i in &masked {
                        let truth_cat = truth.category(i, j);
                        let p_true = match pred.cat_probs.and_then(|m| m.get(&(i, j))) {
                            Some(probs) => probs.get(truth_cat).copied().unwrap_or(0.0),
                            // Point mass on the imputed category.
                            None => {
                                if pred.data.category(i, j) == truth_cat {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ce_sum += -(p_true.max(PROB_FLOOR)).ln();
                    }
                    (ce_sum, ce_sum)
                }
            }
        } else {
            let params = norm_params[j].expect("continuous column has params");
            let mut sq = 0.0;
            let mut ab = 0.0;
            for &i in &masked {
                let t = data::apply_norm(params, truth.get(i, j));
                let x = data::apply_norm(params, pred.data.get(i, j));
                sq += (t - x).powi(2);
                ab += (t - x).abs();
            }
            (sq, ab)
        };
        per_column.push(ColumnError {
            column: truth.column(j).name.clone(),
            avg_err: sq_sum / masked.len() as f64,
            abs_err: abs_sum / masked.len() as f64,
            n_masked: masked.len(),
        });
    }
    if per_column.is_empty() {
        return Err(Error::Contract(
            "no column has masked cells to evaluate".into(),
        ));
    }
    let macro_avg_err =
        per_column.iter().map(|c| c.avg_err).sum::<f64>() / per_column.len() as f64;
    let macro_abs_err =
        per_column.iter().map(|c| c.abs_err).sum::<f64>() / per_column.len() as f64;
    Ok(MetricsReport {
        per_column,
        macro_avg_err,
        macro_abs_err,
        excluded_columns: excluded,
    })
}

/// Min-Max parameters per continuous column, fitted on observed truth cells
/// (None for categorical columns).
fn continuous_norm_params(
    truth: &Dataset,
    mask: &MaskMatrix,
) -> Result<Vec<Option<NormParams>>> {
    let normalized = data::normalize(truth, NormMode::Minmax, Some(mask))?;
    Ok(normalized.schema().iter().map(|c| c.norm).collect())
}

/// Closed-form value the mean baseline must produce on a continuous column:
/// the mean squared deviation of the masked true values from the observed
/// mean, on the normalized scale. Computed directly from the data, not
/// through the imputation pipeline.
pub fn mean_baseline_expected(truth: &Dataset, mask: &MaskMatrix, j: usize) -> Result<f64> {
    if truth.is_categorical(j) {
        return Err(Error::Contract("column must be continuous".into()));
    }
    let params = continuous_norm_params(truth, mask)?[j].expect("continuous");
    let observed: Vec<f64> = (0..truth.n_rows())
        .filter(|&i| mask.is_observed(i, j))
        .map(|i| data::apply_norm(params, truth.get(i, j)))
        .collect();
    let masked: Vec<f64> = (0..truth.n_rows())
        .filter(|&i| mask.is_missing(i, j))
        .map(|i| data::apply_norm(params, truth.get(i, j)))
        .collect();
    if observed.is_empty() || masked.is_empty() {
        return Err(Error::EmptyColumn(truth.column(j).name.clone()));
    }
    let obs_mean = observed.iter().sum::<f64>() / observed.len() as f64;
    Ok(masked.iter().map(|x| (x - obs_mean).powi(2)).sum::<f64>() / masked.len() as f64)
}
