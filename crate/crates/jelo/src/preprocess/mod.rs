//! Preprocessing pipeline: log2 transform, pooled loess detrending,
//! one-visit lagging, covariate centering/standardization.

pub mod loess;

use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
pub use loess::{loess_fit, LoessFit};

/// Elementwise base-2 logarithm. All inputs must be strictly positive.
pub fn log2_transform(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > 0.0 {
                Ok(v.log2())
            } else {
                Err(Error::Domain(format!(
                    "non-positive value {v} at position {i}; log2 requires values > 0"
                )))
            }
        })
        .collect()
}

/// Subtracts the pooled loess fit from each value. Returns residuals and the
/// number of query times that fell outside the training range.
pub fn detrend(times: &[f64], values: &[f64], fit: &LoessFit) -> Result<(Vec<f64>, usize)> {
    let mut extrapolations = 0usize;
    let mut resid = Vec::with_capacity(values.len());
    for (&t, &v) in times.iter().zip(values) {
        let (smooth, flagged) = fit.predict_flagged(t)?;
        if flagged {
            extrapolations += 1;
        }
        resid.push(v - smooth);
    }
    Ok((resid, extrapolations))
}

/// One prepared visit row: the outcome at a visit paired with the marker
/// residual from `lag` visits earlier.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepRow {
    pub subject_id: String,
    pub time: f64,
    pub marker: f64,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub marker_resid: f64,
    pub outcome_resid: f64,
    pub marker_resid_lagged: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrepReport {
    pub rows_read: usize,
    pub rows_dropped_missing: usize,
    pub boundary_extrapolations: usize,
    pub rows_dropped_by_lag: usize,
    pub subjects_dropped_short: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepConfig {
    pub span: f64,
    pub degree: usize,
    pub lag: usize,
    /// Covariates to center (subtract the across-subject mean).
    pub center: Vec<String>,
    /// Covariates to center and divide by the across-subject sd (n-1).
    pub standardize: Vec<String>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { span: 0.75, degree: 2, lag: 1, center: Vec::new(), standardize: Vec::new() }
    }
}

/// Per-subject centered/standardized covariates. `standardize` wins when a
/// name appears in both lists. The mean is across subjects (one baseline
/// value each); sd uses the n-1 denominator.
pub fn center_covariates(
    dataset: &mut LongitudinalDataset,
    center: &[String],
    standardize: &[String],
) -> Result<()> {
    let n = dataset.n_subjects();
    if n == 0 {
        return Ok(());
    }
    let mut all: Vec<&String> = center.iter().chain(standardize.iter()).collect();
    all.dedup();
    for name in all {
        let idx = dataset
            .covariate_index(name)
            .ok_or_else(|| Error::Schema(format!("covariate `{name}` not present in data")))?;
        let mean: f64 =
            dataset.subjects.iter().map(|s| s.covariates[idx]).sum::<f64>() / n as f64;
        let scale = if standardize.contains(name) {
            if n < 2 {
                return Err(Error::Domain(format!(
                    "cannot standardize `{name}` with fewer than 2 subjects"
                )));
            }
            let var: f64 = dataset
                .subjects
                .iter()
                .map(|s| (s.covariates[idx] - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            if var == 0.0 {
                return Err(Error::Domain(format!("covariate `{name}` is constant")));
            }
            var.sqrt()
        } else {
            1.0
        };
        for s in &mut dataset.subjects {
            s.covariates[idx] = (s.covariates[idx] - mean) / scale;
        }
    }
    Ok(())
}

/// Runs the full pipeline on raw data already grouped into a dataset:
/// log2 both series, pooled loess detrend each, lag the marker residuals,
/// and center/standardize covariates.
pub fn run_prep(
    dataset: &LongitudinalDataset,
    config: &PrepConfig,
) -> Result<(Vec<PrepRow>, Vec<String>, PrepReport)> {
    let mut report = PrepReport::default();

    // log2 with errors naming the record
    let mut log_marker: Vec<Vec<f64>> = Vec::with_capacity(dataset.n_subjects());
    let mut log_outcome: Vec<Vec<f64>> = Vec::with_capacity(dataset.n_subjects());
    for s in &dataset.subjects {
        for j in 0..s.n_obs() {
            for (col, v) in [("marker", s.marker[j]), ("outcome", s.outcome[j])] {
                if v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "non-positive {col} value {v} for subject {} at time {}",
                        s.id, s.times[j]
                    )));
                }
            }
        }
        log_marker.push(s.marker.iter().map(|v| v.log2()).collect());
        log_outcome.push(s.outcome.iter().map(|v| v.log2()).collect());
    }

    // pooled loess over all visits, one fit per series
    let pooled_t: Vec<f64> = dataset.subjects.iter().flat_map(|s| s.times.clone()).collect();
    let pooled_m: Vec<f64> = log_marker.iter().flatten().copied().collect();
    let pooled_y: Vec<f64> = log_outcome.iter().flatten().copied().collect();
    let marker_fit = loess_fit(&pooled_t, &pooled_m, config.span, config.degree)?;
    let outcome_fit = loess_fit(&pooled_t, &pooled_y, config.span, config.degree)?;

    // residuals + lagging, per subject
    let mut centered = dataset.clone();
    center_covariates(&mut centered, &config.center, &config.standardize)?;

    let mut rows = Vec::new();
    for (i, s) in centered.subjects.iter().enumerate() {
        let (m_resid, ex_m) = detrend(&s.times, &log_marker[i], &marker_fit)?;
        let (y_resid, ex_y) = detrend(&s.times, &log_outcome[i], &outcome_fit)?;
        report.boundary_extrapolations += ex_m + ex_y;
        let lag = config.lag;
        if s.n_obs() < lag + 2 {
            report.subjects_dropped_short += 1;
            report.rows_dropped_by_lag += s.n_obs();
            continue;
        }
        report.rows_dropped_by_lag += lag;
        for j in lag..s.n_obs() {
            rows.push(PrepRow {
                subject_id: s.id.clone(),
                time: s.times[j],
                marker: s.marker[j],
                outcome: s.outcome[j],
                covariates: s.covariates.clone(),
                marker_resid: m_resid[j],
                outcome_resid: y_resid[j],
                marker_resid_lagged: m_resid[j - lag],
            });
        }
    }
    Ok((rows, centered.covariate_names.clone(), report))
}
