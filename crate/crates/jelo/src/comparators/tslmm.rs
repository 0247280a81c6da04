//! Two-stage linear mixed model comparator. Stage 1 fits the marker on
//! (1, t) with a random intercept and slope; stage 2 regresses the outcome
//! on the stage-1 plug-ins with a random intercept and reports Wald
//! intervals from the GLS covariance.

use nalgebra::{DMatrix, DVector};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::model::config::{OutcomeSpec, TermKind};

use super::lmm::{lmm_fit, LmmFit};

/// z for a two-sided 95% normal interval; no degrees-of-freedom correction.
pub const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Clone)]
pub struct TslmmOptions {
    /// Use one residual variance pooled across every subject instead of a
    /// per-subject residual variance. The pooled variant is constant in i,
    /// so the stage-2 variance columns are collinear with the intercept and
    /// time columns and the fit is reported singular.
    pub pooled_variance: bool,
    /// REML (true) or ML (false) in both stages.
    pub reml: bool,
}

impl Default for TslmmOptions {
    fn default() -> Self {
        TslmmOptions { pooled_variance: false, reml: true }
    }
}

#[derive(Debug, Clone)]
pub struct TslmmFit {
    pub stage1: LmmFit,
    pub stage2: LmmFit,
    /// Outcome coefficient names in spec-term order.
    pub beta_names: Vec<String>,
    pub estimates: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// Stage-1 subject-line predictions x_hat, per subject per visit.
    pub xhat: Vec<Vec<f64>>,
    /// Plug-in residual variance per subject.
    pub s2hat: Vec<f64>,
}

/// Stage-1 designs: marker on (1, t), random intercept + slope.
fn stage1_matrices(
    dataset: &LongitudinalDataset,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut z = Vec::new();
    for s in &dataset.subjects {
        let n_i = s.times.len();
        y.push(DVector::from_iterator(n_i, s.marker.iter().copied()));
        let d = DMatrix::from_fn(n_i, 2, |r, c| if c == 0 { 1.0 } else { s.times[r] });
        x.push(d.clone());
        z.push(d);
    }
    (y, x, z)
}

pub fn tslmm(
    dataset: &LongitudinalDataset,
    spec: &OutcomeSpec,
    opts: &TslmmOptions,
) -> Result<TslmmFit> {
    dataset.check_fit_schema()?;
    spec.validate()?;

    let (y1, x1, z1) = stage1_matrices(dataset);
    let stage1 = lmm_fit(&y1, &x1, &z1, opts.reml)?;
    if !stage1.converged {
        return Err(Error::Convergence("tslmm stage 1 did not converge".into()));
    }

    // Subject lines B_i = beta + b_i; predictions and residuals follow.
    let mut xhat: Vec<Vec<f64>> = Vec::with_capacity(dataset.n_subjects());
    let mut resid: Vec<Vec<f64>> = Vec::with_capacity(dataset.n_subjects());
    for (i, s) in dataset.subjects.iter().enumerate() {
        let b0 = stage1.beta[0] + stage1.blups[i][0];
        let b1 = stage1.beta[1] + stage1.blups[i][1];
        let pred: Vec<f64> = s.times.iter().map(|t| b0 + b1 * t).collect();
        let r: Vec<f64> = s.marker.iter().zip(&pred).map(|(m, p)| m - p).collect();
        xhat.push(pred);
        resid.push(r);
    }

    let sample_var = |vals: &[f64]| -> f64 {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        if vals.len() < 2 {
            return 0.0;
        }
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    };
    let s2hat: Vec<f64> = if opts.pooled_variance {
        let all: Vec<f64> = resid.iter().flatten().copied().collect();
        vec![sample_var(&all); dataset.n_subjects()]
    } else {
        resid.iter().map(|r| sample_var(r)).collect()
    };

    // Stage 2: outcome on the spec terms with mu -> xhat, var -> s2hat.
    let t_dim = spec.n_terms();
    let mut y2 = Vec::new();
    let mut x2 = Vec::new();
    let mut z2 = Vec::new();
    for (i, s) in dataset.subjects.iter().enumerate() {
        let n_i = s.times.len();
        y2.push(DVector::from_iterator(n_i, s.outcome.iter().copied()));
        let mut d = DMatrix::zeros(n_i, t_dim);
        for j in 0..n_i {
            let t = s.times[j];
            for (k, term) in spec.terms.iter().enumerate() {
                d[(j, k)] = match term {
                    TermKind::Intercept => 1.0,
                    TermKind::Mu => xhat[i][j],
                    TermKind::Var => s2hat[i],
                    TermKind::Time => t,
                    TermKind::MuTime => xhat[i][j] * t,
                    TermKind::VarTime => s2hat[i] * t,
                    TermKind::Covariate(name) => {
                        let idx = dataset.covariate_index(name).ok_or_else(|| {
                            Error::Schema(format!("covariate `{name}` not in dataset"))
                        })?;
                        s.covariates[idx]
                    }
                };
            }
        }
        x2.push(d);
        z2.push(DMatrix::from_element(n_i, 1, 1.0));
    }
    let stage2 = lmm_fit(&y2, &x2, &z2, opts.reml)?;

    let estimates = stage2.beta.clone();
    let ci_lower: Vec<f64> =
        estimates.iter().zip(&stage2.se).map(|(b, s)| b - Z_95 * s).collect();
    let ci_upper: Vec<f64> =
        estimates.iter().zip(&stage2.se).map(|(b, s)| b + Z_95 * s).collect();

    Ok(TslmmFit {
        stage1,
        stage2,
        beta_names: spec.terms.iter().map(|t| t.name()).collect(),
        estimates,
        ci_lower,
        ci_upper,
        xhat,
        s2hat,
    })
}
