//! Posterior predictive checks: outcome replicates from the fitted joint
//! model, the within-subject marker discrepancy statistic, and per-subject
//! posterior predictive p-values.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::diagnostics::percentile_type7;
use crate::error::{Error, Result};
use crate::model::config::poly_basis;
use crate::sampler::FitResult;
use crate::seeding::rng_for;

/// Per-subject p-values plus outcome replicate draws for overlay export.
#[derive(Debug, Clone)]
pub struct PpcReport {
    pub subject_ids: Vec<String>,
    /// Marker-submodel posterior predictive p-value per subject.
    pub p_values: Vec<f64>,
    /// One replicate outcome vector per selected draw, observations in
    /// dataset order (subject-major). Empty for marker-only fits.
    pub outcome_replicates: Vec<Vec<f64>>,
    /// Fraction of p-values in (0.05, 0.95).
    pub frac_wide: f64,
    /// Fraction of p-values in (0.25, 0.75).
    pub frac_mid: f64,
}

/// Evenly strided selection of `n_rep` indices from `0..total`.
fn strided_indices(total: usize, n_rep: usize) -> Vec<usize> {
    if n_rep == total {
        return (0..total).collect();
    }
    (0..n_rep)
        .map(|k| k * total / n_rep + total / (2 * n_rep))
        .collect()
}

/// Within-subject marker discrepancy: sum of squared residuals from the
/// subject's fitted mean curve, scaled by the subject's residual sd (or
/// variance when `variance_denominator` is set).
pub fn t_statistic(
    x: &[f64],
    times: &[f64],
    b_i: &[f64],
    s_i: f64,
    variance_denominator: bool,
) -> Result<f64> {
    if x.is_empty() || x.len() != times.len() {
        return Err(Error::Domain(
            "t_statistic needs at least one observation with matching times".into(),
        ));
    }
    if !(s_i > 0.0) {
        return Err(Error::Domain("subject residual scale must be positive".into()));
    }
    let denom = if variance_denominator { s_i * s_i } else { s_i };
    let mut phi = vec![0.0; b_i.len()];
    let mut acc = 0.0;
    for (&xv, &t) in x.iter().zip(times) {
        poly_basis(t, b_i.len(), &mut phi);
        let mu: f64 = b_i.iter().zip(&phi).map(|(b, f)| b * f).sum();
        let d = xv - mu;
        acc += d * d;
    }
    Ok(acc / denom)
}

/// General form used internally: per-observation denominators, so the
/// time-varying variance mode reduces to the same comparison.
fn t_stat_general(x: &[f64], mu: &[f64], sd: &[f64], variance_denominator: bool) -> f64 {
    let mut acc = 0.0;
    for j in 0..x.len() {
        let d = x[j] - mu[j];
        let denom = if variance_denominator {
            sd[j] * sd[j]
        } else {
            sd[j]
        };
        acc += d * d / denom;
    }
    acc
}

/// Replicate outcome vectors from `n_rep` evenly spaced posterior draws:
/// for each selected draw, one simulated outcome per observation from
/// Normal(eta_ij, sigma^2) at that draw's parameters.
pub fn simulate_outcome_replicates(
    fit: &FitResult,
    n_rep: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !fit.model.spec.include_outcome {
        return Err(Error::Config(
            "outcome replicates need a fit that includes the outcome submodel".into(),
        ));
    }
    let total = fit.total_draws();
    if n_rep == 0 || n_rep > total {
        return Err(Error::Config(format!(
            "n_rep must be in 1..={total} (have {n_rep})"
        )));
    }
    let data = &fit.model.data;
    let reps: Vec<Vec<f64>> = strided_indices(total, n_rep)
        .into_par_iter()
        .map(|k| {
            let pv = fit.params_at_flat(k);
            let mut rng = rng_for(seed, &format!("ppc/y/{k}"));
            let mut row = Vec::with_capacity(data.n_obs());
            for i in 0..data.n_subjects() {
                for j in 0..data.times[i].len() {
                    let mu = fit.model.mu_at(&pv, i, j);
                    let s2 = fit.model.s2_at(&pv, i, j);
                    let eta = fit.model.eta_at(&pv, i, j, mu, s2);
                    let z: f64 = rng.sample(StandardNormal);
                    row.push(eta + pv.sigma * z);
                }
            }
            row
        })
        .collect();
    Ok(reps)
}

/// Per-subject posterior predictive p-values for the marker submodel:
/// across all kept draws, the fraction where the observed discrepancy is
/// below the discrepancy of data simulated from that draw (ties count 0.5).
pub fn ppc_pvalues(
    fit: &FitResult,
    variance_denominator: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let total = fit.total_draws();
    if total == 0 {
        return Err(Error::Config("fit holds no posterior draws".into()));
    }
    let data = &fit.model.data;
    let n = data.n_subjects();
    // Streams are keyed by a content tag of the subject's observations, so
    // p-values are exactly invariant to relabeling and reordering.
    let tags: Vec<String> = (0..n)
        .map(|i| {
            let mut h = Sha256::new();
            for &t in &data.times[i] {
                h.update(t.to_le_bytes());
            }
            for &x in &data.x[i] {
                h.update(x.to_le_bytes());
            }
            let digest = h.finalize();
            digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
        })
        .collect();
    let wins: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|k| {
            let pv = fit.params_at_flat(k);
            let mut w = vec![0.0; n];
            let mut mu = Vec::new();
            let mut sd = Vec::new();
            let mut sim = Vec::new();
            for i in 0..n {
                let mut rng = rng_for(seed, &format!("ppc/x/{k}/{}", tags[i]));
                let n_i = data.times[i].len();
                mu.clear();
                sd.clear();
                sim.clear();
                for j in 0..n_i {
                    let m = fit.model.mu_at(&pv, i, j);
                    let s = fit.model.s2_at(&pv, i, j).sqrt();
                    let z: f64 = rng.sample(StandardNormal);
                    mu.push(m);
                    sd.push(s);
                    sim.push(m + s * z);
                }
                let t_obs = t_stat_general(&data.x[i], &mu, &sd, variance_denominator);
                let t_sim = t_stat_general(&sim, &mu, &sd, variance_denominator);
                w[i] = if t_obs < t_sim {
                    1.0
                } else if t_obs == t_sim {
                    0.5
                } else {
                    0.0
                };
            }
            w
        })
        .reduce(
            || vec![0.0; n],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
    Ok(wins.into_iter().map(|w| w / total as f64).collect())
}

/// Full posterior predictive report: p-values, their coverage fractions,
/// and outcome replicates (empty when the fit excludes the outcome).
pub fn ppc_report(
    fit: &FitResult,
    n_rep: usize,
    variance_denominator: bool,
    seed: u64,
) -> Result<PpcReport> {
    let p_values = ppc_pvalues(fit, variance_denominator, seed)?;
    let outcome_replicates = if fit.model.spec.include_outcome {
        simulate_outcome_replicates(fit, n_rep.min(fit.total_draws()), seed)?
    } else {
        Vec::new()
    };
    let n = p_values.len() as f64;
    let frac_wide =
        p_values.iter().filter(|&&p| p > 0.05 && p < 0.95).count() as f64 / n;
    let frac_mid =
        p_values.iter().filter(|&&p| p > 0.25 && p < 0.75).count() as f64 / n;
    Ok(PpcReport {
        subject_ids: fit.model.data.subject_ids.clone(),
        p_values,
        outcome_replicates,
        frac_wide,
        frac_mid,
    })
}

/// Column-wise replicate quantiles (one row per probability, one column
/// per observation) for overlay export.
pub fn replicate_quantiles(replicates: &[Vec<f64>], probs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n_obs = replicates.first().map_or(0, |r| r.len());
    if replicates.is_empty() || n_obs == 0 {
        return Err(Error::Config("no replicates to summarize".into()));
    }
    let mut out = vec![vec![0.0; n_obs]; probs.len()];
    for j in 0..n_obs {
        let mut col: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
        col.sort_by(|a, b| a.total_cmp(b));
        for (r, &p) in probs.iter().enumerate() {
            out[r][j] = percentile_type7(&col, p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::strided_indices;

    #[test]
    fn strided_selection_spans_range_without_repeats() {
        let idx = strided_indices(1000, 250);
        assert_eq!(idx.len(), 250);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(*idx.last().unwrap() < 1000);
        assert_eq!(strided_indices(500, 500), (0..500).collect::<Vec<_>>());
    }
}
