//! Two-stage Bayesian comparator. Stage 1 samples the marker submodel alone
//! (the joint model with the outcome likelihood deleted); stage 2 samples a
//! Bayesian outcome regression treating the stage-1 posterior-mean marker
//! means and variances as fixed plug-in regressors.

use rayon::prelude::*;

use crate::data::LongitudinalDataset;
use crate::diagnostics::{summarize_all, ParamSummary};
use crate::error::Result;
use crate::model::config::{ModelSpec, PriorConfig, TermKind};
use crate::model::outcome_only::OutcomeOnlyModel;
use crate::sampler::{hmc_sample_scoped, run_model_scoped, FitResult, PosteriorDraws, SamplerConfig};

#[derive(Debug, Clone)]
pub struct TsloFit {
    pub stage1: FitResult,
    /// Posterior-mean marker mean per subject per visit.
    pub muhat: Vec<Vec<f64>>,
    /// Posterior-mean marker variance per subject per visit.
    pub s2hat: Vec<Vec<f64>>,
    pub stage2_draws: PosteriorDraws,
    /// Stage-2 summaries: outcome betas, sigma, tau_a.
    pub summaries: Vec<ParamSummary>,
    pub warnings: Vec<String>,
}

impl TsloFit {
    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }
}

pub fn tslo(
    dataset: &LongitudinalDataset,
    spec: &ModelSpec,
    priors: &PriorConfig,
    cfg: &SamplerConfig,
) -> Result<TsloFit> {
    tslo_scoped(dataset, spec, priors, cfg, "")
}

pub fn tslo_scoped(
    dataset: &LongitudinalDataset,
    spec: &ModelSpec,
    priors: &PriorConfig,
    cfg: &SamplerConfig,
    scope: &str,
) -> Result<TsloFit> {
    let mut stage1_spec = spec.clone();
    stage1_spec.include_outcome = false;
    let stage1 = run_model_scoped(
        dataset,
        &stage1_spec,
        priors,
        cfg,
        &format!("{scope}/tslo/stage1"),
    )?;

    // Posterior means of mu_ij and s2_ij averaged over all kept draws.
    let total = stage1.total_draws();
    let n_subjects = dataset.n_subjects();
    let per_draw: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..total)
        .into_par_iter()
        .map(|k| {
            let pv = stage1.params_at_flat(k);
            let mut mu = Vec::with_capacity(n_subjects);
            let mut s2 = Vec::with_capacity(n_subjects);
            for (i, s) in dataset.subjects.iter().enumerate() {
                let mu_i: Vec<f64> =
                    (0..s.n_obs()).map(|j| stage1.model.mu_at(&pv, i, j)).collect();
                let s2_i: Vec<f64> =
                    (0..s.n_obs()).map(|j| stage1.model.s2_at(&pv, i, j)).collect();
                mu.push(mu_i);
                s2.push(s2_i);
            }
            (mu, s2)
        })
        .collect();
    let mut muhat: Vec<Vec<f64>> =
        dataset.subjects.iter().map(|s| vec![0.0; s.n_obs()]).collect();
    let mut s2hat = muhat.clone();
    for (mu, s2) in &per_draw {
        for i in 0..n_subjects {
            for j in 0..mu[i].len() {
                muhat[i][j] += mu[i][j];
                s2hat[i][j] += s2[i][j];
            }
        }
    }
    let scale = 1.0 / total as f64;
    for i in 0..n_subjects {
        muhat[i].iter_mut().for_each(|v| *v *= scale);
        s2hat[i].iter_mut().for_each(|v| *v *= scale);
    }

    // Stage 2: Bayesian outcome regression on the plug-ins.
    let t_dim = spec.outcome.n_terms();
    let mut ids = Vec::with_capacity(n_subjects);
    let mut x = Vec::with_capacity(n_subjects);
    let mut y = Vec::with_capacity(n_subjects);
    for (i, s) in dataset.subjects.iter().enumerate() {
        ids.push(s.id.clone());
        let mut rows = Vec::with_capacity(s.n_obs() * t_dim);
        for j in 0..s.n_obs() {
            let t = s.times[j];
            for term in &spec.outcome.terms {
                rows.push(match term {
                    TermKind::Intercept => 1.0,
                    TermKind::Mu => muhat[i][j],
                    TermKind::Var => s2hat[i][j],
                    TermKind::Time => t,
                    TermKind::MuTime => muhat[i][j] * t,
                    TermKind::VarTime => s2hat[i][j] * t,
                    TermKind::Covariate(name) => {
                        let idx = dataset.covariate_index(name).ok_or_else(|| {
                            crate::error::Error::Schema(format!(
                                "covariate `{name}` not in dataset"
                            ))
                        })?;
                        s.covariates[idx]
                    }
                });
            }
        }
        x.push(rows);
        y.push(s.outcome.clone());
    }
    let term_names: Vec<String> = spec.outcome.terms.iter().map(|t| t.name()).collect();
    let m2 = OutcomeOnlyModel::new(ids, x, y, t_dim, term_names, priors.clone())?;
    let stage2_draws = hmc_sample_scoped(&m2, cfg, &format!("{scope}/tslo/stage2"))?;

    let names = m2.global_names();
    let global_draws: Vec<Vec<Vec<f64>>> = stage2_draws
        .chains
        .iter()
        .map(|c| c.draws.iter().map(|theta| m2.global_values(theta)).collect())
        .collect();
    let summaries = summarize_all(&names, &global_draws)?;

    let mut warnings = stage1.warnings.clone();
    warnings.extend(stage2_draws.warnings.clone());
    Ok(TsloFit { stage1, muhat, s2hat, stage2_draws, summaries, warnings })
}
