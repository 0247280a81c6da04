//! Outcome-only mixed model with fixed (plug-in) regressors and a random
//! intercept, sampled with the same HMC machinery as the joint model.
//! Used as stage 2 of the two-stage outcome comparator.

use crate::error::{Error, Result};
use crate::model::config::PriorConfig;
use crate::model::density::{half_cauchy_lpdf, normal_lpdf, LN_2PI};
use crate::model::LogDensityModel;

/// Unconstrained layout: [v_0..v_{N-1}, beta_0..beta_{T-1}, log_sigma,
/// log_tau_a]; a_i = tau_a * v_i.
#[derive(Debug, Clone)]
pub struct OutcomeOnlyModel {
    pub subject_ids: Vec<String>,
    /// Per subject: row-major (n_i x t_dim) regressor matrix.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub t_dim: usize,
    pub term_names: Vec<String>,
    pub priors: PriorConfig,
}

impl OutcomeOnlyModel {
    pub fn new(
        subject_ids: Vec<String>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        t_dim: usize,
        term_names: Vec<String>,
        priors: PriorConfig,
    ) -> Result<Self> {
        if subject_ids.len() != x.len() || x.len() != y.len() {
            return Err(Error::Schema("outcome-only model inputs misaligned".into()));
        }
        if term_names.len() != t_dim {
            return Err(Error::Schema("term names must match regressor count".into()));
        }
        for (i, (xi, yi)) in x.iter().zip(&y).enumerate() {
            if xi.len() != yi.len() * t_dim {
                return Err(Error::Schema(format!(
                    "subject {} regressor matrix does not match outcome length",
                    subject_ids[i]
                )));
            }
        }
        priors.validate()?;
        Ok(OutcomeOnlyModel { subject_ids, x, y, t_dim, term_names, priors })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn beta_at(&self) -> usize {
        self.n_subjects()
    }

    pub fn log_sigma_at(&self) -> usize {
        self.n_subjects() + self.t_dim
    }

    pub fn log_tau_a_at(&self) -> usize {
        self.n_subjects() + self.t_dim + 1
    }

    /// Names of the reported global parameters: betas, sigma, tau_a.
    pub fn global_names(&self) -> Vec<String> {
        let mut names = self.term_names.clone();
        names.push("sigma".into());
        names.push("tau_a".into());
        names
    }

    /// Constrained global values aligned with `global_names`.
    pub fn global_values(&self, theta: &[f64]) -> Vec<f64> {
        let mut vals = theta[self.beta_at()..self.beta_at() + self.t_dim].to_vec();
        vals.push(theta[self.log_sigma_at()].exp());
        vals.push(theta[self.log_tau_a_at()].exp());
        vals
    }
}

impl LogDensityModel for OutcomeOnlyModel {
    fn dim(&self) -> usize {
        self.n_subjects() + self.t_dim + 2
    }

    fn logdensity_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = self.n_subjects();
        let t_dim = self.t_dim;
        let pc = &self.priors;
        let beta = &theta[n..n + t_dim];
        let r_sig = theta[self.log_sigma_at()];
        let g_at = self.log_tau_a_at();
        let sigma = r_sig.exp();
        let sigma2 = sigma * sigma;
        let tau_a = theta[g_at].exp();

        let mut value = 0.0;
        let mut g_r = 0.0;
        let mut g_g = 0.0;
        for i in 0..n {
            let v = theta[i];
            let a = tau_a * v;
            // v_i ~ N(0,1) (non-centered a_i)
            value += -0.5 * LN_2PI - 0.5 * v * v;
            grad[i] = -v;
            let rows = self.y[i].len();
            let mut eps_sum = 0.0;
            for j in 0..rows {
                let xr = &self.x[i][j * t_dim..(j + 1) * t_dim];
                let mut eta = a;
                for (k, xv) in xr.iter().enumerate() {
                    eta += beta[k] * xv;
                }
                let dy = self.y[i][j] - eta;
                value += -0.5 * LN_2PI - r_sig - 0.5 * dy * dy / sigma2;
                let eps = dy / sigma2;
                eps_sum += eps;
                g_r += -1.0 + dy * dy / sigma2;
                for (k, xv) in xr.iter().enumerate() {
                    grad[n + k] += eps * xv;
                }
            }
            grad[i] += tau_a * eps_sum;
            g_g += eps_sum * a;
        }
        for (k, &b) in beta.iter().enumerate() {
            value += normal_lpdf(b, 0.0, pc.beta_sd);
            grad[n + k] -= b / (pc.beta_sd * pc.beta_sd);
        }
        value += half_cauchy_lpdf(sigma, pc.sigma_scale) + r_sig;
        grad[self.log_sigma_at()] =
            g_r - 2.0 * sigma2 / (pc.sigma_scale * pc.sigma_scale + sigma2) + 1.0;
        let t2 = tau_a * tau_a;
        value += half_cauchy_lpdf(tau_a, pc.tau_a_scale) + theta[g_at];
        grad[g_at] = g_g - 2.0 * t2 / (pc.tau_a_scale * pc.tau_a_scale + t2) + 1.0;
        value
    }

    fn scale_coords(&self) -> Vec<usize> {
        vec![self.log_sigma_at(), self.log_tau_a_at()]
    }

    fn initial_point(&self) -> Option<Vec<f64>> {
        self.data_informed_init()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> OutcomeOnlyModel {
        // 3 subjects, 2 obs each, regressors [1, t]
        let ids = vec!["a".into(), "b".into(), "c".into()];
        let x = vec![
            vec![1.0, 0.0, 1.0, 1.0],
            vec![1.0, 0.5, 1.0, 1.5],
            vec![1.0, 1.0, 1.0, 2.0],
        ];
        let y = vec![vec![0.3, 0.1], vec![-0.2, 0.4], vec![0.0, -0.5]];
        OutcomeOnlyModel::new(
            ids,
            x,
            y,
            2,
            vec!["beta_intercept".into(), "beta_time".into()],
            PriorConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = toy_model();
        let dim = m.dim();
        let theta: Vec<f64> = (0..dim).map(|i| 0.17 * (i as f64 + 1.0).sin()).collect();
        let mut grad = vec![0.0; dim];
        m.logdensity_grad(&theta, &mut grad);
        let h = 1e-6;
        let mut scratch = vec![0.0; dim];
        for c in 0..dim {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[c] += h;
            tm[c] -= h;
            let fp = m.logdensity_grad(&tp, &mut scratch);
            let fm = m.logdensity_grad(&tm, &mut scratch);
            let fd = (fp - fm) / (2.0 * h);
            let denom = grad[c].abs().max(1e-7);
            assert!(
                ((grad[c] - fd) / denom).abs() < 1e-4,
                "coord {c}: analytic {} vs fd {fd}",
                grad[c]
            );
        }
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let err = OutcomeOnlyModel::new(
            vec!["a".into()],
            vec![vec![1.0, 2.0, 3.0]],
            vec![vec![0.0]],
            2,
            vec!["b0".into(), "b1".into()],
            PriorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }
}
