//! Joint log-density: standalone constrained-space terms for auditing and a
//! fused unconstrained evaluator with analytic gradient for sampling.

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::model::config::{ModelSpec, PriorConfig, TermKind, VarianceMode};
use crate::model::params::{corr_chol_from_z, ParamLayout, ParamVector};
use crate::model::LogDensityModel;

pub const LN_2PI: f64 = 1.837877066409345483560659472811235279722794947275566825634303;

pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// log density of the half-Cauchy with the given scale, support x >= 0.
pub fn half_cauchy_lpdf(x: f64, scale: f64) -> f64 {
    (2.0 / (std::f64::consts::PI * scale)).ln() - (1.0 + (x / scale).powi(2)).ln()
}

/// LKJ density on a correlation Cholesky factor, up to a constant not
/// depending on L: sum over k = 2..P of (P - k + 2 zeta - 2) ln L_kk.
pub fn lkj_chol_lpdf(l: &[f64], p: usize, zeta: f64) -> f64 {
    let mut acc = 0.0;
    for row in 1..p {
        let exponent = (p - (row + 1)) as f64 + 2.0 * zeta - 2.0;
        acc += exponent * l[row * p + row].ln();
    }
    acc
}

/// Dataset bound to a model shape: per-subject arrays plus cached polynomial
/// bases for the mean and (when time-varying) variance submodels.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub subject_ids: Vec<String>,
    pub times: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// Covariate values per subject, aligned with the Covariate terms in
    /// OutcomeSpec order.
    pub w: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    phi_s: Vec<Vec<f64>>,
    pub p: usize,
    pub p_s: usize,
}

impl ModelData {
    pub fn new(dataset: &LongitudinalDataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        if dataset.subjects.is_empty() {
            return Err(Error::Schema("dataset has no subjects".into()));
        }
        let cov_names = spec.covariate_names();
        let mut cov_idx = Vec::with_capacity(cov_names.len());
        for name in &cov_names {
            let idx = dataset.covariate_index(name).ok_or_else(|| {
                Error::Schema(format!("outcome term references unknown covariate `{name}`"))
            })?;
            cov_idx.push(idx);
        }
        let p = spec.marker.p();
        let p_s = spec.marker.p_s();
        let mut md = ModelData {
            subject_ids: Vec::new(),
            times: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
            w: Vec::new(),
            phi: Vec::new(),
            phi_s: Vec::new(),
            p,
            p_s,
        };
        for s in &dataset.subjects {
            md.subject_ids.push(s.id.clone());
            md.times.push(s.times.clone());
            md.x.push(s.marker.clone());
            md.y.push(s.outcome.clone());
            md.w.push(cov_idx.iter().map(|&c| s.covariates[c]).collect());
            let mut phi = vec![0.0; s.n_obs() * p];
            for (j, &t) in s.times.iter().enumerate() {
                crate::model::config::poly_basis(t, p, &mut phi[j * p..(j + 1) * p]);
            }
            md.phi.push(phi);
            if p_s > 0 {
                let mut phs = vec![0.0; s.n_obs() * p_s];
                for (j, &t) in s.times.iter().enumerate() {
                    crate::model::config::poly_basis(t, p_s, &mut phs[j * p_s..(j + 1) * p_s]);
                }
                md.phi_s.push(phs);
            }
        }
        Ok(md)
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.times.iter().map(|t| t.len()).sum()
    }
}

/// Regressor source for one outcome term.
#[derive(Debug, Clone, Copy, PartialEq)]
enum TermCol {
    Intercept,
    Mu,
    Var,
    Time,
    MuTime,
    VarTime,
    Cov(usize),
}

/// Value of the joint unconstrained log-density split into its exact
/// decomposition. `value` is the sum of the four parts.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogDensityParts {
    pub value: f64,
    pub marker_loglik: f64,
    pub outcome_loglik: f64,
    pub prior_logdensity: f64,
    pub log_jacobian: f64,
}

/// The joint model bound to a dataset.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub data: ModelData,
    pub spec: ModelSpec,
    pub priors: PriorConfig,
    pub layout: ParamLayout,
    term_cols: Vec<TermCol>,
    // positions of the mu/var-linked coefficients inside beta, if present
    idx_mu: Option<usize>,
    idx_mu_time: Option<usize>,
    idx_var: Option<usize>,
    idx_var_time: Option<usize>,
}

impl JointModel {
    pub fn new(dataset: &LongitudinalDataset, spec: ModelSpec, priors: PriorConfig) -> Result<Self> {
        priors.validate()?;
        let data = ModelData::new(dataset, &spec)?;
        let layout = ParamLayout::new(&spec, data.subject_ids.clone())?;
        let mut term_cols = Vec::new();
        let mut cov_seq = 0usize;
        let (mut idx_mu, mut idx_mu_time, mut idx_var, mut idx_var_time) =
            (None, None, None, None);
        if spec.include_outcome {
            for (k, t) in spec.outcome.terms.iter().enumerate() {
                let col = match t {
                    TermKind::Intercept => TermCol::Intercept,
                    TermKind::Mu => {
                        idx_mu = Some(k);
                        TermCol::Mu
                    }
                    TermKind::Var => {
                        idx_var = Some(k);
                        TermCol::Var
                    }
                    TermKind::Time => TermCol::Time,
                    TermKind::MuTime => {
                        idx_mu_time = Some(k);
                        TermCol::MuTime
                    }
                    TermKind::VarTime => {
                        idx_var_time = Some(k);
                        TermCol::VarTime
                    }
                    TermKind::Covariate(_) => {
                        cov_seq += 1;
                        TermCol::Cov(cov_seq - 1)
                    }
                };
                term_cols.push(col);
            }
        }
        Ok(JointModel {
            data,
            spec,
            priors,
            layout,
            term_cols,
            idx_mu,
            idx_mu_time,
            idx_var,
            idx_var_time,
        })
    }

    /// Marker residual variance for subject i at observation j.
    pub fn s2_at(&self, pv: &ParamVector, i: usize, j: usize) -> f64 {
        match self.spec.marker.variance_mode {
            VarianceMode::Constant => pv.log_s2[i].exp(),
            VarianceMode::TimeVarying => {
                let ps = self.data.p_s;
                let phs = &self.data.phi_s[i][j * ps..(j + 1) * ps];
                let log_s2: f64 = pv.lambda[i].iter().zip(phs).map(|(l, b)| l * b).sum();
                log_s2.exp()
            }
        }
    }

    /// Marker subject-level mean for subject i at observation j.
    pub fn mu_at(&self, pv: &ParamVector, i: usize, j: usize) -> f64 {
        let p = self.data.p;
        let phi = &self.data.phi[i][j * p..(j + 1) * p];
        pv.b[i].iter().zip(phi).map(|(b, f)| b * f).sum()
    }

    /// Outcome linear predictor for subject i at observation j, given the
    /// subject's marker mean and variance at that observation.
    pub fn eta_at(&self, pv: &ParamVector, i: usize, j: usize, mu: f64, s2: f64) -> f64 {
        let t = self.data.times[i][j];
        let mut eta = pv.a[i][0];
        if pv.a[i].len() > 1 {
            eta += pv.a[i][1] * t;
        }
        for (k, col) in self.term_cols.iter().enumerate() {
            let xv = match col {
                TermCol::Intercept => 1.0,
                TermCol::Mu => mu,
                TermCol::Var => s2,
                TermCol::Time => t,
                TermCol::MuTime => mu * t,
                TermCol::VarTime => s2 * t,
                TermCol::Cov(c) => self.data.w[i][*c],
            };
            eta += pv.beta[k] * xv;
        }
        eta
    }

    /// Marker log-likelihood at a constrained point: sum of Normal log
    /// densities of X_ij at mean b_i . basis(t_ij) and the mode's variance.
    pub fn marker_loglik(&self, pv: &ParamVector) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..self.data.n_subjects() {
            for j in 0..self.data.times[i].len() {
                let x = self.data.x[i][j];
                if !x.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "non-finite marker value for subject {}",
                        self.data.subject_ids[i]
                    )));
                }
                let mu = self.mu_at(pv, i, j);
                let s2 = self.s2_at(pv, i, j);
                if !(s2 > 0.0) {
                    return Err(Error::Domain("marker variance must be positive".into()));
                }
                let dx = x - mu;
                acc += -0.5 * LN_2PI - 0.5 * s2.ln() - 0.5 * dx * dx / s2;
            }
        }
        Ok(acc)
    }

    /// Outcome log-likelihood at a constrained point.
    pub fn outcome_loglik(&self, pv: &ParamVector) -> Result<f64> {
        if !self.spec.include_outcome {
            return Ok(0.0);
        }
        if !(pv.sigma > 0.0) {
            return Err(Error::Domain("sigma must be positive".into()));
        }
        let mut acc = 0.0;
        for i in 0..self.data.n_subjects() {
            for j in 0..self.data.times[i].len() {
                let mu = self.mu_at(pv, i, j);
                let s2 = self.s2_at(pv, i, j);
                let eta = self.eta_at(pv, i, j, mu, s2);
                acc += normal_lpdf(self.data.y[i][j], eta, pv.sigma);
            }
        }
        Ok(acc)
    }

    /// Full prior log-density at a constrained point, all hyperpriors
    /// included. The LKJ terms are up to constants not depending on the
    /// parameters.
    pub fn prior_logdensity(&self, pv: &ParamVector) -> Result<f64> {
        let pc = &self.priors;
        let p = self.data.p;
        let n = self.data.n_subjects();
        crate::model::params::validate_corr_chol(&pv.l, p)?;
        let mut acc = 0.0;

        // alpha, K, L
        for &a in &pv.alpha {
            acc += normal_lpdf(a, 0.0, pc.xi0);
        }
        for &k in &pv.k {
            if !(k > 0.0) {
                return Err(Error::Domain("K diagonal must be positive".into()));
            }
            acc += half_cauchy_lpdf(k, pc.tau0);
        }
        acc += lkj_chol_lpdf(&pv.l, p, pc.zeta);

        // b_i ~ N(alpha, K L L^T K): evaluate through the triangular factor
        let mut det_kl = 0.0;
        for r in 0..p {
            det_kl += pv.k[r].ln() + pv.l[r * p + r].ln();
        }
        let tri_solve_norm2 = |scale_diag: &[f64], l: &[f64], dim: usize, rhs: &[f64]| -> f64 {
            let mut u = vec![0.0; dim];
            for r in 0..dim {
                let mut acc = rhs[r];
                for c in 0..r {
                    acc -= scale_diag[r] * l[r * dim + c] * u[c];
                }
                u[r] = acc / (scale_diag[r] * l[r * dim + r]);
            }
            u.iter().map(|v| v * v).sum()
        };
        for i in 0..n {
            let rhs: Vec<f64> = pv.b[i].iter().zip(&pv.alpha).map(|(b, a)| b - a).collect();
            let q = tri_solve_norm2(&pv.k, &pv.l, p, &rhs);
            acc += -0.5 * (p as f64) * LN_2PI - det_kl - 0.5 * q;
        }

        // individual-variance block
        match self.spec.marker.variance_mode {
            VarianceMode::Constant => {
                if !(pv.psi > 0.0) {
                    return Err(Error::Domain("psi must be positive".into()));
                }
                for &w in &pv.log_s2 {
                    acc += normal_lpdf(w, pv.nu, pv.psi);
                }
                acc += normal_lpdf(pv.nu, pc.m, pc.xi);
                acc += half_cauchy_lpdf(pv.psi, pc.tau);
            }
            VarianceMode::TimeVarying => {
                let ps = self.data.p_s;
                crate::model::params::validate_corr_chol(&pv.l_s, ps)?;
                for &d in &pv.delta {
                    acc += normal_lpdf(d, pc.m, pc.xi);
                }
                for &k in &pv.k_s {
                    if !(k > 0.0) {
                        return Err(Error::Domain("K_s diagonal must be positive".into()));
                    }
                    acc += half_cauchy_lpdf(k, pc.tau);
                }
                acc += lkj_chol_lpdf(&pv.l_s, ps, pc.zeta);
                let mut det = 0.0;
                for r in 0..ps {
                    det += pv.k_s[r].ln() + pv.l_s[r * ps + r].ln();
                }
                for i in 0..n {
                    let rhs: Vec<f64> =
                        pv.lambda[i].iter().zip(&pv.delta).map(|(l, d)| l - d).collect();
                    let q = tri_solve_norm2(&pv.k_s, &pv.l_s, ps, &rhs);
                    acc += -0.5 * (ps as f64) * LN_2PI - det - 0.5 * q;
                }
            }
        }

        // outcome block
        if self.spec.include_outcome {
            for &b in &pv.beta {
                acc += normal_lpdf(b, 0.0, pc.beta_sd);
            }
            if !(pv.sigma > 0.0) {
                return Err(Error::Domain("sigma must be positive".into()));
            }
            acc += half_cauchy_lpdf(pv.sigma, pc.sigma_scale);
            let ad = self.layout.a_dim;
            crate::model::params::validate_corr_chol(&pv.l_a, ad)?;
            for &t in &pv.tau_a {
                if !(t > 0.0) {
                    return Err(Error::Domain("tau_a must be positive".into()));
                }
                acc += half_cauchy_lpdf(t, pc.tau_a_scale);
            }
            if ad > 1 {
                acc += lkj_chol_lpdf(&pv.l_a, ad, pc.zeta);
            }
            let mut det = 0.0;
            for r in 0..ad {
                det += pv.tau_a[r].ln() + pv.l_a[r * ad + r].ln();
            }
            for i in 0..n {
                let q = tri_solve_norm2(&pv.tau_a, &pv.l_a, ad, &pv.a[i]);
                acc += -0.5 * (ad as f64) * LN_2PI - det - 0.5 * q;
            }
        }
        Ok(acc)
    }

    /// Fused evaluation of the unconstrained joint log-density and its
    /// analytic gradient. `grad` must have length `layout.dim()`.
    pub fn eval(&self, theta: &[f64], grad: &mut [f64]) -> LogDensityParts {
        debug_assert_eq!(theta.len(), self.layout.dim());
        debug_assert_eq!(grad.len(), self.layout.dim());
        grad.iter_mut().for_each(|g| *g = 0.0);
        let lay = &self.layout;
        let pc = &self.priors;
        let p = self.data.p;
        let ps = self.data.p_s;
        let n = self.data.n_subjects();
        let nf = n as f64;
        let tv = self.spec.marker.variance_mode == VarianceMode::TimeVarying;
        let with_outcome = self.spec.include_outcome;
        let ad = lay.a_dim;

        // ---- unpack globals ----
        let alpha = &theta[lay.alpha()];
        let log_k = &theta[lay.log_k()];
        let k: Vec<f64> = log_k.iter().map(|c| c.exp()).collect();
        let (l, jac_l) = corr_chol_from_z(&theta[lay.z_l()], p);
        let mut kl = vec![0.0; p * p];
        for r in 0..p {
            for c in 0..=r {
                kl[r * p + c] = k[r] * l[r * p + c];
            }
        }
        let mut det_kl = 0.0;
        for r in 0..p {
            det_kl += log_k[r] + l[r * p + r].ln();
        }

        let (nu, q_psi, psi, psi2) = if tv {
            (0.0, 0.0, 1.0, 1.0)
        } else {
            let nu = theta[lay.nu()];
            let q = theta[lay.log_psi()];
            let psi = q.exp();
            (nu, q, psi, psi * psi)
        };
        let (delta, k_s, l_s, kl_s, jac_ls, det_kls) = if tv {
            let delta: Vec<f64> = theta[lay.delta()].to_vec();
            let log_ks = &theta[lay.log_k_s()];
            let k_s: Vec<f64> = log_ks.iter().map(|c| c.exp()).collect();
            let (l_s, jac_ls) = corr_chol_from_z(&theta[lay.z_ls()], ps);
            let mut kl_s = vec![0.0; ps * ps];
            for r in 0..ps {
                for c in 0..=r {
                    kl_s[r * ps + c] = k_s[r] * l_s[r * ps + c];
                }
            }
            let mut det = 0.0;
            for r in 0..ps {
                det += log_ks[r] + l_s[r * ps + r].ln();
            }
            (delta, k_s, l_s, kl_s, jac_ls, det)
        } else {
            (vec![], vec![], vec![], vec![], 0.0, 0.0)
        };

        let (beta, r_sig, sigma2, tau_a, l_a, dla, jac_la, det_dla) = if with_outcome {
            let beta: Vec<f64> = theta[lay.beta()].to_vec();
            let r_sig = theta[lay.log_sigma()];
            let sigma = r_sig.exp();
            let log_ta = &theta[lay.log_tau_a()];
            let tau_a: Vec<f64> = log_ta.iter().map(|c| c.exp()).collect();
            let (l_a, jac_la) = corr_chol_from_z(&theta[lay.z_la()], ad);
            let mut dla = vec![0.0; ad * ad];
            for r in 0..ad {
                for c in 0..=r {
                    dla[r * ad + c] = tau_a[r] * l_a[r * ad + c];
                }
            }
            let mut det = 0.0;
            for r in 0..ad {
                det += log_ta[r] + l_a[r * ad + r].ln();
            }
            (beta, r_sig, sigma * sigma, tau_a, l_a, dla, jac_la, det)
        } else {
            (vec![], 0.0, 1.0, vec![], vec![], vec![], 0.0, 0.0)
        };
        let b_mu = self.idx_mu.map_or(0.0, |i| beta[i]);
        let b_mut = self.idx_mu_time.map_or(0.0, |i| beta[i]);
        let b_var = self.idx_var.map_or(0.0, |i| beta[i]);
        let b_vart = self.idx_var_time.map_or(0.0, |i| beta[i]);

        // ---- accumulators ----
        let mut marker_ll = 0.0;
        let mut outcome_ll = 0.0;
        let mut prior_ld = 0.0;
        let mut g_alpha = vec![0.0; p];
        let mut g_logk_lik = vec![0.0; p];
        let mut m_l = vec![0.0; p * p]; // dV/dL from likelihood, scaled by K
        let mut g_nu = 0.0;
        let mut g_q = 0.0;
        let mut g_delta = vec![0.0; ps];
        let mut g_logks_lik = vec![0.0; ps];
        let mut m_ls = vec![0.0; ps * ps];
        let mut g_beta = vec![0.0; beta.len()];
        let mut g_r = 0.0;
        let mut g_ta_lik = vec![0.0; ad];
        let mut m_la = vec![0.0; ad * ad];

        let mut b_i = vec![0.0; p];
        let mut lam_i = vec![0.0; ps];
        let mut a_i = vec![0.0; ad];
        let mut g_vec = vec![0.0; p];
        let mut h_vec = vec![0.0; ps];
        let mut f_vec = vec![0.0; ad];

        // ---- per-subject likelihood + hierarchical priors ----
        for i in 0..n {
            let u = &theta[lay.u(i)];
            for r in 0..p {
                let mut acc = alpha[r];
                for c in 0..=r {
                    acc += kl[r * p + c] * u[c];
                }
                b_i[r] = acc;
            }
            // prior for b_i via its innovations
            let u_norm2: f64 = u.iter().map(|v| v * v).sum();
            prior_ld += -0.5 * (p as f64) * LN_2PI - det_kl - 0.5 * u_norm2;

            let s2_const = if tv {
                let e = &theta[lay.e(i)];
                for r in 0..ps {
                    let mut acc = delta[r];
                    for c in 0..=r {
                        acc += kl_s[r * ps + c] * e[c];
                    }
                    lam_i[r] = acc;
                }
                let e_norm2: f64 = e.iter().map(|v| v * v).sum();
                prior_ld += -0.5 * (ps as f64) * LN_2PI - det_kls - 0.5 * e_norm2;
                0.0
            } else {
                // w_i = nu + psi * r_i, innovations sampled standardized
                let r_w = theta[lay.w(i)];
                prior_ld += -0.5 * LN_2PI - q_psi - 0.5 * r_w * r_w;
                (nu + psi * r_w).exp()
            };

            if with_outcome {
                let v = &theta[lay.v(i)];
                for r in 0..ad {
                    let mut acc = 0.0;
                    for c in 0..=r {
                        acc += dla[r * ad + c] * v[c];
                    }
                    a_i[r] = acc;
                }
                let v_norm2: f64 = v.iter().map(|x| x * x).sum();
                prior_ld += -0.5 * (ad as f64) * LN_2PI - det_dla - 0.5 * v_norm2;
                f_vec.iter_mut().for_each(|x| *x = 0.0);
            }

            g_vec.iter_mut().for_each(|x| *x = 0.0);
            h_vec.iter_mut().for_each(|x| *x = 0.0);
            let mut w_lik = 0.0;

            let n_i = self.data.times[i].len();
            let phi_i = &self.data.phi[i];
            for j in 0..n_i {
                let t = self.data.times[i][j];
                let phi_j = &phi_i[j * p..(j + 1) * p];
                let mut mu = 0.0;
                for r in 0..p {
                    mu += b_i[r] * phi_j[r];
                }
                let (s2, phs_j): (f64, &[f64]) = if tv {
                    let phs = &self.data.phi_s[i][j * ps..(j + 1) * ps];
                    let mut ls2 = 0.0;
                    for r in 0..ps {
                        ls2 += lam_i[r] * phs[r];
                    }
                    (ls2.exp(), phs)
                } else {
                    (s2_const, &[])
                };

                let dx = self.data.x[i][j] - mu;
                marker_ll += -0.5 * LN_2PI - 0.5 * s2.ln() - 0.5 * dx * dx / s2;
                let rho = dx / s2;
                for r in 0..p {
                    g_vec[r] += rho * phi_j[r];
                }
                let vterm = -0.5 + 0.5 * dx * dx / s2;
                if tv {
                    for r in 0..ps {
                        h_vec[r] += vterm * phs_j[r];
                    }
                } else {
                    w_lik += vterm;
                }

                if with_outcome {
                    let mut eta = a_i[0];
                    if ad > 1 {
                        eta += a_i[1] * t;
                    }
                    for (kk, col) in self.term_cols.iter().enumerate() {
                        let xv = match col {
                            TermCol::Intercept => 1.0,
                            TermCol::Mu => mu,
                            TermCol::Var => s2,
                            TermCol::Time => t,
                            TermCol::MuTime => mu * t,
                            TermCol::VarTime => s2 * t,
                            TermCol::Cov(c) => self.data.w[i][*c],
                        };
                        eta += beta[kk] * xv;
                    }
                    let dy = self.data.y[i][j] - eta;
                    outcome_ll += -0.5 * LN_2PI - r_sig - 0.5 * dy * dy / sigma2;
                    let eps = dy / sigma2;
                    g_r += -1.0 + dy * dy / sigma2;
                    for (kk, col) in self.term_cols.iter().enumerate() {
                        let xv = match col {
                            TermCol::Intercept => 1.0,
                            TermCol::Mu => mu,
                            TermCol::Var => s2,
                            TermCol::Time => t,
                            TermCol::MuTime => mu * t,
                            TermCol::VarTime => s2 * t,
                            TermCol::Cov(c) => self.data.w[i][*c],
                        };
                        g_beta[kk] += eps * xv;
                    }
                    let cmu = b_mu + b_mut * t;
                    if cmu != 0.0 {
                        for r in 0..p {
                            g_vec[r] += eps * cmu * phi_j[r];
                        }
                    }
                    let cvr = (b_var + b_vart * t) * s2;
                    if tv {
                        for r in 0..ps {
                            h_vec[r] += eps * cvr * phs_j[r];
                        }
                    } else {
                        w_lik += eps * cvr;
                    }
                    f_vec[0] += eps;
                    if ad > 1 {
                        f_vec[1] += eps * t;
                    }
                }
            }

            // subject-block gradients
            {
                let g_u = &mut grad[lay.u(i)];
                for c in 0..p {
                    let mut acc = 0.0;
                    for r in c..p {
                        acc += kl[r * p + c] * g_vec[r];
                    }
                    g_u[c] = acc - u[c];
                }
            }
            for r in 0..p {
                g_alpha[r] += g_vec[r];
                g_logk_lik[r] += g_vec[r] * (b_i[r] - alpha[r]);
                let kg = k[r] * g_vec[r];
                for c in 0..=r {
                    m_l[r * p + c] += kg * u[c];
                }
            }
            if tv {
                let e = &theta[lay.e(i)];
                {
                    let g_e = &mut grad[lay.e(i)];
                    for c in 0..ps {
                        let mut acc = 0.0;
                        for r in c..ps {
                            acc += kl_s[r * ps + c] * h_vec[r];
                        }
                        g_e[c] = acc - e[c];
                    }
                }
                for r in 0..ps {
                    g_delta[r] += h_vec[r];
                    g_logks_lik[r] += h_vec[r] * (lam_i[r] - delta[r]);
                    let kh = k_s[r] * h_vec[r];
                    for c in 0..=r {
                        m_ls[r * ps + c] += kh * e[c];
                    }
                }
            } else {
                // the -n*q_psi prior normalizer and +n*q_psi jacobian term
                // cancel, leaving only the data terms in g_nu/g_q
                let r_w = theta[lay.w(i)];
                grad[lay.w(i)] = w_lik * psi - r_w;
                g_nu += w_lik;
                g_q += w_lik * psi * r_w;
            }
            if with_outcome {
                let v = &theta[lay.v(i)];
                {
                    let g_v = &mut grad[lay.v(i)];
                    for c in 0..ad {
                        let mut acc = 0.0;
                        for r in c..ad {
                            acc += dla[r * ad + c] * f_vec[r];
                        }
                        g_v[c] = acc - v[c];
                    }
                }
                for r in 0..ad {
                    g_ta_lik[r] += f_vec[r] * a_i[r];
                    let tf = tau_a[r] * f_vec[r];
                    for c in 0..=r {
                        m_la[r * ad + c] += tf * v[c];
                    }
                }
            }
        }

        // ---- global priors (value) ----
        for &a in alpha {
            prior_ld += normal_lpdf(a, 0.0, pc.xi0);
        }
        for &kv in &k {
            prior_ld += half_cauchy_lpdf(kv, pc.tau0);
        }
        prior_ld += lkj_chol_lpdf(&l, p, pc.zeta);
        if tv {
            for &d in &delta {
                prior_ld += normal_lpdf(d, pc.m, pc.xi);
            }
            for &kv in &k_s {
                prior_ld += half_cauchy_lpdf(kv, pc.tau);
            }
            prior_ld += lkj_chol_lpdf(&l_s, ps, pc.zeta);
        } else {
            prior_ld += normal_lpdf(nu, pc.m, pc.xi);
            prior_ld += half_cauchy_lpdf(psi, pc.tau);
        }
        if with_outcome {
            for &b in &beta {
                prior_ld += normal_lpdf(b, 0.0, pc.beta_sd);
            }
            prior_ld += half_cauchy_lpdf(r_sig.exp(), pc.sigma_scale);
            for &t in &tau_a {
                prior_ld += half_cauchy_lpdf(t, pc.tau_a_scale);
            }
            if ad > 1 {
                prior_ld += lkj_chol_lpdf(&l_a, ad, pc.zeta);
            }
        }

        // ---- global gradients ----
        {
            let g = &mut grad[lay.alpha()];
            for r in 0..p {
                g[r] = g_alpha[r] - alpha[r] / (pc.xi0 * pc.xi0);
            }
        }
        {
            let g = &mut grad[lay.log_k()];
            for r in 0..p {
                let k2 = k[r] * k[r];
                g[r] = g_logk_lik[r] - 2.0 * k2 / (pc.tau0 * pc.tau0 + k2) + 1.0;
            }
        }
        // L adjoint: likelihood + non-centered determinant (n per subject,
        // from -n*det_kl in the b_i priors, cancelled by +n*det_kl in the
        // jacobian -> net zero) + LKJ diagonal terms
        {
            let mut adj = m_l.clone();
            for row in 1..p {
                let expo = (p - (row + 1)) as f64 + 2.0 * pc.zeta - 2.0;
                adj[row * p + row] += expo / l[row * p + row];
            }
            corr_chol_backprop(&theta[lay.z_l()], p, &l, &adj, &mut grad[lay.z_l()]);
        }
        // log_k: the -n*det_kl prior term and +n*det_kl jacobian term cancel;
        // likelihood and half-Cauchy and exp-jacobian remain (handled above).
        if tv {
            {
                let g = &mut grad[lay.delta()];
                for r in 0..ps {
                    g[r] = g_delta[r] - (delta[r] - pc.m) / (pc.xi * pc.xi);
                }
            }
            {
                let g = &mut grad[lay.log_k_s()];
                for r in 0..ps {
                    let k2 = k_s[r] * k_s[r];
                    g[r] = g_logks_lik[r] - 2.0 * k2 / (pc.tau * pc.tau + k2) + 1.0;
                }
            }
            let mut adj = m_ls.clone();
            for row in 1..ps {
                let expo = (ps - (row + 1)) as f64 + 2.0 * pc.zeta - 2.0;
                adj[row * ps + row] += expo / l_s[row * ps + row];
            }
            corr_chol_backprop(&theta[lay.z_ls()], ps, &l_s, &adj, &mut grad[lay.z_ls()]);
        } else {
            grad[lay.nu()] = g_nu - (nu - pc.m) / (pc.xi * pc.xi);
            grad[lay.log_psi()] = g_q - 2.0 * psi2 / (pc.tau * pc.tau + psi2) + 1.0;
        }
        if with_outcome {
            {
                let g = &mut grad[lay.beta()];
                for (r, gb) in g_beta.iter().enumerate() {
                    g[r] = gb - beta[r] / (pc.beta_sd * pc.beta_sd);
                }
            }
            grad[lay.log_sigma()] =
                g_r - 2.0 * sigma2 / (pc.sigma_scale * pc.sigma_scale + sigma2) + 1.0;
            {
                let g = &mut grad[lay.log_tau_a()];
                for r in 0..ad {
                    let t2 = tau_a[r] * tau_a[r];
                    g[r] = g_ta_lik[r] - 2.0 * t2 / (pc.tau_a_scale * pc.tau_a_scale + t2) + 1.0;
                }
            }
            if ad > 1 {
                let mut adj = m_la.clone();
                for row in 1..ad {
                    let expo = (ad - (row + 1)) as f64 + 2.0 * pc.zeta - 2.0;
                    adj[row * ad + row] += expo / l_a[row * ad + row];
                }
                corr_chol_backprop(&theta[lay.z_la()], ad, &l_a, &adj, &mut grad[lay.z_la()]);
            }
        }

        // ---- jacobian bucket (value) ----
        let mut log_jac = jac_l + jac_ls + jac_la;
        log_jac += log_k.iter().sum::<f64>();
        log_jac += nf * det_kl;
        if tv {
            log_jac += theta[lay.log_k_s()].iter().sum::<f64>();
            log_jac += nf * det_kls;
        } else {
            // psi's own exp transform plus one non-centering factor per w_i
            log_jac += (nf + 1.0) * q_psi;
        }
        if with_outcome {
            log_jac += r_sig;
            log_jac += theta[lay.log_tau_a()].iter().sum::<f64>();
            log_jac += nf * det_dla;
        }

        let value = marker_ll + outcome_ll + prior_ld + log_jac;
        LogDensityParts {
            value,
            marker_loglik: marker_ll,
            outcome_loglik: outcome_ll,
            prior_logdensity: prior_ld,
            log_jacobian: log_jac,
        }
    }
}

/// Reverse pass through the correlation-Cholesky construction. `adj_l` holds
/// dV/dL for the lower triangle (likelihood + LKJ terms); the transform's
/// own log-Jacobian terms (d tanh and the sqrt scale) are added internally.
/// Writes dV/dz into `grad_z`.
fn corr_chol_backprop(z: &[f64], p: usize, l: &[f64], adj_l: &[f64], grad_z: &mut [f64]) {
    for row in 1..p {
        let z_at = row * (row - 1) / 2;
        // forward recompute of the remaining-norm sequence
        let mut rems = Vec::with_capacity(row + 1);
        let mut rem = 1.0f64;
        rems.push(rem);
        for col in 0..row {
            let val = l[row * p + col];
            rem -= val * val;
            rems.push(rem);
        }
        let l_rr = l[row * p + row];
        let mut arem = if l_rr > 0.0 { adj_l[row * p + row] * 0.5 / l_rr } else { 0.0 };
        for col in (0..row).rev() {
            let rem_c = rems[col];
            let srem = rem_c.max(0.0).sqrt();
            let r = z[z_at + col].tanh();
            let l_rc = l[row * p + col];
            let a_l = adj_l[row * p + col] + arem * (-2.0 * l_rc);
            let mut a_r = a_l * srem;
            let mut a_srem = a_l * r;
            // transform jacobian: log(1 - r^2) + log(srem)
            a_r += -2.0 * r / (1.0 - r * r);
            if srem > 0.0 {
                a_srem += 1.0 / srem;
            }
            if srem > 0.0 {
                arem += a_srem * 0.5 / srem;
            }
            grad_z[z_at + col] = a_r * (1.0 - r * r);
        }
    }
}

impl LogDensityModel for JointModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logdensity_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(theta, grad).value
    }

    fn scale_coords(&self) -> Vec<usize> {
        self.layout.scale_coords()
    }

    fn initial_point(&self) -> Option<Vec<f64>> {
        self.data_informed_init()
    }
}
