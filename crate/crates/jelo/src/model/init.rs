//! Moment-based starting point for the samplers. With near-noiseless data
//! the posterior concentrates many orders of magnitude below the generic
//! uniform(-2, 2) initialization box, so chains started there cannot reach
//! the typical set within any practical warmup. Crude per-subject and
//! stacked least-squares estimates land within a few posterior scales of
//! the mode in every coordinate.

use nalgebra::{DMatrix, DVector};

use crate::model::config::{poly_basis, TermKind, VarianceMode};
use crate::model::density::JointModel;
use crate::model::outcome_only::OutcomeOnlyModel;
use crate::model::params::ParamVector;
use crate::model::RandomEffects;

/// Mean of log chi^2_1; undoes the bias of regressing log squared
/// residuals when targeting a log-variance.
const LOG_CHI2_1_MEAN: f64 = -1.270_362_845_461_478;

fn ridge_ols(rows: &[Vec<f64>], rhs: &[f64], dim: usize, ridge: f64) -> Option<Vec<f64>> {
    let mut xtx = DMatrix::<f64>::zeros(dim, dim);
    let mut xty = DVector::<f64>::zeros(dim);
    for (row, &v) in rows.iter().zip(rhs) {
        for r in 0..dim {
            for c in 0..dim {
                xtx[(r, c)] += row[r] * row[c];
            }
            xty[r] += row[r] * v;
        }
    }
    for d in 0..dim {
        xtx[(d, d)] += ridge;
    }
    let chol = xtx.cholesky()?;
    let sol = chol.solve(&xty);
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

fn mean_sd(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn identity_chol(p: usize) -> Vec<f64> {
    let mut l = vec![0.0; p * p];
    for d in 0..p {
        l[d * p + d] = 1.0;
    }
    l
}

fn median(vals: &mut Vec<f64>) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals[vals.len() / 2]
}

impl JointModel {
    /// Deterministic data-driven starting point on the unconstrained scale.
    /// None when the least-squares pass fails; the sampler then falls back
    /// to random initialization.
    pub fn data_informed_init(&self) -> Option<Vec<f64>> {
        let n = self.data.n_subjects();
        let p = self.data.p;
        let p_s = self.data.p_s;

        // Per-subject least squares of the marker on the mean basis.
        let mut b_hat = Vec::with_capacity(n);
        let mut rss_dof = Vec::with_capacity(n);
        let mut resid: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let times = &self.data.times[i];
            let rows: Vec<Vec<f64>> = times
                .iter()
                .map(|&t| {
                    let mut row = vec![0.0; p];
                    poly_basis(t, p, &mut row);
                    row
                })
                .collect();
            let bi = ridge_ols(&rows, &self.data.x[i], p, 1e-6)?;
            let mut rss = 0.0;
            let mut ri = Vec::with_capacity(times.len());
            for (j, row) in rows.iter().enumerate() {
                let fitted: f64 = row.iter().zip(&bi).map(|(a, b)| a * b).sum();
                let r = self.data.x[i][j] - fitted;
                rss += r * r;
                ri.push(r);
            }
            b_hat.push(bi);
            let dof = times.len().saturating_sub(p);
            rss_dof.push((dof > 0).then(|| rss / dof as f64));
            resid.push(ri);
        }

        let mut alpha = vec![0.0; p];
        let mut k = vec![0.0; p];
        for d in 0..p {
            let col: Vec<f64> = b_hat.iter().map(|b| b[d]).collect();
            let (m, s) = mean_sd(&col);
            alpha[d] = m;
            k[d] = s.max(1e-3);
        }

        // Subjects the mean basis interpolates exactly carry no variance
        // information; give them the cohort-typical value.
        let mut informative: Vec<f64> =
            rss_dof.iter().flatten().map(|s2| s2.max(1e-10)).collect();
        let typical_s2 = if informative.is_empty() { 1e-2 } else { median(&mut informative) };
        let s2_hat: Vec<f64> = rss_dof
            .iter()
            .map(|sd| sd.map_or(typical_s2, |s2| s2.max(1e-10)))
            .collect();

        let mut pv = ParamVector {
            b: b_hat.clone(),
            log_s2: vec![],
            lambda: vec![],
            a: vec![vec![]; n],
            alpha,
            k,
            l: identity_chol(p),
            nu: 0.0,
            psi: 1.0,
            delta: vec![],
            k_s: vec![],
            l_s: vec![],
            beta: vec![],
            sigma: 1.0,
            tau_a: vec![],
            l_a: vec![],
        };

        match self.spec.marker.variance_mode {
            VarianceMode::Constant => {
                let log_s2: Vec<f64> = s2_hat.iter().map(|s2| s2.ln()).collect();
                let (nu, psi) = mean_sd(&log_s2);
                pv.nu = nu;
                pv.psi = psi.max(0.05);
                pv.log_s2 = log_s2;
            }
            VarianceMode::TimeVarying => {
                // Per-subject regression of log squared residuals on the
                // variance basis where there are enough visits, otherwise a
                // flat profile at the subject's pooled level.
                let mut lambda = Vec::with_capacity(n);
                for i in 0..n {
                    let times = &self.data.times[i];
                    let flat = vec![s2_hat[i].ln(), 0.0]
                        .into_iter()
                        .chain(std::iter::repeat(0.0))
                        .take(p_s)
                        .collect::<Vec<f64>>();
                    if times.len() < p_s + 2 || rss_dof[i].is_none() {
                        lambda.push(flat);
                        continue;
                    }
                    let rows: Vec<Vec<f64>> = times
                        .iter()
                        .map(|&t| {
                            let mut row = vec![0.0; p_s];
                            poly_basis(t, p_s, &mut row);
                            row
                        })
                        .collect();
                    let lr: Vec<f64> = resid[i]
                        .iter()
                        .map(|r| (r * r).max(1e-12).ln() - LOG_CHI2_1_MEAN)
                        .collect();
                    match ridge_ols(&rows, &lr, p_s, 1e-6) {
                        Some(li) => lambda.push(li),
                        None => lambda.push(flat),
                    }
                }
                let mut delta = vec![0.0; p_s];
                let mut k_s = vec![0.0; p_s];
                for d in 0..p_s {
                    let col: Vec<f64> = lambda.iter().map(|l| l[d]).collect();
                    let (m, s) = mean_sd(&col);
                    delta[d] = m;
                    k_s[d] = s.max(0.05);
                }
                pv.delta = delta;
                pv.k_s = k_s;
                pv.l_s = identity_chol(p_s);
                pv.lambda = lambda;
            }
        }

        if self.layout.include_outcome {
            let t_dim = self.layout.n_terms;
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            let mut row_subject = Vec::new();
            for i in 0..n {
                for (j, &t) in self.data.times[i].iter().enumerate() {
                    let mut phi = vec![0.0; p];
                    poly_basis(t, p, &mut phi);
                    let mu: f64 = phi.iter().zip(&b_hat[i]).map(|(a, b)| a * b).sum();
                    let s2 = match self.spec.marker.variance_mode {
                        VarianceMode::Constant => s2_hat[i],
                        VarianceMode::TimeVarying => {
                            let mut phs = vec![0.0; p_s];
                            poly_basis(t, p_s, &mut phs);
                            phs.iter()
                                .zip(&pv.lambda[i])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                .exp()
                        }
                    };
                    let mut row = Vec::with_capacity(t_dim);
                    for term in &self.spec.outcome.terms {
                        row.push(match term {
                            TermKind::Intercept => 1.0,
                            TermKind::Mu => mu,
                            TermKind::Var => s2,
                            TermKind::Time => t,
                            TermKind::MuTime => mu * t,
                            TermKind::VarTime => s2 * t,
                            TermKind::Covariate(name) => {
                                let c = self
                                    .spec
                                    .covariate_names()
                                    .iter()
                                    .position(|w| w == name)?;
                                self.data.w[i][c]
                            }
                        });
                    }
                    rows.push(row);
                    ys.push(self.data.y[i][j]);
                    row_subject.push(i);
                }
            }
            let beta = ridge_ols(&rows, &ys, t_dim, 1e-8)?;
            let d: Vec<f64> = rows
                .iter()
                .zip(&ys)
                .map(|(row, y)| y - row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>())
                .collect();

            let a_dim = self.layout.a_dim;
            let mut a = vec![vec![0.0; a_dim]; n];
            match self.layout.random_effects {
                RandomEffects::Intercept => {
                    let mut sums = vec![0.0; n];
                    let mut counts = vec![0usize; n];
                    for (&i, &dv) in row_subject.iter().zip(&d) {
                        sums[i] += dv;
                        counts[i] += 1;
                    }
                    for i in 0..n {
                        a[i][0] = sums[i] / counts[i].max(1) as f64;
                    }
                }
                RandomEffects::InterceptSlope => {
                    let mut at = 0usize;
                    for i in 0..n {
                        let n_i = self.data.times[i].len();
                        let rows2: Vec<Vec<f64>> = self.data.times[i]
                            .iter()
                            .map(|&t| vec![1.0, t])
                            .collect();
                        let di = &d[at..at + n_i];
                        if let Some(ai) = ridge_ols(&rows2, di, 2, 1e-4) {
                            a[i] = ai;
                        }
                        at += n_i;
                    }
                }
            }
            let mut tau_a = vec![0.0; a_dim];
            for r in 0..a_dim {
                let col: Vec<f64> = a.iter().map(|ai| ai[r]).collect();
                let (_, s) = mean_sd(&col);
                tau_a[r] = s.max(1e-3);
            }
            let mut sse = 0.0;
            let mut at = 0usize;
            for i in 0..n {
                for &t in &self.data.times[i] {
                    let mut fitted = a[i][0];
                    if a_dim > 1 {
                        fitted += a[i][1] * t;
                    }
                    let r = d[at] - fitted;
                    sse += r * r;
                    at += 1;
                }
            }
            let sigma2 = (sse / d.len().max(1) as f64).max(1e-10);

            pv.beta = beta;
            pv.sigma = sigma2.sqrt();
            pv.tau_a = tau_a;
            pv.l_a = identity_chol(a_dim);
            pv.a = a;

            // The outcome likelihood is far more informative about the
            // latents than the marker alone, so the least-squares point can
            // sit thousands of posterior scales from the mode. Block ascent
            // in constrained space walks it in before unconstraining.
            self.refine_constrained(&mut pv, 12);
        }

        self.layout.unconstrain(&pv).ok()
    }

    /// One-column basis evaluations for a visit.
    fn bases(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut phi = vec![0.0; self.data.p];
        poly_basis(t, self.data.p, &mut phi);
        let mut phi_s = vec![0.0; self.data.p_s];
        poly_basis(t, self.data.p_s, &mut phi_s);
        (phi, phi_s)
    }

    fn s2_of(&self, pv: &ParamVector, i: usize, phi_s: &[f64]) -> f64 {
        match self.spec.marker.variance_mode {
            VarianceMode::Constant => pv.log_s2[i].exp(),
            VarianceMode::TimeVarying => phi_s
                .iter()
                .zip(&pv.lambda[i])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .clamp(-60.0, 60.0)
                .exp(),
        }
    }

    /// Block-coordinate ascent on the joint posterior in constrained space:
    /// closed-form subject-level and regression updates, small Newton steps
    /// for the log-variance blocks, moment updates for the hyperparameters.
    fn refine_constrained(&self, pv: &mut ParamVector, passes: usize) {
        let n = self.data.n_subjects();
        let p = self.data.p;
        let p_s = self.data.p_s;
        let a_dim = self.layout.a_dim;
        let terms = &self.spec.outcome.terms;
        let t_dim = terms.len();
        let cov_names = self.spec.covariate_names();
        let cov_index = |name: &str| cov_names.iter().position(|w| *w == name).unwrap_or(0);

        // coefficient of mu and of s2 in the linear predictor at time t
        let mu_coef = |beta: &[f64], t: f64| -> f64 {
            let mut c = 0.0;
            for (k, term) in terms.iter().enumerate() {
                match term {
                    TermKind::Mu => c += beta[k],
                    TermKind::MuTime => c += beta[k] * t,
                    _ => {}
                }
            }
            c
        };
        let var_coef = |beta: &[f64], t: f64| -> f64 {
            let mut c = 0.0;
            for (k, term) in terms.iter().enumerate() {
                match term {
                    TermKind::Var => c += beta[k],
                    TermKind::VarTime => c += beta[k] * t,
                    _ => {}
                }
            }
            c
        };
        let design_row = |i: usize, t: f64, mu: f64, s2: f64| -> Vec<f64> {
            terms
                .iter()
                .map(|term| match term {
                    TermKind::Intercept => 1.0,
                    TermKind::Mu => mu,
                    TermKind::Var => s2,
                    TermKind::Time => t,
                    TermKind::MuTime => mu * t,
                    TermKind::VarTime => s2 * t,
                    TermKind::Covariate(name) => self.data.w[i][cov_index(name)],
                })
                .collect()
        };
        let a_at = |pv: &ParamVector, i: usize, t: f64| -> f64 {
            let mut v = pv.a[i][0];
            if a_dim > 1 {
                v += pv.a[i][1] * t;
            }
            v
        };

        for _ in 0..passes {
            // regression coefficients and residual scale
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for i in 0..n {
                for (j, &t) in self.data.times[i].iter().enumerate() {
                    let (phi, phi_s) = self.bases(t);
                    let mu: f64 = phi.iter().zip(&pv.b[i]).map(|(a, b)| a * b).sum();
                    let s2 = self.s2_of(pv, i, &phi_s);
                    rows.push(design_row(i, t, mu, s2));
                    ys.push(self.data.y[i][j] - a_at(pv, i, t));
                }
            }
            if let Some(beta) = ridge_ols(&rows, &ys, t_dim, 1e-9) {
                let sse: f64 = rows
                    .iter()
                    .zip(&ys)
                    .map(|(r, y)| {
                        let f: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
                        (y - f) * (y - f)
                    })
                    .sum();
                pv.beta = beta;
                pv.sigma = (sse / rows.len().max(1) as f64).max(1e-12).sqrt();
            }
            let sigma2 = (pv.sigma * pv.sigma).max(1e-12);

            // random effects given everything else: per-subject ridge
            for i in 0..n {
                let mut prec = DMatrix::<f64>::zeros(a_dim, a_dim);
                for r in 0..a_dim {
                    prec[(r, r)] = 1.0 / (pv.tau_a[r] * pv.tau_a[r]).max(1e-12);
                }
                let mut rhs = DVector::<f64>::zeros(a_dim);
                for (j, &t) in self.data.times[i].iter().enumerate() {
                    let (phi, phi_s) = self.bases(t);
                    let mu: f64 = phi.iter().zip(&pv.b[i]).map(|(a, b)| a * b).sum();
                    let s2 = self.s2_of(pv, i, &phi_s);
                    let row = design_row(i, t, mu, s2);
                    let eta0: f64 = row.iter().zip(&pv.beta).map(|(a, b)| a * b).sum();
                    let e = self.data.y[i][j] - eta0;
                    let z = if a_dim > 1 { vec![1.0, t] } else { vec![1.0] };
                    for r in 0..a_dim {
                        rhs[r] += z[r] * e / sigma2;
                        for c in 0..a_dim {
                            prec[(r, c)] += z[r] * z[c] / sigma2;
                        }
                    }
                }
                if let Some(chol) = prec.clone().cholesky() {
                    let sol = chol.solve(&rhs);
                    if sol.iter().all(|v| v.is_finite()) {
                        pv.a[i] = sol.iter().copied().collect();
                    }
                }
            }

            // subject slopes given variances and regression: weighted ridge
            // combining marker rows, outcome rows, and the N(alpha, Sigma)
            // prior
            let sigma_b = {
                let mut m = DMatrix::<f64>::zeros(p, p);
                for r in 0..p {
                    for c in 0..p {
                        let mut acc = 0.0;
                        for k in 0..p {
                            acc += pv.l[r * p + k] * pv.l[c * p + k];
                        }
                        m[(r, c)] = pv.k[r] * acc * pv.k[c];
                    }
                }
                m
            };
            let prior_prec = sigma_b
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .unwrap_or_else(|| DMatrix::identity(p, p));
            let alpha_v = DVector::from_iterator(p, pv.alpha.iter().copied());
            for i in 0..n {
                let mut prec = prior_prec.clone();
                let mut rhs = &prior_prec * &alpha_v;
                for (j, &t) in self.data.times[i].iter().enumerate() {
                    let (phi, phi_s) = self.bases(t);
                    let s2 = self.s2_of(pv, i, &phi_s).max(1e-12);
                    let w = mu_coef(&pv.beta, t);
                    // d_j: outcome with every non-mu contribution removed
                    let vc = var_coef(&pv.beta, t);
                    let mut eta_nomu = a_at(pv, i, t) + vc * s2;
                    for (k, term) in terms.iter().enumerate() {
                        match term {
                            TermKind::Intercept => eta_nomu += pv.beta[k],
                            TermKind::Time => eta_nomu += pv.beta[k] * t,
                            TermKind::Covariate(name) => {
                                eta_nomu += pv.beta[k] * self.data.w[i][cov_index(name)]
                            }
                            _ => {}
                        }
                    }
                    let d = self.data.y[i][j] - eta_nomu;
                    let x = self.data.x[i][j];
                    for r in 0..p {
                        rhs[r] += phi[r] * x / s2 + w * phi[r] * d / sigma2;
                        for c in 0..p {
                            prec[(r, c)] +=
                                phi[r] * phi[c] / s2 + w * w * phi[r] * phi[c] / sigma2;
                        }
                    }
                }
                if let Some(chol) = prec.cholesky() {
                    let sol = chol.solve(&rhs);
                    if sol.iter().all(|v| v.is_finite()) {
                        pv.b[i] = sol.iter().copied().collect();
                    }
                }
            }

            // log-variance blocks: small safeguarded Newton per subject
            match self.spec.marker.variance_mode {
                VarianceMode::Constant => {
                    let psi2 = (pv.psi * pv.psi).max(1e-12);
                    for i in 0..n {
                        let mut ell = pv.log_s2[i];
                        let mut rr = 0.0;
                        let mut cd = Vec::new();
                        for (j, &t) in self.data.times[i].iter().enumerate() {
                            let (phi, _) = self.bases(t);
                            let mu: f64 =
                                phi.iter().zip(&pv.b[i]).map(|(a, b)| a * b).sum();
                            let r = self.data.x[i][j] - mu;
                            rr += r * r;
                            let c1 = var_coef(&pv.beta, t);
                            let mut eta_novar = a_at(pv, i, t) + mu_coef(&pv.beta, t) * mu;
                            for (k, term) in terms.iter().enumerate() {
                                match term {
                                    TermKind::Intercept => eta_novar += pv.beta[k],
                                    TermKind::Time => eta_novar += pv.beta[k] * t,
                                    TermKind::Covariate(name) => {
                                        eta_novar +=
                                            pv.beta[k] * self.data.w[i][cov_index(name)]
                                    }
                                    _ => {}
                                }
                            }
                            cd.push((c1, self.data.y[i][j] - eta_novar));
                        }
                        let n_i = self.data.times[i].len() as f64;
                        let f = |ell: f64| -> (f64, f64, f64) {
                            let s2 = ell.clamp(-60.0, 60.0).exp();
                            let mut val = -0.5 * n_i * ell - 0.5 * rr / s2
                                - 0.5 * (ell - pv.nu) * (ell - pv.nu) / psi2;
                            let mut g = -0.5 * n_i + 0.5 * rr / s2 - (ell - pv.nu) / psi2;
                            let mut h = -0.5 * rr / s2 - 1.0 / psi2;
                            for &(c1, d) in &cd {
                                val -= 0.5 * (d - c1 * s2) * (d - c1 * s2) / sigma2;
                                g += c1 * s2 * (d - c1 * s2) / sigma2;
                                h += (c1 * s2 * d - 2.0 * c1 * c1 * s2 * s2) / sigma2;
                            }
                            (val, g, h)
                        };
                        for _ in 0..12 {
                            let (val, g, h) = f(ell);
                            let mut step = if h < -1e-12 { -g / h } else { g.signum() * 0.2 };
                            step = step.clamp(-1.0, 1.0);
                            if step.abs() < 1e-10 {
                                break;
                            }
                            let mut s = 1.0;
                            let mut moved = false;
                            for _ in 0..10 {
                                let cand = ell + s * step;
                                if f(cand).0 > val {
                                    ell = cand;
                                    moved = true;
                                    break;
                                }
                                s *= 0.5;
                            }
                            if !moved {
                                break;
                            }
                        }
                        pv.log_s2[i] = ell;
                    }
                }
                VarianceMode::TimeVarying => {
                    let omega = {
                        let mut m = DMatrix::<f64>::zeros(p_s, p_s);
                        for r in 0..p_s {
                            for c in 0..p_s {
                                let mut acc = 0.0;
                                for k in 0..p_s {
                                    acc += pv.l_s[r * p_s + k] * pv.l_s[c * p_s + k];
                                }
                                m[(r, c)] = pv.k_s[r] * acc * pv.k_s[c];
                            }
                        }
                        m.cholesky()
                            .map(|c| c.inverse())
                            .unwrap_or_else(|| DMatrix::identity(p_s, p_s))
                    };
                    let delta_v = DVector::from_iterator(p_s, pv.delta.iter().copied());
                    for i in 0..n {
                        let mut lam = DVector::from_iterator(p_s, pv.lambda[i].iter().copied());
                        // cached per-visit pieces independent of lambda
                        let mut visits = Vec::new();
                        for (j, &t) in self.data.times[i].iter().enumerate() {
                            let (phi, phi_s) = self.bases(t);
                            let mu: f64 =
                                phi.iter().zip(&pv.b[i]).map(|(a, b)| a * b).sum();
                            let r = self.data.x[i][j] - mu;
                            let c1 = var_coef(&pv.beta, t);
                            let mut eta_novar = a_at(pv, i, t) + mu_coef(&pv.beta, t) * mu;
                            for (k, term) in terms.iter().enumerate() {
                                match term {
                                    TermKind::Intercept => eta_novar += pv.beta[k],
                                    TermKind::Time => eta_novar += pv.beta[k] * t,
                                    TermKind::Covariate(name) => {
                                        eta_novar +=
                                            pv.beta[k] * self.data.w[i][cov_index(name)]
                                    }
                                    _ => {}
                                }
                            }
                            visits.push((phi_s, r * r, c1, self.data.y[i][j] - eta_novar));
                        }
                        let eval = |lam: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
                            let mut val = 0.0;
                            let mut g = DVector::<f64>::zeros(p_s);
                            let mut h = DMatrix::<f64>::zeros(p_s, p_s);
                            for (phi_s, rr, c1, d) in &visits {
                                let ell: f64 = phi_s
                                    .iter()
                                    .zip(lam.iter())
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>()
                                    .clamp(-60.0, 60.0);
                                let s2 = ell.exp();
                                val += -0.5 * ell - 0.5 * rr / s2
                                    - 0.5 * (d - c1 * s2) * (d - c1 * s2) / sigma2;
                                let gc = -0.5 + 0.5 * rr / s2
                                    + c1 * s2 * (d - c1 * s2) / sigma2;
                                let hc = -0.5 * rr / s2
                                    + (c1 * s2 * d - 2.0 * c1 * c1 * s2 * s2) / sigma2;
                                for r in 0..p_s {
                                    g[r] += gc * phi_s[r];
                                    for c in 0..p_s {
                                        h[(r, c)] += hc * phi_s[r] * phi_s[c];
                                    }
                                }
                            }
                            let diff = lam - &delta_v;
                            val -= 0.5 * (&omega * &diff).dot(&diff);
                            g -= &omega * &diff;
                            h -= &omega;
                            (val, g, h)
                        };
                        for _ in 0..12 {
                            let (val, g, h) = eval(&lam);
                            let neg_h = -h;
                            let step = match neg_h.cholesky() {
                                Some(chol) => chol.solve(&g),
                                None => &g * 0.05,
                            };
                            let norm = step.norm();
                            let step = if norm > 1.0 { step / norm } else { step };
                            if step.norm() < 1e-10 {
                                break;
                            }
                            let mut s = 1.0;
                            let mut moved = false;
                            for _ in 0..10 {
                                let cand = &lam + &step * s;
                                if eval(&cand).0 > val {
                                    lam = cand;
                                    moved = true;
                                    break;
                                }
                                s *= 0.5;
                            }
                            if !moved {
                                break;
                            }
                        }
                        if lam.iter().all(|v| v.is_finite()) {
                            pv.lambda[i] = lam.iter().copied().collect();
                        }
                    }
                }
            }

            // hyperparameters from the refreshed latents
            self.moment_hypers(pv);
        }
    }

    /// Sets the population-level parameters to moment estimates of the
    /// current latents: means, scales (floored), and sample correlation
    /// Cholesky factors.
    fn moment_hypers(&self, pv: &mut ParamVector) {
        let n = self.data.n_subjects();
        let p = self.data.p;
        let p_s = self.data.p_s;
        let a_dim = self.layout.a_dim;

        let corr_chol_of = |cols: &[Vec<f64>]| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let dim = cols.len();
            let mut mean = vec![0.0; dim];
            for (d, col) in cols.iter().enumerate() {
                mean[d] = col.iter().sum::<f64>() / col.len() as f64;
            }
            let mut cov = DMatrix::<f64>::zeros(dim, dim);
            let denom = (cols[0].len() as f64 - 1.0).max(1.0);
            for r in 0..dim {
                for c in 0..dim {
                    let acc: f64 = cols[r]
                        .iter()
                        .zip(&cols[c])
                        .map(|(a, b)| (a - mean[r]) * (b - mean[c]))
                        .sum();
                    cov[(r, c)] = acc / denom;
                }
            }
            let sd: Vec<f64> = (0..dim).map(|d| cov[(d, d)].max(1e-8).sqrt()).collect();
            let mut corr = DMatrix::<f64>::identity(dim, dim);
            for r in 0..dim {
                for c in 0..dim {
                    let v = cov[(r, c)] / (sd[r] * sd[c]);
                    // shrink slightly toward identity so the factor stays PD
                    corr[(r, c)] = if r == c { 1.0 } else { v.clamp(-0.98, 0.98) * 0.999 };
                }
            }
            let chol = corr.cholesky()?;
            let l = chol.l();
            let mut l_flat = vec![0.0; dim * dim];
            for r in 0..dim {
                for c in 0..=r {
                    l_flat[r * dim + c] = l[(r, c)];
                }
            }
            Some((mean, sd, l_flat))
        };

        let b_cols: Vec<Vec<f64>> =
            (0..p).map(|d| (0..n).map(|i| pv.b[i][d]).collect()).collect();
        if let Some((mean, sd, l)) = corr_chol_of(&b_cols) {
            pv.alpha = mean;
            pv.k = sd.iter().map(|s| s.max(1e-3)).collect();
            pv.l = l;
        }

        match self.spec.marker.variance_mode {
            VarianceMode::Constant => {
                let (nu, psi) = mean_sd(&pv.log_s2);
                pv.nu = nu;
                pv.psi = psi.max(0.05);
            }
            VarianceMode::TimeVarying => {
                let lam_cols: Vec<Vec<f64>> = (0..p_s)
                    .map(|d| (0..n).map(|i| pv.lambda[i][d]).collect())
                    .collect();
                if let Some((mean, sd, l)) = corr_chol_of(&lam_cols) {
                    pv.delta = mean;
                    pv.k_s = sd.iter().map(|s| s.max(0.02)).collect();
                    pv.l_s = l;
                }
            }
        }

        if self.layout.include_outcome {
            let a_cols: Vec<Vec<f64>> =
                (0..a_dim).map(|d| (0..n).map(|i| pv.a[i][d]).collect()).collect();
            if a_dim > 1 {
                if let Some((_, sd, l)) = corr_chol_of(&a_cols) {
                    pv.tau_a = sd.iter().map(|s| s.max(1e-3)).collect();
                    pv.l_a = l;
                }
            } else {
                let (_, sd) = mean_sd(&a_cols[0]);
                pv.tau_a = vec![sd.max(1e-3)];
            }
        }
    }
}

impl OutcomeOnlyModel {
    /// Stacked least-squares starting point; same rationale as the joint
    /// model's.
    pub fn data_informed_init(&self) -> Option<Vec<f64>> {
        let n = self.n_subjects();
        let t_dim = self.t_dim;
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut row_subject = Vec::new();
        for i in 0..n {
            let n_i = self.y[i].len();
            for j in 0..n_i {
                rows.push(self.x[i][j * t_dim..(j + 1) * t_dim].to_vec());
                ys.push(self.y[i][j]);
                row_subject.push(i);
            }
        }
        let beta = ridge_ols(&rows, &ys, t_dim, 1e-8)?;
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        let d: Vec<f64> = rows
            .iter()
            .zip(&ys)
            .map(|(row, y)| y - row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        for (&i, &dv) in row_subject.iter().zip(&d) {
            sums[i] += dv;
            counts[i] += 1;
        }
        let a_hat: Vec<f64> = (0..n).map(|i| sums[i] / counts[i].max(1) as f64).collect();
        let (_, tau) = mean_sd(&a_hat);
        let tau_a = tau.max(1e-3);
        let mut sse = 0.0;
        for (&i, &dv) in row_subject.iter().zip(&d) {
            sse += (dv - a_hat[i]) * (dv - a_hat[i]);
        }
        let sigma = (sse / d.len().max(1) as f64).max(1e-10).sqrt();

        let mut theta = vec![0.0; self.log_tau_a_at() + 1];
        for i in 0..n {
            theta[i] = a_hat[i] / tau_a;
        }
        theta[self.beta_at()..self.beta_at() + t_dim].copy_from_slice(&beta);
        theta[self.log_sigma_at()] = sigma.ln();
        theta[self.log_tau_a_at()] = tau_a.ln();
        theta.iter().all(|v| v.is_finite()).then_some(theta)
    }
}
