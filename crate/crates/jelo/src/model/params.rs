//! Parameter layout and constrained <-> unconstrained transforms.
//!
//! Unconstrained layout: per-subject blocks in subject-key order, then
//! globals. Subject block: u_i (P), then the w_i innovation (constant
//! mode, log s_i^2 = nu + psi * r) or e_i (P_S, time-varying mode), then
//! v_i (random-effect innovations). Globals:
//! alpha (P), log_k (P), z_L (P(P-1)/2), then {nu, log_psi} or
//! {delta (P_S), log_k_s (P_S), z_Ls}, then beta, log_sigma, and the
//! random-effect scale block when the outcome is included.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::config::{ModelSpec, RandomEffects, VarianceMode};

/// Number of free coordinates of a P x P correlation Cholesky factor.
pub fn corr_free(p: usize) -> usize {
    p.saturating_sub(1) * p / 2
}

/// Builds a correlation Cholesky factor (row-major lower-triangular, ones on
/// the implied row norms) from tanh-mapped canonical partial correlations.
/// Returns the factor and the log-Jacobian of z -> strict lower triangle.
pub fn corr_chol_from_z(z: &[f64], p: usize) -> (Vec<f64>, f64) {
    debug_assert_eq!(z.len(), corr_free(p));
    let mut l = vec![0.0; p * p];
    let mut log_jac = 0.0;
    let mut zi = 0;
    for row in 0..p {
        let mut rem = 1.0f64;
        for col in 0..row {
            let r = z[zi].tanh();
            zi += 1;
            let srem = rem.max(0.0).sqrt();
            let val = r * srem;
            l[row * p + col] = val;
            // d tanh + d(scale by sqrt of remaining norm)
            log_jac += (1.0 - r * r).ln() + srem.ln();
            rem -= val * val;
        }
        l[row * p + row] = rem.max(0.0).sqrt();
    }
    (l, log_jac)
}

/// Inverse of `corr_chol_from_z` on the strict lower triangle.
pub fn z_from_corr_chol(l: &[f64], p: usize) -> Result<Vec<f64>> {
    let mut z = Vec::with_capacity(corr_free(p));
    for row in 1..p {
        let mut rem = 1.0f64;
        for col in 0..row {
            if rem <= 0.0 {
                return Err(Error::Domain("invalid correlation Cholesky factor".into()));
            }
            let r = l[row * p + col] / rem.sqrt();
            if !(-1.0..=1.0).contains(&r) {
                return Err(Error::Domain(format!(
                    "correlation Cholesky row {row} has partial correlation {r} outside [-1,1]"
                )));
            }
            z.push(r.atanh());
            rem -= l[row * p + col] * l[row * p + col];
        }
    }
    Ok(z)
}

/// Checks lower-triangularity, positive diagonal, and unit row norms.
pub fn validate_corr_chol(l: &[f64], p: usize) -> Result<()> {
    for row in 0..p {
        let mut norm2 = 0.0;
        for col in 0..p {
            let v = l[row * p + col];
            if col > row && v != 0.0 {
                return Err(Error::Domain("correlation Cholesky not lower-triangular".into()));
            }
            norm2 += v * v;
        }
        if l[row * p + row] <= 0.0 {
            return Err(Error::Domain("correlation Cholesky diagonal must be positive".into()));
        }
        if (norm2 - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!(
                "correlation Cholesky row {row} has norm^2 {norm2}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Constrained-space parameters. Vectors are row-major where matrix-shaped.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub b: Vec<Vec<f64>>,
    /// Constant mode: log s_i^2 per subject. Empty in time-varying mode.
    pub log_s2: Vec<f64>,
    /// Time-varying mode: lambda_i per subject. Empty in constant mode.
    pub lambda: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
    pub nu: f64,
    pub psi: f64,
    pub delta: Vec<f64>,
    pub k_s: Vec<f64>,
    pub l_s: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: f64,
    /// Random-effect sd(s): one entry (intercept) or two (intercept+slope).
    pub tau_a: Vec<f64>,
    pub l_a: Vec<f64>,
}

/// Coordinate bookkeeping for one (ModelSpec, dataset) pair.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub n_subjects: usize,
    pub subject_ids: Vec<String>,
    pub p: usize,
    pub p_s: usize,
    pub a_dim: usize,
    pub n_terms: usize,
    pub term_names: Vec<String>,
    pub variance_mode: VarianceMode,
    pub random_effects: RandomEffects,
    pub include_outcome: bool,
    subject_block: usize,
    globals_at: usize,
    dim: usize,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec, subject_ids: Vec<String>) -> Result<Self> {
        spec.validate()?;
        let p = spec.marker.p();
        let p_s = spec.marker.p_s();
        let (a_dim, n_terms) = if spec.include_outcome {
            (spec.outcome.random_effects.dim(), spec.outcome.n_terms())
        } else {
            (0, 0)
        };
        let var_block = match spec.marker.variance_mode {
            VarianceMode::Constant => 1,
            VarianceMode::TimeVarying => p_s,
        };
        let subject_block = p + var_block + a_dim;
        let n_subjects = subject_ids.len();
        let globals_at = n_subjects * subject_block;
        let var_globals = match spec.marker.variance_mode {
            VarianceMode::Constant => 2,
            VarianceMode::TimeVarying => 2 * p_s + corr_free(p_s),
        };
        let re_globals = if spec.include_outcome {
            match spec.outcome.random_effects {
                RandomEffects::Intercept => 1,
                RandomEffects::InterceptSlope => 2 + 1,
            }
        } else {
            0
        };
        let outcome_globals = if spec.include_outcome { n_terms + 1 + re_globals } else { 0 };
        let dim = globals_at + p + p + corr_free(p) + var_globals + outcome_globals;
        let term_names = spec.outcome.terms.iter().map(|t| t.name()).collect();
        Ok(ParamLayout {
            n_subjects,
            subject_ids,
            p,
            p_s,
            a_dim,
            n_terms,
            term_names,
            variance_mode: spec.marker.variance_mode,
            random_effects: spec.outcome.random_effects,
            include_outcome: spec.include_outcome,
            subject_block,
            globals_at,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subject_block_len(&self) -> usize {
        self.subject_block
    }

    pub fn u(&self, i: usize) -> Range<usize> {
        let at = i * self.subject_block;
        at..at + self.p
    }

    /// Constant mode only: the standardized innovation behind log s_i^2.
    pub fn w(&self, i: usize) -> usize {
        debug_assert_eq!(self.variance_mode, VarianceMode::Constant);
        i * self.subject_block + self.p
    }

    /// Time-varying mode only: the e_i innovation block.
    pub fn e(&self, i: usize) -> Range<usize> {
        debug_assert_eq!(self.variance_mode, VarianceMode::TimeVarying);
        let at = i * self.subject_block + self.p;
        at..at + self.p_s
    }

    pub fn v(&self, i: usize) -> Range<usize> {
        let at = (i + 1) * self.subject_block - self.a_dim;
        at..at + self.a_dim
    }

    pub fn alpha(&self) -> Range<usize> {
        self.globals_at..self.globals_at + self.p
    }

    pub fn log_k(&self) -> Range<usize> {
        let at = self.globals_at + self.p;
        at..at + self.p
    }

    pub fn z_l(&self) -> Range<usize> {
        let at = self.globals_at + 2 * self.p;
        at..at + corr_free(self.p)
    }

    fn var_globals_at(&self) -> usize {
        self.globals_at + 2 * self.p + corr_free(self.p)
    }

    pub fn nu(&self) -> usize {
        debug_assert_eq!(self.variance_mode, VarianceMode::Constant);
        self.var_globals_at()
    }

    pub fn log_psi(&self) -> usize {
        debug_assert_eq!(self.variance_mode, VarianceMode::Constant);
        self.var_globals_at() + 1
    }

    pub fn delta(&self) -> Range<usize> {
        debug_assert_eq!(self.variance_mode, VarianceMode::TimeVarying);
        let at = self.var_globals_at();
        at..at + self.p_s
    }

    pub fn log_k_s(&self) -> Range<usize> {
        let at = self.var_globals_at() + self.p_s;
        at..at + self.p_s
    }

    pub fn z_ls(&self) -> Range<usize> {
        let at = self.var_globals_at() + 2 * self.p_s;
        at..at + corr_free(self.p_s)
    }

    fn outcome_at(&self) -> usize {
        self.var_globals_at()
            + match self.variance_mode {
                VarianceMode::Constant => 2,
                VarianceMode::TimeVarying => 2 * self.p_s + corr_free(self.p_s),
            }
    }

    pub fn beta(&self) -> Range<usize> {
        let at = self.outcome_at();
        at..at + self.n_terms
    }

    pub fn log_sigma(&self) -> usize {
        self.outcome_at() + self.n_terms
    }

    pub fn log_tau_a(&self) -> Range<usize> {
        let at = self.log_sigma() + 1;
        at..at + self.a_dim
    }

    pub fn z_la(&self) -> Range<usize> {
        let at = self.log_sigma() + 1 + self.a_dim;
        at..at + corr_free(self.a_dim)
    }

    /// Coordinates holding hierarchy scales (log of positive scalars); the
    /// sampler initializes them at 0.
    pub fn scale_coords(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.log_k().collect();
        match self.variance_mode {
            VarianceMode::Constant => out.push(self.log_psi()),
            VarianceMode::TimeVarying => out.extend(self.log_k_s()),
        }
        if self.include_outcome {
            out.push(self.log_sigma());
            out.extend(self.log_tau_a());
        }
        out
    }

    /// Reconstructs constrained parameters from an unconstrained point.
    pub fn constrain(&self, theta: &[f64]) -> ParamVector {
        assert_eq!(theta.len(), self.dim);
        let p = self.p;
        let alpha: Vec<f64> = theta[self.alpha()].to_vec();
        let k: Vec<f64> = theta[self.log_k()].iter().map(|c| c.exp()).collect();
        let (l, _) = corr_chol_from_z(&theta[self.z_l()], p);
        // A = K L, row-major lower-triangular
        let mut kl = vec![0.0; p * p];
        for r in 0..p {
            for c in 0..=r {
                kl[r * p + c] = k[r] * l[r * p + c];
            }
        }

        let (nu, psi, delta, k_s, l_s, kl_s) = match self.variance_mode {
            VarianceMode::Constant => {
                (theta[self.nu()], theta[self.log_psi()].exp(), vec![], vec![], vec![], vec![])
            }
            VarianceMode::TimeVarying => {
                let ps = self.p_s;
                let delta: Vec<f64> = theta[self.delta()].to_vec();
                let k_s: Vec<f64> = theta[self.log_k_s()].iter().map(|c| c.exp()).collect();
                let (l_s, _) = corr_chol_from_z(&theta[self.z_ls()], ps);
                let mut kl_s = vec![0.0; ps * ps];
                for r in 0..ps {
                    for c in 0..=r {
                        kl_s[r * ps + c] = k_s[r] * l_s[r * ps + c];
                    }
                }
                (0.0, 0.0, delta, k_s, l_s, kl_s)
            }
        };

        let (beta, sigma, tau_a, l_a, dla) = if self.include_outcome {
            let beta: Vec<f64> = theta[self.beta()].to_vec();
            let sigma = theta[self.log_sigma()].exp();
            let tau_a: Vec<f64> = theta[self.log_tau_a()].iter().map(|c| c.exp()).collect();
            let ad = self.a_dim;
            let (l_a, _) = corr_chol_from_z(&theta[self.z_la()], ad);
            let mut dla = vec![0.0; ad * ad];
            for r in 0..ad {
                for c in 0..=r {
                    dla[r * ad + c] = tau_a[r] * l_a[r * ad + c];
                }
            }
            (beta, sigma, tau_a, l_a, dla)
        } else {
            (vec![], 1.0, vec![], vec![], vec![])
        };

        let mut b = Vec::with_capacity(self.n_subjects);
        let mut log_s2 = Vec::new();
        let mut lambda = Vec::new();
        let mut a = Vec::with_capacity(self.n_subjects);
        for i in 0..self.n_subjects {
            let u = &theta[self.u(i)];
            let mut bi = alpha.clone();
            for r in 0..p {
                for c in 0..=r {
                    bi[r] += kl[r * p + c] * u[c];
                }
            }
            b.push(bi);
            match self.variance_mode {
                VarianceMode::Constant => log_s2.push(nu + psi * theta[self.w(i)]),
                VarianceMode::TimeVarying => {
                    let ps = self.p_s;
                    let e = &theta[self.e(i)];
                    let mut li = delta.clone();
                    for r in 0..ps {
                        for c in 0..=r {
                            li[r] += kl_s[r * ps + c] * e[c];
                        }
                    }
                    lambda.push(li);
                }
            }
            let ad = self.a_dim;
            let v = &theta[self.v(i)];
            let mut ai = vec![0.0; ad];
            for r in 0..ad {
                for c in 0..=r {
                    ai[r] += dla[r * ad + c] * v[c];
                }
            }
            a.push(ai);
        }

        ParamVector {
            b,
            log_s2,
            lambda,
            a,
            alpha,
            k,
            l,
            nu,
            psi,
            delta,
            k_s,
            l_s,
            beta,
            sigma,
            tau_a,
            l_a,
        }
    }

    /// Inverse of `constrain`. Errors on NaN input or invalid factors.
    pub fn unconstrain(&self, pv: &ParamVector) -> Result<Vec<f64>> {
        let p = self.p;
        validate_corr_chol(&pv.l, p)?;
        let mut theta = vec![0.0; self.dim];
        theta[self.alpha()].copy_from_slice(&pv.alpha);
        for (slot, kv) in self.log_k().zip(&pv.k) {
            if !(*kv > 0.0) {
                return Err(Error::Domain("K diagonal must be positive".into()));
            }
            theta[slot] = kv.ln();
        }
        let zl = z_from_corr_chol(&pv.l, p)?;
        theta[self.z_l()].copy_from_slice(&zl);

        // lower-triangular solve helper: solve (M) x = rhs with M row-major
        let tri_solve = |m: &[f64], n: usize, rhs: &[f64]| -> Result<Vec<f64>> {
            let mut x = vec![0.0; n];
            for r in 0..n {
                let mut acc = rhs[r];
                for c in 0..r {
                    acc -= m[r * n + c] * x[c];
                }
                let d = m[r * n + r];
                if d == 0.0 {
                    return Err(Error::Domain("singular scale matrix".into()));
                }
                x[r] = acc / d;
            }
            Ok(x)
        };

        let mut kl = vec![0.0; p * p];
        for r in 0..p {
            for c in 0..=r {
                kl[r * p + c] = pv.k[r] * pv.l[r * p + c];
            }
        }

        let kl_s = match self.variance_mode {
            VarianceMode::Constant => {
                theta[self.nu()] = pv.nu;
                if !(pv.psi > 0.0) {
                    return Err(Error::Domain("psi must be positive".into()));
                }
                theta[self.log_psi()] = pv.psi.ln();
                vec![]
            }
            VarianceMode::TimeVarying => {
                let ps = self.p_s;
                validate_corr_chol(&pv.l_s, ps)?;
                theta[self.delta()].copy_from_slice(&pv.delta);
                for (slot, kv) in self.log_k_s().zip(&pv.k_s) {
                    if !(*kv > 0.0) {
                        return Err(Error::Domain("K_s diagonal must be positive".into()));
                    }
                    theta[slot] = kv.ln();
                }
                let zs = z_from_corr_chol(&pv.l_s, ps)?;
                theta[self.z_ls()].copy_from_slice(&zs);
                let mut kl_s = vec![0.0; ps * ps];
                for r in 0..ps {
                    for c in 0..=r {
                        kl_s[r * ps + c] = pv.k_s[r] * pv.l_s[r * ps + c];
                    }
                }
                kl_s
            }
        };

        let dla = if self.include_outcome {
            theta[self.beta()].copy_from_slice(&pv.beta);
            if !(pv.sigma > 0.0) {
                return Err(Error::Domain("sigma must be positive".into()));
            }
            theta[self.log_sigma()] = pv.sigma.ln();
            let ad = self.a_dim;
            validate_corr_chol(&pv.l_a, ad)?;
            for (slot, tv) in self.log_tau_a().zip(&pv.tau_a) {
                if !(*tv > 0.0) {
                    return Err(Error::Domain("tau_a must be positive".into()));
                }
                theta[slot] = tv.ln();
            }
            let za = z_from_corr_chol(&pv.l_a, ad)?;
            theta[self.z_la()].copy_from_slice(&za);
            let mut dla = vec![0.0; ad * ad];
            for r in 0..ad {
                for c in 0..=r {
                    dla[r * ad + c] = pv.tau_a[r] * pv.l_a[r * ad + c];
                }
            }
            dla
        } else {
            vec![]
        };

        for i in 0..self.n_subjects {
            let rhs: Vec<f64> = pv.b[i].iter().zip(&pv.alpha).map(|(b, a)| b - a).collect();
            let u = tri_solve(&kl, p, &rhs)?;
            theta[self.u(i)].copy_from_slice(&u);
            match self.variance_mode {
                VarianceMode::Constant => theta[self.w(i)] = (pv.log_s2[i] - pv.nu) / pv.psi,
                VarianceMode::TimeVarying => {
                    let rhs: Vec<f64> =
                        pv.lambda[i].iter().zip(&pv.delta).map(|(l, d)| l - d).collect();
                    let e = tri_solve(&kl_s, self.p_s, &rhs)?;
                    theta[self.e(i)].copy_from_slice(&e);
                }
            }
            if self.a_dim > 0 {
                let v = tri_solve(&dla, self.a_dim, &pv.a[i])?;
                theta[self.v(i)].copy_from_slice(&v);
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("unconstrain produced a non-finite coordinate".into()));
        }
        Ok(theta)
    }

    /// Log-Jacobian of the full unconstrained -> constrained map: exp terms
    /// for positive scalars, the correlation-Cholesky transforms, and the
    /// affine determinants of the non-centered subject-level maps.
    pub fn log_jacobian(&self, theta: &[f64]) -> f64 {
        let n = self.n_subjects as f64;
        let mut j = 0.0;
        // marker scale block
        let (l, jl) = corr_chol_from_z(&theta[self.z_l()], self.p);
        j += jl;
        let mut det_kl = 0.0;
        for (r, c) in self.log_k().enumerate() {
            det_kl += theta[c] + l[r * self.p + r].max(f64::MIN_POSITIVE).ln();
        }
        j += theta[self.log_k()].iter().sum::<f64>();
        j += n * det_kl;
        match self.variance_mode {
            VarianceMode::Constant => {
                // exp transform of psi plus one non-centering factor per w_i
                j += (n + 1.0) * theta[self.log_psi()];
            }
            VarianceMode::TimeVarying => {
                let (ls, jls) = corr_chol_from_z(&theta[self.z_ls()], self.p_s);
                j += jls;
                let mut det = 0.0;
                for (r, c) in self.log_k_s().enumerate() {
                    det += theta[c] + ls[r * self.p_s + r].max(f64::MIN_POSITIVE).ln();
                }
                j += theta[self.log_k_s()].iter().sum::<f64>();
                j += n * det;
            }
        }
        if self.include_outcome {
            j += theta[self.log_sigma()];
            j += theta[self.log_tau_a()].iter().sum::<f64>();
            let (la, jla) = corr_chol_from_z(&theta[self.z_la()], self.a_dim);
            j += jla;
            let mut det = 0.0;
            for (r, c) in self.log_tau_a().enumerate() {
                det += theta[c] + la[r * self.a_dim + r].max(f64::MIN_POSITIVE).ln();
            }
            j += n * det;
        }
        j
    }

    /// Names of the reported (constrained) global parameters, in the order
    /// `global_values` emits them.
    pub fn global_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.p {
            names.push(format!("alpha.{i}"));
        }
        for i in 0..self.p {
            names.push(format!("k.{i}"));
        }
        for r in 1..self.p {
            for c in 0..r {
                names.push(format!("corr.{r}.{c}"));
            }
        }
        match self.variance_mode {
            VarianceMode::Constant => {
                names.push("nu".into());
                names.push("psi".into());
            }
            VarianceMode::TimeVarying => {
                for i in 0..self.p_s {
                    names.push(format!("delta.{i}"));
                }
                for i in 0..self.p_s {
                    names.push(format!("k_s.{i}"));
                }
                for r in 1..self.p_s {
                    for c in 0..r {
                        names.push(format!("corr_s.{r}.{c}"));
                    }
                }
            }
        }
        if self.include_outcome {
            names.extend(self.term_names.iter().cloned());
            names.push("sigma".into());
            match self.random_effects {
                RandomEffects::Intercept => names.push("tau_a".into()),
                RandomEffects::InterceptSlope => {
                    names.push("tau_a.0".into());
                    names.push("tau_a.1".into());
                    names.push("corr_a.1.0".into());
                }
            }
        }
        names
    }

    /// Constrained global values aligned with `global_names`. Correlation
    /// entries are from the full matrix L L^T.
    pub fn global_values(&self, pv: &ParamVector) -> Vec<f64> {
        let corr_entries = |l: &[f64], p: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(corr_free(p));
            for r in 1..p {
                for c in 0..r {
                    let mut acc = 0.0;
                    for m in 0..p {
                        acc += l[r * p + m] * l[c * p + m];
                    }
                    out.push(acc);
                }
            }
            out
        };
        let mut vals = Vec::new();
        vals.extend(&pv.alpha);
        vals.extend(&pv.k);
        vals.extend(corr_entries(&pv.l, self.p));
        match self.variance_mode {
            VarianceMode::Constant => {
                vals.push(pv.nu);
                vals.push(pv.psi);
            }
            VarianceMode::TimeVarying => {
                vals.extend(&pv.delta);
                vals.extend(&pv.k_s);
                vals.extend(corr_entries(&pv.l_s, self.p_s));
            }
        }
        if self.include_outcome {
            vals.extend(&pv.beta);
            vals.push(pv.sigma);
            vals.extend(&pv.tau_a);
            if self.random_effects == RandomEffects::InterceptSlope {
                vals.extend(corr_entries(&pv.l_a, self.a_dim));
            }
        }
        vals
    }

    /// Names of the per-subject latent parameters, in the order
    /// `latent_values` emits them.
    pub fn latent_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for id in &self.subject_ids {
            for k in 0..self.p {
                names.push(format!("b[{id}].{k}"));
            }
            match self.variance_mode {
                VarianceMode::Constant => names.push(format!("log_s2[{id}]")),
                VarianceMode::TimeVarying => {
                    for k in 0..self.p_s {
                        names.push(format!("lambda[{id}].{k}"));
                    }
                }
            }
            for k in 0..self.a_dim {
                names.push(format!("a[{id}].{k}"));
            }
        }
        names
    }

    pub fn latent_values(&self, pv: &ParamVector) -> Vec<f64> {
        let mut vals = Vec::new();
        for i in 0..self.n_subjects {
            vals.extend(&pv.b[i]);
            match self.variance_mode {
                VarianceMode::Constant => vals.push(pv.log_s2[i]),
                VarianceMode::TimeVarying => vals.extend(&pv.lambda[i]),
            }
            vals.extend(&pv.a[i]);
        }
        vals
    }
}
