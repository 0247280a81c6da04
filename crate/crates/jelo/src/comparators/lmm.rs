//! In-house linear mixed model fitter: y_i = X_i beta + Z_i b_i + e_i with
//! b_i ~ N(0, G) unstructured and e_i ~ N(0, sigma^2 I).
//!
//! The marginal (restricted) likelihood is maximized over the log-Cholesky
//! factor of G* = G / sigma^2; beta and sigma^2 are profiled out in closed
//! form, so the optimizer only sees q(q+1)/2 free parameters.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// A fitted linear mixed model.
#[derive(Debug, Clone)]
pub struct LmmFit {
    pub beta: Vec<f64>,
    /// Wald standard errors from the GLS covariance sigma^2 (X' V*^-1 X)^-1.
    pub se: Vec<f64>,
    /// Random-effect covariance G, row-major q x q, on the data scale.
    pub g: Vec<f64>,
    pub sigma2: f64,
    /// Per-subject BLUPs b_hat_i from the mixed-model equations.
    pub blups: Vec<Vec<f64>>,
    /// Plain marginal log-likelihood evaluated at the fitted parameters.
    pub loglik: f64,
    /// The maximized criterion: ML log-likelihood, or the REML criterion.
    pub objective: f64,
    pub converged: bool,
    /// G is numerically singular (a variance component hit the boundary).
    pub boundary: bool,
    pub n_iter: usize,
}

impl LmmFit {
    pub fn q(&self) -> usize {
        self.blups.first().map_or(0, |b| b.len())
    }
}

fn check_shapes(y: &[DVector<f64>], x: &[DMatrix<f64>], z: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    if y.len() < 2 {
        return Err(Error::Domain("lmm_fit needs at least 2 subjects".into()));
    }
    if y.len() != x.len() || y.len() != z.len() {
        return Err(Error::Schema("lmm_fit inputs have mismatched subject counts".into()));
    }
    let p = x[0].ncols();
    let q = z[0].ncols();
    for i in 0..y.len() {
        let n_i = y[i].len();
        if n_i == 0 {
            return Err(Error::Domain(format!("subject {i} has no observations")));
        }
        if x[i].nrows() != n_i || z[i].nrows() != n_i || x[i].ncols() != p || z[i].ncols() != q {
            return Err(Error::Schema(format!("subject {i} design shapes are inconsistent")));
        }
    }
    Ok((p, q))
}

/// Lower-triangular Cholesky factor of G* from the log-Cholesky vector:
/// first q entries are log-diagonals, then the strict lower triangle
/// row-major.
fn chol_from_theta(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    for r in 0..q {
        l[(r, r)] = theta[r].clamp(-40.0, 40.0).exp();
    }
    let mut k = q;
    for r in 1..q {
        for c in 0..r {
            l[(r, c)] = theta[k];
            k += 1;
        }
    }
    l
}

struct ProfiledEval {
    objective: f64,
    beta: DVector<f64>,
    /// A = sum_i X_i' V*_i^-1 X_i.
    a: DMatrix<f64>,
    rss: f64,
}

/// Profiled objective at G*: GLS beta, profiled sigma^2, and the ML or REML
/// criterion. Returns None when V* or the GLS normal equations fail to
/// factor.
fn profiled_eval(
    y: &[DVector<f64>],
    x: &[DMatrix<f64>],
    z: &[DMatrix<f64>],
    g_star: &DMatrix<f64>,
    reml: bool,
) -> Option<ProfiledEval> {
    let p = x[0].ncols();
    let n_total: usize = y.iter().map(|v| v.len()).sum();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut yvy = 0.0;
    let mut sum_logdet = 0.0;
    for i in 0..y.len() {
        let n_i = y[i].len();
        let v = DMatrix::<f64>::identity(n_i, n_i) + &z[i] * g_star * z[i].transpose();
        let chol = Cholesky::new(v)?;
        sum_logdet += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let vy = chol.solve(&y[i]);
        let vx = chol.solve(&x[i]);
        a += x[i].transpose() * &vx;
        b += x[i].transpose() * &vy;
        yvy += y[i].dot(&vy);
    }
    let a_chol = Cholesky::new(a.clone())?;
    let beta = a_chol.solve(&b);
    let rss = (yvy - beta.dot(&b)).max(1e-300);
    let dof = if reml { n_total - p } else { n_total } as f64;
    let sigma2 = rss / dof;
    let mut obj = -0.5 * (dof * (sigma2.ln() + (2.0 * std::f64::consts::PI).ln()) + sum_logdet + dof);
    if reml {
        obj -= 0.5
            * 2.0
            * a_chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
    }
    if !obj.is_finite() {
        return None;
    }
    Some(ProfiledEval { objective: obj, beta, a, rss })
}

/// Marginal log-likelihood of the data at arbitrary (beta, sigma^2, G),
/// summing independent per-subject Gaussian blocks.
pub fn lmm_marginal_loglik(
    y: &[DVector<f64>],
    x: &[DMatrix<f64>],
    z: &[DMatrix<f64>],
    beta: &[f64],
    sigma2: f64,
    g: &DMatrix<f64>,
) -> Result<f64> {
    check_shapes(y, x, z)?;
    if sigma2 <= 0.0 {
        return Err(Error::Domain("sigma2 must be positive".into()));
    }
    let beta = DVector::from_column_slice(beta);
    let mut ll = 0.0;
    for i in 0..y.len() {
        let n_i = y[i].len();
        let v = DMatrix::<f64>::identity(n_i, n_i) * sigma2 + &z[i] * g * z[i].transpose();
        let chol = Cholesky::new(v)
            .ok_or_else(|| Error::SingularFit("marginal covariance is not positive definite".into()))?;
        let r = &y[i] - &x[i] * &beta;
        let vr = chol.solve(&r);
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        ll += -0.5 * (n_i as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&vr));
    }
    Ok(ll)
}

/// Central-difference gradient of the profiled objective.
fn numeric_grad(
    y: &[DVector<f64>],
    x: &[DMatrix<f64>],
    z: &[DMatrix<f64>],
    theta: &[f64],
    q: usize,
    reml: bool,
) -> Option<Vec<f64>> {
    let mut grad = vec![0.0; theta.len()];
    for k in 0..theta.len() {
        let h = 1e-6 * theta[k].abs().max(1.0);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[k] += h;
        tm[k] -= h;
        let fp = profiled_eval(y, x, z, &gstar_of(&tp, q), reml)?.objective;
        let fm = profiled_eval(y, x, z, &gstar_of(&tm, q), reml)?.objective;
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Some(grad)
}

fn gstar_of(theta: &[f64], q: usize) -> DMatrix<f64> {
    let l = chol_from_theta(theta, q);
    &l * l.transpose()
}

const MAX_ITER: usize = 300;

/// Fits the LMM by quasi-Newton ascent (BFGS with Armijo backtracking) on
/// the profiled objective.
pub fn lmm_fit(
    y: &[DVector<f64>],
    x: &[DMatrix<f64>],
    z: &[DMatrix<f64>],
    reml: bool,
) -> Result<LmmFit> {
    let (p, q) = check_shapes(y, x, z)?;
    let n_total: usize = y.iter().map(|v| v.len()).sum();
    if reml && n_total <= p {
        return Err(Error::Domain("REML needs more observations than fixed effects".into()));
    }
    let dim = q * (q + 1) / 2;
    let mut theta = vec![0.0; dim];
    let mut eval = profiled_eval(y, x, z, &gstar_of(&theta, q), reml)
        .ok_or_else(|| Error::SingularFit("fixed-effect design is rank deficient".into()))?;
    let mut grad = numeric_grad(y, x, z, &theta, q, reml)
        .ok_or_else(|| Error::Evaluation("objective not evaluable near start".into()))?;
    let mut h_inv = DMatrix::<f64>::identity(dim, dim);
    let mut converged = false;
    let mut degenerate = false;
    let mut n_iter = 0;

    // Residual variance below machine level relative to the response scale
    // means the random effects interpolate the data exactly; the likelihood
    // is unbounded there and ascent must stop at the boundary.
    let dof = if reml { n_total - p } else { n_total } as f64;
    let y_scale = y.iter().map(|v| v.dot(v)).sum::<f64>() / n_total as f64;
    let s2_floor = 1e-14 * y_scale.max(1e-300);
    if eval.rss / dof < s2_floor {
        converged = true;
        degenerate = true;
    }

    for it in 0..MAX_ITER {
        if degenerate {
            break;
        }
        n_iter = it + 1;
        let g_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if g_norm < 1e-6 * eval.objective.abs().max(1.0) {
            converged = true;
            break;
        }
        let g_vec = DVector::from_column_slice(&grad);
        let mut dir = &h_inv * &g_vec;
        if dir.dot(&g_vec) <= 0.0 {
            h_inv = DMatrix::identity(dim, dim);
            dir = g_vec.clone();
        }
        // Cap the step so exp(theta) cannot overflow in one jump.
        let dir_norm = dir.norm();
        if dir_norm > 10.0 {
            dir *= 10.0 / dir_norm;
        }
        let slope = dir.dot(&g_vec);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + step * d).collect();
            if let Some(e) = profiled_eval(y, x, z, &gstar_of(&cand, q), reml) {
                if e.objective >= eval.objective + 1e-4 * step * slope {
                    accepted = Some((cand, e));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((new_theta, new_eval)) = accepted else {
            // No ascent step exists at line-search resolution; treat the
            // current iterate as the optimum.
            converged = g_norm < 1e-4 * eval.objective.abs().max(1.0);
            break;
        };
        let new_grad = numeric_grad(y, x, z, &new_theta, q, reml)
            .ok_or_else(|| Error::Evaluation("objective not evaluable at accepted step".into()))?;
        // BFGS update on the maximization problem: s = dtheta, yv = -(dgrad).
        let s = DVector::from_iterator(dim, new_theta.iter().zip(&theta).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(dim, grad.iter().zip(&new_grad).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            let rho = 1.0 / sy;
            // Sherman-Morrison form of the inverse-Hessian update.
            h_inv = &h_inv + ((sy + yhy) * rho * rho) * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        theta = new_theta;
        eval = new_eval;
        grad = new_grad;
        if eval.rss / dof < s2_floor {
            converged = true;
            degenerate = true;
        }
    }

    let g_star = gstar_of(&theta, q);
    let sigma2 = eval.rss / dof;
    let g: DMatrix<f64> = &g_star * sigma2;

    // Boundary: a random-effect variance collapsed relative to the largest,
    // or the residual variance itself collapsed (degenerate exact fit).
    let max_diag = (0..q).map(|r| g_star[(r, r)]).fold(0.0f64, f64::max);
    let boundary =
        degenerate || (0..q).any(|r| g_star[(r, r)] <= 1e-8 * max_diag.max(1e-8));

    let a_chol = Cholesky::new(eval.a.clone())
        .ok_or_else(|| Error::SingularFit("GLS normal equations are singular".into()))?;
    let cov_beta = a_chol.inverse() * sigma2;
    let se: Vec<f64> = (0..p).map(|k| cov_beta[(k, k)].max(0.0).sqrt()).collect();

    let mut blups = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let n_i = y[i].len();
        let v = DMatrix::<f64>::identity(n_i, n_i) + &z[i] * &g_star * z[i].transpose();
        let chol = Cholesky::new(v)
            .ok_or_else(|| Error::SingularFit("subject covariance is not positive definite".into()))?;
        let r = &y[i] - &x[i] * &eval.beta;
        let b_i = &g_star * z[i].transpose() * chol.solve(&r);
        blups.push(b_i.iter().copied().collect());
    }

    let beta: Vec<f64> = eval.beta.iter().copied().collect();
    let loglik = lmm_marginal_loglik(y, x, z, &beta, sigma2, &g)?;

    Ok(LmmFit {
        beta,
        se,
        // G is symmetric, so column-major iteration yields row-major storage.
        g: g.iter().copied().collect(),
        sigma2,
        blups,
        loglik,
        objective: eval.objective,
        converged,
        boundary,
        n_iter,
    })
}
