//! Locally weighted polynomial regression with a tricube kernel.
//! No robustness iterations; window = nearest ceil(span*n) points.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Fitted loess smoother. Training points are stored sorted by time so
/// window selection is a two-pointer scan.
#[derive(Debug, Clone)]
pub struct LoessFit {
    pub span: f64,
    pub degree: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    window: usize,
    /// Smoothed value at each (sorted) training point.
    pub fitted: Vec<f64>,
}

fn tricube(z: f64) -> f64 {
    let z = z.abs().min(1.0);
    let t = 1.0 - z * z * z;
    t * t * t
}

/// Fits a loess smoother to (times, values). `span` in (0,1] controls the
/// window as ceil(span*n) nearest points; `degree` is 1 or 2.
pub fn loess_fit(times: &[f64], values: &[f64], span: f64, degree: usize) -> Result<LoessFit> {
    if times.len() != values.len() {
        return Err(Error::Domain("times and values differ in length".into()));
    }
    if !(0.0..=1.0).contains(&span) || span == 0.0 {
        return Err(Error::Domain(format!("span {span} outside (0, 1]")));
    }
    if !(1..=2).contains(&degree) {
        return Err(Error::Domain(format!("degree {degree} not in {{1, 2}}")));
    }
    if times.iter().chain(values.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite input to loess".into()));
    }
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let x: Vec<f64> = order.iter().map(|&i| times[i]).collect();
    let y: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut distinct = 1usize;
    for i in 1..n {
        if x[i] > x[i - 1] {
            distinct += 1;
        }
    }
    if distinct < degree + 2 {
        return Err(Error::Domain(format!(
            "loess needs at least {} distinct time points, found {distinct}",
            degree + 2
        )));
    }
    let window = ((span * n as f64).ceil() as usize).min(n);
    if window < degree + 1 {
        return Err(Error::Domain(format!(
            "span {span} gives a window of {window} points, below the {} needed for degree {degree}",
            degree + 1
        )));
    }

    let mut fit = LoessFit { span, degree, x, y, window, fitted: Vec::new() };
    let fitted: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| fit.local_poly(fit.x[i]).map(|c| c[0]))
        .collect();
    fit.fitted = fitted?;
    Ok(fit)
}

impl LoessFit {
    fn train_range(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().unwrap())
    }

    /// Indices [lo, hi) of the `window` training points nearest to x0.
    fn window_bounds(&self, x0: f64) -> (usize, usize) {
        let n = self.x.len();
        let q = self.window;
        let mut hi = self.x.partition_point(|&v| v < x0);
        let mut lo = hi;
        while hi - lo < q {
            if lo == 0 {
                hi = q;
                break;
            }
            if hi == n {
                lo = n - q;
                break;
            }
            if x0 - self.x[lo - 1] <= self.x[hi] - x0 {
                lo -= 1;
            } else {
                hi += 1;
            }
        }
        (lo, hi)
    }

    /// Weighted local polynomial centered at x0, coefficients in the scaled
    /// basis ((x - x0)/dmax)^k. Returns (coefficients, dmax).
    fn local_poly_scaled(&self, x0: f64) -> Result<(DVector<f64>, f64)> {
        let (lo, hi) = self.window_bounds(x0);
        let dmax = self.x[lo..hi]
            .iter()
            .map(|&x| (x - x0).abs())
            .fold(0.0f64, f64::max);
        if dmax == 0.0 {
            return Err(Error::SingularFit(format!(
                "degenerate loess window at t = {x0}: all points share one time"
            )));
        }
        let d = self.degree;
        let mut xtwx = DMatrix::<f64>::zeros(d + 1, d + 1);
        let mut xtwy = DVector::<f64>::zeros(d + 1);
        for i in lo..hi {
            let u = (self.x[i] - x0) / dmax;
            let w = tricube(u);
            let mut pow = [0.0f64; 3];
            pow[0] = 1.0;
            pow[1] = u;
            pow[2] = u * u;
            for a in 0..=d {
                for b in a..=d {
                    xtwx[(a, b)] += w * pow[a] * pow[b];
                }
                xtwy[a] += w * pow[a] * self.y[i];
            }
        }
        for a in 0..=d {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = xtwx.clone().cholesky().ok_or_else(|| {
            Error::SingularFit(format!("singular loess window at t = {x0}"))
        })?;
        Ok((chol.solve(&xtwy), dmax))
    }

    fn local_poly(&self, x0: f64) -> Result<DVector<f64>> {
        self.local_poly_scaled(x0).map(|(c, _)| c)
    }

    /// Smoothed value at t. The boolean is true when t lies outside the
    /// training range and the nearest endpoint's local fit was extrapolated.
    pub fn predict_flagged(&self, t: f64) -> Result<(f64, bool)> {
        let (xmin, xmax) = self.train_range();
        if t >= xmin && t <= xmax {
            return Ok((self.local_poly(t)?[0], false));
        }
        let anchor = if t < xmin { xmin } else { xmax };
        let (c, dmax) = self.local_poly_scaled(anchor)?;
        let u = (t - anchor) / dmax;
        let mut value = 0.0;
        for k in (0..=self.degree).rev() {
            value = value * u + c[k];
        }
        Ok((value, true))
    }

    pub fn predict(&self, t: f64) -> Result<f64> {
        self.predict_flagged(t).map(|(v, _)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn equispaced(n: usize, a: f64, b: f64) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn linear_data_reproduced_exactly() {
        let t = equispaced(40, 0.0, 10.0);
        let y: Vec<f64> = t.iter().map(|&v| 2.0 * v + 1.0).collect();
        for span in [0.3, 0.5, 0.75, 1.0] {
            let fit = loess_fit(&t, &y, span, 1).unwrap();
            for (f, target) in fit.fitted.iter().zip(&y) {
                assert_abs_diff_eq!(f, target, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn constant_data_reproduced() {
        let t = equispaced(25, -3.0, 3.0);
        let y = vec![4.25; 25];
        let fit = loess_fit(&t, &y, 0.75, 2).unwrap();
        for f in &fit.fitted {
            assert_abs_diff_eq!(f, &4.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn quadratic_reproduced_by_degree_two() {
        let t = equispaced(50, 0.0, 10.0);
        let y: Vec<f64> = t.iter().map(|&v| v * v).collect();
        let fit = loess_fit(&t, &y, 0.75, 2).unwrap();
        for (i, (f, target)) in fit.fitted.iter().zip(&y).enumerate() {
            if i >= 5 && i < 45 {
                assert!((f - target).abs() < 1e-6, "i={i}: {f} vs {target}");
            }
        }
    }

    /// Oracle: brute-force window selection (full distance sort) and a direct
    /// weighted normal-equations solve, written independently of the
    /// two-pointer implementation, on noisy data at 5 query points.
    #[test]
    fn matches_direct_weighted_least_squares_oracle() {
        let n = 50;
        let t = equispaced(n, 0.0, 10.0);
        // arbitrary deterministic perturbation so fits are not exact
        let y: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, &v)| v * v + 0.5 * ((i as f64 * 2.399).sin()))
            .collect();
        let span = 0.75;
        let degree = 2;
        let fit = loess_fit(&t, &y, span, degree).unwrap();
        let q = (span * n as f64).ceil() as usize;
        for &x0 in &[0.9, 2.5, 5.0, 7.1, 9.3] {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                (t[a] - x0)
                    .abs()
                    .total_cmp(&(t[b] - x0).abs())
                    .then(t[a].total_cmp(&t[b]))
            });
            let win = &idx[..q];
            let dmax = win.iter().map(|&i| (t[i] - x0).abs()).fold(0.0f64, f64::max);
            let mut a = DMatrix::<f64>::zeros(degree + 1, degree + 1);
            let mut b = DVector::<f64>::zeros(degree + 1);
            for &i in win {
                let u = t[i] - x0;
                let z = (u / dmax).abs();
                let w = (1.0 - z.powi(3)).powi(3);
                let basis = [1.0, u, u * u];
                for r in 0..=degree {
                    for c in 0..=degree {
                        a[(r, c)] += w * basis[r] * basis[c];
                    }
                    b[r] += w * basis[r] * y[i];
                }
            }
            let coef = a.lu().solve(&b).unwrap();
            let expected = coef[0];
            let got = fit.predict(x0).unwrap();
            assert!(
                (got - expected).abs() < 1e-7,
                "x0={x0}: two-pointer fit {got} vs oracle {expected}"
            );
        }
    }

    #[test]
    fn extrapolation_uses_endpoint_fit_and_flags() {
        let t = equispaced(30, 0.0, 10.0);
        let y: Vec<f64> = t.iter().map(|&v| 2.0 * v + 1.0).collect();
        let fit = loess_fit(&t, &y, 0.75, 1).unwrap();
        let (v, flagged) = fit.predict_flagged(11.0).unwrap();
        assert!(flagged);
        assert_abs_diff_eq!(v, 23.0, epsilon = 1e-8);
        let (_, inside) = fit.predict_flagged(5.0).unwrap();
        assert!(!inside);
    }

    #[test]
    fn identical_times_is_singular() {
        let t = vec![1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 4.0];
        let y = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        // window of 4 points around t=1 is all ties
        let fit = loess_fit(&t, &y, 0.5, 1);
        match fit {
            Err(Error::SingularFit(_)) => {}
            Err(e) => panic!("expected singular-fit error, got {e}"),
            Ok(f) => {
                let err = f.predict(1.0).unwrap_err();
                assert!(matches!(err, Error::SingularFit(_)), "got {err}");
            }
        }
    }

    #[test]
    fn too_few_distinct_points_rejected() {
        let t = vec![1.0, 1.0, 2.0, 2.0];
        let y = vec![0.0, 0.0, 1.0, 1.0];
        assert!(loess_fit(&t, &y, 1.0, 2).is_err());
    }
}
