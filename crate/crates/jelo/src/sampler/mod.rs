//! Hamiltonian Monte Carlo over any unconstrained log density with
//! gradient. Fixed-length trajectories with a jittered leapfrog count and
//! a Metropolis accept/reject on the trajectory endpoint; dual-averaging
//! step-size adaptation; diagonal mass matrix estimated from the second
//! half of warmup.

pub mod dual_average;
pub mod leapfrog;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::diagnostics::{summarize_all, ParamSummary};
use crate::error::{Error, Result};
use crate::model::{JointModel, LogDensityModel, ModelSpec, ParamVector, PriorConfig};
use crate::seeding::rng_for;
use dual_average::DualAverage;
use leapfrog::{hamiltonian, leapfrog, LeapfrogState};

/// |H_end - H_start| beyond this flags the trajectory as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub target_accept: f64,
    /// Upper bound of the jittered leapfrog count (drawn uniformly from
    /// [1, leapfrog_steps] each iteration).
    pub leapfrog_steps: usize,
    /// Hard cap on leapfrog_steps.
    pub max_leapfrog: usize,
    pub seed: u64,
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 2,
            iterations: 2000,
            warmup: 1000,
            target_accept: 0.8,
            leapfrog_steps: 32,
            max_leapfrog: 1024,
            seed: 0,
            init_radius: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 {
            return Err(Error::Config("chains must be >= 1".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if self.leapfrog_steps < 1 || self.max_leapfrog < 1 {
            return Err(Error::Config("leapfrog step counts must be >= 1".into()));
        }
        if !(self.init_radius > 0.0 && self.init_radius.is_finite()) {
            return Err(Error::Config("init_radius must be positive".into()));
        }
        Ok(())
    }

    fn jitter_cap(&self) -> usize {
        self.leapfrog_steps.min(self.max_leapfrog).max(1)
    }
}

/// Per-iteration sampler statistics for one chain (post-warmup only).
#[derive(Debug, Clone, Default)]
pub struct ChainStats {
    pub step_size: Vec<f64>,
    pub n_leapfrog: Vec<u32>,
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    pub adapted_step_size: f64,
}

impl ChainStats {
    pub fn divergence_rate(&self) -> f64 {
        if self.divergent.is_empty() {
            return 0.0;
        }
        self.divergent.iter().filter(|d| **d).count() as f64 / self.divergent.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ChainDraws {
    /// Post-warmup unconstrained draws, one row per kept iteration.
    pub draws: Vec<Vec<f64>>,
    pub stats: ChainStats,
}

#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub dim: usize,
    pub chains: Vec<ChainDraws>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_kept(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    pub fn divergence_rate(&self) -> f64 {
        let total: usize = self.chains.iter().map(|c| c.stats.divergent.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let div: usize = self
            .chains
            .iter()
            .map(|c| c.stats.divergent.iter().filter(|d| **d).count())
            .sum();
        div as f64 / total as f64
    }

    /// One series per chain for a single coordinate.
    pub fn coord_chains(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|row| row[j]).collect())
            .collect()
    }
}

fn sample_momentum(rng: &mut ChaCha8Rng, inv_mass: &[f64]) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|im| {
            let z: f64 = rng.sample(StandardNormal);
            z / im.sqrt()
        })
        .collect()
}

/// Heuristic first step size: double or halve until a single leapfrog step
/// crosses 50% acceptance from the right side.
fn find_reasonable_epsilon<M: LogDensityModel + ?Sized>(
    model: &M,
    theta: &[f64],
    value: f64,
    grad: &[f64],
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let p0 = sample_momentum(rng, inv_mass);
    let h0 = hamiltonian(value, &p0, inv_mass);
    let ratio_at = |eps: f64| -> f64 {
        let mut th = theta.to_vec();
        let mut p = p0.clone();
        let mut g = grad.to_vec();
        let mut v = value;
        let mut st = LeapfrogState {
            theta: &mut th,
            momentum: &mut p,
            grad: &mut g,
            value: &mut v,
        };
        let trace = leapfrog(model, &mut st, eps, 1, inv_mass);
        let h1 = trace[0];
        if h1.is_finite() {
            (h0 - h1).exp()
        } else {
            0.0
        }
    };
    let mut eps = 1.0f64;
    let mut r = ratio_at(eps);
    let a: f64 = if r > 0.5 { 1.0 } else { -1.0 };
    for _ in 0..60 {
        if r.powf(a) <= 2f64.powf(-a) {
            break;
        }
        eps *= 2f64.powf(a);
        if !(1e-10..=1e7).contains(&eps) {
            break;
        }
        r = ratio_at(eps);
    }
    eps.clamp(1e-10, 1e7)
}

/// Warmup layout: an initial step-size-only buffer, a run of doubling
/// variance-estimation windows (metric refreshed at each boundary so later
/// windows measure with an already-improved metric), and a terminal
/// step-size-only buffer.
struct Windows {
    init_end: usize,
    ends: Vec<usize>,
    term_start: usize,
}

fn plan_windows(warmup: usize) -> Option<Windows> {
    if warmup < 40 {
        return None;
    }
    let init_end = 75.min(3 * warmup / 20);
    // Terminal buffer scales with warmup: the endpoint acceptance signal is
    // noisy, so the step-size iterates need a long tail to settle before the
    // post-warmup pool is drawn from them.
    let term_start = warmup - (warmup / 5).clamp(20, 300);
    let base = 25.min(warmup / 20).max(5);
    let mut ends = Vec::new();
    let mut start = init_end;
    let mut size = base;
    while start < term_start {
        let mut end = start + size;
        if end + 2 * size > term_start {
            end = term_start;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    Some(Windows {
        init_end,
        ends,
        term_start,
    })
}

/// Coordinate-wise running mean and variance.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn reset(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for (i, xi) in x.iter().enumerate() {
            let d = xi - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (xi - self.mean[i]);
        }
    }

    /// Regularized variance estimate, shrunk toward a small floor so a
    /// short window cannot produce a degenerate metric.
    fn regularized(&self) -> Option<Vec<f64>> {
        if self.n < 2 {
            return None;
        }
        let n = self.n as f64;
        let out: Vec<f64> = self
            .m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                n / (n + 5.0) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect();
        if out.iter().all(|v| v.is_finite() && *v > 0.0) {
            Some(out)
        } else {
            None
        }
    }
}

/// Deterministic diagonal-Newton ascent on the log density. Posterior
/// curvatures here span many orders of magnitude across coordinates, so an
/// unpreconditioned step destroys the stiff directions; dividing each
/// gradient coordinate by a finite-difference diagonal curvature makes all
/// coordinates contract at a comparable rate. Backtracking keeps the ascent
/// monotone. `steps` bounds the number of outer iterations.
pub fn map_ascent<M: LogDensityModel + ?Sized>(model: &M, theta: &mut [f64], steps: usize) {
    let dim = theta.len();
    let mut grad = vec![0.0; dim];
    let mut gtmp = vec![0.0; dim];
    let mut value = model.logdensity_grad(theta, &mut grad);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return;
    }
    let mut hdiag = vec![1.0; dim];
    let mut trial = vec![0.0; dim];
    for outer in 0..steps {
        if outer % 10 == 0 {
            // Refresh |d^2 logp / d theta_d^2| by differencing the gradient.
            let mut probe = theta.to_vec();
            for d in 0..dim {
                let h = 1e-5 * (1.0 + theta[d].abs());
                probe[d] = theta[d] + h;
                let v = model.logdensity_grad(&probe, &mut gtmp);
                probe[d] = theta[d];
                let curv = if v.is_finite() && gtmp[d].is_finite() {
                    ((gtmp[d] - grad[d]) / h).abs()
                } else {
                    f64::NAN
                };
                hdiag[d] = if curv.is_finite() { curv.max(1e-2) } else { 1.0 };
            }
        }
        // Ascent direction with a per-coordinate trust cap.
        let mut slope = 0.0;
        for d in 0..dim {
            let mut p = grad[d] / hdiag[d];
            let cap = 1.0 + theta[d].abs();
            p = p.clamp(-cap, cap);
            trial[d] = p;
            slope += p * grad[d];
        }
        if !(slope > 0.0) {
            break;
        }
        let mut s = 1.0f64;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> =
                (0..dim).map(|d| theta[d] + s * trial[d]).collect();
            let v = model.logdensity_grad(&cand, &mut gtmp);
            if v.is_finite()
                && gtmp.iter().all(|g| g.is_finite())
                && v >= value + 1e-4 * s * slope
            {
                theta.copy_from_slice(&cand);
                grad.copy_from_slice(&gtmp);
                let improved = v - value;
                value = v;
                accepted = true;
                if improved < 1e-10 * (1.0 + value.abs()) {
                    return;
                }
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            break;
        }
    }
}

fn run_chain<M: LogDensityModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    scope: &str,
    chain: usize,
    start: Option<&[f64]>,
) -> Result<ChainDraws> {
    let dim = model.dim();
    let mut rng = rng_for(cfg.seed, &format!("{scope}chain/{chain}"));
    let scale_coords = model.scale_coords();

    let mut theta = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut value = f64::NAN;
    let mut initialized = false;
    if let Some(point) = start {
        // Small relative jitter keeps chains distinct without pushing them
        // back out of the typical set on sharply concentrated posteriors.
        for (t, p) in theta.iter_mut().zip(point) {
            *t = p + rng.gen_range(-1e-3..1e-3) * (1.0 + p.abs());
        }
        value = model.logdensity_grad(&theta, &mut grad);
        initialized = value.is_finite() && grad.iter().all(|g| g.is_finite());
    }
    if !initialized {
        for _ in 0..100 {
            for t in theta.iter_mut() {
                *t = rng.gen_range(-cfg.init_radius..cfg.init_radius);
            }
            for &i in &scale_coords {
                theta[i] = 0.0;
            }
            value = model.logdensity_grad(&theta, &mut grad);
            if value.is_finite() && grad.iter().all(|g| g.is_finite()) {
                initialized = true;
                break;
            }
        }
    }
    if !initialized {
        return Err(Error::Initialization(format!(
            "chain {chain}: no finite log density found in 100 random initializations \
             (radius {})",
            cfg.init_radius
        )));
    }

    let warmup = cfg.warmup;
    let windows = plan_windows(warmup);
    let l_cap = cfg.jitter_cap();

    let mut inv_mass = vec![1.0; dim];
    let eps0 = find_reasonable_epsilon(model, &theta, value, &grad, &inv_mass, &mut rng);
    let mut da = DualAverage::new(eps0, cfg.target_accept);
    let mut welford = Welford::new(dim);
    let mut eps_fixed = eps0;
    // Step sizes seen over the final adaptation window. Post-warmup draws
    // resample from this pool: the dual-averaging iterates keep wandering
    // around the root where their MEAN acceptance hits the target, so
    // freezing at the point average alone biases acceptance upward on
    // plateau-shaped targets. Replaying the empirical iterate distribution
    // restores the calibrated mean.
    let mut final_log_eps: Vec<f64> = Vec::new();
    let mut eps_pool: Vec<f64> = Vec::new();

    let kept = cfg.iterations - warmup;
    let mut draws = Vec::with_capacity(kept);
    let mut stats = ChainStats {
        step_size: Vec::with_capacity(kept),
        n_leapfrog: Vec::with_capacity(kept),
        accept_stat: Vec::with_capacity(kept),
        divergent: Vec::with_capacity(kept),
        adapted_step_size: eps0,
    };

    let mut next_window = 0usize;
    for it in 0..cfg.iterations {
        let in_warmup = it < warmup;
        if in_warmup {
            if let Some(w) = &windows {
                if next_window < w.ends.len() && it == w.ends[next_window] {
                    if let Some(var) = welford.regularized() {
                        inv_mass = var;
                        // restart adaptation anchored at the current step
                        // size so each window only absorbs the metric change
                        da = DualAverage::new(da.current(), cfg.target_accept);
                    }
                    welford.reset();
                    next_window += 1;
                }
            }
        }
        let eps = if in_warmup {
            da.current()
        } else if eps_pool.is_empty() {
            eps_fixed
        } else {
            eps_pool[rng.gen_range(0..eps_pool.len())]
        };
        let n_steps = rng.gen_range(1..=l_cap);
        let p0 = sample_momentum(&mut rng, &inv_mass);
        let h0 = hamiltonian(value, &p0, &inv_mass);

        let mut th = theta.clone();
        let mut p = p0;
        let mut g = grad.clone();
        let mut v = value;
        let hl = {
            let mut st = LeapfrogState {
                theta: &mut th,
                momentum: &mut p,
                grad: &mut g,
                value: &mut v,
            };
            let trace = leapfrog(model, &mut st, eps, n_steps, &inv_mass);
            *trace.last().expect("n_steps >= 1")
        };

        let divergent = !hl.is_finite() || (hl - h0).abs() > DIVERGENCE_THRESHOLD;
        let alpha = if hl.is_finite() {
            (h0 - hl).exp().min(1.0)
        } else {
            0.0
        };
        let accept = !divergent && rng.gen::<f64>() < alpha;
        if accept {
            theta = th;
            grad = g;
            value = v;
        }

        if in_warmup {
            da.update(alpha);
            if let Some(w) = &windows {
                if it >= w.init_end && it < w.term_start {
                    welford.push(&theta);
                }
                // pool from the settled second half of the terminal buffer
                if it >= w.term_start + (warmup - w.term_start) / 2 {
                    final_log_eps.push(da.current().ln());
                }
            } else if it >= 4 * warmup / 5 {
                final_log_eps.push(da.current().ln());
            }
            if it + 1 == warmup {
                eps_fixed = da.adapted();
                if !eps_fixed.is_finite() || eps_fixed <= 0.0 {
                    eps_fixed = da.current().max(1e-8);
                }
                stats.adapted_step_size = eps_fixed;
                if final_log_eps.len() >= 10 {
                    eps_pool = final_log_eps.iter().map(|x| x.exp()).collect();
                }
            }
        } else {
            draws.push(theta.clone());
            stats.step_size.push(eps);
            stats.n_leapfrog.push(n_steps as u32);
            stats.accept_stat.push(alpha);
            stats.divergent.push(divergent);
        }
    }

    Ok(ChainDraws { draws, stats })
}

/// Run all chains. Chains execute in parallel but are seeded per
/// (seed, chain), so the result is deterministic regardless of
/// scheduling. `scope` prefixes the seed purpose (used by the simulation
/// harness to give each replicate an independent stream family).
pub fn hmc_sample_scoped<M: LogDensityModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    scope: &str,
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let dim = model.dim();
    if dim == 0 {
        return Err(Error::Config("model has no free parameters".into()));
    }
    // Shared across chains: the data-informed point, pushed to the
    // high-density region by a deterministic gradient ascent.
    let start = model.initial_point().map(|mut p| {
        map_ascent(model, &mut p, 60);
        p
    });
    let chains: Vec<Result<ChainDraws>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(model, cfg, scope, c, start.as_deref()))
        .collect();
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = PosteriorDraws {
        dim,
        chains,
        warnings: Vec::new(),
    };
    let dr = out.divergence_rate();
    if dr > 0.20 {
        out.warnings.push(format!(
            "post-warmup divergence rate {:.1}% exceeds 20%; results are unreliable \
             (consider a higher target_accept)",
            100.0 * dr
        ));
    }
    Ok(out)
}

pub fn hmc_sample<M: LogDensityModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws> {
    hmc_sample_scoped(model, cfg, "")
}

/// A fitted joint model: the model, its raw draws, and derived
/// constrained-space quantities with convergence summaries.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: JointModel,
    pub draws: PosteriorDraws,
    pub global_names: Vec<String>,
    /// chain -> draw -> one value per global name.
    pub global_draws: Vec<Vec<Vec<f64>>>,
    pub summaries: Vec<ParamSummary>,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Constrained parameters for one stored draw.
    pub fn params_at(&self, chain: usize, draw: usize) -> ParamVector {
        self.model
            .layout
            .constrain(&self.draws.chains[chain].draws[draw])
    }

    /// Kept draws across all chains.
    pub fn total_draws(&self) -> usize {
        self.draws.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// Constrained parameters for a chain-major flat draw index.
    pub fn params_at_flat(&self, k: usize) -> ParamVector {
        let mut idx = k;
        for c in &self.draws.chains {
            if idx < c.draws.len() {
                return self.model.layout.constrain(&c.draws[idx]);
            }
            idx -= c.draws.len();
        }
        panic!("draw index {k} out of range");
    }

    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }
}

/// Parameters the outcome submodel reports; R-hat warnings key off these.
fn is_outcome_param(name: &str) -> bool {
    name.starts_with("beta_") || name == "sigma" || name.starts_with("tau_a")
}

pub fn run_model(
    dataset: &LongitudinalDataset,
    spec: &ModelSpec,
    priors: &PriorConfig,
    cfg: &SamplerConfig,
) -> Result<FitResult> {
    run_model_scoped(dataset, spec, priors, cfg, "")
}

pub fn run_model_scoped(
    dataset: &LongitudinalDataset,
    spec: &ModelSpec,
    priors: &PriorConfig,
    cfg: &SamplerConfig,
    scope: &str,
) -> Result<FitResult> {
    dataset.check_fit_schema()?;
    let model = JointModel::new(dataset, spec.clone(), priors.clone())?;
    let draws = hmc_sample_scoped(&model, cfg, scope)?;

    let global_names = model.layout.global_names();
    let global_draws: Vec<Vec<Vec<f64>>> = draws
        .chains
        .par_iter()
        .map(|c| {
            c.draws
                .iter()
                .map(|theta| model.layout.global_values(&model.layout.constrain(theta)))
                .collect()
        })
        .collect();

    let summaries = summarize_all(&global_names, &global_draws)?;
    let mut warnings = draws.warnings.clone();
    let bad: Vec<&ParamSummary> = summaries
        .iter()
        .filter(|s| is_outcome_param(&s.name) && !(s.rhat < 1.05))
        .collect();
    if !bad.is_empty() {
        let worst = bad
            .iter()
            .map(|s| format!("{} (R-hat {:.3})", s.name, s.rhat))
            .collect::<Vec<_>>()
            .join(", ");
        warnings.push(format!(
            "convergence: R-hat exceeds 1.05 on outcome parameters: {worst}"
        ));
    }

    Ok(FitResult {
        model,
        draws,
        global_names,
        global_draws,
        summaries,
        warnings,
    })
}
