//! Nesterov dual averaging of the log step size toward a target
//! acceptance statistic.

/// Step-size adaptation state. `current` is the step size to use for the
/// next trajectory; `adapted` is the smoothed value to freeze after warmup.
#[derive(Debug, Clone)]
pub struct DualAverage {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    target: f64,
}

impl DualAverage {
    pub fn new(eps0: f64, target: f64) -> Self {
        DualAverage {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            target,
        }
    }

    /// Step size for the upcoming trajectory.
    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Smoothed step size to use once adaptation stops.
    pub fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }

    /// Feed one acceptance statistic (clamped to [0, 1]; non-finite counts
    /// as zero).
    pub fn update(&mut self, accept_stat: f64) {
        let a = if accept_stat.is_finite() {
            accept_stat.clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.m += 1.0;
        let eta = 1.0 / (self.m + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - a);
        self.log_eps = self.mu - self.m.sqrt() / self.gamma * self.h_bar;
        let w = self.m.powf(-self.kappa);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }
}
