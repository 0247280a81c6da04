//! Joint model: marker submodel, individual-variance prior, outcome
//! submodel, hyperpriors, and the unconstrained log-density with analytic
//! gradient.

pub mod config;
pub mod density;
pub mod init;
pub mod outcome_only;
pub mod params;

pub use config::{
    poly_basis, MarkerSpec, ModelSpec, OutcomeSpec, PriorConfig, RandomEffects, TermKind,
    VarianceMode,
};
pub use density::{JointModel, LogDensityParts, ModelData};
pub use outcome_only::OutcomeOnlyModel;
pub use params::{corr_chol_from_z, corr_free, z_from_corr_chol, ParamLayout, ParamVector};

/// Target interface the sampler runs against: unconstrained log-density with
/// gradient. A non-finite return value marks the point as invalid; the
/// sampler rejects the trajectory.
pub trait LogDensityModel: Sync {
    fn dim(&self) -> usize;
    /// Writes d(logdensity)/d(theta) into `grad` and returns the value.
    fn logdensity_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;
    /// Coordinates holding hierarchy scales; initialized at 0 instead of
    /// uniform(-r, r) to avoid funnel starts.
    fn scale_coords(&self) -> Vec<usize> {
        Vec::new()
    }
    /// Deterministic data-informed starting point; chains jitter around it.
    /// None falls back to random initialization in the uniform box.
    fn initial_point(&self) -> Option<Vec<f64>> {
        None
    }
}
