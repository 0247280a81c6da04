//! Two-stage alternative methods: an in-house linear mixed model fitter,
//! the frequentist two-stage TSLMM, and the Bayesian two-stage TSLO.

pub mod lmm;
pub mod tslmm;
pub mod tslo;

pub use lmm::{lmm_fit, lmm_marginal_loglik, LmmFit};
pub use tslmm::{tslmm, TslmmFit, TslmmOptions, Z_95};
pub use tslo::{tslo, tslo_scoped, TsloFit};
