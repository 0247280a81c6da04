pub mod comparators;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod ppc;
pub mod preprocess;
pub mod sampler;
pub mod seeding;
pub mod simstudy;
