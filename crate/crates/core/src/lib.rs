//! Finite-width multi-head attention at random initialization and its
//! infinite-width hierarchical Gaussian limit.
//!
//! * [`netsor`] builds programs of `MatMul` and coordinatewise `Nonlin` nodes and
//!   samples them at finite width.
//! * [`attention`] draws scores, softmax weights and output coordinates of a
//!   multi-head attention layer over clipped random inputs.
//! * [`limitlaw`] computes the limiting covariance blocks and samples the
//!   limit law exactly.
//! * [`stats`] compares batches of draws (KDE, KL, KS, moments).
//!
//! All sampling is counter-addressed through [`rng`], so results depend only
//! on seeds and never on thread count.

pub mod attention;
pub mod limitlaw;
pub mod linalg;
pub mod netsor;
pub mod nonlin;
pub mod rng;
pub mod stats;

pub use attention::{AttentionConfig, Coordinate, ScalingRule, ScoreIndex};
pub use limitlaw::{build_limit_spec, LimitLawSpec};
pub use stats::{ComparisonReport, SampleSet};
