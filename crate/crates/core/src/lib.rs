//! Covariate-adjusted bounds on the probability that an individual
//! treatment effect does not exceed a threshold, `P(Y(1) - Y(0) <= delta)`,
//! in randomized experiments.

pub mod cond_cdf;
pub mod cross_fit;
pub mod ecdf;
pub mod error;
pub mod finite_sample;
pub mod model;
pub mod normal;
pub mod rng;
pub mod sim;

pub use cond_cdf::{GridSpec, ModelFactory, ModelSpec};
pub use cross_fit::{
    estimate_crossfit, one_sided_cis, stoye_ci, AdjusterPlan, BoundsEstimate, CrossFit, HRule, Learner,
    StoyeInterval,
};
pub use ecdf::{makarov_bounds, DeltaCurve};
pub use error::{Error, Result};
pub use finite_sample::{estimate_split, SplitEstimate, SplitPlan};
pub use model::{make_folds, Adjuster, FoldPlan, Propensity, Sample};
