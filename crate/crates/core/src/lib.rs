//! Calibrated alignment for CATE estimation when a randomized trial and an
//! observational study measure different covariates.

pub mod alignment;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linmod;
pub mod neural;
pub mod rng;
pub mod verify;

pub use data::{
    make_folds, shared_block, standardize, Arm, CovariateLayout, Dataset, FoldAssignment,
    PropensityModel, ScalerParams, Source,
};
pub use error::{CalmError, Result};
