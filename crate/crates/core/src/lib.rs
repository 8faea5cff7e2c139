//! Two-stage lesion classification for multi-parametric prostate MRI.
//!
//! Volumes are unified onto one grid and standardized ([`preprocess`]),
//! co-centered patches are cut at four sizes ([`patchgen`]), one 3D
//! DenseNet per patch size and channel family is trained with focal loss
//! under k-fold cross-validation ([`densenet`], [`loss`], [`trainer`]), and
//! a small meta network stacks the frozen streams ([`ensemble`]).
//! [`phantom`] generates synthetic cohorts so the whole chain runs without
//! clinical data; [`pipeline`] wires the stages together.

pub mod densenet;
pub mod ensemble;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod patchgen;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod seed;
pub mod trainer;
pub mod volstore;

pub use error::{Error, Result};
