//! A desk-scale laboratory for privacy-preserving model explanations:
//! local-differential-privacy randomization of feature attributions, the
//! explanation-guided backdoor attack it defends against, and certified
//! robustness bounds for the defended pipeline.

pub mod attack;
pub mod certify;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod explainer;
pub mod mechanism;
pub mod model;
pub mod rng;
pub mod service;
pub mod solver;

pub use error::{Error, Result};
