//! Offline evaluation and optimization for finite-horizon MDPs whose action-value
//! functions are linear in known features, built around skipping modifications
//! of the Bellman operators.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the scalar to `f64`, which is what the CLI uses.
//!
//! Stages are 0-based in code: stage `0` holds the start state and stage
//! `horizon` holds the terminal state. File formats use 1-based stage keys.

pub mod error;
pub mod features;
pub mod io;
pub mod learners;
pub mod linalg;
pub mod mdp;
pub mod regression;
pub mod scalar;
pub mod skipping;

pub use error::{Error, Result};
pub use scalar::Real;

pub type StagedMdpF64 = mdp::StagedMdp<f64>;
pub type PolicyF64 = mdp::Policy<f64>;
pub type DatasetF64 = mdp::Dataset<f64>;
pub type FeatureMapF64 = features::FeatureMap<f64>;
pub type ModificationF64 = skipping::Modification<f64>;
pub type SkipWeightsF64 = skipping::SkipWeights<f64>;
pub type ConfidenceSetF64 = regression::ConfidenceSet<f64>;
pub type ConstantsF64 = regression::Constants<f64>;
pub type LearnerDataF64 = learners::LearnerData<f64>;
pub type LearnerConfigF64 = learners::LearnerConfig<f64>;
pub type CandidateFamilyF64 = learners::CandidateFamily<f64>;
