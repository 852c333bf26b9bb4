//! Continuous-time variational Kalman filtering.
//!
//! Gaussian beliefs are propagated through Langevin dynamics by a proximal
//! Bures-Wasserstein step and conditioned on continuous observations by a
//! KL-proximal update. Both halves reduce to the Kalman-Bucy filter on
//! linear-Gaussian models.

pub mod error;
pub mod expectation;
pub mod filter;
pub mod gaussian;
pub mod models;
pub mod propagation;
pub mod simulation;
pub mod solver;
pub mod update;

pub use error::{Error, Result};
pub use expectation::ExpectationMethod;
pub use filter::{run_filter, BeliefTrajectory, FilterKind, FilterModels};
pub use gaussian::{GaussianBelief, GaussianParamVector};
pub use models::{LinearModelPair, ObservationModel, PotentialModel};
pub use propagation::PropagationKind;
pub use simulation::{ObservationRecord, ParticleEnsemble, TruthTrace};
pub use solver::{FixedPointConfig, StepOutcome};
pub use update::UpdateForm;
