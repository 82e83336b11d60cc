//! Covariance-based device activity detection for grant-free massive access.
//!
//! The crate provides scene generation ([`sysmodel`]), the shared
//! covariance linear algebra ([`covlinalg`]), activity and effective-pathloss
//! priors ([`priors`]), the PSCA detectors ([`estimators`]), BCD and
//! projected-gradient baselines ([`baselines`]), unrolled detectors with
//! tuned step sizes ([`unroll`]) and an experiment harness ([`harness`]).

pub mod baselines;
pub mod covlinalg;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod priors;
pub mod sysmodel;
pub mod unroll;

pub use covlinalg::CovState;
pub use error::{Error, Result};
pub use estimators::{DetectorTrace, ProblemKind, RunOptions, StepSchedule};
pub use priors::{ActivityPrior, EffPathlossPrior, IndependentPrior, PairwiseMvbPrior};
pub use sysmodel::{ActivityModel, CMat, Sample, SystemConfig};
