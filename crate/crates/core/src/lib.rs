//! Combining individual-participant data (IPD) and aggregate data (AD) in
//! one-way mixed models, and choosing which AD studies are worth upgrading to
//! IPD.
//!
//! * [`data`]: study types, validation and CSV ingestion.
//! * [`lmm`]: linear mixed model estimators and closed-form variances.
//! * [`select`]: the subset selection problem and its solvers.
//! * [`glmm`]: logistic mixed model aggregation with Laplace blocks.
//! * [`sim`]: seeded Monte Carlo experiments.

pub mod data;
pub mod error;
pub mod glmm;
pub mod lmm;
pub mod optim;
pub mod rng;
pub mod select;
pub mod sim;
#[cfg(test)]
mod testkit;

pub use data::{AdStudy, IpdStudy, OutcomeKind, Partition, Study, StudyCollection};
pub use error::{Error, ErrorCategory, Result};
pub use glmm::{
    GlmmCombined, GlmmOptions, GlmmStudyFit, LogisticSelectionTerms, RandomEffectCov, WeightMode,
};
pub use lmm::{ErrorVariance, LmmEstimate, VarianceComponents};
pub use select::{SelectionInstance, SelectionMethod, SelectionResult};
pub use sim::ScenarioConfig;
