//! Joint prototype selection across paired teacher/student feature spaces and
//! the projection-based distillation losses built on top of it.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod feature_model;
pub mod io;
pub mod pgm;
pub mod rdm;
pub mod sim;
pub mod vecops;

pub use error::{Error, Result};
pub use feature_model::{
    validate, FeatureRecord, GroupKey, Hyperparams, PairedFeatureSet, ValidationReport,
};
pub use pgm::{generate_all_groups, generate_prototypes, PrototypeSet};
pub use rdm::{AdaptationMap, LossBreakdown, ProjectionMode, ProjectionPair};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
