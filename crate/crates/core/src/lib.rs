//! Variable selection for main and two-way interaction effects in random
//! effects meta-regression.
//!
//! Linear procedures (univariate and forward testing, forward AICc / BIC)
//! live in [`linear_select`]; meta-CART trees and their stability-selected
//! bootstrap ensembles in [`metacart`] and [`ensemble`]. The [`sim`] module
//! scores all of them on plasmode replicates.

pub mod data;
pub mod dist;
pub mod ensemble;
pub mod error;
pub mod estimation;
pub mod linear_select;
pub mod metacart;
pub mod report;
pub mod seed;
pub mod sim;

pub use data::{
    build_design, count_admissible_models, load_dataset, standardize, CovariateMeta, DesignMatrix,
    MetaDataset, ModelSpec, Scale, Schema, StudyRecord,
};
pub use error::{Error, ErrorClass, Result};
pub use estimation::{fit, wald_pvalue, FitOptions, FitResult, Tau2Method};
