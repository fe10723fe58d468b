//! D-optimal Bayesian approximate crossover designs for marginal GLMs fitted
//! by generalized estimating equations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod correlation;
pub mod error;
pub mod gee_fit;
pub mod gee_variance;
pub mod io;
pub mod linalg;
pub mod model_core;
pub mod optimizer;
pub mod priors;
pub mod sim_data;

pub use correlation::{working_correlation, CorrelationKind, Structure};
pub use error::{Error, Result};
pub use gee_fit::{fit, FitResult, SubjectRecord, TrialDataset};
pub use gee_variance::{ApproxDesign, ContrastExtractor, DesignModel};
pub use model_core::{
    build_design_matrix, enumerate_sequences, mean_response, mu_eta_derivative, parse_sequences,
    variance_function, CrossoverLayout, Family, Link, ModelSpec, ParamLayout, TreatmentSequence,
};
pub use priors::{
    bayes_objective, d_efficiency, lhs_sample, prior_from_ci_table, EfficiencyReport, PriorKind,
    PriorSample, PriorSpec,
};
pub use optimizer::{
    optimality_gap, optimize_weights, weight_sweep, OptimizationResult, OptimizerConfig, SweepRow,
};
pub use sim_data::{empirical_variance_check, simulate_trial, SimConfig, VarianceReport};
pub use catalog::{generate_catalog, CatalogKind, NamedDesign};
