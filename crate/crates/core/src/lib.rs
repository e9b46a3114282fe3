//! Interpretable-by-design survival analysis.
//!
//! The crate engineers small sets of symbolic features with a multi-objective
//! genetic-programming search, fits elementary survival models (ridge Cox
//! regression or shallow log-rank survival trees) on them, keeps the models
//! whose bootstrap confidence intervals are not outperformed, and turns each
//! surviving model into a patient stratification flowchart with
//! Kaplan–Meier curves.
//!
//! Module map:
//!
//! - [`dataset`]: CSV ingestion, stratified splits and bootstrap resampling
//! - [`stats`]: Kaplan–Meier, log-rank, Harrell's C-index, interquartile mean
//! - [`cox`]: ridge-penalised Cox regression with Breslow ties
//! - [`tree`]: depth-limited log-rank survival trees
//! - [`expr`]: expression trees, evaluation, rendering and the infix parser
//! - [`search`]: fitness, Pareto archive, hypervolume and the GOM search loop
//! - [`selection`]: repetitions, bootstrap CIs, pre-selection and constraints
//! - [`insights`]: covariate importance and sub-expression frequencies
//! - [`stratify`]: patient groups, log-rank merging, rule extraction
//! - [`pipeline`]: configuration, orchestration and artifact export

pub mod cox;
pub mod dataset;
pub mod elementary;
pub mod error;
pub mod expr;
pub mod insights;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod selection;
pub mod stats;
pub mod stratify;
pub mod tree;

pub use dataset::{FeatureKind, FeatureSchema, SurvivalDataset};
pub use error::{Error, Result};
pub use expr::{Expr, FeatureSet};
pub use stats::SurvivalCurve;
