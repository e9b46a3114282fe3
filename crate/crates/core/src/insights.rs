//! Covariate importance and sub-expression frequencies over a model set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSchema;
use crate::error::{Error, Result};
use crate::expr::FeatureSet;
use crate::selection::CandidateModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateImportance {
    pub name: String,
    /// Number of models referencing the covariate at least once.
    pub models: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubexpressionCount {
    pub expression: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub n_models: usize,
    /// In schema order.
    pub covariates: Vec<CovariateImportance>,
    /// By decreasing count, then expression text.
    pub subexpressions: Vec<SubexpressionCount>,
}

pub fn feature_importance(models: &[CandidateModel], schema: &FeatureSchema) -> Result<ImportanceReport> {
    let sets: Vec<&FeatureSet> = models.iter().map(|m| &m.feature_set).collect();
    importance_of(&sets, schema)
}

pub fn importance_of(sets: &[&FeatureSet], schema: &FeatureSchema) -> Result<ImportanceReport> {
    if sets.is_empty() {
        return Err(Error::InvalidInput("importance needs at least one model".into()));
    }
    let mut referenced = vec![0usize; schema.len()];
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for fs in sets {
        for j in fs.variables() {
            referenced[j] += 1;
        }
        for f in &fs.features {
            for s in f.subexpressions(schema) {
                *counts.entry(s).or_default() += 1;
            }
        }
    }
    let n = sets.len();
    let covariates = schema
        .names()
        .zip(referenced)
        .map(|(name, models)| CovariateImportance {
            name: name.to_string(),
            models,
            fraction: models as f64 / n as f64,
        })
        .collect();
    let mut subexpressions: Vec<SubexpressionCount> = counts
        .into_iter()
        .map(|(expression, count)| SubexpressionCount { expression, count })
        .collect();
    subexpressions.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.expression.cmp(&b.expression)));
    Ok(ImportanceReport {
        n_models: n,
        covariates,
        subexpressions,
    })
}
