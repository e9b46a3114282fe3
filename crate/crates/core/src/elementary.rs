//! The elementary survival model fitted on engineered features: either a
//! ridge Cox regression or a shallow survival tree.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::cox::{self, CoxModel};
use crate::error::{Error, Result};
use crate::tree::{self, SurvivalTree, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elementary {
    Cox,
    Tree,
}

impl fmt::Display for Elementary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Elementary::Cox => "cox",
            Elementary::Tree => "tree",
        })
    }
}

impl FromStr for Elementary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cox" => Ok(Elementary::Cox),
            "tree" => Ok(Elementary::Tree),
            other => Err(Error::Config(format!("unknown elementary model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementaryParams {
    pub ridge_alpha: f64,
    pub tree: TreeParams,
}

impl Default for ElementaryParams {
    fn default() -> Self {
        Self {
            ridge_alpha: 1.0,
            tree: TreeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedModel {
    Cox(CoxModel),
    Tree(SurvivalTree),
}

impl FittedModel {
    pub fn fit(
        kind: Elementary,
        params: &ElementaryParams,
        x: ArrayView2<'_, f64>,
        times: &[f64],
        events: &[bool],
    ) -> Result<Self> {
        Ok(match kind {
            Elementary::Cox => FittedModel::Cox(cox::fit_cox(x, times, events, params.ridge_alpha)?),
            Elementary::Tree => {
                FittedModel::Tree(tree::fit_survival_tree(x, times, events, params.tree)?)
            }
        })
    }

    pub fn kind(&self) -> Elementary {
        match self {
            FittedModel::Cox(_) => Elementary::Cox,
            FittedModel::Tree(_) => Elementary::Tree,
        }
    }

    /// Per-row risk; larger means worse prognosis.
    pub fn risk(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            FittedModel::Cox(m) => m.prognostic_index(x),
            FittedModel::Tree(t) => t.predict(x),
        }
    }
}
