//! Outer repetitions, bootstrap confidence intervals, pre-selection and
//! external validation of archived models.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, FeatureSchema, SurvivalDataset};
use crate::elementary::{Elementary, ElementaryParams, FittedModel};
use crate::error::{Error, Result};
use crate::expr::FeatureSet;
use crate::rng;
use crate::search::{self, FitnessContext, GenerationStats, Objectives, ParetoArchive, SearchConfig};
use crate::stats;

/// Redraw limit for bootstrap resamples without a comparable pair.
const MAX_REDRAWS: usize = 1000;

const STREAM_REPETITION: u64 = 10;
const STREAM_SPLIT: u64 = 0;
const STREAM_SEARCH: u64 = 1;
const STREAM_BOOTSTRAP: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub mean: f64,
    pub upper: f64,
    pub n_bootstrap: usize,
}

impl ConfidenceInterval {
    /// Percentile interval (2.5 / 97.5) around the sample mean.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("no bootstrap values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let lower = stats::quantile_sorted(&sorted, 0.025).min(mean);
        let upper = stats::quantile_sorted(&sorted, 0.975).max(mean);
        Ok(Self {
            lower,
            mean,
            upper,
            n_bootstrap: values.len(),
        })
    }

    /// Strictly disjoint intervals in the better direction.
    pub fn outperforms(&self, other: &ConfidenceInterval) -> bool {
        self.lower > other.upper
    }
}

/// One bootstrap replicate: resampled training rows and resampled
/// validation rows, both as indices into the full dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resample {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

fn has_comparable_pair(times: &[f64], events: &[bool], idx: &[usize]) -> bool {
    let Some(min_event) = idx
        .iter()
        .filter(|&&i| events[i])
        .map(|&i| times[i])
        .min_by(f64::total_cmp)
    else {
        return false;
    };
    idx.iter().any(|&i| times[i] > min_event)
}

/// Event-stratified bootstrap replicates of a train/validation partition.
/// Replicates whose validation part has no comparable pair are redrawn.
pub fn bootstrap_plan(
    times: &[f64],
    events: &[bool],
    train: &[usize],
    validation: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<Resample>> {
    if !validation.iter().any(|&i| events[i]) {
        return Err(Error::NoEvents);
    }
    if !has_comparable_pair(times, events, validation) {
        return Err(Error::NoComparablePairs);
    }
    (0..n as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, &[b]);
            for _ in 0..MAX_REDRAWS {
                let train = dataset::stratified_resample(train, events, &mut rng);
                let validation = dataset::stratified_resample(validation, events, &mut rng);
                if has_comparable_pair(times, events, &validation) {
                    return Ok(Resample { train, validation });
                }
            }
            Err(Error::NoComparablePairs)
        })
        .collect()
}

fn engineered(fs: &FeatureSet, ds: &SurvivalDataset) -> Result<Array2<f64>> {
    let features = fs.transform(ds.rows().view())?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "feature set evaluates to non-finite values".into(),
        ));
    }
    Ok(features)
}

fn pick(ds: &SurvivalDataset, idx: &[usize]) -> (Vec<f64>, Vec<bool>) {
    (
        idx.iter().map(|&i| ds.times()[i]).collect(),
        idx.iter().map(|&i| ds.events()[i]).collect(),
    )
}

/// Refit the elementary model on every replicate's training rows and score
/// it on the replicate's validation rows.
pub fn bootstrap_ci_with_plan(
    fs: &FeatureSet,
    elementary: Elementary,
    params: &ElementaryParams,
    ds: &SurvivalDataset,
    plan: &[Resample],
) -> Result<ConfidenceInterval> {
    let features = engineered(fs, ds)?;
    let values = plan
        .par_iter()
        .map(|r| {
            let (tt, te) = pick(ds, &r.train);
            let model = FittedModel::fit(elementary, params, features.select(Axis(0), &r.train).view(), &tt, &te)?;
            let (vt, ve) = pick(ds, &r.validation);
            stats::concordance_index(&model.risk(features.select(Axis(0), &r.validation).view())?, &vt, &ve)
        })
        .collect::<Result<Vec<f64>>>()?;
    ConfidenceInterval::from_samples(&values)
}

#[allow(clippy::too_many_arguments)]
pub fn bootstrap_ci(
    fs: &FeatureSet,
    elementary: Elementary,
    params: &ElementaryParams,
    ds: &SurvivalDataset,
    train: &[usize],
    validation: &[usize],
    n: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    let plan = bootstrap_plan(ds.times(), ds.events(), train, validation, n, seed)?;
    bootstrap_ci_with_plan(fs, elementary, params, ds, &plan)
}

/// Bootstrap CI of the C-index of fixed risk scores.
pub fn bootstrap_cindex(
    risks: &[f64],
    times: &[f64],
    events: &[bool],
    n: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    let all: Vec<usize> = (0..times.len()).collect();
    let plan = bootstrap_plan(times, events, &[], &all, n, seed)?;
    let values = plan
        .par_iter()
        .map(|r| {
            let sel = |v: &[f64]| r.validation.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let e: Vec<bool> = r.validation.iter().map(|&i| events[i]).collect();
            stats::concordance_index(&sel(risks), &sel(times), &e)
        })
        .collect::<Result<Vec<f64>>>()?;
    ConfidenceInterval::from_samples(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub feature_set: FeatureSet,
    pub elementary: Elementary,
    /// Fitted on the repetition's internal-training rows.
    pub fitted: FittedModel,
    pub objectives: Objectives,
    pub repetition_id: usize,
    pub seed: u64,
    pub internal_ci: ConfidenceInterval,
    pub external_ci: Option<ConfidenceInterval>,
}

impl CandidateModel {
    pub fn risk(&self, ds: &SurvivalDataset) -> Result<Vec<f64>> {
        self.fitted.risk(engineered(&self.feature_set, ds)?.view())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub repetition_id: usize,
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub archive: ParetoArchive,
    /// Archive members with fitted parameters and internal CIs, in the
    /// archive's sorted order.
    pub candidates: Vec<CandidateModel>,
    /// The elementary model on the original covariates.
    pub baseline: CandidateModel,
    pub history: Vec<GenerationStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub reps: usize,
    pub train_fraction: f64,
    pub bootstrap_n: usize,
    pub search: SearchConfig,
    pub params: ElementaryParams,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            reps: 30,
            train_fraction: 0.75,
            bootstrap_n: 1000,
            search: SearchConfig::default(),
            params: ElementaryParams::default(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn candidate(
    fs: FeatureSet,
    objectives: Objectives,
    elementary: Elementary,
    config: &SelectionConfig,
    internal: &SurvivalDataset,
    train: &SurvivalDataset,
    plan: &[Resample],
    repetition_id: usize,
    seed: u64,
) -> Result<CandidateModel> {
    let fitted = FittedModel::fit(
        elementary,
        &config.params,
        engineered(&fs, train)?.view(),
        train.times(),
        train.events(),
    )?;
    let internal_ci = bootstrap_ci_with_plan(&fs, elementary, &config.params, internal, plan)?;
    Ok(CandidateModel {
        feature_set: fs,
        elementary,
        fitted,
        objectives,
        repetition_id,
        seed,
        internal_ci,
        external_ci: None,
    })
}

/// One repetition: split, search, then fit and bootstrap every archived
/// model and the raw-covariate baseline on the same replicates.
pub fn run_repetition(
    internal: &SurvivalDataset,
    elementary: Elementary,
    config: &SelectionConfig,
    seed: u64,
    repetition_id: usize,
) -> Result<RunResult> {
    let rep_seed = rng::derive_seed(seed, &[STREAM_REPETITION, repetition_id as u64]);
    let (train_indices, validation_indices) = dataset::stratified_split_indices(
        internal.events(),
        config.train_fraction,
        rng::derive_seed(rep_seed, &[STREAM_SPLIT]),
    )?;
    let train = internal.subset(&train_indices)?;
    let search_seed = rng::derive_seed(rep_seed, &[STREAM_SEARCH]);
    let result = search::evolve(&train, elementary, config.params, &config.search, search_seed)?;
    let plan = bootstrap_plan(
        internal.times(),
        internal.events(),
        &train_indices,
        &validation_indices,
        config.bootstrap_n,
        rng::derive_seed(rep_seed, &[STREAM_BOOTSTRAP]),
    )?;

    let identity = FeatureSet::identity(internal.schema().len());
    let ctx = FitnessContext::new(
        &train,
        config.search.fitness_splits,
        config.search.fitness_train_fraction,
        elementary,
        config.params,
        search_seed,
    )?;
    let baseline_objectives = ctx.evaluate_uncached(&identity);
    let baseline = candidate(
        identity,
        baseline_objectives,
        elementary,
        config,
        internal,
        &train,
        &plan,
        repetition_id,
        rep_seed,
    )?;
    let candidates = result
        .archive
        .sorted()
        .into_iter()
        .map(|e| {
            candidate(
                e.feature_set.clone(),
                e.objectives,
                elementary,
                config,
                internal,
                &train,
                &plan,
                repetition_id,
                rep_seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunResult {
        repetition_id,
        seed: rep_seed,
        train_indices,
        validation_indices,
        archive: result.archive,
        candidates,
        baseline,
        history: result.history,
    })
}

pub fn run_repetitions(
    internal: &SurvivalDataset,
    elementary: Elementary,
    config: &SelectionConfig,
    seed: u64,
) -> Result<Vec<RunResult>> {
    (0..config.reps)
        .map(|r| run_repetition(internal, elementary, config, seed, r))
        .collect()
}

/// Keep every model not outperformed, within its own repetition, by another
/// model or by the baseline.
pub fn preselect(results: &[RunResult]) -> Vec<CandidateModel> {
    let mut kept = Vec::new();
    for run in results {
        for (i, m) in run.candidates.iter().enumerate() {
            let beaten = run.baseline.internal_ci.outperforms(&m.internal_ci)
                || run
                    .candidates
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != i && o.internal_ci.outperforms(&m.internal_ci));
            if !beaten {
                kept.push(m.clone());
            }
        }
    }
    kept
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(default)]
    pub min_cindex: Option<f64>,
    #[serde(default)]
    pub required_covariates: Vec<String>,
    #[serde(default)]
    pub forbidden_covariates: Vec<String>,
}

impl Constraints {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        for name in self.required_covariates.iter().chain(&self.forbidden_covariates) {
            if schema.index_of(name).is_none() {
                return Err(Error::Config(format!("constraint names unknown covariate `{name}`")));
            }
        }
        Ok(())
    }

    pub fn admits(&self, model: &CandidateModel, schema: &FeatureSchema) -> bool {
        let vars = model.feature_set.variables();
        let mentions = |name: &String| schema.index_of(name).is_some_and(|j| vars.contains(&j));
        self.min_cindex.is_none_or(|m| model.internal_ci.mean >= m)
            && self.required_covariates.iter().all(mentions)
            && !self.forbidden_covariates.iter().any(mentions)
    }
}

pub fn apply_constraints(
    models: Vec<CandidateModel>,
    constraints: &Constraints,
    schema: &FeatureSchema,
) -> Vec<CandidateModel> {
    models.into_iter().filter(|m| constraints.admits(m, schema)).collect()
}

/// Bootstrap CI of a frozen model's C-index on the external set.
pub fn external_validate(
    model: &CandidateModel,
    external: &SurvivalDataset,
    n: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    let risks = model.risk(external)?;
    bootstrap_cindex(&risks, external.times(), external.events(), n, seed)
}

/// Indices of covariates referenced by any of the models.
pub fn referenced_covariates(models: &[CandidateModel]) -> BTreeSet<usize> {
    models.iter().flat_map(|m| m.feature_set.variables()).collect()
}
