//! Multi-feature, multi-objective symbolic feature search.
//!
//! Each individual carries up to three fixed-shape template trees (perfect
//! binary trees of depth 4, so at most 15 expressed nodes per feature).
//! Variation is gene-pool optimal mixing over subtree linkage sets: for every
//! template subtree, in random order, the genes of that subtree are copied
//! from a random donor and the change is kept if the offspring is not
//! dominated by its pre-mixing self or would enter the elitist archive.

use std::collections::BTreeSet;

use dashmap::DashMap;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, FeatureSchema, SurvivalDataset};
use crate::elementary::{Elementary, ElementaryParams, FittedModel};
use crate::error::{Error, Result};
use crate::expr::{Expr, FeatureSet, Op, MAX_FEATURES, MAX_NODES_PER_FEATURE};
use crate::rng::{self, Rng};
use crate::stats;

/// Worst loss and worst complexity bounding the hypervolume.
pub const HV_REFERENCE: (f64, f64) = (1.0, (MAX_FEATURES * MAX_NODES_PER_FEATURE + 1) as f64);

const TEMPLATE_DEPTH: usize = 4;
const TEMPLATE_SIZE: usize = (1 << TEMPLATE_DEPTH) - 1;
const FIRST_LEAF: usize = TEMPLATE_SIZE / 2;

const STREAM_SPLITS: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_GOM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    /// Interquartile-mean C-index, maximised.
    pub performance: f64,
    /// Total node count, minimised.
    pub complexity: usize,
    pub valid: bool,
}

impl Objectives {
    pub fn invalid(complexity: usize) -> Self {
        Self {
            performance: 0.0,
            complexity,
            valid: false,
        }
    }
}

/// Pareto dominance: at least as good in both objectives and strictly better
/// in one.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a.performance >= b.performance
        && a.complexity <= b.complexity
        && (a.performance > b.performance || a.complexity < b.complexity)
}

/// Area dominated by `points` with respect to `reference`, both given as
/// (loss, complexity) pairs to be minimised.
pub fn hypervolume_2d(points: &[(f64, f64)], reference: (f64, f64)) -> Result<f64> {
    if let Some(p) = points.iter().find(|p| p.0 > reference.0 || p.1 > reference.1) {
        return Err(Error::InvalidInput(format!(
            "point {p:?} does not dominate the reference {reference:?}"
        )));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    let mut best_loss = reference.0;
    let mut area = 0.0;
    for (loss, cx) in sorted {
        if loss < best_loss {
            area += (best_loss - loss) * (reference.1 - cx);
            best_loss = loss;
        }
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub feature_set: FeatureSet,
    pub objectives: Objectives,
    /// Canonical rendering used for duplicate detection.
    pub key: String,
}

/// Elitist archive of mutually non-dominated valid feature sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub entries: Vec<ArchiveEntry>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn would_enter(&self, objectives: &Objectives, key: &str) -> bool {
        objectives.valid
            && !self.entries.iter().any(|e| {
                dominates(&e.objectives, objectives) || (e.objectives == *objectives && e.key == key)
            })
    }

    /// Insert unless dominated or duplicated; evicts members the entry
    /// dominates. Returns whether the entry was added.
    pub fn insert(&mut self, entry: ArchiveEntry) -> bool {
        if !self.would_enter(&entry.objectives, &entry.key) {
            return false;
        }
        self.entries.retain(|e| !dominates(&entry.objectives, &e.objectives));
        self.entries.push(entry);
        true
    }

    pub fn is_mutually_non_dominated(&self) -> bool {
        self.entries.iter().enumerate().all(|(i, a)| {
            a.objectives.valid
                && self.entries.iter().enumerate().all(|(j, b)| {
                    i == j
                        || (!dominates(&a.objectives, &b.objectives)
                            && !(a.objectives == b.objectives && a.key == b.key))
                })
        })
    }

    pub fn hypervolume(&self) -> f64 {
        let points: Vec<(f64, f64)> = self
            .entries
            .iter()
            .map(|e| (1.0 - e.objectives.performance, e.objectives.complexity as f64))
            .collect();
        hypervolume_2d(&points, HV_REFERENCE).expect("archive members lie inside the reference box")
    }

    /// Entries ordered by complexity, then decreasing performance, then key.
    pub fn sorted(&self) -> Vec<&ArchiveEntry> {
        let mut v: Vec<&ArchiveEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| {
            a.objectives
                .complexity
                .cmp(&b.objectives.complexity)
                .then(b.objectives.performance.total_cmp(&a.objectives.performance))
                .then(a.key.cmp(&b.key))
        });
        v
    }
}

/// Shared fitness data: the training covariates and the fixed set of
/// event-stratified splits every individual is scored on.
pub struct FitnessContext {
    pub schema: FeatureSchema,
    x: Array2<f64>,
    times: Vec<f64>,
    events: Vec<bool>,
    pub splits: Vec<(Vec<usize>, Vec<usize>)>,
    pub elementary: Elementary,
    pub params: ElementaryParams,
    cache: DashMap<String, Objectives>,
}

impl FitnessContext {
    pub fn new(
        train: &SurvivalDataset,
        n_splits: usize,
        train_fraction: f64,
        elementary: Elementary,
        params: ElementaryParams,
        seed: u64,
    ) -> Result<Self> {
        if n_splits == 0 {
            return Err(Error::InvalidInput("need at least one fitness split".into()));
        }
        let splits = (0..n_splits as u64)
            .map(|s| {
                dataset::stratified_split_indices(
                    train.events(),
                    train_fraction,
                    rng::derive_seed(seed, &[STREAM_SPLITS, s]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema: train.schema().clone(),
            x: train.rows().clone(),
            times: train.times().to_vec(),
            events: train.events().to_vec(),
            splits,
            elementary,
            params,
            cache: DashMap::new(),
        })
    }

    /// Score a feature set; memoised on its canonical rendering.
    pub fn evaluate(&self, fs: &FeatureSet) -> Objectives {
        let key = fs.canonical_key(&self.schema);
        if let Some(hit) = self.cache.get(&key) {
            return *hit;
        }
        let obj = self.evaluate_uncached(fs);
        self.cache.insert(key, obj);
        obj
    }

    pub fn evaluate_uncached(&self, fs: &FeatureSet) -> Objectives {
        let complexity = fs.complexity();
        let Ok(features) = fs.transform(self.x.view()) else {
            return Objectives::invalid(complexity);
        };
        if features.iter().any(|v| !v.is_finite()) {
            return Objectives::invalid(complexity);
        }
        let mut scores = Vec::with_capacity(self.splits.len());
        for (train, test) in &self.splits {
            match self.split_score(&features, train, test) {
                Ok(c) => scores.push(c),
                Err(_) => return Objectives::invalid(complexity),
            }
        }
        let performance = if scores.len() >= 4 {
            stats::interquartile_mean(&scores).expect("at least four scores")
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        Objectives {
            performance,
            complexity,
            valid: true,
        }
    }

    fn split_score(&self, features: &Array2<f64>, train: &[usize], test: &[usize]) -> Result<f64> {
        let pick = |idx: &[usize]| {
            (
                features.select(Axis(0), idx),
                idx.iter().map(|&i| self.times[i]).collect::<Vec<_>>(),
                idx.iter().map(|&i| self.events[i]).collect::<Vec<_>>(),
            )
        };
        let (xtr, ttr, etr) = pick(train);
        let model = FittedModel::fit(self.elementary, &self.params, xtr.view(), &ttr, &etr)?;
        let (xte, tte, ete) = pick(test);
        stats::concordance_index(&model.risk(xte.view())?, &tte, &ete)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

/// Objectives of `fs` under the context's elementary model and splits.
pub fn fitness_evaluate(fs: &FeatureSet, ctx: &FitnessContext) -> Objectives {
    ctx.evaluate(fs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub max_generations: usize,
    /// Stop once the archive hypervolume is unchanged this many generations.
    pub stall_generations: usize,
    pub fitness_splits: usize,
    pub fitness_train_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 256,
            max_generations: 50,
            stall_generations: 5,
            fitness_splits: 25,
            fitness_train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Gene {
    /// Disables the feature when placed at a template root.
    Off,
    Op(Op),
    Var(usize),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct Genome {
    trees: [[Gene; TEMPLATE_SIZE]; MAX_FEATURES],
}

fn decode(tree: &[Gene; TEMPLATE_SIZE], p: usize) -> Expr {
    match tree[p] {
        Gene::Var(j) => Expr::Var(j),
        Gene::Const(c) => Expr::Const(c),
        Gene::Op(op) if op.arity() == 1 => Expr::unary(op, decode(tree, 2 * p + 1)),
        Gene::Op(op) => Expr::binary(op, decode(tree, 2 * p + 1), decode(tree, 2 * p + 2)),
        Gene::Off => unreachable!("Off only appears at template roots"),
    }
}

impl Genome {
    fn feature_set(&self) -> Option<FeatureSet> {
        let features: Vec<Expr> = self
            .trees
            .iter()
            .filter(|t| t[0] != Gene::Off)
            .map(|t| decode(t, 0))
            .collect();
        FeatureSet::new(features).ok()
    }
}

fn depth_of(p: usize) -> usize {
    (usize::BITS - (p + 1).leading_zeros() - 1) as usize
}

fn subtree_positions(root: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![root];
    while let Some(p) = stack.pop() {
        out.push(p);
        if p < FIRST_LEAF {
            stack.push(2 * p + 2);
            stack.push(2 * p + 1);
        }
    }
    out.sort_unstable();
    out
}

struct GeneSampler {
    n_vars: usize,
    const_range: (f64, f64),
}

impl GeneSampler {
    fn terminal(&self, rng: &mut Rng) -> Gene {
        if rng.random_range(0..=self.n_vars) == self.n_vars {
            let (lo, hi) = self.const_range;
            Gene::Const(if hi > lo { rng.random_range(lo..=hi) } else { lo })
        } else {
            Gene::Var(rng.random_range(0..self.n_vars))
        }
    }

    fn operator(&self, rng: &mut Rng) -> Gene {
        Gene::Op(Op::ALL[rng.random_range(0..Op::ALL.len())])
    }

    /// Fill a template: positions shallower than `target_depth` become
    /// operators (always under `full`, half the time under grow), the rest
    /// terminals. Unexpressed positions get random genes as raw material.
    fn tree(&self, target_depth: usize, full: bool, rng: &mut Rng) -> [Gene; TEMPLATE_SIZE] {
        let mut t = [Gene::Var(0); TEMPLATE_SIZE];
        for (p, gene) in t.iter_mut().enumerate() {
            let d = depth_of(p);
            *gene = if p >= FIRST_LEAF || d + 1 >= target_depth {
                self.terminal(rng)
            } else if full || rng.random_bool(0.5) {
                self.operator(rng)
            } else {
                self.terminal(rng)
            };
        }
        t
    }
}

#[derive(Debug, Clone)]
struct Individual {
    genome: Genome,
    feature_set: Option<FeatureSet>,
    objectives: Objectives,
}

fn score(genome: Genome, ctx: &FitnessContext) -> Individual {
    let feature_set = genome.feature_set();
    let objectives = match &feature_set {
        Some(fs) => ctx.evaluate(fs),
        None => Objectives::invalid(0),
    };
    Individual {
        genome,
        feature_set,
        objectives,
    }
}

/// Per-generation trace of the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub hypervolume: f64,
    pub archive_size: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub archive: ParetoArchive,
    pub history: Vec<GenerationStats>,
}

struct Mixing<'a> {
    ctx: &'a FitnessContext,
    donors: &'a [Individual],
    archive: &'a ParetoArchive,
    linkage: &'a [(usize, Vec<usize>)],
}

impl Mixing<'_> {
    fn run(&self, index: usize, rng: &mut Rng) -> (Individual, Vec<ArchiveEntry>, usize) {
        let mut current = self.donors[index].clone();
        let mut found = Vec::new();
        let mut evaluations = 0;
        let mut order: Vec<usize> = (0..self.linkage.len()).collect();
        order.shuffle(rng);
        for &l in &order {
            let (feature, positions) = &self.linkage[l];
            let mut donor = rng.random_range(0..self.donors.len() - 1);
            if donor >= index {
                donor += 1;
            }
            let source = &self.donors[donor].genome.trees[*feature];
            let target = &current.genome.trees[*feature];
            if positions.iter().all(|&p| source[p] == target[p]) {
                continue;
            }
            let mut genome = current.genome.clone();
            for &p in positions {
                genome.trees[*feature][p] = source[p];
            }
            let feature_set = genome.feature_set();
            if feature_set == current.feature_set {
                // only unexpressed genes changed
                current.genome = genome;
                continue;
            }
            let Some(fs) = feature_set else { continue };
            let objectives = self.ctx.evaluate(&fs);
            evaluations += 1;
            if !objectives.valid {
                if !current.objectives.valid {
                    current = Individual {
                        genome,
                        feature_set: Some(fs),
                        objectives,
                    };
                }
                continue;
            }
            let key = fs.canonical_key(&self.ctx.schema);
            let enters = self.archive.would_enter(&objectives, &key);
            let keep = !current.objectives.valid
                || !dominates(&current.objectives, &objectives)
                || enters;
            found.push(ArchiveEntry {
                feature_set: fs.clone(),
                objectives,
                key,
            });
            if keep {
                current = Individual {
                    genome,
                    feature_set: Some(fs),
                    objectives,
                };
            }
        }
        (current, found, evaluations)
    }
}

/// Run the search on `train`, reporting each generation to `observer`.
pub fn evolve_with_observer(
    train: &SurvivalDataset,
    elementary: Elementary,
    params: ElementaryParams,
    config: &SearchConfig,
    seed: u64,
    mut observer: impl FnMut(&GenerationStats, &ParetoArchive),
) -> Result<SearchResult> {
    if train.n_events() == 0 {
        return Err(Error::NoEvents);
    }
    if config.population < 2 {
        return Err(Error::Config("population must hold at least 2 individuals".into()));
    }
    let ctx = FitnessContext::new(
        train,
        config.fitness_splits,
        config.fitness_train_fraction,
        elementary,
        params,
        seed,
    )?;
    let sampler = GeneSampler {
        n_vars: train.schema().len(),
        const_range: train
            .rows()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    };
    let linkage: Vec<(usize, Vec<usize>)> = (0..MAX_FEATURES)
        .flat_map(|f| (0..TEMPLATE_SIZE).map(move |p| (f, subtree_positions(p))))
        .collect();

    let mut population: Vec<Individual> = (0..config.population)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[STREAM_INIT, i as u64]);
            let target_depth = i % TEMPLATE_DEPTH + 1;
            let full = (i / TEMPLATE_DEPTH) % 2 == 1;
            let mut trees = [[Gene::Off; TEMPLATE_SIZE]; MAX_FEATURES];
            for (f, tree) in trees.iter_mut().enumerate() {
                *tree = sampler.tree(target_depth, full, &mut rng);
                if f > 0 && rng.random_bool(0.5) {
                    tree[0] = Gene::Off;
                }
            }
            score(Genome { trees }, &ctx)
        })
        .collect();

    let mut archive = ParetoArchive::new();
    for ind in &population {
        if let (Some(fs), true) = (&ind.feature_set, ind.objectives.valid) {
            archive.insert(ArchiveEntry {
                feature_set: fs.clone(),
                objectives: ind.objectives,
                key: fs.canonical_key(&ctx.schema),
            });
        }
    }
    let mut history = vec![GenerationStats {
        generation: 0,
        hypervolume: archive.hypervolume(),
        archive_size: archive.len(),
        evaluations: population.len(),
    }];
    observer(&history[0], &archive);

    let mut stall = 0;
    for generation in 1..=config.max_generations {
        let mixing = Mixing {
            ctx: &ctx,
            donors: &population,
            archive: &archive,
            linkage: &linkage,
        };
        let results: Vec<(Individual, Vec<ArchiveEntry>, usize)> = (0..population.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::stream(seed, &[STREAM_GOM, generation as u64, i as u64]);
                mixing.run(i, &mut rng)
            })
            .collect();
        let mut evaluations = 0;
        let mut next = Vec::with_capacity(population.len());
        for (ind, found, evals) in results {
            for entry in found {
                archive.insert(entry);
            }
            evaluations += evals;
            next.push(ind);
        }
        population = next;
        let hypervolume = archive.hypervolume();
        let last = history.last().expect("history starts with generation 0").hypervolume;
        stall = if hypervolume == last { stall + 1 } else { 0 };
        let stats = GenerationStats {
            generation,
            hypervolume,
            archive_size: archive.len(),
            evaluations,
        };
        observer(&stats, &archive);
        history.push(stats);
        if stall >= config.stall_generations {
            break;
        }
    }
    Ok(SearchResult { archive, history })
}

pub fn evolve(
    train: &SurvivalDataset,
    elementary: Elementary,
    params: ElementaryParams,
    config: &SearchConfig,
    seed: u64,
) -> Result<SearchResult> {
    evolve_with_observer(train, elementary, params, config, seed, |_, _| {})
}

/// Covariate indices referenced anywhere in the archive.
pub fn archive_variables(archive: &ParetoArchive) -> BTreeSet<usize> {
    archive
        .entries
        .iter()
        .flat_map(|e| e.feature_set.variables())
        .collect()
}
