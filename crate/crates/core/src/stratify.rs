//! Patient stratification: initial groups from a fitted model, log-rank
//! merging, median-survival risks, and a decision flowchart that assigns
//! new patients to groups.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::CoxModel;
use crate::dataset::SurvivalDataset;
use crate::elementary::FittedModel;
use crate::error::{Error, Result};
use crate::expr::FeatureSet;
use crate::stats::{self, SurvivalCurve};
use crate::tree::{SurvivalTree, TreeNode};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const COX_QUANTILES: [f64; 6] = [0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
/// Features with fewer distinct values are binned per value.
pub const DISCRETE_LIMIT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Le,
    Gt,
    Eq,
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Eq => "=",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    /// Engineered feature index.
    pub feature: usize,
    pub cmp: Comparator,
    pub value: f64,
}

impl Predicate {
    pub fn holds(&self, row: ArrayView1<'_, f64>) -> bool {
        let v = row[self.feature];
        match self.cmp {
            Comparator::Le => v <= self.value,
            Comparator::Gt => v > self.value,
            Comparator::Eq => v == self.value,
        }
    }

    pub fn render(&self, names: &[String]) -> String {
        format!("{} {} {}", names[self.feature], self.cmp, self.value)
    }
}

/// Disjunction of conjunctions of predicates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub clauses: Vec<Vec<Predicate>>,
}

impl Rule {
    pub fn matches(&self, row: ArrayView1<'_, f64>) -> bool {
        self.clauses.iter().any(|c| c.iter().all(|p| p.holds(row)))
    }

    pub fn render(&self, names: &[String]) -> String {
        let clause = |c: &Vec<Predicate>| {
            if c.is_empty() {
                "TRUE".to_string()
            } else {
                c.iter().map(|p| p.render(names)).collect::<Vec<_>>().join(" AND ")
            }
        };
        match self.clauses.len() {
            0 => "FALSE".to_string(),
            1 => clause(&self.clauses[0]),
            _ => self
                .clauses
                .iter()
                .map(|c| format!("({})", clause(c)))
                .collect::<Vec<_>>()
                .join(" OR "),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Tree,
    Cox,
    Agnostic,
}

/// Binary decision node: rows with `feature <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FlowNode {
    Decision {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        group: usize,
    },
}

/// Decision tree stored in pre-order with the root at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flowchart {
    pub nodes: Vec<FlowNode>,
}

impl Flowchart {
    pub fn leaf(group: usize) -> Self {
        Self {
            nodes: vec![FlowNode::Leaf { group }],
        }
    }

    pub fn assign(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                FlowNode::Decision {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[*feature] <= *threshold { *left } else { *right },
                FlowNode::Leaf { group } => return *group,
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, FlowNode::Leaf { .. })).count()
    }

    fn relabel(&mut self, map: &[usize]) {
        for n in &mut self.nodes {
            if let FlowNode::Leaf { group } = n {
                *group = map[*group];
            }
        }
    }

    /// Collapse decisions whose two branches lead to the same single group,
    /// re-laying the nodes out in pre-order.
    fn simplify(&self) -> Self {
        fn build(src: &[FlowNode], k: usize, out: &mut Vec<FlowNode>) -> Option<usize> {
            match &src[k] {
                FlowNode::Leaf { group } => {
                    out.push(FlowNode::Leaf { group: *group });
                    Some(*group)
                }
                FlowNode::Decision {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let at = out.len();
                    out.push(FlowNode::Leaf { group: usize::MAX });
                    let l_at = out.len();
                    let l = build(src, *left, out);
                    let r_at = out.len();
                    let r = build(src, *right, out);
                    if let Some(g) = l.filter(|_| l == r) {
                        out.truncate(at);
                        out.push(FlowNode::Leaf { group: g });
                        return l;
                    }
                    out[at] = FlowNode::Decision {
                        feature: *feature,
                        threshold: *threshold,
                        left: l_at,
                        right: r_at,
                    };
                    None
                }
            }
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        build(&self.nodes, 0, &mut nodes);
        Self { nodes }
    }

    /// Root-to-leaf predicate paths for every leaf of `group`.
    pub fn rule_for(&self, group: usize) -> Rule {
        fn walk(nodes: &[FlowNode], k: usize, path: &mut Vec<Predicate>, group: usize, out: &mut Vec<Vec<Predicate>>) {
            match &nodes[k] {
                FlowNode::Leaf { group: g } => {
                    if *g == group {
                        out.push(path.clone());
                    }
                }
                FlowNode::Decision {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    for (cmp, child) in [(Comparator::Le, *left), (Comparator::Gt, *right)] {
                        path.push(Predicate {
                            feature: *feature,
                            cmp,
                            value: *threshold,
                        });
                        walk(nodes, child, path, group, out);
                        path.pop();
                    }
                }
            }
        }
        let mut clauses = Vec::new();
        walk(&self.nodes, 0, &mut Vec::new(), group, &mut clauses);
        Rule { clauses }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientGroup {
    pub label: String,
    /// Internal-set row indices.
    pub members: Vec<usize>,
    pub rule: Rule,
    pub curve: SurvivalCurve,
    /// Median survival, or restricted mean survival when the median is
    /// undefined (see `risk_is_rmst`).
    pub risk: f64,
    pub risk_is_rmst: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationModel {
    pub source: Source,
    pub feature_set: FeatureSet,
    /// Rendered engineered features, indexed like the predicates.
    pub feature_names: Vec<String>,
    /// Ordered by label: A has the largest risk value.
    pub groups: Vec<PatientGroup>,
    pub flowchart: Flowchart,
    pub fidelity: f64,
    pub initial_groups: usize,
    /// Internal follow-up horizon used for restricted-mean fallbacks.
    pub horizon: f64,
    pub warnings: Vec<String>,
}

impl StratificationModel {
    /// Group index (into `groups`) of every row of `ds`.
    pub fn assign(&self, ds: &SurvivalDataset) -> Result<Vec<usize>> {
        let features = self.feature_set.transform(ds.rows().view())?;
        features
            .rows()
            .into_iter()
            .map(|row| {
                if row.iter().any(|v| !v.is_finite()) {
                    let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    return Err(Error::Stratification(format!(
                        "patient with feature values [{}] cannot be assigned to a group",
                        values.join(", ")
                    )));
                }
                Ok(self.flowchart.assign(row))
            })
            .collect()
    }

    /// Per-row static risk score: the negated group risk value.
    pub fn risk_scores(&self, ds: &SurvivalDataset) -> Result<Vec<f64>> {
        Ok(self.assign(ds)?.into_iter().map(|g| -self.groups[g].risk).collect())
    }
}

pub fn stratification_cindex(strat: &StratificationModel, ds: &SurvivalDataset) -> Result<f64> {
    stats::concordance_index(&strat.risk_scores(ds)?, ds.times(), ds.events())
}

fn group_rows(keys: &[usize]) -> Vec<Vec<usize>> {
    let mut by_key: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        by_key.entry(k).or_default().push(i);
    }
    by_key.into_values().collect()
}

/// One group per tree leaf (pre-order), members found by routing rows.
pub fn initial_groups_tree(tree: &SurvivalTree, features: ArrayView2<'_, f64>) -> Vec<Vec<usize>> {
    let leaves: Vec<usize> = features.rows().into_iter().map(|r| tree.leaf_index(r)).collect();
    group_rows(&leaves)
}

/// Groups `(q_{k-1}, q_k]` of the prognostic index at the given quantiles;
/// empty groups are dropped.
pub fn initial_groups_cox(
    model: &CoxModel,
    features: ArrayView2<'_, f64>,
    quantiles: &[f64],
) -> Result<Vec<Vec<usize>>> {
    let pi = model.prognostic_index(features)?;
    Ok(quantile_groups(&pi, quantiles))
}

fn quantile_groups(values: &[f64], quantiles: &[f64]) -> Vec<Vec<usize>> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = quantiles.iter().map(|&q| stats::quantile_sorted(&sorted, q)).collect();
    let keys: Vec<usize> = values
        .iter()
        .map(|&v| edges.iter().position(|&e| v <= e).unwrap_or(edges.len()))
        .collect();
    group_rows(&keys)
}

fn feature_bins(column: &[f64]) -> Vec<usize> {
    let mut distinct = column.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < DISCRETE_LIMIT {
        column
            .iter()
            .map(|v| distinct.partition_point(|d| d < v))
            .collect()
    } else {
        let mut sorted = column.to_vec();
        sorted.sort_by(f64::total_cmp);
        let edges: Vec<f64> = [0.25, 0.5, 0.75]
            .iter()
            .map(|&q| stats::quantile_sorted(&sorted, q))
            .collect();
        column
            .iter()
            .map(|&v| edges.iter().position(|&e| v <= e).unwrap_or(edges.len()))
            .collect()
    }
}

/// Cartesian product of per-feature bins (one bin per value for discrete
/// features, quartile bins otherwise); empty cells are dropped.
pub fn initial_groups_agnostic(features: ArrayView2<'_, f64>) -> Vec<Vec<usize>> {
    let bins: Vec<Vec<usize>> = features
        .columns()
        .into_iter()
        .map(|c| feature_bins(&c.to_vec()))
        .collect();
    let mut cells: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for i in 0..features.nrows() {
        cells
            .entry(bins.iter().map(|b| b[i]).collect())
            .or_default()
            .push(i);
    }
    cells.into_values().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    /// Final member lists, each sorted.
    pub groups: Vec<Vec<usize>>,
    /// Indices of the input groups that make up each final group.
    pub sources: Vec<Vec<usize>>,
    pub iterations: usize,
}

fn pair_test(a: &[usize], b: &[usize], times: &[f64], events: &[bool]) -> stats::LogRankResult {
    let t = |g: &[usize]| g.iter().map(|&i| times[i]).collect::<Vec<_>>();
    let e = |g: &[usize]| g.iter().map(|&i| events[i]).collect::<Vec<_>>();
    stats::logrank_test(&t(a), &e(a), &t(b), &e(b)).unwrap_or(stats::LogRankResult {
        statistic: 0.0,
        p_value: 1.0,
    })
}

/// Repeatedly merge the most similar pair (largest log-rank p-value, then
/// smallest statistic, then lowest index pair) until every pair differs at
/// level `alpha`.
pub fn merge_groups(groups: Vec<Vec<usize>>, times: &[f64], events: &[bool], alpha: f64) -> MergeOutcome {
    let mut sources: Vec<Vec<usize>> = (0..groups.len()).map(|g| vec![g]).collect();
    let mut groups = groups;
    let mut iterations = 0;
    while groups.len() > 1 {
        let pairs: Vec<(usize, usize)> = (0..groups.len())
            .flat_map(|i| (i + 1..groups.len()).map(move |j| (i, j)))
            .collect();
        let tests: Vec<stats::LogRankResult> = pairs
            .par_iter()
            .map(|&(i, j)| pair_test(&groups[i], &groups[j], times, events))
            .collect();
        let mut best: Option<usize> = None;
        for (k, t) in tests.iter().enumerate() {
            if t.p_value < alpha {
                continue;
            }
            best = match best {
                Some(b)
                    if tests[b].p_value > t.p_value
                        || (tests[b].p_value == t.p_value && tests[b].statistic <= t.statistic) =>
                {
                    Some(b)
                }
                _ => Some(k),
            };
        }
        let Some(b) = best else { break };
        let (i, j) = pairs[b];
        let moved = groups.remove(j);
        groups[i].extend(moved);
        groups[i].sort_unstable();
        let moved = sources.remove(j);
        sources[i].extend(moved);
        sources[i].sort_unstable();
        iterations += 1;
    }
    MergeOutcome {
        groups,
        sources,
        iterations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRisk {
    pub risk: f64,
    pub is_rmst: bool,
}

/// Median survival of each group's KM curve, falling back to the
/// restricted mean over `horizon` when the median is undefined.
pub fn stratification_risks(
    groups: &[Vec<usize>],
    times: &[f64],
    events: &[bool],
    horizon: f64,
) -> Result<Vec<(SurvivalCurve, GroupRisk)>> {
    groups
        .iter()
        .map(|g| {
            let t: Vec<f64> = g.iter().map(|&i| times[i]).collect();
            let e: Vec<bool> = g.iter().map(|&i| events[i]).collect();
            let curve = stats::kaplan_meier(&t, &e)?;
            let risk = match stats::median_survival(&curve) {
                Some(m) => GroupRisk { risk: m, is_rmst: false },
                None => GroupRisk {
                    risk: curve.restricted_mean(horizon),
                    is_rmst: true,
                },
            };
            Ok((curve, risk))
        })
        .collect()
}

pub fn group_label(k: usize) -> String {
    let mut k = k;
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (k % 26) as u8);
        if k < 26 {
            break;
        }
        k = k / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ASCII letters")
}

/// Gini classification tree grown until leaves are pure or no threshold
/// separates their rows. Leaves predict the majority class (lowest class on
/// ties).
pub fn fit_rule_tree(features: ArrayView2<'_, f64>, classes: &[usize]) -> Flowchart {
    let n_classes = classes.iter().max().map_or(1, |m| m + 1);
    let mut nodes = Vec::new();
    grow_rule_tree(features, classes, n_classes, (0..features.nrows()).collect(), &mut nodes);
    Flowchart { nodes }
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn grow_rule_tree(
    x: ArrayView2<'_, f64>,
    classes: &[usize],
    n_classes: usize,
    rows: Vec<usize>,
    nodes: &mut Vec<FlowNode>,
) -> usize {
    let at = nodes.len();
    let mut counts = vec![0usize; n_classes];
    for &i in &rows {
        counts[classes[i]] += 1;
    }
    let majority = (0..n_classes).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0);
    nodes.push(FlowNode::Leaf { group: majority });
    if counts.iter().filter(|&&c| c > 0).count() <= 1 {
        return at;
    }

    let n = rows.len();
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x.ncols() {
        let mut order = rows.clone();
        order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
        let mut left = vec![0usize; n_classes];
        for k in 0..n - 1 {
            left[classes[order[k]]] += 1;
            let (v, next) = (x[[order[k], f]], x[[order[k + 1], f]]);
            if v == next {
                continue;
            }
            let right: Vec<usize> = counts.iter().zip(&left).map(|(c, l)| c - l).collect();
            let nl = k + 1;
            let impurity = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
            if best.is_none_or(|(b, _, _)| impurity < b) {
                best = Some((impurity, f, v + (next - v) / 2.0));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return at;
    };
    let (l_rows, r_rows): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[[i, feature]] <= threshold);
    let left = grow_rule_tree(x, classes, n_classes, l_rows, nodes);
    let right = grow_rule_tree(x, classes, n_classes, r_rows, nodes);
    nodes[at] = FlowNode::Decision {
        feature,
        threshold,
        left,
        right,
    };
    at
}

fn tree_flowchart(tree: &SurvivalTree) -> (Flowchart, Vec<usize>) {
    let mut leaf_ids = Vec::new();
    let nodes = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(k, n)| match n {
            TreeNode::Split { split, left, right } => FlowNode::Decision {
                feature: split.feature,
                threshold: split.threshold,
                left: *left,
                right: *right,
            },
            TreeNode::Leaf { .. } => {
                leaf_ids.push(k);
                FlowNode::Leaf { group: k }
            }
        })
        .collect();
    (Flowchart { nodes }, leaf_ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratifyConfig {
    pub alpha: f64,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA }
    }
}

fn engineered(fs: &FeatureSet, internal: &SurvivalDataset) -> Result<Array2<f64>> {
    let features = fs.transform(internal.rows().view())?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stratification("engineered features are not finite on the internal set".into()));
    }
    Ok(features)
}

/// Stratify the internal cohort with a fitted elementary model: tree leaves
/// for trees, prognostic-index quantiles for Cox models.
pub fn stratify(
    model: &FittedModel,
    fs: &FeatureSet,
    internal: &SurvivalDataset,
    config: &StratifyConfig,
) -> Result<StratificationModel> {
    let features = engineered(fs, internal)?;
    match model {
        FittedModel::Tree(tree) => {
            let (chart, leaf_ids) = tree_flowchart(tree);
            let leaf_of: Vec<usize> = features.rows().into_iter().map(|r| chart.assign(r)).collect();
            let cells: Vec<usize> = leaf_of
                .iter()
                .map(|l| leaf_ids.iter().position(|k| k == l).expect("routes end in leaves"))
                .collect();
            let mut chart = chart;
            let leaf_index: Vec<usize> = (0..tree.nodes.len())
                .map(|k| leaf_ids.iter().position(|&l| l == k).unwrap_or(usize::MAX))
                .collect();
            chart.relabel(&leaf_index);
            finish(Source::Tree, fs, internal, chart, &cells, &cells, leaf_ids.len(), config)
        }
        FittedModel::Cox(cox) => {
            let initial = initial_groups_cox(cox, features.view(), &COX_QUANTILES)?;
            extracted(Source::Cox, fs, internal, &features, &initial, config)
        }
    }
}

/// Model-agnostic stratification from per-feature value ranges.
pub fn stratify_agnostic(
    fs: &FeatureSet,
    internal: &SurvivalDataset,
    config: &StratifyConfig,
) -> Result<StratificationModel> {
    let features = engineered(fs, internal)?;
    let initial = initial_groups_agnostic(features.view());
    extracted(Source::Agnostic, fs, internal, &features, &initial, config)
}

fn extracted(
    source: Source,
    fs: &FeatureSet,
    internal: &SurvivalDataset,
    features: &Array2<f64>,
    initial: &[Vec<usize>],
    config: &StratifyConfig,
) -> Result<StratificationModel> {
    let mut target = vec![0; internal.len()];
    for (g, members) in initial.iter().enumerate() {
        for &i in members {
            target[i] = g;
        }
    }
    let chart = fit_rule_tree(features.view(), &target);
    let assigned: Vec<usize> = features.rows().into_iter().map(|r| chart.assign(r)).collect();
    finish(source, fs, internal, chart, &target, &assigned, initial.len(), config)
}

/// Merge the flowchart-assigned cells, compute risks and labels, and relabel
/// the flowchart with final groups.
#[allow(clippy::too_many_arguments)]
fn finish(
    source: Source,
    fs: &FeatureSet,
    internal: &SurvivalDataset,
    mut chart: Flowchart,
    target: &[usize],
    assigned: &[usize],
    initial_groups: usize,
    config: &StratifyConfig,
) -> Result<StratificationModel> {
    let n = internal.len();
    if n == 0 {
        return Err(Error::Stratification("empty internal cohort".into()));
    }
    let fidelity = target.iter().zip(assigned).filter(|(a, b)| a == b).count() as f64 / n as f64;
    let mut warnings = Vec::new();
    if fidelity < 1.0 {
        warnings.push(format!(
            "rule extraction reproduces {:.1}% of the initial group assignments",
            100.0 * fidelity
        ));
    }

    let mut cell_ids: Vec<usize> = assigned.to_vec();
    cell_ids.sort_unstable();
    cell_ids.dedup();
    let cells: Vec<Vec<usize>> = cell_ids
        .iter()
        .map(|&c| (0..n).filter(|&i| assigned[i] == c).collect())
        .collect();
    let merged = merge_groups(cells, internal.times(), internal.events(), config.alpha);
    let horizon = internal.times().iter().copied().fold(0.0, f64::max);
    let risks = stratification_risks(&merged.groups, internal.times(), internal.events(), horizon)?;

    let mut order: Vec<usize> = (0..merged.groups.len()).collect();
    order.sort_by(|&a, &b| risks[b].1.risk.total_cmp(&risks[a].1.risk));
    let mut final_of_merged = vec![0; order.len()];
    for (rank, &m) in order.iter().enumerate() {
        final_of_merged[m] = rank;
    }
    let max_cell = cell_ids.last().copied().unwrap_or(0);
    let mut group_of_cell = vec![usize::MAX; max_cell + 1];
    for (m, srcs) in merged.sources.iter().enumerate() {
        for &s in srcs {
            group_of_cell[cell_ids[s]] = final_of_merged[m];
        }
    }
    // leaves no internal patient reaches fall back to group A
    for g in &mut group_of_cell {
        if *g == usize::MAX {
            *g = 0;
        }
    }
    chart.relabel(&group_of_cell);
    let chart = chart.simplify();

    let groups = order
        .iter()
        .enumerate()
        .map(|(rank, &m)| {
            let (curve, risk) = risks[m].clone();
            PatientGroup {
                label: group_label(rank),
                members: merged.groups[m].clone(),
                rule: chart.rule_for(rank),
                curve,
                risk: risk.risk,
                risk_is_rmst: risk.is_rmst,
            }
        })
        .collect();
    Ok(StratificationModel {
        source,
        feature_set: fs.clone(),
        feature_names: fs.render(internal.schema()),
        groups,
        flowchart: chart,
        fidelity,
        initial_groups,
        horizon,
        warnings,
    })
}
