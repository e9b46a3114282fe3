//! Depth-limited binary survival trees split on the two-sample log-rank
//! statistic.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, SurvivalCurve};

pub const DEFAULT_MAX_DEPTH: usize = 3;
pub const DEFAULT_MIN_LEAF: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            min_leaf: DEFAULT_MIN_LEAF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    /// Rows with `x <= threshold` go left.
    pub threshold: f64,
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        split: Split,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Training row indices.
        members: Vec<usize>,
        curve: SurvivalCurve,
        risk: f64,
    },
}

/// Nodes are stored in pre-order; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTree {
    pub nodes: Vec<TreeNode>,
    pub params: TreeParams,
    pub n_features: usize,
}

struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0.0; n + 1] }
    }

    fn add(&mut self, i: usize, v: f64) {
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += v;
            k += k & k.wrapping_neg();
        }
    }

    /// Sum over positions `< i`.
    fn prefix(&self, i: usize) -> f64 {
        let mut k = i;
        let mut s = 0.0;
        while k > 0 {
            s += self.tree[k];
            k -= k & k.wrapping_neg();
        }
        s
    }
}

/// Best log-rank split of `members` on one feature. The log-rank statistic of
/// every candidate threshold is maintained incrementally as patients move
/// from the right child to the left one, so the scan costs O(n log n).
fn scan_feature(
    x: ArrayView2<'_, f64>,
    times: &[f64],
    events: &[bool],
    members: &[usize],
    feature: usize,
    min_leaf: usize,
) -> Option<Split> {
    let n = members.len();
    if min_leaf == 0 || n < 2 * min_leaf {
        return None;
    }
    let mut distinct: Vec<f64> = members.iter().map(|&i| times[i]).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let m = distinct.len();
    let rank = |t: f64| distinct.partition_point(|&s| s < t);

    let mut deaths = vec![0usize; m];
    let mut leaving = vec![0usize; m];
    for &i in members {
        let r = rank(times[i]);
        leaving[r] += 1;
        deaths[r] += usize::from(events[i]);
    }
    // cumulative sums over event times <= each distinct time
    let mut hazard = vec![0.0; m];
    let mut weight = vec![0.0; m];
    let mut weight_per_risk = vec![0.0; m];
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let mut at_risk = n;
    for r in 0..m {
        let d = deaths[r] as f64;
        let nr = at_risk as f64;
        if deaths[r] > 0 {
            a += d / nr;
            if at_risk > 1 {
                let w = d * (nr - d) / (nr * (nr - 1.0));
                b += w;
                c += w / nr;
            }
        }
        hazard[r] = a;
        weight[r] = b;
        weight_per_risk[r] = c;
        at_risk -= leaving[r];
    }

    let col = x.column(feature);
    let mut sorted = members.to_vec();
    sorted.sort_by(|&i, &j| {
        col[i]
            .total_cmp(&col[j])
            .then(times[i].total_cmp(&times[j]))
            .then(events[i].cmp(&events[j]))
    });

    let mut count = Fenwick::new(m);
    let mut csum = Fenwick::new(m);
    let (mut observed, mut expected, mut var_linear, mut var_quadratic) = (0.0, 0.0, 0.0, 0.0);
    let mut best: Option<Split> = None;
    for (k, &i) in sorted.iter().enumerate() {
        let r = rank(times[i]);
        let ci = weight_per_risk[r];
        let left_size = k as f64;
        let below = count.prefix(r);
        let pair_sum = csum.prefix(r) + ci * (left_size - below);
        var_quadratic += 2.0 * pair_sum + ci;
        var_linear += weight[r];
        expected += hazard[r];
        observed += f64::from(u8::from(events[i]));
        count.add(r, 1.0);
        csum.add(r, ci);

        let n_left = k + 1;
        if n_left < min_leaf || n - n_left < min_leaf {
            continue;
        }
        let next = sorted[k + 1];
        if col[next] <= col[i] {
            continue;
        }
        let var = var_linear - var_quadratic;
        let statistic = if var > 1e-12 {
            (observed - expected).powi(2) / var
        } else {
            0.0
        };
        if best.is_none_or(|s| statistic > s.statistic) {
            best = Some(Split {
                feature,
                threshold: 0.5 * (col[i] + col[next]),
                statistic,
            });
        }
    }
    best
}

/// Best threshold for one candidate feature over all rows.
pub fn best_split(
    x: ArrayView2<'_, f64>,
    times: &[f64],
    events: &[bool],
    feature: usize,
    min_leaf: usize,
) -> Option<Split> {
    let members: Vec<usize> = (0..x.nrows()).collect();
    scan_feature(x, times, events, &members, feature, min_leaf).filter(|s| s.statistic > 0.0)
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    times: &'a [f64],
    events: &'a [bool],
    event_times: Vec<f64>,
    params: TreeParams,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn grow(&mut self, members: Vec<usize>, depth: usize) -> Result<usize> {
        let mut best: Option<Split> = None;
        if depth < self.params.max_depth {
            for f in 0..self.x.ncols() {
                let cand = scan_feature(self.x, self.times, self.events, &members, f, self.params.min_leaf);
                if let Some(s) = cand {
                    if s.statistic > 0.0 && best.is_none_or(|b| s.statistic > b.statistic) {
                        best = Some(s);
                    }
                }
            }
        }
        let id = self.nodes.len();
        match best {
            Some(split) => {
                let (left, right): (Vec<usize>, Vec<usize>) = members
                    .into_iter()
                    .partition(|&i| self.x[[i, split.feature]] <= split.threshold);
                self.nodes.push(TreeNode::Split {
                    split,
                    left: 0,
                    right: 0,
                });
                let l = self.grow(left, depth + 1)?;
                let r = self.grow(right, depth + 1)?;
                if let TreeNode::Split { left, right, .. } = &mut self.nodes[id] {
                    *left = l;
                    *right = r;
                }
            }
            None => {
                let t: Vec<f64> = members.iter().map(|&i| self.times[i]).collect();
                let e: Vec<bool> = members.iter().map(|&i| self.events[i]).collect();
                let curve = stats::kaplan_meier(&t, &e)?;
                let risk = cumulative_hazard_sum(&t, &e, &self.event_times);
                self.nodes.push(TreeNode::Leaf {
                    members,
                    curve,
                    risk,
                });
            }
        }
        Ok(id)
    }
}

/// Sum of the group's Nelson–Aalen cumulative hazard evaluated at each of
/// `grid` (ascending).
pub fn cumulative_hazard_sum(times: &[f64], events: &[bool], grid: &[f64]) -> f64 {
    let table = stats::risk_table(times, events);
    let mut k = 0;
    let mut h = 0.0;
    let mut total = 0.0;
    for &g in grid {
        while k < table.times.len() && table.times[k] <= g {
            h += table.deaths[k] as f64 / table.at_risk[k] as f64;
            k += 1;
        }
        total += h;
    }
    total
}

pub fn fit_survival_tree(
    x: ArrayView2<'_, f64>,
    times: &[f64],
    events: &[bool],
    params: TreeParams,
) -> Result<SurvivalTree> {
    let n = x.nrows();
    if times.len() != n || events.len() != n {
        return Err(Error::InvalidInput("feature rows, times and events differ in length".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("cannot fit a tree on zero rows".into()));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::NoEvents);
    }
    let mut event_times: Vec<f64> = (0..n).filter(|&i| events[i]).map(|i| times[i]).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut builder = Builder {
        x,
        times,
        events,
        event_times,
        params,
        nodes: Vec::new(),
    };
    builder.grow((0..n).collect(), 0)?;
    Ok(SurvivalTree {
        nodes: builder.nodes,
        params,
        n_features: x.ncols(),
    })
}

impl SurvivalTree {
    pub fn leaf_index(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                TreeNode::Split { split, left, right } => {
                    k = if row[split.feature] <= split.threshold { *left } else { *right };
                }
                TreeNode::Leaf { .. } => return k,
            }
        }
    }

    /// Cumulative-hazard risk of the leaf the row falls into.
    pub fn risk_score(&self, row: ArrayView1<'_, f64>) -> f64 {
        match &self.nodes[self.leaf_index(row)] {
            TreeNode::Leaf { risk, .. } => *risk,
            TreeNode::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Dimension {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        Ok(x.rows().into_iter().map(|r| self.risk_score(r)).collect())
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&k| matches!(self.nodes[k], TreeNode::Leaf { .. }))
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], k: usize) -> usize {
            match &nodes[k] {
                TreeNode::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }
}
