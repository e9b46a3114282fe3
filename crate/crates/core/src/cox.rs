//! Ridge-penalised Cox proportional hazards regression.
//!
//! Features are z-scored on the training data before fitting; the penalty
//! `alpha/2 * |beta|^2` therefore acts on standardized coefficients. Ties use
//! the Breslow approximation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::SurvivalCurve;

pub const MAX_ITERATIONS: usize = 100;
pub const SCORE_TOLERANCE: f64 = 1e-9;
/// Newton steps smaller than this in every coordinate count as converged.
pub const STEP_TOLERANCE: f64 = 1e-9;
pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    /// Coefficients on the standardized scale.
    pub beta: Vec<f64>,
    pub feature_means: Vec<f64>,
    pub feature_sds: Vec<f64>,
    pub ridge_alpha: f64,
    /// Distinct training event times, ascending.
    pub baseline_times: Vec<f64>,
    /// Breslow cumulative baseline hazard at `baseline_times`.
    pub baseline_cumhaz: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Penalised log-likelihood after each accepted Newton step, starting at
    /// beta = 0.
    #[serde(skip)]
    pub loglik_history: Vec<f64>,
}

/// Column means and population standard deviations; zero spread maps to 1.
pub fn standardization(x: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for col in x.axis_iter(Axis(1)) {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        means.push(m);
        sds.push(if sd > 1e-12 * m.abs().max(1.0) { sd } else { 1.0 });
    }
    (means, sds)
}

fn standardize(x: ArrayView2<'_, f64>, means: &[f64], sds: &[f64]) -> Array2<f64> {
    let mut z = x.to_owned();
    for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| (v - means[j]) / sds[j]);
    }
    z
}

/// Patients ordered by descending time, grouped by tied times.
struct RiskOrder {
    order: Vec<usize>,
    /// Start offsets of tie groups within `order`, plus a final sentinel.
    groups: Vec<usize>,
}

impl RiskOrder {
    fn new(times: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
        let mut groups = vec![0];
        for k in 1..order.len() {
            if times[order[k]] != times[order[k - 1]] {
                groups.push(k);
            }
        }
        groups.push(order.len());
        Self { order, groups }
    }
}

struct Evaluation {
    loglik: f64,
    score: Vec<f64>,
    /// Negative Hessian of the penalised log-likelihood, row-major.
    information: Vec<f64>,
}

fn evaluate(
    z: ArrayView2<'_, f64>,
    events: &[bool],
    risk: &RiskOrder,
    beta: &[f64],
    alpha: f64,
    derivatives: bool,
) -> Evaluation {
    let p = beta.len();
    let eta: Vec<f64> = z
        .axis_iter(Axis(0))
        .map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect();
    let offset = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut loglik = 0.0;
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    for w in risk.groups.windows(2) {
        let members = &risk.order[w[0]..w[1]];
        for &i in members {
            let r = (eta[i] - offset).exp();
            s0 += r;
            if derivatives {
                let zi = z.row(i);
                for a in 0..p {
                    s1[a] += r * zi[a];
                    for b in 0..=a {
                        s2[a * p + b] += r * zi[a] * zi[b];
                    }
                }
            }
        }
        let log_s0 = s0.ln() + offset;
        for &i in members.iter().filter(|&&i| events[i]) {
            loglik += eta[i] - log_s0;
            if derivatives {
                let zi = z.row(i);
                for a in 0..p {
                    let ma = s1[a] / s0;
                    score[a] += zi[a] - ma;
                    for b in 0..=a {
                        info[a * p + b] += s2[a * p + b] / s0 - ma * s1[b] / s0;
                    }
                }
            }
        }
    }
    loglik -= 0.5 * alpha * beta.iter().map(|b| b * b).sum::<f64>();
    for a in 0..p {
        score[a] -= alpha * beta[a];
        info[a * p + a] += alpha;
        for b in 0..a {
            info[b * p + a] = info[a * p + b];
        }
    }
    Evaluation {
        loglik,
        score,
        information: info,
    }
}

/// Penalised Breslow partial log-likelihood at `beta` for already
/// standardized features.
pub fn penalized_log_likelihood(
    z: ArrayView2<'_, f64>,
    times: &[f64],
    events: &[bool],
    beta: &[f64],
    alpha: f64,
) -> f64 {
    evaluate(z, events, &RiskOrder::new(times), beta, alpha, false).loglik
}

/// Analytic gradient of [`penalized_log_likelihood`].
pub fn penalized_score(
    z: ArrayView2<'_, f64>,
    times: &[f64],
    events: &[bool],
    beta: &[f64],
    alpha: f64,
) -> Vec<f64> {
    evaluate(z, events, &RiskOrder::new(times), beta, alpha, true).score
}

fn newton_direction(info: &[f64], score: &[f64]) -> Option<Vec<f64>> {
    let p = score.len();
    let h = DMatrix::from_row_slice(p, p, info);
    let g = DVector::from_column_slice(score);
    let step = match h.clone().cholesky() {
        Some(ch) => ch.solve(&g),
        None => h.lu().solve(&g)?,
    };
    step.iter().all(|v| v.is_finite()).then(|| step.iter().copied().collect())
}

/// Fit by Newton iteration with step halving, starting from beta = 0.
pub fn fit_cox(
    x: ArrayView2<'_, f64>,
    times: &[f64],
    events: &[bool],
    ridge_alpha: f64,
) -> Result<CoxModel> {
    let n = x.nrows();
    if times.len() != n || events.len() != n {
        return Err(Error::InvalidInput("feature rows, times and events differ in length".into()));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::NoEvents);
    }
    if ridge_alpha.is_nan() || ridge_alpha < 0.0 {
        return Err(Error::InvalidInput(format!("ridge alpha {ridge_alpha} is negative")));
    }
    let (means, sds) = standardization(x);
    let z = standardize(x, &means, &sds);
    // constant columns stay at exactly zero
    let active: Vec<usize> = (0..x.ncols())
        .filter(|&j| x.column(j).iter().any(|v| *v != x[[0, j]]))
        .collect();
    let za = z.select(Axis(1), &active);
    let risk = RiskOrder::new(times);

    let mut beta = vec![0.0; active.len()];
    let mut current = evaluate(za.view(), events, &risk, &beta, ridge_alpha, true);
    if !current.loglik.is_finite() {
        return Err(Error::Divergence("non-finite likelihood at beta = 0".into()));
    }
    let mut history = vec![current.loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        if current.score.iter().all(|g| g.abs() < SCORE_TOLERANCE) {
            converged = true;
            break;
        }
        let Some(step) = newton_direction(&current.information, &current.score) else {
            return Err(Error::Divergence("singular information matrix".into()));
        };
        if step.iter().all(|s| s.abs() < STEP_TOLERANCE) {
            // the likelihood is flat to rounding error along the step
            converged = true;
            break;
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let eval = evaluate(za.view(), events, &risk, &trial, ridge_alpha, true);
            if eval.loglik.is_finite() && eval.loglik >= current.loglik {
                accepted = Some((trial, eval));
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((b, eval)) if eval.loglik > current.loglik => {
                beta = b;
                current = eval;
                history.push(current.loglik);
            }
            _ => {
                // no strict ascent left within floating-point resolution;
                // the penalised likelihood is concave so this is the optimum
                converged = true;
                break;
            }
        }
    }
    if !converged && iterations >= MAX_ITERATIONS {
        converged = current.score.iter().all(|g| g.abs() < SCORE_TOLERANCE);
    }

    let mut full_beta = vec![0.0; x.ncols()];
    for (k, &j) in active.iter().enumerate() {
        full_beta[j] = beta[k];
    }
    let eta: Vec<f64> = z
        .axis_iter(Axis(0))
        .map(|row| row.iter().zip(&full_beta).map(|(a, b)| a * b).sum())
        .collect();
    let (baseline_times, baseline_cumhaz) = breslow(&eta, times, events);
    Ok(CoxModel {
        beta: full_beta,
        feature_means: means,
        feature_sds: sds,
        ridge_alpha,
        baseline_times,
        baseline_cumhaz,
        converged,
        iterations,
        loglik_history: history,
    })
}

/// Breslow cumulative baseline hazard at the distinct event times.
pub fn breslow(eta: &[f64], times: &[f64], events: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut risk_sum = 0.0;
    let mut steps = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0usize;
        while k < order.len() && times[order[k]] == t {
            risk_sum += eta[order[k]].exp();
            d += usize::from(events[order[k]]);
            k += 1;
        }
        if d > 0 {
            steps.push((t, d as f64 / risk_sum));
        }
    }
    steps.reverse();
    let mut cum = 0.0;
    let (ts, hs) = steps
        .into_iter()
        .map(|(t, h)| {
            cum += h;
            (t, cum)
        })
        .unzip();
    (ts, hs)
}

impl CoxModel {
    pub fn n_features(&self) -> usize {
        self.beta.len()
    }

    fn linear_predictor(&self, row: impl Iterator<Item = f64>) -> f64 {
        row.enumerate()
            .map(|(j, v)| self.beta[j] * (v - self.feature_means[j]) / self.feature_sds[j])
            .sum()
    }

    /// `h(x) = beta . standardized(x)` per row; larger means higher risk.
    pub fn prognostic_index(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.beta.len() {
            return Err(Error::Dimension {
                expected: self.beta.len(),
                got: x.ncols(),
            });
        }
        Ok(x.axis_iter(Axis(0))
            .map(|row| self.linear_predictor(row.iter().copied()))
            .collect())
    }

    /// Hazard ratio per standard deviation of each feature.
    pub fn hazard_ratios(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b.exp()).collect()
    }

    /// Model-based survival curve for a covariate row; `None` entries take the
    /// training mean.
    pub fn survival_curve(&self, x: &[Option<f64>]) -> Result<SurvivalCurve> {
        if x.len() != self.beta.len() {
            return Err(Error::Dimension {
                expected: self.beta.len(),
                got: x.len(),
            });
        }
        let h = self.linear_predictor(
            x.iter()
                .enumerate()
                .map(|(j, v)| v.unwrap_or(self.feature_means[j])),
        );
        let risk = h.exp();
        let survival: Vec<f64> = self.baseline_cumhaz.iter().map(|c| (-c * risk).exp()).collect();
        Ok(SurvivalCurve {
            times: self.baseline_times.clone(),
            ci_lower: survival.clone(),
            ci_upper: survival.clone(),
            survival,
            at_risk: Vec::new(),
            n: 0,
            max_time: self.baseline_times.last().copied().unwrap_or(0.0),
            at_risk_end: 0,
        })
    }
}
