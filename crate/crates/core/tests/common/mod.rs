#![allow(dead_code)]

use ndarray::Array2;
use pisa::dataset::{Covariate, FeatureKind, FeatureSchema, SurvivalDataset};
use pisa::rng;
use rand::Rng;

pub fn real_schema(names: &[&str]) -> FeatureSchema {
    FeatureSchema {
        covariates: names
            .iter()
            .map(|n| Covariate {
                name: n.to_string(),
                kind: FeatureKind::Real,
                unit: String::new(),
            })
            .collect(),
        time_column: "time".into(),
        event_column: "event".into(),
        time_unit: "months".into(),
    }
}

/// Exponential event times with hazard `exp(eta(x))`, covariates uniform on
/// [-1, 1], independent uniform censoring on [0, censor_max].
pub fn exponential_data(
    n: usize,
    p: usize,
    eta: impl Fn(&[f64]) -> f64,
    censor_max: f64,
    seed: u64,
) -> SurvivalDataset {
    let mut rng = rng::rng_from(seed);
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0f64..1.0));
    simulate(x, eta, censor_max, rng)
}

/// As [`exponential_data`] with standard-normal covariates.
pub fn exponential_data_normal(
    n: usize,
    p: usize,
    eta: impl Fn(&[f64]) -> f64,
    censor_max: f64,
    seed: u64,
) -> SurvivalDataset {
    let mut rng = rng::rng_from(seed);
    let x = Array2::from_shape_fn((n, p), |_| {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let v: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    });
    simulate(x, eta, censor_max, rng)
}

fn simulate(x: Array2<f64>, eta: impl Fn(&[f64]) -> f64, censor_max: f64, mut rng: rng::Rng) -> SurvivalDataset {
    let (n, p) = x.dim();
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = x.row(i).to_vec();
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let t = -u.ln() / eta(&row).exp();
        let c = rng.random_range(0.0..censor_max);
        times.push(t.min(c));
        events.push(t <= c);
    }
    let names: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    SurvivalDataset::new(real_schema(&refs), x, times, events).unwrap()
}

/// O(n^2) Harrell C-index over all ordered pairs.
pub fn brute_force_cindex(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..times.len() {
        for j in 0..times.len() {
            if events[i] && times[i] < times[j] {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Direct product-limit survival at time `t`.
pub fn product_limit(times: &[f64], events: &[bool], t: f64) -> f64 {
    let mut distinct: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(&s, &e)| e && s <= t)
        .map(|(&s, _)| s)
        .collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    distinct
        .iter()
        .map(|&s| {
            let at_risk = times.iter().filter(|&&u| u >= s).count() as f64;
            let deaths = times.iter().zip(events).filter(|(&u, &e)| e && u == s).count() as f64;
            1.0 - deaths / at_risk
        })
        .product()
}

/// Two-group log-rank statistic from the observed-minus-expected table.
pub fn logrank_oracle(a: &[(f64, bool)], b: &[(f64, bool)]) -> f64 {
    let mut times: Vec<f64> = a.iter().chain(b).filter(|o| o.1).map(|o| o.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut oe, mut v) = (0.0, 0.0);
    for t in times {
        let n1 = a.iter().filter(|o| o.0 >= t).count() as f64;
        let n2 = b.iter().filter(|o| o.0 >= t).count() as f64;
        let d1 = a.iter().filter(|o| o.1 && o.0 == t).count() as f64;
        let d2 = b.iter().filter(|o| o.1 && o.0 == t).count() as f64;
        let (n, d) = (n1 + n2, d1 + d2);
        oe += d1 - d * n1 / n;
        if n > 1.0 {
            v += n1 * n2 * d * (n - d) / (n * n * (n - 1.0));
        }
    }
    oe * oe / v
}
