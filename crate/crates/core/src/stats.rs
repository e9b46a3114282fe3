//! Non-parametric survival estimation and evaluation statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Kaplan–Meier step function. Entries are listed at the distinct event
/// times only; the value before the first time is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub at_risk: Vec<usize>,
    /// Cohort size.
    pub n: usize,
    /// Largest observed time (event or censoring).
    pub max_time: f64,
    /// Subjects still under observation at `max_time`.
    pub at_risk_end: usize,
}

impl SurvivalCurve {
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    /// Area under the curve on `[0, horizon]`.
    pub fn restricted_mean(&self, horizon: f64) -> f64 {
        let mut area = 0.0;
        let mut prev_t = 0.0;
        let mut prev_s = 1.0;
        for (&t, &s) in self.times.iter().zip(&self.survival) {
            if t >= horizon {
                break;
            }
            area += prev_s * (t - prev_t);
            prev_t = t;
            prev_s = s;
        }
        area + prev_s * (horizon - prev_t).max(0.0)
    }
}

/// Sorted distinct times with (deaths, at-risk) counts.
pub(crate) struct RiskTable {
    pub(crate) times: Vec<f64>,
    pub(crate) deaths: Vec<usize>,
    pub(crate) at_risk: Vec<usize>,
}

pub(crate) fn risk_table(times: &[f64], events: &[bool]) -> RiskTable {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut table = RiskTable {
        times: Vec::new(),
        deaths: Vec::new(),
        at_risk: Vec::new(),
    };
    let mut remaining = times.len();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0;
        let mut m = 0;
        while k < order.len() && times[order[k]] == t {
            d += usize::from(events[order[k]]);
            m += 1;
            k += 1;
        }
        if d > 0 {
            table.times.push(t);
            table.deaths.push(d);
            table.at_risk.push(remaining);
        }
        remaining -= m;
    }
    table
}

/// Product-limit estimate with a plain-scale Greenwood 95% band clipped to
/// `[0, 1]`.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<SurvivalCurve> {
    if times.is_empty() {
        return Err(Error::InvalidInput("kaplan_meier on an empty cohort".into()));
    }
    if times.len() != events.len() {
        return Err(Error::InvalidInput("times and events differ in length".into()));
    }
    let table = risk_table(times, events);
    let k = table.times.len();
    let mut curve = SurvivalCurve {
        times: table.times,
        survival: Vec::with_capacity(k),
        ci_lower: Vec::with_capacity(k),
        ci_upper: Vec::with_capacity(k),
        at_risk: table.at_risk,
        n: times.len(),
        max_time: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        at_risk_end: 0,
    };
    curve.at_risk_end = times.iter().filter(|&&t| t == curve.max_time).count();
    let mut s = 1.0;
    let mut greenwood = 0.0;
    for (&d, &n) in table.deaths.iter().zip(&curve.at_risk) {
        s *= 1.0 - d as f64 / n as f64;
        if d < n {
            greenwood += d as f64 / (n as f64 * (n - d) as f64);
        }
        let (lo, hi) = if s > 0.0 {
            let se = s * greenwood.sqrt();
            ((s - Z95 * se).max(0.0), (s + Z95 * se).min(1.0))
        } else {
            (0.0, 0.0)
        };
        curve.survival.push(s);
        curve.ci_lower.push(lo);
        curve.ci_upper.push(hi);
    }
    Ok(curve)
}

/// First listed time with survival at or below one half.
pub fn median_survival(curve: &SurvivalCurve) -> Option<f64> {
    curve
        .times
        .iter()
        .zip(&curve.survival)
        .find(|(_, &s)| s <= 0.5 + 1e-12)
        .map(|(&t, _)| t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    /// Chi-squared statistic with one degree of freedom.
    pub statistic: f64,
    pub p_value: f64,
}

/// Upper tail of the chi-squared distribution with one degree of freedom.
pub fn chi2_sf_1(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        statrs::function::gamma::gamma_ur(0.5, x / 2.0)
    }
}

/// Two-sample log-rank test.
pub fn logrank_test(
    a_times: &[f64],
    a_events: &[bool],
    b_times: &[f64],
    b_events: &[bool],
) -> Result<LogRankResult> {
    if a_times.is_empty() || b_times.is_empty() {
        return Err(Error::InvalidInput("log-rank test needs two non-empty groups".into()));
    }
    if a_times.len() != a_events.len() || b_times.len() != b_events.len() {
        return Err(Error::InvalidInput("times and events differ in length".into()));
    }
    let mut obs: Vec<(f64, bool, bool)> = a_times
        .iter()
        .zip(a_events)
        .map(|(&t, &e)| (t, e, true))
        .chain(b_times.iter().zip(b_events).map(|(&t, &e)| (t, e, false)))
        .collect();
    if !obs.iter().any(|o| o.1) {
        return Err(Error::NoEvents);
    }
    obs.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut n = obs.len() as f64;
    let mut n1 = a_times.len() as f64;
    let mut o_minus_e = 0.0;
    let mut var = 0.0;
    let mut k = 0;
    while k < obs.len() {
        let t = obs[k].0;
        let (mut d, mut d1, mut m, mut m1) = (0.0, 0.0, 0.0, 0.0);
        while k < obs.len() && obs[k].0 == t {
            let (_, e, in_a) = obs[k];
            m += 1.0;
            if in_a {
                m1 += 1.0;
            }
            if e {
                d += 1.0;
                if in_a {
                    d1 += 1.0;
                }
            }
            k += 1;
        }
        if d > 0.0 {
            o_minus_e += d1 - n1 * d / n;
            if n > 1.0 {
                var += n1 * (n - n1) * d * (n - d) / (n * n * (n - 1.0));
            }
        }
        n -= m;
        n1 -= m1;
    }
    let statistic = if var > 0.0 { o_minus_e * o_minus_e / var } else { 0.0 };
    Ok(LogRankResult {
        statistic,
        p_value: chi2_sf_1(statistic),
    })
}

/// Harrell's concordance index. A pair is comparable when the patient with
/// the strictly shorter time had an event; risk ties count one half.
pub fn concordance_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    if risks.len() != times.len() || times.len() != events.len() {
        return Err(Error::InvalidInput("risks, times and events differ in length".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    for (pos, &i) in order.iter().enumerate() {
        if !events[i] {
            continue;
        }
        let ti = times[i];
        let ri = risks[i];
        for &j in order[pos + 1..].iter() {
            if times[j] <= ti {
                continue;
            }
            comparable += 1;
            let rj = risks[j];
            if ri > rj {
                concordant += 1;
            } else if ri == rj {
                tied += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok((2 * concordant + tied) as f64 / (2 * comparable) as f64)
}

/// Mean after dropping the `floor(n/4)` smallest and largest values.
pub fn interquartile_mean(values: &[f64]) -> Result<f64> {
    if values.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "interquartile mean needs at least 4 values, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted.len() / 4;
    let kept = &sorted[cut..sorted.len() - cut];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if hi == lo {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn km_hand_example() {
        let c = kaplan_meier(&[1.0, 2.0, 3.0, 4.0], &[true, true, false, true]).unwrap();
        assert_eq!(c.times, vec![1.0, 2.0, 4.0]);
        assert!((c.survival[0] - 0.75).abs() < 1e-12);
        assert!((c.survival[1] - 0.5).abs() < 1e-12);
        assert_eq!(c.survival[2], 0.0);
        assert_eq!(c.at_risk, vec![4, 3, 1]);
        assert_eq!(median_survival(&c), Some(2.0));
        for i in 0..3 {
            assert!(c.ci_lower[i] <= c.survival[i] && c.survival[i] <= c.ci_upper[i]);
        }
    }

    #[test]
    fn km_all_censored_and_single() {
        let c = kaplan_meier(&[1.0, 2.0, 3.0], &[false; 3]).unwrap();
        assert!(c.times.is_empty());
        assert_eq!(c.at(10.0), 1.0);
        assert_eq!(median_survival(&c), None);

        let c = kaplan_meier(&[5.0], &[true]).unwrap();
        assert_eq!(c.at(4.9), 1.0);
        assert_eq!(c.at(5.0), 0.0);
        assert_eq!(median_survival(&c), Some(5.0));
        assert!(kaplan_meier(&[], &[]).is_err());
    }

    #[test]
    fn restricted_mean_of_step() {
        let c = kaplan_meier(&[2.0, 4.0], &[true, false]).unwrap();
        // 1 on [0,2), 0.5 on [2,4]
        assert!((c.restricted_mean(4.0) - 3.0).abs() < 1e-12);
        let c = kaplan_meier(&[2.0, 4.0], &[false, false]).unwrap();
        assert_eq!(c.restricted_mean(4.0), 4.0);
    }

    #[test]
    fn logrank_identical_groups() {
        let t = [1.0, 2.0, 3.0, 5.0];
        let e = [true, false, true, true];
        let r = logrank_test(&t, &e, &t, &e).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn logrank_disjoint_groups_hand_value() {
        // O-E = 0.5 + 0.6 + 0.75, V = 0.25 + 0.24 + 0.1875
        let r = logrank_test(&[1.0, 2.0, 3.0], &[true; 3], &[4.0, 5.0, 6.0], &[true; 3]).unwrap();
        assert!((r.statistic - 1.85f64.powi(2) / 0.6775).abs() < 1e-9);
        let swapped =
            logrank_test(&[4.0, 5.0, 6.0], &[true; 3], &[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        assert!((r.statistic - swapped.statistic).abs() < 1e-12);
        assert!(r.p_value < 0.05);
    }

    #[test]
    fn logrank_needs_events() {
        assert!(matches!(
            logrank_test(&[1.0], &[false], &[2.0], &[false]),
            Err(Error::NoEvents)
        ));
    }

    #[test]
    fn chi2_tail_reference_points() {
        assert!((chi2_sf_1(3.841_458_820_694_124) - 0.05).abs() < 1e-10);
        assert!((chi2_sf_1(1.0) - 0.317_310_507_862_914_1).abs() < 1e-10);
    }

    #[test]
    fn cindex_examples() {
        let c = concordance_index(
            &[5.0, 1.0, 2.0, 4.0],
            &[2.0, 4.0, 6.0, 8.0],
            &[true, false, true, true],
        )
        .unwrap();
        assert_eq!(c, 0.75);
        let c = concordance_index(&[1.0; 4], &[2.0, 4.0, 6.0, 8.0], &[true; 4]).unwrap();
        assert_eq!(c, 0.5);
        let c = concordance_index(&[4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0], &[true; 4]).unwrap();
        assert_eq!(c, 1.0);
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(Error::NoComparablePairs)
        ));
        // tied times with both events are not comparable
        assert!(concordance_index(&[1.0, 2.0], &[3.0, 3.0], &[true, true]).is_err());
    }

    #[test]
    fn iqm_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(interquartile_mean(&v).unwrap(), 4.5);
        assert!((interquartile_mean(&[0.3; 25]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(interquartile_mean(&[0.25; 25]).unwrap(), 0.25);
        let v: Vec<f64> = (1..=25).map(f64::from).collect();
        assert_eq!(interquartile_mean(&v).unwrap(), 13.0);
        assert!(interquartile_mean(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.1) - 10.9).abs() < 1e-12);
        assert_eq!(quantile_sorted(&v, 1.0), 100.0);
        assert_eq!(quantile_sorted(&[3.0], 0.5), 3.0);
    }
}
