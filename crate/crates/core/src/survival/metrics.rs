//! Concordance, Brier and likelihood metrics for survival predictions, plus
//! median risk stratification and the log-rank test.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::km::check_times;
use super::IntervalGrid;
use crate::error::{Error, Result};

/// Probability clip used by [`inbll`].
pub const PROB_CLIP: f64 = 1e-7;

/// How to read the scores passed to [`c_index_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Higher score means an earlier event.
    #[default]
    Risk,
    /// Higher score means a later event, e.g. a predicted survival time.
    SurvivalTime,
}

/// Harrell's C-index with risk scores: a pair `(i, j)` is comparable when
/// `d_i < d_j` and `i` had an event; it is concordant when `risk_i >
/// risk_j`, and tied risks count one half.
pub fn c_index(risk: &[f64], durations: &[f64], events: &[bool]) -> Result<f64> {
    c_index_with(risk, durations, events, ScoreKind::Risk)
}

pub fn c_index_with(scores: &[f64], durations: &[f64], events: &[bool], kind: ScoreKind) -> Result<f64> {
    check_times(durations, events)?;
    if scores.len() != durations.len() {
        return Err(Error::LengthMismatch(scores.len(), durations.len()));
    }
    let sign = match kind {
        ScoreKind::Risk => 1.0,
        ScoreKind::SurvivalTime => -1.0,
    };
    let mut num = 0.0;
    let mut den = 0u64;
    for i in 0..scores.len() {
        if !events[i] {
            continue;
        }
        for j in 0..scores.len() {
            if durations[i] < durations[j] {
                den += 1;
                let (ri, rj) = (sign * scores[i], sign * scores[j]);
                if ri > rj {
                    num += 1.0;
                } else if ri == rj {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(num / den as f64)
}

fn check_curves(curves: ArrayView2<f64>, durations: &[f64], events: &[bool], grid: &IntervalGrid) -> Result<()> {
    check_times(durations, events)?;
    if curves.nrows() != durations.len() {
        return Err(Error::LengthMismatch(curves.nrows(), durations.len()));
    }
    if curves.ncols() != grid.len() {
        return Err(Error::DimMismatch {
            expected: grid.len(),
            actual: curves.ncols(),
        });
    }
    Ok(())
}

/// Time-dependent C-index. At every grid time `t`, pairs with `d_i ≤ t <
/// d_j` and an event for `i` are compared on `Ŝ(t)`; the lower survival
/// wins and ties count one half. Pairs are pooled over all grid times.
///
/// `curves[[i, m]]` is subject `i`'s survival at `grid.cuts()[m]`.
pub fn c_index_td(curves: ArrayView2<f64>, durations: &[f64], events: &[bool], grid: &IntervalGrid) -> Result<f64> {
    check_curves(curves, durations, events, grid)?;
    let n = durations.len();
    let mut num = 0.0;
    let mut den = 0u64;
    for (m, &t) in grid.cuts().iter().enumerate() {
        for i in 0..n {
            if !events[i] || durations[i] > t {
                continue;
            }
            for j in 0..n {
                if durations[j] > t {
                    den += 1;
                    let (si, sj) = (curves[[i, m]], curves[[j, m]]);
                    if si < sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
    }
    if den == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs at any grid time".into()));
    }
    Ok(num / den as f64)
}

/// Mean squared error between predicted survival and observed status at
/// time `t`, over subjects still under observation. Censored subjects drop
/// out after their censoring time. Returns `None` when nobody qualifies.
pub(crate) fn brier_at(
    curves: ArrayView2<f64>,
    durations: &[f64],
    events: &[bool],
    grid: &IntervalGrid,
    t: f64,
) -> Option<f64> {
    let col = grid.interval_of(t);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&d, &e)) in durations.iter().zip(events).enumerate() {
        if !e && t > d {
            continue;
        }
        let alive = if d > t { 1.0 } else { 0.0 };
        sum += (curves[[i, col]] - alive).powi(2);
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Integrated Brier score over `[0, horizon]`, normalized by the horizon.
///
/// Each curve is a step function: `curves[[i, j]]` holds on grid interval
/// `j`, and the last value continues past the final cut. Between any two
/// consecutive breakpoints (grid cuts and observed durations) the integrand
/// is constant, so evaluating it at segment midpoints is exact.
pub fn ibs(
    curves: ArrayView2<f64>,
    durations: &[f64],
    events: &[bool],
    horizon: f64,
    grid: &IntervalGrid,
) -> Result<f64> {
    check_curves(curves, durations, events, grid)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidConfig(format!("horizon {horizon} must be positive")));
    }
    let mut points: Vec<f64> = std::iter::once(0.0)
        .chain(grid.cuts().iter().copied())
        .chain(durations.iter().copied())
        .filter(|&t| t < horizon)
        .chain(std::iter::once(horizon))
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut total = 0.0;
    for w in points.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if let Some(b) = brier_at(curves, durations, events, grid, mid) {
            total += b * (w[1] - w[0]);
        }
    }
    Ok(total / horizon)
}

/// Integrated negative log-likelihood of per-interval event indicators.
/// `None` outcomes are unobserved (after censoring or after the event) and
/// contribute nothing; the sum is divided by the number of subjects.
pub fn inbll(probs: ArrayView2<f64>, outcomes: ArrayView2<Option<bool>>) -> Result<f64> {
    if probs.dim() != outcomes.dim() {
        return Err(Error::InvalidConfig(format!(
            "probability shape {:?} vs outcome shape {:?}",
            probs.dim(),
            outcomes.dim()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::Empty("survival cohort"));
    }
    let mut total = 0.0;
    for (&p, y) in probs.iter().zip(outcomes.iter()) {
        if let Some(y) = y {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            total -= if *y { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(total / probs.nrows() as f64)
}

/// Splits subjects at the median score: strictly above is high risk, the
/// rest (including the median itself) is low risk. Indices are ascending.
pub fn median_stratify(scores: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if scores.len() < 2 {
        return Err(Error::InvalidConfig("need >= 2 subjects to stratify".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (high, low): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scores[i] > median);
    if high.is_empty() || low.is_empty() {
        return Err(Error::UndefinedMetric("scores do not split at the median".into()));
    }
    Ok((high, low))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
}

/// Two-group log-rank test on `(duration, event)` observations, one degree
/// of freedom.
pub fn logrank_test(a: &[(f64, bool)], b: &[(f64, bool)]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("log-rank group"));
    }
    let all: Vec<(f64, bool, bool)> = a
        .iter()
        .map(|&(d, e)| (d, e, true))
        .chain(b.iter().map(|&(d, e)| (d, e, false)))
        .collect();
    let durations: Vec<f64> = all.iter().map(|x| x.0).collect();
    let events: Vec<bool> = all.iter().map(|x| x.1).collect();
    check_times(&durations, &events)?;
    let mut times: Vec<f64> = all.iter().filter(|x| x.1).map(|x| x.0).collect();
    if times.is_empty() {
        return Err(Error::NoEvents);
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for &t in &times {
        let mut n = 0.0;
        let mut n_a = 0.0;
        let mut d = 0.0;
        let mut d_a = 0.0;
        for &(dur, ev, in_a) in &all {
            if dur >= t {
                n += 1.0;
                n_a += f64::from(u8::from(in_a));
                if dur == t && ev {
                    d += 1.0;
                    d_a += f64::from(u8::from(in_a));
                }
            }
        }
        observed += d_a;
        expected += d * n_a / n;
        if n > 1.0 {
            variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
        }
    }
    if variance <= 0.0 {
        return Ok(LogRank {
            statistic: 0.0,
            p_value: 1.0,
            observed_a: observed,
            expected_a: expected,
        });
    }
    let statistic = (observed - expected).powi(2) / variance;
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    Ok(LogRank {
        statistic,
        p_value: 1.0 - chi.cdf(statistic),
        observed_a: observed,
        expected_a: expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn grid(c: &[f64]) -> IntervalGrid {
        IntervalGrid::new(c.to_vec()).unwrap()
    }

    #[test]
    fn c_index_examples() {
        let d = [1.0, 2.0, 3.0];
        let e = [true; 3];
        assert_eq!(c_index(&[3.0, 2.0, 1.0], &d, &e).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 2.0, 3.0], &d, &e).unwrap(), 0.0);
        let c = c_index(&[0.9, 0.9, 0.1], &d, &e).unwrap();
        assert!((c - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(c_index_with(&[1.0, 2.0, 3.0], &d, &e, ScoreKind::SurvivalTime).unwrap(), 1.0);
        assert!(c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn c_index_td_examples() {
        let g = grid(&[1.0, 2.0, 3.0]);
        let d = [1.0, 2.0, 3.0];
        let e = [true; 3];
        // Subject i has died by cut i.
        let perfect = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(c_index_td(perfect.view(), &d, &e, &g).unwrap(), 1.0);
        let flat = Array2::from_elem((3, 3), 0.4);
        assert_eq!(c_index_td(flat.view(), &d, &e, &g).unwrap(), 0.5);
    }

    #[test]
    fn ibs_anchors() {
        let g = grid(&[1.0, 2.0]);
        let half = Array2::from_elem((1, 2), 0.5);
        let v = ibs(half.view(), &[1.0], &[true], 2.0, &g).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        // Oracle curves: survival 1 on the interval before each death.
        let d = [1.0, 2.0, 2.0];
        let oracle = array![[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]];
        assert_eq!(ibs(oracle.view(), &d, &[true; 3], 2.0, &g).unwrap(), 0.0);
        assert!(ibs(half.view(), &[1.0], &[true], 0.0, &g).is_err());
    }

    #[test]
    fn inbll_examples() {
        let p = array![[0.5]];
        let y = array![[Some(true)]];
        assert!((inbll(p.view(), y.view()).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = array![[0.0, 1.0, 0.3]];
        let y = array![[Some(false), Some(true), None]];
        let v = inbll(p.view(), y.view()).unwrap();
        assert!(v <= 2e-6 && v >= 0.0);
        assert!(inbll(p.view(), array![[Some(true)]].view()).is_err());
    }

    #[test]
    fn stratify_examples() {
        assert_eq!(median_stratify(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (vec![2, 3], vec![0, 1]));
        assert_eq!(median_stratify(&[1.0, 2.0, 3.0]).unwrap(), (vec![2], vec![0, 1]));
        assert!(median_stratify(&[2.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn logrank_examples() {
        let g: Vec<(f64, bool)> = (1..=10).map(|i| (f64::from(i), i % 3 != 0)).collect();
        assert!(logrank_test(&g, &g).unwrap().p_value >= 0.99);

        let early: Vec<(f64, bool)> = (1..=10).map(|i| (f64::from(i), true)).collect();
        let late: Vec<(f64, bool)> = (1..=10).map(|i| (f64::from(i) + 100.0, true)).collect();
        assert!(logrank_test(&early, &late).unwrap().p_value < 0.01);

        // A dies at 1 with both at risk: O = 1, E = 1/2, V = 1/4. At 2 only
        // B remains, which adds nothing.
        let r = logrank_test(&[(1.0, true)], &[(2.0, true)]).unwrap();
        assert_eq!((r.observed_a, r.expected_a), (1.0, 0.5));
        assert!((r.statistic - 1.0).abs() < 1e-15);
        assert!((r.p_value - 0.3173105078629141).abs() < 1e-9);
        assert!(matches!(logrank_test(&[(1.0, false)], &[(2.0, false)]), Err(Error::NoEvents)));
    }

    proptest! {
        #[test]
        fn c_index_is_antisymmetric_without_ties(
            rows in prop::collection::vec((0u16..1000, 1u8..20, any::<bool>()), 2..40)
        ) {
            let mut risk: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
            // Spread duplicates apart so no risk ties remain.
            for (i, r) in risk.iter_mut().enumerate() {
                *r += i as f64 * 1e-6;
            }
            let d: Vec<f64> = rows.iter().map(|r| f64::from(r.1)).collect();
            let e: Vec<bool> = rows.iter().map(|r| r.2).collect();
            let neg: Vec<f64> = risk.iter().map(|r| -r).collect();
            if let (Ok(a), Ok(b)) = (c_index(&risk, &d, &e), c_index(&neg, &d, &e)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn inbll_decreases_toward_target(y in any::<bool>(), start in 0.01f64..0.99) {
            let target = if y { 1.0 } else { 0.0 };
            let outcome = array![[Some(y)]];
            let mut prev = f64::INFINITY;
            for k in 0..=10 {
                let p = start + (target - start) * f64::from(k) / 10.0;
                let v = inbll(array![[p]].view(), outcome.view()).unwrap();
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
