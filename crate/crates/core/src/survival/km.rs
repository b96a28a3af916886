//! Kaplan-Meier estimation and equal-probability interval cuts.

use log::warn;

use super::IntervalGrid;
use crate::error::{Error, Result};

pub(crate) fn check_times(durations: &[f64], events: &[bool]) -> Result<()> {
    if durations.len() != events.len() {
        return Err(Error::LengthMismatch(durations.len(), events.len()));
    }
    if durations.is_empty() {
        return Err(Error::Empty("survival cohort"));
    }
    for &d in durations {
        if !d.is_finite() {
            return Err(Error::NonFinite);
        }
        if d < 0.0 {
            return Err(Error::NegativeDuration(d));
        }
    }
    Ok(())
}

/// Right-continuous product-limit survival curve.
#[derive(Debug, Clone, PartialEq)]
pub struct KaplanMeier {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// `Ŝ` just after each entry of `times`.
    pub survival: Vec<f64>,
    pub max_time: f64,
}

impl KaplanMeier {
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    pub fn min_survival(&self) -> f64 {
        self.survival.last().copied().unwrap_or(1.0)
    }
}

pub fn km_estimate(durations: &[f64], events: &[bool]) -> Result<KaplanMeier> {
    check_times(durations, events)?;
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
    let mut at_risk = durations.len();
    let mut s = 1.0;
    let mut times = Vec::new();
    let mut survival = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = durations[order[i]];
        let mut j = i;
        let mut deaths = 0;
        while j < order.len() && durations[order[j]] == t {
            deaths += usize::from(events[order[j]]);
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            times.push(t);
            survival.push(s);
        }
        at_risk -= j - i;
        i = j;
    }
    let max_time = durations.iter().copied().fold(0.0, f64::max);
    Ok(KaplanMeier {
        times,
        survival,
        max_time,
    })
}

/// Cuts at the earliest times where `Ŝ` reaches `1 - j/J · (1 - Ŝ_min)` for
/// `j = 1..J-1`, followed by the largest observed time. Coinciding cuts are
/// merged, so the grid may hold fewer than `J` intervals.
pub fn equal_probability_cuts(km: &KaplanMeier, j: usize) -> Result<IntervalGrid> {
    if j == 0 {
        return Err(Error::InvalidConfig("need at least one interval".into()));
    }
    if km.times.is_empty() {
        return Err(Error::NoEvents);
    }
    let drop = 1.0 - km.min_survival();
    let mut cuts: Vec<f64> = Vec::with_capacity(j);
    for step in 1..j {
        let level = 1.0 - step as f64 / j as f64 * drop;
        // Tolerance guards against the level landing a rounding error below
        // an exact step of the curve.
        let k = km
            .survival
            .iter()
            .position(|&s| s <= level + 1e-12)
            .unwrap_or(km.times.len() - 1);
        cuts.push(km.times[k]);
    }
    cuts.push(km.max_time);
    let before = cuts.len();
    cuts.dedup();
    if cuts.len() < before {
        warn!("merged {} duplicate interval cuts; {} intervals remain", before - cuts.len(), cuts.len());
    }
    IntervalGrid::new(cuts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_censored_is_flat() {
        let km = km_estimate(&[1.0, 2.0, 3.0], &[false; 3]).unwrap();
        for t in [0.0, 1.5, 10.0] {
            assert_eq!(km.at(t), 1.0);
        }
        assert!(matches!(equal_probability_cuts(&km, 4), Err(Error::NoEvents)));
    }

    #[test]
    fn product_limit_by_hand() {
        let km = km_estimate(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        let expect = [(0.5, 1.0), (1.0, 2.0 / 3.0), (2.5, 1.0 / 3.0), (3.0, 0.0)];
        for (t, s) in expect {
            assert!((km.at(t) - s).abs() < 1e-15, "S({t})");
        }
        let one = km_estimate(&[5.0], &[true]).unwrap();
        assert_eq!((one.at(4.999), one.at(5.0)), (1.0, 0.0));
        // A censored subject leaves the risk set without a step.
        let km = km_estimate(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert!((km.at(2.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.at(3.0), 0.0);
    }

    #[test]
    fn negative_duration_is_rejected() {
        assert!(matches!(km_estimate(&[1.0, -0.5], &[true, true]), Err(Error::NegativeDuration(_))));
    }

    #[test]
    fn uniform_times_cut_at_quartiles() {
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        let km = km_estimate(&d, &[true; 100]).unwrap();
        let grid = equal_probability_cuts(&km, 4).unwrap();
        assert_eq!(grid.cuts(), &[25.0, 50.0, 75.0, 100.0]);
        assert_eq!(equal_probability_cuts(&km, 1).unwrap().cuts(), &[100.0]);
    }

    #[test]
    fn duplicate_cuts_are_merged() {
        let km = km_estimate(&[1.0, 1.0, 1.0, 9.0], &[true, true, true, false]).unwrap();
        let grid = equal_probability_cuts(&km, 4).unwrap();
        assert_eq!(grid.cuts(), &[1.0, 9.0]);
    }
}
