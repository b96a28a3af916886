//! Outcome prediction from bags of instance features: Kaplan-Meier interval
//! discretization, an attention-pooled discrete-time survival model, and
//! survival metrics.

pub mod cohort;
pub mod km;
pub mod metrics;
pub mod model;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use km::{equal_probability_cuts, km_estimate, KaplanMeier};
pub use metrics::{c_index, c_index_td, ibs, inbll, logrank_test, median_stratify};
pub use model::{abmil_aggregate, train_survival, Abmil, Fusion, SurvivalConfig, SurvivalModel};

/// Default number of discrete-time intervals.
pub const DEFAULT_INTERVALS: usize = 4;

/// Strictly increasing cut points `t_1 < … < t_J`. Interval `j` covers
/// `(t_{j-1}, t_j]` with `t_0 = 0`, except that interval 0 also holds 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    cuts: Vec<f64>,
}

impl IntervalGrid {
    pub fn new(cuts: Vec<f64>) -> Result<Self> {
        if cuts.is_empty() {
            return Err(Error::Empty("interval grid"));
        }
        if cuts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidConfig(format!("bad cut points {cuts:?}")));
        }
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!("cuts not strictly increasing: {cuts:?}")));
        }
        Ok(Self { cuts })
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.cuts.last().expect("non-empty grid")
    }

    /// Interval holding time `t`; times past the horizon map to the last
    /// interval.
    pub fn interval_of(&self, t: f64) -> usize {
        self.cuts.partition_point(|&c| c < t).min(self.cuts.len() - 1)
    }

    /// Per-interval event indicators for one subject. A subject with an
    /// event contributes `false` for every earlier interval and `true` for
    /// the event interval. A censored subject contributes only the
    /// intervals it survived in full. Events past the horizon count as
    /// survival through every interval.
    pub fn outcomes(&self, duration: f64, event: bool) -> Vec<Option<bool>> {
        let j = self.len();
        if duration > self.horizon() {
            return vec![Some(false); j];
        }
        let k = self.interval_of(duration);
        (0..j)
            .map(|m| match m.cmp(&k) {
                std::cmp::Ordering::Less => Some(false),
                std::cmp::Ordering::Equal if event => Some(true),
                std::cmp::Ordering::Equal if duration >= self.cuts[k] => Some(false),
                _ => None,
            })
            .collect()
    }

    pub fn outcome_matrix(&self, durations: &[f64], events: &[bool]) -> Array2<Option<bool>> {
        let mut out = Array2::from_elem((durations.len(), self.len()), None);
        for (i, (&d, &e)) in durations.iter().zip(events).enumerate() {
            for (m, y) in self.outcomes(d, e).into_iter().enumerate() {
                out[[i, m]] = y;
            }
        }
        out
    }
}

/// One subject: follow-up time, event flag, a bag of instance features
/// (`instances × dim`) and an optional report embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub subject_id: String,
    pub duration: f64,
    pub event: bool,
    pub bag: Array2<f64>,
    pub report: Option<Vec<f64>>,
}

impl SurvivalRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.duration.is_finite() {
            return Err(Error::NonFinite);
        }
        if self.duration < 0.0 {
            return Err(Error::NegativeDuration(self.duration));
        }
        if self.bag.nrows() == 0 {
            return Err(Error::Empty("instance bag"));
        }
        Ok(())
    }
}

pub fn durations_events(records: &[SurvivalRecord]) -> (Vec<f64>, Vec<bool>) {
    records.iter().map(|r| (r.duration, r.event)).unzip()
}

/// Per-interval event probabilities for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPrediction {
    pub hazards: Vec<f64>,
}

impl SurvivalPrediction {
    pub fn from_hazards(hazards: ArrayView1<f64>) -> Self {
        Self {
            hazards: hazards.to_vec(),
        }
    }

    /// `Ŝ(t_j) = Π_{u ≤ j} (1 - p_u)`.
    pub fn survival(&self) -> Vec<f64> {
        let mut s = 1.0;
        self.hazards
            .iter()
            .map(|p| {
                s *= 1.0 - p;
                s
            })
            .collect()
    }

    /// Expected number of intervals lost, `Σ_j (1 - Ŝ(t_j))`. Higher means an
    /// earlier expected event.
    pub fn risk(&self) -> f64 {
        self.survival().iter().map(|s| 1.0 - s).sum()
    }
}
