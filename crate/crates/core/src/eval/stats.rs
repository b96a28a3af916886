//! Bootstrap confidence intervals and the Mann-Whitney U test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::metrics::midranks;
use crate::error::{Error, Result};

pub const DEFAULT_REPLICATES: usize = 1000;
/// Attempts per replicate before giving up on a metric that stays undefined.
pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub replicates: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Point estimate plus one metric value per bootstrap replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub point: f64,
    pub replicates: Vec<f64>,
}

impl Bootstrap {
    /// Percentile interval at `level`, widened if needed so it contains the
    /// point estimate.
    pub fn interval(&self, level: f64) -> Result<Interval> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidConfig(format!("confidence level {level}")));
        }
        if self.replicates.is_empty() {
            return Ok(Interval {
                point: self.point,
                ci_low: self.point,
                ci_high: self.point,
                replicates: 0,
            });
        }
        let mut sorted = self.replicates.clone();
        sorted.sort_by(f64::total_cmp);
        let alpha = 1.0 - level;
        Ok(Interval {
            point: self.point,
            ci_low: quantile(&sorted, alpha / 2.0).min(self.point),
            ci_high: quantile(&sorted, 1.0 - alpha / 2.0).max(self.point),
            replicates: sorted.len(),
        })
    }
}

/// Nonparametric bootstrap over `n` samples. `metric` receives the
/// resampled indices. Replicate `r` draws from its own ChaCha stream
/// `(seed, r)`, so the result does not depend on evaluation order.
/// Replicates where the metric is undefined are redrawn up to
/// [`MAX_REDRAWS`] times.
pub fn bootstrap<F>(n: usize, metric: F, replicates: usize, seed: u64) -> Result<Bootstrap>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::Empty("bootstrap data"));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;
    let mut values = Vec::with_capacity(replicates);
    let mut idx = vec![0usize; n];
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut attempt = 0;
        let v = loop {
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..n);
            }
            match metric(&idx) {
                Ok(v) => break v,
                Err(Error::UndefinedMetric(msg)) => {
                    attempt += 1;
                    if attempt >= MAX_REDRAWS {
                        return Err(Error::UndefinedMetric(format!(
                            "replicate {r} undefined after {MAX_REDRAWS} draws: {msg}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        };
        values.push(v);
    }
    Ok(Bootstrap {
        point,
        replicates: values,
    })
}

/// Percentile bootstrap interval; see [`bootstrap`] and
/// [`Bootstrap::interval`].
pub fn bootstrap_ci<F>(n: usize, metric: F, replicates: usize, level: f64, seed: u64) -> Result<Interval>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level {level}")));
    }
    bootstrap(n, metric, replicates, seed)?.interval(level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `#(a > b) + ½ #(a = b)` over all cross pairs.
    pub u_a: f64,
    pub u_b: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided Mann-Whitney U with midranks, tie-corrected variance and a
/// continuity correction. When every value is identical the variance is
/// zero and `p = 1`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("Mann-Whitney sample"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r_a: f64 = ranks[..a.len()].iter().sum();
    let u_a = r_a - na * (na + 1.0) / 2.0;
    let u_b = na * nb - u_a;
    let n = na + nb;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney {
            u_a,
            u_b,
            z: 0.0,
            p_value: 1.0,
        });
    }
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(MannWhitney {
        u_a,
        u_b,
        z: z * (u_a - mean).signum(),
        p_value,
    })
}
