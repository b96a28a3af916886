//! Downstream evaluation: zero-shot classification, linear probing,
//! cross-modal retrieval and the statistics used to report them.

pub mod metrics;
pub mod probe;
pub mod stats;
pub mod zeroshot;

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

pub use crate::synth::PromptSet;
pub use metrics::{accuracy, auc, auc_ovr_macro, recall_at_k};
pub use probe::{linear_probe, ProbeConfig};
pub use stats::{bootstrap, bootstrap_ci, mann_whitney_u, Bootstrap, Interval};
pub use zeroshot::{class_embedding, zero_shot_classify};

use crate::error::{Error, Result};

pub const RETRIEVAL_KS: [usize; 3] = [1, 10, 50];

/// Named metrics with bootstrap intervals for one evaluation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, Interval>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, interval: Interval) {
        self.metrics.insert(name.into(), interval);
    }

    pub fn point(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|i| i.point)
    }

    /// Checks `ci_low ≤ point ≤ ci_high` for every bootstrapped metric.
    pub fn validate(&self) -> Result<()> {
        for (name, i) in &self.metrics {
            if i.replicates > 0 && !(i.ci_low <= i.point && i.point <= i.ci_high) {
                return Err(Error::InvalidConfig(format!("metric {name} interval {i:?}")));
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Paired retrieval in both directions. Row `i` of `images` matches row `i`
/// of `texts`. Keys look like `"image_to_text@10"`.
pub fn paired_retrieval(
    images: ArrayView2<f64>,
    texts: ArrayView2<f64>,
    ks: &[usize],
) -> Result<BTreeMap<String, f64>> {
    if images.nrows() != texts.nrows() {
        return Err(Error::LengthMismatch(images.nrows(), texts.nrows()));
    }
    let truth: Vec<usize> = (0..images.nrows()).collect();
    let mut out = BTreeMap::new();
    for (dir, q, g) in [("image_to_text", images, texts), ("text_to_image", texts, images)] {
        for (k, r) in recall_at_k(q, g, &truth, ks)? {
            out.insert(format!("{dir}@{k}"), r);
        }
    }
    Ok(out)
}
