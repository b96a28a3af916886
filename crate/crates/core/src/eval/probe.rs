//! Linear probing on frozen features.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, auc_ovr_macro};
use crate::error::{Error, Result};
use crate::nn::{zeros_like, AdamW, Linear};

/// Training-set fractions used for the data-efficiency sweep.
pub const PROBE_FRACTIONS: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn paper(seed: u64) -> Self {
        Self {
            lr: 5e-5,
            epochs: 20,
            batch_size: 128,
            weight_decay: 0.0,
            seed,
        }
    }

    /// A larger step and more epochs, so small desk datasets converge.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr: 1e-2,
            epochs: 100,
            batch_size: 32,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!("probe config {self:?}")));
        }
        Ok(())
    }
}

/// Picks `round(fraction · n_c)` indices from every class `c`. Fails if any
/// class ends up with no examples.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("fraction {fraction} not in (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, mut idx) in by_class {
        let take = (fraction * idx.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::InvalidConfig(format!(
                "class {class} has no examples at fraction {fraction}"
            )));
        }
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub head: Linear,
    pub n_classes: usize,
    pub n_train: usize,
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
}

impl LinearProbe {
    pub fn probabilities(&self, x: ArrayView2<f64>) -> Array2<f64> {
        softmax_rows(&self.head.forward(x))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.head
            .forward(x)
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }

    /// One-vs-rest macro AUC of the softmax scores.
    pub fn auc(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        auc_ovr_macro(self.probabilities(x).view(), labels)
    }
}

/// Fits a single linear layer with softmax cross-entropy on `x` (rows are
/// frozen features). The training labels must contain at least two classes.
pub fn fit_linear_probe(
    x: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    cfg.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::LengthMismatch(x.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("probe training set"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidConfig(format!("label {bad} >= class count {n_classes}")));
    }
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidConfig("probe needs >= 2 classes in training labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Linear::new(x.ncols(), n_classes, &mut rng);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let logits = head.forward(xb.view());
            let mut g = softmax_rows(&logits);
            let b = chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                total -= g[[r, labels[i]]].max(f64::MIN_POSITIVE).ln();
                g[[r, labels[i]]] -= 1.0;
            }
            g /= b;
            let mut grads = zeros_like(&head);
            head.backward(xb.view(), g.view(), &mut grads);
            opt.step(&mut head, &grads, cfg.lr);
        }
        epoch_loss.push(total / labels.len() as f64);
    }
    Ok(LinearProbe {
        head,
        n_classes,
        n_train: labels.len(),
        epoch_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub probe: LinearProbe,
    pub test_auc: f64,
}

/// Trains on a stratified `fraction` of the training set and reports AUC
/// on the full test set.
pub fn linear_probe(
    train_x: ArrayView2<f64>,
    train_y: &[usize],
    test_x: ArrayView2<f64>,
    test_y: &[usize],
    fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if train_x.nrows() != train_y.len() {
        return Err(Error::LengthMismatch(train_x.nrows(), train_y.len()));
    }
    let idx = stratified_subsample(train_y, fraction, cfg.seed)?;
    let x = train_x.select(Axis(0), &idx);
    let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
    let n_classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let probe = fit_linear_probe(x.view(), &y, n_classes, cfg)?;
    let test_auc = probe.auc(test_x, test_y)?;
    Ok(ProbeOutcome { probe, test_auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_blobs;
    use ndarray::array;

    #[test]
    fn subsample_is_stratified_and_deterministic() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let a = stratified_subsample(&labels, 0.1, 5).unwrap();
        assert_eq!(a.len(), 30);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        assert_eq!(a, stratified_subsample(&labels, 0.1, 5).unwrap());
        assert_eq!(stratified_subsample(&labels, 1.0, 0).unwrap().len(), 300);
        assert!(stratified_subsample(&labels, 0.001, 0).is_err());
        assert!(stratified_subsample(&labels, 0.0, 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[1000.0, 1000.0], [0.0, 1.0]]);
        assert!((p[[0, 0]] - 0.5).abs() < 1e-15);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let x = Array2::zeros((4, 2));
        assert!(fit_linear_probe(x.view(), &[0, 0, 0, 0], 2, &ProbeConfig::desk(0)).is_err());
        assert!(fit_linear_probe(x.view(), &[1, 1, 1, 1], 2, &ProbeConfig::desk(0)).is_err());
    }

    #[test]
    fn separable_blobs_reach_high_auc() {
        let (x, y) = gaussian_blobs(100, 2, 16, 8.0, 1);
        let (tx, ty) = gaussian_blobs(100, 2, 16, 8.0, 2);
        let out = linear_probe(x.view(), &y, tx.view(), &ty, 1.0, &ProbeConfig::desk(3)).unwrap();
        assert!(out.test_auc >= 0.99, "auc {}", out.test_auc);
        let l = &out.probe.epoch_loss;
        assert!(l.last().unwrap() < &l[0]);
    }

    #[test]
    fn more_data_does_not_hurt() {
        let mut full = Vec::new();
        let mut tiny = Vec::new();
        for seed in 0..3u64 {
            let (x, y) = gaussian_blobs(200, 3, 32, 2.0, 10 + seed);
            let n = y.len() / 2;
            let (trx, tex) = (x.slice(ndarray::s![..n, ..]), x.slice(ndarray::s![n.., ..]));
            let cfg = ProbeConfig::desk(seed);
            full.push(linear_probe(trx, &y[..n], tex, &y[n..], 1.0, &cfg).unwrap().test_auc);
            tiny.push(linear_probe(trx, &y[..n], tex, &y[n..], 0.01, &cfg).unwrap().test_auc);
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[1]
        };
        assert!(median(&mut full) >= median(&mut tiny));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.5], [1.0, 0.1, -0.4], [-0.7, 0.8, 0.2]];
        let y = [0usize, 2, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = Linear::new(3, 3, &mut rng);
        let loss = |h: &Linear| {
            let p = softmax_rows(&h.forward(x.view()));
            -y.iter().enumerate().map(|(r, &c)| p[[r, c]].ln()).sum::<f64>() / 3.0
        };
        let mut g = softmax_rows(&head.forward(x.view()));
        for (r, &c) in y.iter().enumerate() {
            g[[r, c]] -= 1.0;
        }
        g /= 3.0;
        let mut grads = zeros_like(&head);
        head.backward(x.view(), g.view(), &mut grads);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut hp = head.clone();
                hp.weight[[i, j]] += eps;
                let mut hm = head.clone();
                hm.weight[[i, j]] -= eps;
                let num = (loss(&hp) - loss(&hm)) / (2.0 * eps);
                assert!((num - grads.weight[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
