//! Classification and retrieval metrics.

use std::collections::BTreeMap;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Midranks (1-based) of `values`; tied values share the mean of their
/// positions. Also returns `Σ (t³ - t)` over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// `P(score⁺ > score⁻) + ½ P(score⁺ = score⁻)` via the rank-sum identity.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let (ranks, _) = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over the columns of `scores` (`n × classes`).
/// Every class must appear at least once and not cover every sample.
pub fn auc_ovr_macro(scores: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::LengthMismatch(scores.nrows(), labels.len()));
    }
    let c = scores.ncols();
    if c < 2 {
        return Err(Error::UndefinedMetric("need >= 2 classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidConfig(format!("label {bad} >= class count {c}")));
    }
    if c == 2 {
        let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&scores.column(1).to_vec(), &bin);
    }
    let mut total = 0.0;
    for k in 0..c {
        let bin: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        total += auc(&scores.column(k).to_vec(), &bin)?;
    }
    Ok(total / c as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// 0-based rank of each query's true gallery item under cosine similarity.
/// `truth[q]` is the gallery index of query `q`'s single true match. Ties in
/// similarity rank the lower gallery index first.
pub fn retrieval_ranks(queries: ArrayView2<f64>, gallery: ArrayView2<f64>, truth: &[usize]) -> Result<Vec<usize>> {
    if truth.len() != queries.nrows() {
        return Err(Error::InvalidConfig(format!(
            "{} truth entries for {} queries",
            truth.len(),
            queries.nrows()
        )));
    }
    if queries.ncols() != gallery.ncols() {
        return Err(Error::DimMismatch {
            expected: gallery.ncols(),
            actual: queries.ncols(),
        });
    }
    if queries.nrows() == 0 {
        return Err(Error::Empty("queries"));
    }
    let g = gallery.nrows();
    let unit = |m: ArrayView2<f64>| -> Result<ndarray::Array2<f64>> {
        Ok(crate::nn::normalize_rows(&m.to_owned())?.0)
    };
    // Row-wise dots keep exact ties exact; a blocked matrix product may not.
    let (qn, gn) = (unit(queries)?, unit(gallery)?);
    truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            if t >= g {
                return Err(Error::InvalidConfig(format!("truth index {t} outside gallery of {g}")));
            }
            let row: Vec<f64> = gn.rows().into_iter().map(|x| qn.row(q).dot(&x)).collect();
            let s = row[t];
            Ok(row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > s || (v == s && j < t))
                .count())
        })
        .collect()
}

/// Recall@K for cosine-similarity retrieval; see [`retrieval_ranks`].
pub fn recall_at_k(
    queries: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    truth: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let g = gallery.nrows();
    let max_k = ks.iter().copied().max().ok_or(Error::Empty("k list"))?;
    if ks.contains(&0) || g < max_k {
        return Err(Error::InvalidConfig(format!("gallery of {g} too small for K = {max_k}")));
    }
    let ranks = retrieval_ranks(queries, gallery, truth)?;
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect())
}
