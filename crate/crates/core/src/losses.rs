//! Training objectives over batches of unit-norm embeddings (rows of a
//! `batch × dim` matrix).
//!
//! - CLIP: symmetric InfoNCE between student image and text embeddings.
//! - FD: squared L2 distance between student and teacher features.
//! - ICL: InfoNCE with student queries against teacher targets.
//! - KD: `alpha1 * clip + alpha2 * fd + alpha3 * icl`.
//!
//! Each loss has a `*_with_grad` form returning gradients with respect to the
//! student embeddings and `ln(tau)`. Teacher inputs never receive gradients.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{KdWeights, Temperature, UNIT_NORM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide the per-direction sums by the batch size.
    #[default]
    Mean,
    /// The bare sum over the batch.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    fn scalar(value: f64) -> Self {
        Self {
            value,
            components: BTreeMap::new(),
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

/// Gradients with respect to the student image/text embeddings and `ln(tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrads {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
    pub log_tau: f64,
}

impl StudentGrads {
    fn zeros(b: usize, d: usize) -> Self {
        Self {
            image: Array2::zeros((b, d)),
            text: Array2::zeros((b, d)),
            log_tau: 0.0,
        }
    }

    fn add_scaled(&mut self, w: f64, other: &StudentGrads) {
        self.image.scaled_add(w, &other.image);
        self.text.scaled_add(w, &other.text);
        self.log_tau += w * other.log_tau;
    }
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::LengthMismatch(a.nrows(), b.nrows()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimMismatch {
            expected: a.ncols(),
            actual: b.ncols(),
        });
    }
    if a.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(())
}

fn check_unit(m: ArrayView2<f64>) -> Result<()> {
    for row in m.rows() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm(n));
        }
    }
    Ok(())
}

/// One InfoNCE direction:
/// `-Σ_i log softmax_b(q_i · k_b / tau)[i]`.
///
/// Returns the summed loss, `dL/dq`, and `dL/d ln(tau)`. Computed with
/// max-subtracted log-sum-exp.
fn info_nce_direction(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    tau: f64,
) -> (f64, Array2<f64>, f64) {
    let logits = queries.dot(&keys.t()) / tau;
    let n = logits.nrows();
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        loss += max + z.ln() - logits[[i, i]];
        row /= z;
    }
    // dL/dlogits = P - I
    for i in 0..n {
        probs[[i, i]] -= 1.0;
    }
    let grad_q = probs.dot(&keys) / tau;
    let grad_log_tau = -(&probs * &logits).sum();
    (loss, grad_q, grad_log_tau)
}

fn reduce(b: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => 1.0 / b as f64,
        Reduction::Sum => 1.0,
    }
}

/// `½ (L_{I→T} + L_{T→I})` between student image and text embeddings.
pub fn clip_loss(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    tau: &Temperature,
    reduction: Reduction,
) -> Result<LossValue> {
    clip_loss_with_grad(image, text, tau, reduction).map(|(l, _)| l)
}

pub fn clip_loss_with_grad(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    tau: &Temperature,
    reduction: Reduction,
) -> Result<(LossValue, StudentGrads)> {
    check_pair(image, text)?;
    check_unit(image)?;
    check_unit(text)?;
    let t = tau.checked_tau()?;
    let scale = 0.5 * reduce(image.nrows(), reduction);

    // Each direction contributes to both inputs: as query, and as key.
    let (l_it, gq_i, gt_it) = info_nce_direction(image, text, t);
    let (l_ti, gq_t, gt_ti) = info_nce_direction(text, image, t);
    let gk_t = key_grad(image, text, t);
    let gk_i = key_grad(text, image, t);

    let grads = StudentGrads {
        image: (gq_i + gk_i) * scale,
        text: (gq_t + gk_t) * scale,
        log_tau: (gt_it + gt_ti) * scale,
    };
    Ok((LossValue::scalar(scale * (l_it + l_ti)), grads))
}

/// `dL/dkeys` for one InfoNCE direction: `(P - I)^T q / tau`.
fn key_grad(queries: ArrayView2<f64>, keys: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let logits = queries.dot(&keys.t()) / tau;
    let mut p = logits;
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row /= z;
    }
    for i in 0..p.nrows() {
        p[[i, i]] -= 1.0;
    }
    p.t().dot(&queries) / tau
}

/// `(1/|B|) Σ_i (|v^T_i - v^S_i|² + |t^T_i - t^S_i|²)`.
pub fn fd_loss(
    student_image: ArrayView2<f64>,
    student_text: ArrayView2<f64>,
    teacher_image: ArrayView2<f64>,
    teacher_text: ArrayView2<f64>,
) -> Result<LossValue> {
    fd_loss_with_grad(student_image, student_text, teacher_image, teacher_text).map(|(l, _)| l)
}

pub fn fd_loss_with_grad(
    student_image: ArrayView2<f64>,
    student_text: ArrayView2<f64>,
    teacher_image: ArrayView2<f64>,
    teacher_text: ArrayView2<f64>,
) -> Result<(LossValue, StudentGrads)> {
    check_pair(student_image, student_text)?;
    check_pair(student_image, teacher_image)?;
    check_pair(student_text, teacher_text)?;
    let b = student_image.nrows() as f64;
    let di = &student_image - &teacher_image;
    let dt = &student_text - &teacher_text;
    let value = (di.mapv(|x| x * x).sum() + dt.mapv(|x| x * x).sum()) / b;
    if !value.is_finite() {
        return Err(Error::NonFinite);
    }
    let grads = StudentGrads {
        image: di * (2.0 / b),
        text: dt * (2.0 / b),
        log_tau: 0.0,
    };
    Ok((LossValue::scalar(value), grads))
}

/// `½ (L_{ICL,I→T} + L_{ICL,T→I})`: student image queries against teacher
/// text keys, and student text queries against teacher image keys.
pub fn icl_loss(
    student_image: ArrayView2<f64>,
    student_text: ArrayView2<f64>,
    teacher_image: ArrayView2<f64>,
    teacher_text: ArrayView2<f64>,
    tau: &Temperature,
    reduction: Reduction,
) -> Result<LossValue> {
    icl_loss_with_grad(
        student_image,
        student_text,
        teacher_image,
        teacher_text,
        tau,
        reduction,
    )
    .map(|(l, _)| l)
}

pub fn icl_loss_with_grad(
    student_image: ArrayView2<f64>,
    student_text: ArrayView2<f64>,
    teacher_image: ArrayView2<f64>,
    teacher_text: ArrayView2<f64>,
    tau: &Temperature,
    reduction: Reduction,
) -> Result<(LossValue, StudentGrads)> {
    check_pair(student_image, student_text)?;
    check_pair(student_image, teacher_text)?;
    check_pair(student_text, teacher_image)?;
    for m in [student_image, student_text, teacher_image, teacher_text] {
        check_unit(m)?;
    }
    let t = tau.checked_tau()?;
    let scale = 0.5 * reduce(student_image.nrows(), reduction);
    // Teacher matrices are only ever used as keys; no gradient is formed for
    // them.
    let (l_it, g_img, gt_it) = info_nce_direction(student_image, teacher_text, t);
    let (l_ti, g_txt, gt_ti) = info_nce_direction(student_text, teacher_image, t);
    let grads = StudentGrads {
        image: g_img * scale,
        text: g_txt * scale,
        log_tau: (gt_it + gt_ti) * scale,
    };
    Ok((LossValue::scalar(scale * (l_it + l_ti)), grads))
}

/// Student and teacher embedding batches for the distillation objective.
#[derive(Debug, Clone, Copy)]
pub struct KdBatch<'a> {
    pub student_image: ArrayView2<'a, f64>,
    pub student_text: ArrayView2<'a, f64>,
    pub teacher_image: ArrayView2<'a, f64>,
    pub teacher_text: ArrayView2<'a, f64>,
}

pub fn kd_loss(
    batch: KdBatch<'_>,
    tau: &Temperature,
    weights: &KdWeights,
    reduction: Reduction,
) -> Result<LossValue> {
    kd_loss_with_grad(batch, tau, weights, reduction).map(|(l, _)| l)
}

/// `alpha1 * clip + alpha2 * fd + alpha3 * icl`, with the three components
/// recorded under `"clip"`, `"fd"` and `"icl"`.
pub fn kd_loss_with_grad(
    batch: KdBatch<'_>,
    tau: &Temperature,
    weights: &KdWeights,
    reduction: Reduction,
) -> Result<(LossValue, StudentGrads)> {
    weights.validate()?;
    let (clip, g_clip) =
        clip_loss_with_grad(batch.student_image, batch.student_text, tau, reduction)?;
    let (fd, g_fd) = fd_loss_with_grad(
        batch.student_image,
        batch.student_text,
        batch.teacher_image,
        batch.teacher_text,
    )?;
    let (icl, g_icl) = icl_loss_with_grad(
        batch.student_image,
        batch.student_text,
        batch.teacher_image,
        batch.teacher_text,
        tau,
        reduction,
    )?;
    let mut grads = StudentGrads::zeros(batch.student_image.nrows(), batch.student_image.ncols());
    grads.add_scaled(weights.alpha1, &g_clip);
    grads.add_scaled(weights.alpha2, &g_fd);
    grads.add_scaled(weights.alpha3, &g_icl);
    let value = weights.alpha1 * clip.value + weights.alpha2 * fd.value + weights.alpha3 * icl.value;
    let components = BTreeMap::from([
        ("clip".to_string(), clip.value),
        ("fd".to_string(), fd.value),
        ("icl".to_string(), icl.value),
    ]);
    Ok((LossValue { value, components }, grads))
}

/// Mean over rows of the squared L2 distance, i.e. per-sample FD for a
/// single stream.
pub fn mean_squared_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    (&a - &b).mapv(|x| x * x).sum_axis(Axis(1)).mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normalize_rows, normalize_rows_backward};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Naive oracles over Vec<Vec<f64>>: plain loops straight from the
    // definitions, no shared code with the implementation.
    fn dotv(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    fn oracle_direction(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..q.len() {
            let mut denom = 0.0;
            for b in 0..k.len() {
                denom += (dotv(&q[i], &k[b]) / tau).exp();
            }
            total -= ((dotv(&q[i], &k[i]) / tau).exp() / denom).ln();
        }
        total
    }

    fn oracle_clip(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64, mean: bool) -> f64 {
        let s = 0.5 * (oracle_direction(v, t, tau) + oracle_direction(t, v, tau));
        if mean {
            s / v.len() as f64
        } else {
            s
        }
    }

    fn oracle_fd(vs: &[Vec<f64>], ts: &[Vec<f64>], vt: &[Vec<f64>], tt: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for i in 0..vs.len() {
            for j in 0..vs[i].len() {
                total += (vt[i][j] - vs[i][j]).powi(2) + (tt[i][j] - ts[i][j]).powi(2);
            }
        }
        total / vs.len() as f64
    }

    fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn random_unit(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
        let raw = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        normalize_rows(&raw).unwrap().0
    }

    fn tau1() -> Temperature {
        Temperature::new(1.0).unwrap()
    }

    #[test]
    fn single_pair_clip_is_zero() {
        let v = array![[0.6, 0.8]];
        let t = array![[0.0, 1.0]];
        let l = clip_loss(v.view(), t.view(), &Temperature::default(), Reduction::Mean).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pair_clip_value() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let l = clip_loss(v.view(), v.view(), &tau1(), Reduction::Mean).unwrap();
        let e = std::f64::consts::E;
        let want = -(e / (e + 1.0)).ln();
        assert!((l.value - want).abs() < 1e-12);
        assert!((l.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn clip_matches_oracle_on_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_unit(&mut rng, 8, 16);
        let t = random_unit(&mut rng, 8, 16);
        let tau = Temperature::new(0.07).unwrap();
        for (red, mean) in [(Reduction::Mean, true), (Reduction::Sum, false)] {
            let got = clip_loss(v.view(), t.view(), &tau, red).unwrap().value;
            let want = oracle_clip(&to_rows(&v), &to_rows(&t), 0.07, mean);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn clip_errors() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let t = array![[1.0, 0.0]];
        assert!(matches!(
            clip_loss(v.view(), t.view(), &tau1(), Reduction::Mean),
            Err(Error::LengthMismatch(2, 1))
        ));
        let bad_tau = Temperature { log_tau: 20.0 };
        assert!(matches!(
            clip_loss(v.view(), v.view(), &bad_tau, Reduction::Mean),
            Err(Error::TemperatureOutOfRange(_))
        ));
        let not_unit = array![[2.0, 0.0], [0.0, 1.0]];
        assert!(clip_loss(not_unit.view(), v.view(), &tau1(), Reduction::Mean).is_err());
    }

    #[test]
    fn fd_examples() {
        let v = array![[1.0, 0.0]];
        let zero = fd_loss(v.view(), v.view(), v.view(), v.view()).unwrap();
        assert_eq!(zero.value, 0.0);
        let vs = array![[0.0, 1.0]];
        let two = fd_loss(vs.view(), v.view(), v.view(), v.view()).unwrap();
        assert!((two.value - 2.0).abs() < 1e-12);
        let wide = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            fd_loss(v.view(), v.view(), wide.view(), v.view()),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn fd_and_icl_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vs = random_unit(&mut rng, 8, 10);
        let ts = random_unit(&mut rng, 8, 10);
        let vt = random_unit(&mut rng, 8, 10);
        let tt = random_unit(&mut rng, 8, 10);
        let fd = fd_loss(vs.view(), ts.view(), vt.view(), tt.view()).unwrap().value;
        let want = oracle_fd(&to_rows(&vs), &to_rows(&ts), &to_rows(&vt), &to_rows(&tt));
        assert!((fd - want).abs() < 1e-6);

        let tau = Temperature::new(0.1).unwrap();
        let icl = icl_loss(vs.view(), ts.view(), vt.view(), tt.view(), &tau, Reduction::Mean)
            .unwrap()
            .value;
        let want = 0.5
            * (oracle_direction(&to_rows(&vs), &to_rows(&tt), 0.1)
                + oracle_direction(&to_rows(&ts), &to_rows(&vt), 0.1))
            / 8.0;
        assert!((icl - want).abs() < 1e-6);
    }

    #[test]
    fn icl_examples() {
        let v = array![[1.0, 0.0]];
        assert!(icl_loss(v.view(), v.view(), v.view(), v.view(), &tau1(), Reduction::Mean)
            .unwrap()
            .value
            .abs()
            < 1e-12);
        let b = array![[1.0, 0.0], [0.0, 1.0]];
        let l = icl_loss(b.view(), b.view(), b.view(), b.view(), &tau1(), Reduction::Mean).unwrap();
        let c = clip_loss(b.view(), b.view(), &tau1(), Reduction::Mean).unwrap();
        assert!((l.value - c.value).abs() < 1e-12);
        assert!((l.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn kd_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vs = random_unit(&mut rng, 6, 8);
        let ts = random_unit(&mut rng, 6, 8);
        let vt = random_unit(&mut rng, 6, 8);
        let tt = random_unit(&mut rng, 6, 8);
        let tau = Temperature::default();
        let batch = KdBatch {
            student_image: vs.view(),
            student_text: ts.view(),
            teacher_image: vt.view(),
            teacher_text: tt.view(),
        };
        let w = KdWeights::PAPER;
        let kd = kd_loss(batch, &tau, &w, Reduction::Mean).unwrap();
        let clip = clip_loss(vs.view(), ts.view(), &tau, Reduction::Mean).unwrap().value;
        let fd = fd_loss(vs.view(), ts.view(), vt.view(), tt.view()).unwrap().value;
        let icl = icl_loss(vs.view(), ts.view(), vt.view(), tt.view(), &tau, Reduction::Mean)
            .unwrap()
            .value;
        assert!((kd.value - (0.1 * clip + 50.0 * fd + icl)).abs() < 1e-6);
        assert_eq!(kd.component("clip"), Some(clip));
        // Unit components give 0.1 + 50 + 1.
        assert!((0.1 * 1.0 + 50.0 * 1.0 + 1.0 * 1.0 - 51.1f64).abs() < 1e-12);
        let zero = KdWeights::new(0.0, 0.0, 0.0).unwrap();
        let (l, g) = kd_loss_with_grad(batch, &tau, &zero, Reduction::Mean).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(g.image.iter().chain(g.text.iter()).all(|&x| x == 0.0));
        assert_eq!(g.log_tau, 0.0);
    }

    /// Loss as a function of raw (pre-normalization) parameters, for finite
    /// differences.
    fn kd_from_raw(raw: &[Array2<f64>; 4], log_tau: f64, w: &KdWeights, which: &str) -> f64 {
        let n: Vec<Array2<f64>> = raw.iter().map(|r| normalize_rows(r).unwrap().0).collect();
        let tau = Temperature { log_tau };
        let red = Reduction::Mean;
        match which {
            "clip" => clip_loss(n[0].view(), n[1].view(), &tau, red).unwrap().value,
            "fd" => fd_loss(n[0].view(), n[1].view(), n[2].view(), n[3].view()).unwrap().value,
            "icl" => icl_loss(n[0].view(), n[1].view(), n[2].view(), n[3].view(), &tau, red)
                .unwrap()
                .value,
            _ => kd_loss(
                KdBatch {
                    student_image: n[0].view(),
                    student_text: n[1].view(),
                    teacher_image: n[2].view(),
                    teacher_text: n[3].view(),
                },
                &tau,
                w,
                red,
            )
            .unwrap()
            .value,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let raw: [Array2<f64>; 4] =
            std::array::from_fn(|_| Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0)));
        let log_tau = 0.3f64.ln();
        let w = KdWeights::PAPER;
        for which in ["clip", "fd", "icl", "kd"] {
            let n: Vec<(Array2<f64>, Vec<f64>)> =
                raw.iter().map(|r| normalize_rows(r).unwrap()).collect();
            let tau = Temperature { log_tau };
            let red = Reduction::Mean;
            let (vs, ts, vt, tt) = (n[0].0.view(), n[1].0.view(), n[2].0.view(), n[3].0.view());
            let g = match which {
                "clip" => clip_loss_with_grad(vs, ts, &tau, red).unwrap().1,
                "fd" => fd_loss_with_grad(vs, ts, vt, tt).unwrap().1,
                "icl" => icl_loss_with_grad(vs, ts, vt, tt, &tau, red).unwrap().1,
                _ => {
                    kd_loss_with_grad(
                        KdBatch {
                            student_image: vs,
                            student_text: ts,
                            teacher_image: vt,
                            teacher_text: tt,
                        },
                        &tau,
                        &w,
                        red,
                    )
                    .unwrap()
                    .1
                }
            };
            let g_raw = [
                normalize_rows_backward(n[0].0.view(), &n[0].1, g.image.view()),
                normalize_rows_backward(n[1].0.view(), &n[1].1, g.text.view()),
            ];
            let eps = 1e-4;
            for s in 0..2 {
                for idx in 0..24 {
                    let (i, j) = (idx / 6, idx % 6);
                    let mut p = raw.clone();
                    p[s][[i, j]] += eps;
                    let up = kd_from_raw(&p, log_tau, &w, which);
                    p[s][[i, j]] -= 2.0 * eps;
                    let down = kd_from_raw(&p, log_tau, &w, which);
                    let fd = (up - down) / (2.0 * eps);
                    let a = g_raw[s][[i, j]];
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                    assert!(rel <= 1e-3, "{which} stream {s} ({i},{j}): fd {fd} analytic {a}");
                }
            }
            let up = kd_from_raw(&raw, log_tau + eps, &w, which);
            let down = kd_from_raw(&raw, log_tau - eps, &w, which);
            let fd = (up - down) / (2.0 * eps);
            let rel = (fd - g.log_tau).abs() / fd.abs().max(g.log_tau.abs()).max(1e-8);
            assert!(rel <= 1e-3 || (fd - g.log_tau).abs() < 1e-9, "{which} tau: {fd} vs {}", g.log_tau);
        }
    }

    #[test]
    fn fd_descent_on_linear_student_converges() {
        // Linear student x -> W x (normalized) against fixed random unit
        // targets; plain gradient descent.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, din, d) = (8, 12, 6);
        let x = Array2::from_shape_fn((b, din), |_| rng.random_range(-1.0..1.0));
        let target_i = random_unit(&mut rng, b, d);
        let target_t = random_unit(&mut rng, b, d);
        let mut wi = Array2::from_shape_fn((d, din), |_| rng.random_range(-0.3..0.3));
        let mut wt = Array2::from_shape_fn((d, din), |_| rng.random_range(-0.3..0.3));
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            let (vi, ni) = normalize_rows(&x.dot(&wi.t())).unwrap();
            let (vt, nt) = normalize_rows(&x.dot(&wt.t())).unwrap();
            let (l, g) =
                fd_loss_with_grad(vi.view(), vt.view(), target_i.view(), target_t.view()).unwrap();
            last = l.value;
            let gi = normalize_rows_backward(vi.view(), &ni, g.image.view());
            let gt = normalize_rows_backward(vt.view(), &nt, g.text.view());
            wi.scaled_add(-0.5, &gi.t().dot(&x));
            wt.scaled_add(-0.5, &gt.t().dot(&x));
        }
        assert!(last < 1e-3, "final FD {last}");
    }

    fn unit_batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Vec<usize>)> {
        (2usize..9, 2usize..8, any::<u64>()).prop_map(|(b, d, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_unit(&mut rng, b, d);
            let t = random_unit(&mut rng, b, d);
            let mut perm: Vec<usize> = (0..b).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            (v, t, perm)
        })
    }

    proptest! {
        #[test]
        fn clip_is_permutation_equivariant((v, t, perm) in unit_batch()) {
            let tau = Temperature::new(0.2).unwrap();
            let a = clip_loss(v.view(), t.view(), &tau, Reduction::Mean).unwrap().value;
            let vp = v.select(Axis(0), &perm);
            let tp = t.select(Axis(0), &perm);
            let b = clip_loss(vp.view(), tp.view(), &tau, Reduction::Mean).unwrap().value;
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn sum_is_batch_times_mean((v, t, _p) in unit_batch()) {
            let tau = Temperature::new(0.5).unwrap();
            let m = clip_loss(v.view(), t.view(), &tau, Reduction::Mean).unwrap().value;
            let s = clip_loss(v.view(), t.view(), &tau, Reduction::Sum).unwrap().value;
            prop_assert!((s - v.nrows() as f64 * m).abs() < 1e-6);
        }

        #[test]
        fn fd_nonnegative_and_zero_iff_equal((v, t, _p) in unit_batch()) {
            let l = fd_loss(v.view(), t.view(), t.view(), v.view()).unwrap().value;
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, v == t);
            prop_assert_eq!(fd_loss(v.view(), t.view(), v.view(), t.view()).unwrap().value, 0.0);
        }

        #[test]
        fn icl_with_student_equal_teacher_is_clip((v, t, _p) in unit_batch()) {
            let tau = Temperature::new(0.07).unwrap();
            let icl = icl_loss(v.view(), t.view(), v.view(), t.view(), &tau, Reduction::Mean).unwrap().value;
            let clip = clip_loss(v.view(), t.view(), &tau, Reduction::Mean).unwrap().value;
            prop_assert!((icl - clip).abs() < 1e-6);
        }
    }
}
