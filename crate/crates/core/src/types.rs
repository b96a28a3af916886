//! Value types shared across the crate: embeddings, pairs, quadruplets,
//! loss weights and the learnable temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque sample identifier. String aliases only live in manifests.
pub type SampleId = u64;

/// Small integer naming a registered teacher.
pub type TeacherId = u16;

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A fixed-dimension, L2-normalized feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Wraps a vector that is already unit-norm, checking the invariant.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm(norm));
        }
        Ok(Self { values })
    }

    /// Like [`Embedding::from_unit`] but tolerates the rounding error of a
    /// single-precision round trip.
    pub fn from_f32_unit(values: &[f32]) -> Result<Self> {
        let values: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::NotUnitNorm(norm));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }

    /// Rounds every entry to the nearest `f32`. The result stays unit-norm to
    /// well within [`UNIT_NORM_TOL`] and survives an `f32` round trip exactly.
    pub fn quantize_f32(&self) -> Embedding {
        Embedding {
            values: self.values.iter().map(|&x| x as f32 as f64).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&x| x as f32).collect()
    }
}

/// L2-normalizes `vector`. Zero-norm and non-finite inputs are rejected.
pub fn normalize(vector: &[f64]) -> Result<Embedding> {
    check_finite(vector)?;
    let norm = l2_norm(vector);
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(Embedding {
        values: vector.iter().map(|x| x / norm).collect(),
    })
}

pub fn l2_norm(v: &[f64]) -> f64 {
    // Scaled to avoid overflow for very large entries.
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (l2_norm(a) * l2_norm(b))
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// An image tensor (H×W×C, row-major, values in [0,1]) paired with a
/// tokenized caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub image_id: SampleId,
    pub text_id: SampleId,
    pub image: Vec<f64>,
    pub tokens: Vec<u32>,
}

/// Maximum caption length in tokens.
pub const MAX_TOKENS: usize = 512;

impl ImageTextPair {
    pub fn validate(&self, image_len: usize) -> Result<()> {
        if self.image.len() != image_len {
            return Err(Error::DimMismatch {
                expected: image_len,
                actual: self.image.len(),
            });
        }
        if self.tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if self.tokens.len() > MAX_TOKENS {
            return Err(Error::InvalidConfig(format!(
                "token sequence of length {} exceeds {MAX_TOKENS}",
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

/// One offline distillation sample: a pair plus the aligned features a
/// trusted teacher produced for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruplet {
    pub image_id: SampleId,
    pub text_id: SampleId,
    pub teacher_id: TeacherId,
    pub teacher_image: Embedding,
    pub teacher_text: Embedding,
}

impl Quadruplet {
    pub fn new(
        image_id: SampleId,
        text_id: SampleId,
        teacher_id: TeacherId,
        teacher_image: Embedding,
        teacher_text: Embedding,
    ) -> Result<Self> {
        if teacher_image.dim() != teacher_text.dim() {
            return Err(Error::DimMismatch {
                expected: teacher_image.dim(),
                actual: teacher_text.dim(),
            });
        }
        Ok(Self {
            image_id,
            text_id,
            teacher_id,
            teacher_image,
            teacher_text,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.teacher_image.dim()
    }
}

/// A non-empty mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    items: Vec<T>,
}

impl<T> Batch<T> {
    pub fn new(items: Vec<T>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(Self { items })
    }

    pub fn size(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }
}

/// Weights of the distillation objective
/// `alpha1 * clip + alpha2 * fd + alpha3 * icl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl KdWeights {
    /// 0.1 / 50 / 1.
    pub const PAPER: KdWeights = KdWeights {
        alpha1: 0.1,
        alpha2: 50.0,
        alpha3: 1.0,
    };

    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        let w = Self {
            alpha1,
            alpha2,
            alpha3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {a}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for KdWeights {
    fn default() -> Self {
        Self::PAPER
    }
}

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

/// Learnable softmax temperature, stored as `ln(tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Temperature {
    pub const INIT: f64 = 0.07;

    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || !(TAU_MIN..=TAU_MAX).contains(&tau) {
            return Err(Error::TemperatureOutOfRange(tau));
        }
        Ok(Self { log_tau: tau.ln() })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Errors when `tau` lies outside the clamp range.
    pub fn checked_tau(&self) -> Result<f64> {
        let tau = self.tau();
        if !tau.is_finite() || !(TAU_MIN * (1.0 - 1e-12)..=TAU_MAX * (1.0 + 1e-12)).contains(&tau)
        {
            return Err(Error::TemperatureOutOfRange(tau));
        }
        Ok(tau)
    }

    /// Projects `log_tau` back into the admissible range after an update.
    pub fn clamp(&mut self) {
        self.log_tau = self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_tau: Self::INIT.ln(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let e = normalize(&[3.0, 4.0]).unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-12);
        assert!((e.values()[1] - 0.8).abs() < 1e-12);
        assert_eq!(normalize(&[1.0, 0.0, 0.0]).unwrap().values(), &[1.0, 0.0, 0.0]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(matches!(normalize(&[1.0, f64::NAN]), Err(Error::NonFinite)));
        assert!(matches!(normalize(&[f64::INFINITY]), Err(Error::NonFinite)));
    }

    #[test]
    fn quantized_embeddings_stay_unit() {
        let e = normalize(&[0.1, 0.7, -0.3, 1e-3]).unwrap().quantize_f32();
        assert!((l2_norm(e.values()) - 1.0).abs() < UNIT_NORM_TOL);
        assert!(Embedding::from_unit(e.values().to_vec()).is_ok());
    }

    #[test]
    fn temperature_range() {
        assert!((Temperature::default().tau() - 0.07).abs() < 1e-12);
        assert!(Temperature::new(1e-4).is_err());
        assert!(Temperature::new(101.0).is_err());
        let mut t = Temperature { log_tau: 10.0 };
        assert!(t.checked_tau().is_err());
        t.clamp();
        assert!((t.tau() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn kd_weights_reject_negative() {
        assert!(KdWeights::new(0.1, -1.0, 1.0).is_err());
        assert!(KdWeights::new(f64::NAN, 1.0, 1.0).is_err());
        assert_eq!(KdWeights::default(), KdWeights::new(0.1, 50.0, 1.0).unwrap());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(Batch::<u8>::new(vec![]).is_err());
        assert_eq!(Batch::new(vec![1, 2]).unwrap().size(), 2);
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..32)
            .prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_unit_and_idempotent(v in nonzero_vec()) {
            let once = normalize(&v).unwrap();
            prop_assert!((l2_norm(once.values()) - 1.0).abs() <= UNIT_NORM_TOL);
            prop_assert!((cosine(&v, once.values()) - 1.0).abs() <= 1e-6);
            let twice = normalize(once.values()).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn normalize_is_scale_invariant(v in nonzero_vec(), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let a = normalize(&v).unwrap();
            let b = normalize(&scaled).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
