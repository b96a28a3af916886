//! Two-stage training of the student dual encoder: contrastive pretraining
//! on image-text pairs, then distillation against stored teacher features.

use std::collections::BTreeMap;

use log::debug;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::losses::{clip_loss_with_grad, kd_loss_with_grad, KdBatch, Reduction, StudentGrads};
use crate::nn::{zeros_like, AdamW, DecayKind, LrSchedule};
use crate::synth::Corpus;
use crate::types::{KdWeights, Quadruplet, SampleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Distill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub decay: DecayKind,
    #[serde(default)]
    pub kd_weights: KdWeights,
    #[serde(default)]
    pub reduction: Reduction,
    /// Stops after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Published hyperparameters: AdamW at 5e-5, 20 epochs, 2000 warmup
    /// steps, batch 512 for pretraining and 384 for distillation.
    pub fn paper(stage: Stage) -> Self {
        Self {
            stage,
            batch_size: match stage {
                Stage::Pretrain => 512,
                Stage::Distill => 384,
            },
            epochs: 20,
            lr: 5e-5,
            weight_decay: 0.01,
            warmup_steps: 2000,
            decay: DecayKind::Constant,
            kd_weights: KdWeights::PAPER,
            reduction: Reduction::Mean,
            max_steps: None,
            seed: 0,
        }
    }

    /// Scaled down for a few thousand synthetic pairs on one CPU core.
    pub fn desk(stage: Stage) -> Self {
        Self {
            batch_size: 32,
            epochs: match stage {
                Stage::Pretrain => 30,
                Stage::Distill => 20,
            },
            lr: 2e-3,
            warmup_steps: 20,
            ..Self::paper(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 for contrastive training".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.kd_weights.validate()
    }

    fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        let mut total = (steps_per_epoch * self.epochs) as u64;
        if let Some(m) = self.max_steps {
            total = total.min(m);
        }
        LrSchedule {
            base: self.lr,
            warmup_steps: self.warmup_steps,
            decay: self.decay,
            total_steps: total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub clip: f64,
    pub fd: f64,
    pub icl: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Mean step loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Contiguous batches of a shuffled index list. A trailing batch of one is
/// dropped since it carries no contrastive signal.
fn batches(order: &[usize], b: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(b).filter(|c| c.len() >= 2)
}

fn steps_per_epoch(n: usize, b: usize) -> usize {
    n / b + usize::from(n % b >= 2)
}

fn apply_step(
    student: &mut DualEncoder,
    opt: &mut AdamW,
    schedule: &LrSchedule,
    images: &[&[f64]],
    tokens: &[&[u32]],
    loss_grad: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Result<(f64, [f64; 3], StudentGrads)>,
) -> Result<StepLog> {
    let enc_i = student.image.forward(images)?;
    let enc_t = student.text.forward(tokens)?;
    let (loss, parts, g) = loss_grad(&enc_i.embeddings, &enc_t.embeddings)?;
    let mut grads = zeros_like(student);
    student.image.backward(&enc_i, g.image.view(), &mut grads.image);
    student.text.backward(&enc_t, g.text.view(), &mut grads.text);
    grads.temperature.log_tau = g.log_tau;
    let step = opt.steps_taken() + 1;
    let lr = schedule.lr_at(step);
    opt.step(student, &grads, lr);
    student.temperature.clamp();
    Ok(StepLog {
        step,
        lr,
        loss,
        clip: parts[0],
        fd: parts[1],
        icl: parts[2],
    })
}

fn finish_epoch(log: &mut TrainLog, first_step: usize, epoch: usize) {
    let steps = &log.steps[first_step..];
    if steps.is_empty() {
        return;
    }
    let mean = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
    debug!("epoch {epoch}: mean loss {mean:.5}");
    log.epoch_loss.push(mean);
}

/// Stage 1: symmetric contrastive training on the corpus pairs.
pub fn pretrain(student: &mut DualEncoder, corpus: &Corpus, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if corpus.len() < config.batch_size {
        return Err(Error::CorpusTooSmall {
            available: corpus.len(),
            needed: config.batch_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = config.schedule(steps_per_epoch(corpus.len(), config.batch_size));
    let mut opt = AdamW::new(config.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let first = log.steps.len();
        for idx in batches(&order, config.batch_size) {
            if config.max_steps.is_some_and(|m| opt.steps_taken() >= m) {
                finish_epoch(&mut log, first, epoch);
                break 'epochs;
            }
            let images: Vec<&[f64]> = idx.iter().map(|&i| corpus.pairs[i].image.as_slice()).collect();
            let tokens: Vec<&[u32]> = idx.iter().map(|&i| corpus.pairs[i].tokens.as_slice()).collect();
            let tau = student.temperature;
            let entry = apply_step(student, &mut opt, &schedule, &images, &tokens, |v, t| {
                let (l, g) = clip_loss_with_grad(v.view(), t.view(), &tau, config.reduction)?;
                Ok((l.value, [l.value, 0.0, 0.0], g))
            })?;
            log.steps.push(entry);
        }
        finish_epoch(&mut log, first, epoch);
    }
    Ok(log)
}

/// Corpus pairs that have at least one quadruplet, each with its list of
/// teacher features in store order.
pub struct DistillSet<'a> {
    pub pairs: Vec<usize>,
    pub teachers: Vec<Vec<&'a Quadruplet>>,
}

impl<'a> DistillSet<'a> {
    pub fn new(quadruplets: &'a [Quadruplet], corpus: &Corpus) -> Result<Self> {
        let index: BTreeMap<(SampleId, SampleId), usize> = corpus
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.image_id, p.text_id), i))
            .collect();
        let mut grouped: BTreeMap<usize, Vec<&Quadruplet>> = BTreeMap::new();
        for q in quadruplets {
            let i = *index.get(&(q.image_id, q.text_id)).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "quadruplet for unknown pair (image {}, text {})",
                    q.image_id, q.text_id
                ))
            })?;
            grouped.entry(i).or_default().push(q);
        }
        let (pairs, teachers) = grouped.into_iter().unzip();
        Ok(Self { pairs, teachers })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Stage 2: weighted CLIP + FD + ICL against teacher features. Each epoch
/// visits every pair once and draws one of its trusted teachers uniformly.
pub fn distill(
    student: &mut DualEncoder,
    quadruplets: &[Quadruplet],
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if quadruplets.is_empty() {
        return Err(Error::Empty("quadruplet store"));
    }
    let dim = quadruplets[0].feature_dim();
    if let Some(q) = quadruplets.iter().find(|q| q.feature_dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: q.feature_dim(),
        });
    }
    if dim != student.output_dim() {
        return Err(Error::DimMismatch {
            expected: student.output_dim(),
            actual: dim,
        });
    }
    let set = DistillSet::new(quadruplets, corpus)?;
    if set.len() < 2 {
        return Err(Error::CorpusTooSmall {
            available: set.len(),
            needed: 2,
        });
    }
    let b = config.batch_size.min(set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = config.schedule(steps_per_epoch(set.len(), b));
    let mut opt = AdamW::new(config.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..set.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let pick: Vec<usize> = set.teachers.iter().map(|t| rng.random_range(0..t.len())).collect();
        let first = log.steps.len();
        for idx in batches(&order, b) {
            if config.max_steps.is_some_and(|m| opt.steps_taken() >= m) {
                finish_epoch(&mut log, first, epoch);
                break 'epochs;
            }
            let pairs: Vec<&_> = idx.iter().map(|&k| &corpus.pairs[set.pairs[k]]).collect();
            let images: Vec<&[f64]> = pairs.iter().map(|p| p.image.as_slice()).collect();
            let tokens: Vec<&[u32]> = pairs.iter().map(|p| p.tokens.as_slice()).collect();
            let mut ti = Array2::zeros((idx.len(), dim));
            let mut tt = Array2::zeros((idx.len(), dim));
            for (r, &k) in idx.iter().enumerate() {
                let q = set.teachers[k][pick[k]];
                ti.row_mut(r).assign(&ndarray::ArrayView1::from(q.teacher_image.values()));
                tt.row_mut(r).assign(&ndarray::ArrayView1::from(q.teacher_text.values()));
            }
            let tau = student.temperature;
            let entry = apply_step(student, &mut opt, &schedule, &images, &tokens, |v, t| {
                let batch = KdBatch {
                    student_image: v.view(),
                    student_text: t.view(),
                    teacher_image: ti.view(),
                    teacher_text: tt.view(),
                };
                let (l, g) = kd_loss_with_grad(batch, &tau, &config.kd_weights, config.reduction)?;
                let c = |k: &str| l.component(k).unwrap_or(0.0);
                Ok((l.value, [c("clip"), c("fd"), c("icl")], g))
            })?;
            log.steps.push(entry);
        }
        finish_epoch(&mut log, first, epoch);
    }
    Ok(log)
}
