//! Per-pair trust test against each teacher and extraction of distillation
//! quadruplets.
//!
//! A teacher is trusted for a pair when, in a zero-shot test of the pair's
//! image against its own caption plus `k` unpaired captions, the softmax
//! mass on the true caption exceeds 0.90.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentModel, Stream};
use crate::encoders::{stack, Teacher};
use crate::error::{Error, Result};
use crate::synth::Corpus;
use crate::types::{Embedding, Quadruplet, SampleId, TeacherId};

pub const DEFAULT_DISTRACTORS: usize = 4;
pub const TRUST_THRESHOLD: f64 = 0.90;
pub const DEFAULT_TRUST_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustDecision {
    pub image_id: SampleId,
    pub text_id: SampleId,
    pub teacher_id: TeacherId,
    pub correct_class_prob: f64,
    pub trusted: bool,
}

/// The trust rule on its own: strictly greater than 0.90.
pub fn is_trusted(prob: f64) -> bool {
    prob > TRUST_THRESHOLD
}

/// Softmax mass on entry 0 of `similarities / tau`.
pub fn true_caption_prob(similarities: &[f64], tau: f64) -> Result<f64> {
    if similarities.len() < 2 {
        return Err(Error::Empty("distractor list"));
    }
    if !(tau > 0.0) {
        return Err(Error::TemperatureOutOfRange(tau));
    }
    let max = similarities.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let z: f64 = similarities.iter().map(|s| ((s - max) / tau).exp()).sum();
    Ok(((similarities[0] - max) / tau).exp() / z)
}

/// Indices of `k` texts drawn uniformly without replacement from `texts`,
/// skipping `own` and any text identical to it. The draw depends only on
/// `(seed, own)`.
pub fn sample_distractors(own: usize, texts: &[&[u32]], k: usize, seed: u64) -> Result<Vec<usize>> {
    let target = texts.get(own).ok_or(Error::CorpusTooSmall {
        available: texts.len(),
        needed: own + 1,
    })?;
    let candidates: Vec<usize> = (0..texts.len())
        .filter(|&i| i != own && texts[i] != *target)
        .collect();
    if candidates.len() < k {
        return Err(Error::CorpusTooSmall {
            available: candidates.len(),
            needed: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(own as u64);
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Zero-shot trust test of one teacher on one pair.
pub fn trust_check(
    teacher: &dyn Teacher,
    image_id: SampleId,
    text_id: SampleId,
    image: &[f64],
    true_text: &[u32],
    distractors: &[&[u32]],
    tau: f64,
) -> Result<TrustDecision> {
    if distractors.is_empty() {
        return Err(Error::Empty("distractor list"));
    }
    let v = teacher.encode_image(image)?;
    let mut sims = vec![v.dot(&teacher.encode_text(true_text)?)];
    for d in distractors {
        sims.push(v.dot(&teacher.encode_text(d)?));
    }
    let prob = true_caption_prob(&sims, tau)?;
    Ok(TrustDecision {
        image_id,
        text_id,
        teacher_id: teacher.id(),
        correct_class_prob: prob,
        trusted: is_trusted(prob),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub distractors: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            distractors: DEFAULT_DISTRACTORS,
            tau: DEFAULT_TRUST_TAU,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TeacherTally {
    pub quadruplets: usize,
    pub mean_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub pairs: usize,
    pub quadruplets: usize,
    /// Pairs that no teacher was trusted on.
    pub dropped_pairs: usize,
    pub per_teacher: BTreeMap<TeacherId, TeacherTally>,
}

impl SelectionSummary {
    /// Fraction of all quadruplets contributed by `id`.
    pub fn share(&self, id: TeacherId) -> f64 {
        if self.quadruplets == 0 {
            return 0.0;
        }
        self.per_teacher.get(&id).map_or(0.0, |t| t.quadruplets as f64) / self.quadruplets as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Pair-major, teacher order within a pair.
    pub quadruplets: Vec<Quadruplet>,
    pub decisions: Vec<TrustDecision>,
    pub summary: SelectionSummary,
}

/// Runs the trust test of every teacher on every pair and emits one
/// quadruplet per trusted (pair, teacher), with features projected into the
/// joint space and rounded to `f32` so they survive storage unchanged.
pub fn build_quadruplets(
    teachers: &[&dyn Teacher],
    alignment: &AlignmentModel,
    corpus: &Corpus,
    config: &SelectConfig,
) -> Result<Selection> {
    if teachers.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let texts = corpus.token_lists();
    let distractors: Vec<Vec<usize>> = (0..corpus.len())
        .map(|i| sample_distractors(i, &texts, config.distractors, config.seed))
        .collect::<Result<_>>()?;

    let mut decisions = Vec::with_capacity(corpus.len() * teachers.len());
    // trusted[t] = pair indices trusted by teacher t
    let mut trusted: Vec<Vec<usize>> = vec![Vec::new(); teachers.len()];
    let mut native: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(teachers.len());
    for (t, teacher) in teachers.iter().enumerate() {
        let text_emb: Vec<Embedding> =
            texts.iter().map(|tok| teacher.encode_text(tok)).collect::<Result<_>>()?;
        let image_emb: Vec<Embedding> = corpus
            .pairs
            .iter()
            .map(|p| teacher.encode_image(&p.image))
            .collect::<Result<_>>()?;
        for (i, pair) in corpus.pairs.iter().enumerate() {
            let v = &image_emb[i];
            let mut sims = vec![v.dot(&text_emb[i])];
            sims.extend(distractors[i].iter().map(|&j| v.dot(&text_emb[j])));
            let prob = true_caption_prob(&sims, config.tau)?;
            let d = TrustDecision {
                image_id: pair.image_id,
                text_id: pair.text_id,
                teacher_id: teacher.id(),
                correct_class_prob: prob,
                trusted: is_trusted(prob),
            };
            if d.trusted {
                trusted[t].push(i);
            }
            decisions.push(d);
        }
        native.push((stack(&image_emb)?, stack(&text_emb)?));
    }

    // Project only what is kept.
    let mut projected: Vec<BTreeMap<usize, (Embedding, Embedding)>> = Vec::new();
    for (t, teacher) in teachers.iter().enumerate() {
        let rows = &trusted[t];
        let mut out = BTreeMap::new();
        if !rows.is_empty() {
            let img = native[t].0.select(ndarray::Axis(0), rows);
            let txt = native[t].1.select(ndarray::Axis(0), rows);
            let pi = alignment.project_batch(teacher.id(), Stream::Image, img.view())?;
            let pt = alignment.project_batch(teacher.id(), Stream::Text, txt.view())?;
            for (k, &i) in rows.iter().enumerate() {
                let e_i = Embedding::from_unit(pi.row(k).to_vec())?.quantize_f32();
                let e_t = Embedding::from_unit(pt.row(k).to_vec())?.quantize_f32();
                out.insert(i, (e_i, e_t));
            }
        }
        projected.push(out);
    }

    let mut quadruplets = Vec::new();
    let mut summary = SelectionSummary {
        pairs: corpus.len(),
        ..Default::default()
    };
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let mut any = false;
        for (t, teacher) in teachers.iter().enumerate() {
            if let Some((e_i, e_t)) = projected[t].get(&i) {
                quadruplets.push(Quadruplet::new(
                    pair.image_id,
                    pair.text_id,
                    teacher.id(),
                    e_i.clone(),
                    e_t.clone(),
                )?);
                any = true;
            }
        }
        if !any {
            summary.dropped_pairs += 1;
        }
    }
    for (t, teacher) in teachers.iter().enumerate() {
        let probs = decisions
            .iter()
            .filter(|d| d.teacher_id == teacher.id())
            .map(|d| d.correct_class_prob);
        let mean_prob = probs.clone().sum::<f64>() / corpus.len() as f64;
        summary.per_teacher.insert(
            teacher.id(),
            TeacherTally {
                quadruplets: trusted[t].len(),
                mean_prob,
            },
        );
    }
    summary.quadruplets = quadruplets.len();
    Ok(Selection {
        quadruplets,
        decisions,
        summary,
    })
}
