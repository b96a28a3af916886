//! Zero-shot classification with prompt ensembling.

use ndarray::{Array2, ArrayView2};

use super::metrics::argmax;
use crate::encoders::{stack, DualEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::synth::{PromptSet, Vocab};
use crate::types::{normalize, Embedding};

/// Mean of unit embeddings, re-normalized.
pub fn mean_embedding(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings.first().ok_or(Error::Empty("prompt list"))?;
    let mut sum = vec![0.0; first.dim()];
    for e in embeddings {
        if e.dim() != sum.len() {
            return Err(Error::DimMismatch {
                expected: sum.len(),
                actual: e.dim(),
            });
        }
        for (s, v) in sum.iter_mut().zip(e.values()) {
            *s += v;
        }
    }
    normalize(&sum)
}

/// Class embedding from the averaged text embeddings of its prompts.
pub fn class_embedding(encoder: &TextEncoder, vocab: &Vocab, prompts: &[String]) -> Result<Embedding> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    let embs = prompts
        .iter()
        .map(|p| encoder.encode(&vocab.tokenize(p)))
        .collect::<Result<Vec<_>>>()?;
    mean_embedding(&embs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    /// `images × classes` cosine similarities.
    pub scores: Array2<f64>,
    pub predictions: Vec<usize>,
}

/// Scores unit image embeddings against unit class embeddings. Ties go to
/// the lowest class index.
pub fn zero_shot_scores(images: ArrayView2<f64>, classes: ArrayView2<f64>) -> Result<ZeroShot> {
    if classes.nrows() < 2 {
        return Err(Error::InvalidConfig("zero-shot needs >= 2 classes".into()));
    }
    if images.ncols() != classes.ncols() {
        return Err(Error::DimMismatch {
            expected: classes.ncols(),
            actual: images.ncols(),
        });
    }
    let scores = images.dot(&classes.t());
    let predictions = scores.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    Ok(ZeroShot {
        scores,
        predictions,
    })
}

pub fn zero_shot_classify(
    student: &DualEncoder,
    vocab: &Vocab,
    images: &[&[f64]],
    prompts: &PromptSet,
) -> Result<ZeroShot> {
    prompts.validate()?;
    let classes = prompts
        .classes
        .iter()
        .map(|(_, p)| class_embedding(&student.text, vocab, p))
        .collect::<Result<Vec<_>>>()?;
    let class_matrix = stack(&classes)?;
    let image_matrix = student.encode_images(images)?;
    zero_shot_scores(image_matrix.view(), class_matrix.view())
}
