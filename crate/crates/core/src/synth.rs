//! Planted-class synthetic world.
//!
//! Every sample has a latent vector `z = class_proto + Σ attribute_proto +
//! noise`. Images render `z` through a fixed orthonormal map followed by a
//! sigmoid and 8-bit quantization; captions name the class and the
//! attributes. Synthetic teachers (see [`crate::encoders`]) read the latent
//! back out of either modality, which is what gives distillation something to
//! transfer.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{SampleId, MAX_TOKENS};

const CLASS_NAMES: [&str; 16] = [
    "pneumonia",
    "effusion",
    "nodule",
    "fracture",
    "edema",
    "glioma",
    "polyp",
    "melanoma",
    "cataract",
    "stenosis",
    "cyst",
    "hernia",
    "fibrosis",
    "adenoma",
    "atelectasis",
    "hemorrhage",
];

const ATTRIBUTE_NAMES: [&str; 16] = [
    "left",
    "right",
    "upper",
    "lower",
    "small",
    "large",
    "bilateral",
    "focal",
    "diffuse",
    "chronic",
    "acute",
    "mild",
    "severe",
    "central",
    "peripheral",
    "calcified",
];

const MODALITIES: [&str; 9] = [
    "xray",
    "ct",
    "mri",
    "pathology",
    "ultrasound",
    "fundus",
    "oct",
    "endoscopy",
    "dermatology",
];

const TEMPLATE_WORDS: [&str; 16] = [
    "a", "an", "of", "with", "and", "scan", "image", "showing", "figure", "seen", "photo", "the",
    "report", "notes", "finding", "patient",
];

const CAPTION_TEMPLATES: [&str; 4] = [
    "a scan of {c} with {a}",
    "image showing {c} with {a}",
    "figure of {c} with {a}",
    "{c} seen with {a}",
];

const PROMPT_TEMPLATES: [&str; 4] = [
    "a photo of {c}",
    "an image showing {c}",
    "a scan of the {c}",
    "{c}",
];

/// What a vocabulary entry means to the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Unknown,
    Template,
    Class(usize),
    Attribute(usize),
}

/// Fixed whitespace tokenizer over the world's vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const UNK: u32 = 0;

    fn build(class_names: &[String], attribute_names: &[String]) -> Self {
        let mut words = vec!["[unk]".to_string()];
        let mut kinds = vec![TokenKind::Unknown];
        for w in TEMPLATE_WORDS {
            words.push(w.to_string());
            kinds.push(TokenKind::Template);
        }
        for (i, w) in class_names.iter().enumerate() {
            words.push(w.clone());
            kinds.push(TokenKind::Class(i));
        }
        for (i, w) in attribute_names.iter().enumerate() {
            words.push(w.clone());
            kinds.push(TokenKind::Attribute(i));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self {
            words,
            kinds,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn kind(&self, token: u32) -> TokenKind {
        self.kinds
            .get(token as usize)
            .copied()
            .unwrap_or(TokenKind::Unknown)
    }

    pub fn word(&self, token: u32) -> Option<&str> {
        self.words.get(token as usize).map(String::as_str)
    }

    /// Lowercases, splits on whitespace, maps unknown words to `[unk]` and
    /// truncates to [`MAX_TOKENS`].
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index.get(&w).copied().unwrap_or(Self::UNK)
            })
            .take(MAX_TOKENS)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub n_classes: usize,
    pub n_attributes: usize,
    pub attributes_per_sample: usize,
    /// Scale of the latent signal before the pixel sigmoid.
    pub image_gain: f64,
    /// Std-dev of per-pixel noise before the sigmoid.
    pub pixel_noise: f64,
    /// Std-dev (per latent coordinate) of sample-specific latent noise.
    pub instance_noise: f64,
    /// Norm of attribute prototypes relative to unit class prototypes.
    pub attribute_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 8,
            width: 8,
            channels: 3,
            latent_dim: 16,
            n_classes: 4,
            n_attributes: 12,
            attributes_per_sample: 2,
            image_gain: 12.0,
            pixel_noise: 0.6,
            instance_noise: 0.05,
            attribute_scale: 0.7,
        }
    }
}

/// The generative model behind every synthetic corpus.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    pub vocab: Vocab,
    /// `n_classes × latent_dim`
    pub class_protos: Array2<f64>,
    /// `n_attributes × latent_dim`
    pub attribute_protos: Array2<f64>,
    /// `pixels × latent_dim`, orthonormal columns.
    pub render: Array2<f64>,
    /// Shared semantic basis, `768 × latent_dim`, that all teachers perturb.
    pub teacher_basis: Array2<f64>,
}

/// Largest teacher output dimension supported.
pub const MAX_TEACHER_DIM: usize = 768;

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if config.attributes_per_sample > config.n_attributes {
            return Err(Error::InvalidConfig(
                "attributes_per_sample exceeds n_attributes".into(),
            ));
        }
        let pixels = config.height * config.width * config.channels;
        if config.latent_dim == 0 || pixels < config.latent_dim {
            return Err(Error::InvalidConfig(
                "image must have at least latent_dim pixels".into(),
            ));
        }
        if !matches!(config.channels, 1 | 3) {
            return Err(Error::InvalidConfig("channels must be 1 or 3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let l = config.latent_dim;
        let class_protos = unit_rows(config.n_classes, l, 1.0, &mut rng);
        let attribute_protos = unit_rows(config.n_attributes, l, config.attribute_scale, &mut rng);
        let render = orthonormal_columns(pixels, l, &mut rng);
        let teacher_basis = gaussian(MAX_TEACHER_DIM, l, 1.0 / (MAX_TEACHER_DIM as f64).sqrt(), &mut rng);
        let class_names: Vec<String> = (0..config.n_classes)
            .map(|i| {
                CLASS_NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("entity{i}"))
            })
            .collect();
        let attribute_names: Vec<String> = (0..config.n_attributes)
            .map(|i| {
                ATTRIBUTE_NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("attr{i}"))
            })
            .collect();
        let vocab = Vocab::build(&class_names, &attribute_names);
        Ok(Self {
            config,
            class_names,
            attribute_names,
            vocab,
            class_protos,
            attribute_protos,
            render,
            teacher_basis,
        })
    }

    pub fn pixels(&self) -> usize {
        self.render.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn modality_of(&self, class: usize) -> &'static str {
        MODALITIES[class % MODALITIES.len()]
    }

    /// Latent vector for a class/attribute combination plus instance noise.
    pub fn latent<R: Rng + ?Sized>(&self, class: usize, attributes: &[usize], rng: &mut R) -> Array1<f64> {
        let mut z = self.class_protos.row(class).to_owned();
        for &a in attributes {
            z += &self.attribute_protos.row(a);
        }
        let s = self.config.instance_noise;
        z.mapv_inplace(|x| x + s * rng.sample::<f64, _>(StandardNormal));
        z
    }

    /// Renders a latent into an 8-bit-quantized image with values in [0,1].
    pub fn render_image<R: Rng + ?Sized>(&self, z: &Array1<f64>, rng: &mut R) -> Vec<f64> {
        let signal = self.render.dot(z);
        let g = self.config.image_gain;
        let s = self.config.pixel_noise;
        signal
            .iter()
            .map(|&x| {
                let pre = g * x + s * rng.sample::<f64, _>(StandardNormal);
                let p = 1.0 / (1.0 + (-pre).exp());
                (p * 255.0).round() / 255.0
            })
            .collect()
    }

    pub fn caption<R: Rng + ?Sized>(&self, class: usize, attributes: &[usize], rng: &mut R) -> String {
        let template = CAPTION_TEMPLATES[rng.random_range(0..CAPTION_TEMPLATES.len())];
        let attrs: Vec<&str> = attributes
            .iter()
            .map(|&a| self.attribute_names[a].as_str())
            .collect();
        template
            .replace("{c}", &self.class_names[class])
            .replace("{a}", &attrs.join(" and "))
    }

    /// Zero-shot prompts per class, in class-index order.
    pub fn prompt_set(&self) -> PromptSet {
        let classes = self
            .class_names
            .iter()
            .map(|c| {
                (
                    c.clone(),
                    PROMPT_TEMPLATES.iter().map(|t| t.replace("{c}", c)).collect(),
                )
            })
            .collect();
        PromptSet { classes }
    }

    /// Recovers the class label a caption names, if exactly one class word
    /// appears.
    pub fn class_of_text(&self, text: &str) -> Option<usize> {
        let mut found = None;
        for t in self.vocab.tokenize(text) {
            if let TokenKind::Class(c) = self.vocab.kind(t) {
                if found.is_some_and(|f| f != c) {
                    return None;
                }
                found = Some(c);
            }
        }
        found
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> SynthSample {
        let mut attrs: Vec<usize> = (0..self.config.n_attributes).collect();
        attrs.shuffle(rng);
        attrs.truncate(self.config.attributes_per_sample);
        attrs.sort_unstable();
        let z = self.latent(class, &attrs, rng);
        let image = self.render_image(&z, rng);
        let text = self.caption(class, &attrs, rng);
        let tokens = self.vocab.tokenize(&text);
        SynthSample {
            class,
            attributes: attrs,
            image,
            text,
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub class: usize,
    pub attributes: Vec<usize>,
    pub image: Vec<f64>,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// One corpus entry: a sample plus its identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub image_id: SampleId,
    pub text_id: SampleId,
    pub class: usize,
    pub modality: String,
    pub image: Vec<f64>,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// Image-text corpus with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<CorpusPair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.class).collect()
    }

    pub fn images(&self) -> Vec<&[f64]> {
        self.pairs.iter().map(|p| p.image.as_slice()).collect()
    }

    pub fn token_lists(&self) -> Vec<&[u32]> {
        self.pairs.iter().map(|p| p.tokens.as_slice()).collect()
    }

    pub fn tally(&self) -> BTreeMap<String, usize> {
        let mut t = BTreeMap::new();
        for p in &self.pairs {
            *t.entry(p.modality.clone()).or_insert(0) += 1;
        }
        t
    }
}

/// Class-balanced corpus of `n_pairs` samples. Ids start at `id_offset`;
/// text ids live in a separate range from image ids.
pub fn generate_corpus(world: &World, n_pairs: usize, seed: u64, id_offset: u64) -> Result<Corpus> {
    if n_pairs < world.config.n_classes {
        return Err(Error::InvalidConfig(format!(
            "need at least one pair per class ({} pairs, {} classes)",
            n_pairs, world.config.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..n_pairs).map(|i| i % world.config.n_classes).collect();
    classes.shuffle(&mut rng);
    let pairs = classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let s = world.sample(class, &mut rng);
            let id = id_offset + i as u64;
            CorpusPair {
                image_id: id,
                text_id: TEXT_ID_BASE + id,
                class,
                modality: world.modality_of(class).to_string(),
                image: s.image,
                text: s.text,
                tokens: s.tokens,
            }
        })
        .collect();
    Ok(Corpus { pairs })
}

/// Text ids are offset from image ids so the two never collide.
pub const TEXT_ID_BASE: u64 = 1 << 40;

/// Class name → prompt templates (at least one each), in class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub classes: Vec<(String, Vec<String>)>,
}

impl PromptSet {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("prompt set needs >= 2 classes".into()));
        }
        if let Some((name, _)) = self.classes.iter().find(|(_, p)| p.is_empty()) {
            return Err(Error::InvalidConfig(format!("class {name} has no prompts")));
        }
        Ok(())
    }

    /// JSON object `{class: [prompts]}`; keys keep class order.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.classes
                .iter()
                .map(|(c, p)| serde_json::json!({"class": c, "prompts": p}))
                .collect(),
        )
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            class: String,
            prompts: Vec<String>,
        }
        let entries: Vec<Entry> = serde_json::from_value(v.clone())?;
        let set = Self {
            classes: entries.into_iter().map(|e| (e.class, e.prompts)).collect(),
        };
        set.validate()?;
        Ok(set)
    }
}

/// Isotropic Gaussian blobs, one per class, for linear-probe fixtures.
pub fn gaussian_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = unit_rows(n_classes, dim, separation, &mut rng);
    let n = n_per_class * n_classes;
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    order.shuffle(&mut rng);
    for (i, c) in order.into_iter().enumerate() {
        for j in 0..dim {
            x[[i, j]] = centers[[c, j]] + rng.sample::<f64, _>(StandardNormal);
        }
        y.push(c);
    }
    (x, y)
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Random rows rescaled to norm `scale`.
pub(crate) fn unit_rows<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    let mut m = gaussian(rows, cols, 1.0, rng);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|x| scale * x / n);
    }
    m
}

/// Gram-Schmidt on a Gaussian matrix.
pub(crate) fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut m = gaussian(rows, cols, 1.0, rng);
    for j in 0..cols {
        for k in 0..j {
            let proj = m.column(j).dot(&m.column(k));
            let ck = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &ck);
        }
        let n = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|x| x / n);
    }
    m
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
