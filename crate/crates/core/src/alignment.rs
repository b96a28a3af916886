//! Maps teachers with different native dimensions into one joint space.
//!
//! Each teacher gets its own image/text projection encoder
//! (`native → joint`, linear + tanh) and decoder (`joint → native`, linear).
//! Between them sit two shared autoencoders, one per stream, with identical
//! shapes and independent weights. Training minimizes reconstruction error
//! only.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::stack;
use crate::error::{Error, Result};
use crate::nn::{join, normalize_rows, zeros_like, AdamW, DecayKind, Linear, LrSchedule, Mlp, Params};
use crate::synth::gaussian;
use crate::types::{normalize, Embedding, TeacherId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Image,
    Text,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Image, Stream::Text];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Image => "image",
            Stream::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub joint_dim: usize,
    pub latent_dim: usize,
    /// Std of the noise added to the truncated-identity initialization of
    /// projection layers.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            joint_dim: 512,
            latent_dim: 256,
            init_noise: 0.01,
            seed: 0,
        }
    }
}

/// Projection encoders and decoders for one teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherHeads {
    pub native_dim: usize,
    pub image_encoder: Linear,
    pub text_encoder: Linear,
    pub image_decoder: Linear,
    pub text_decoder: Linear,
}

impl TeacherHeads {
    fn encoder(&self, stream: Stream) -> &Linear {
        match stream {
            Stream::Image => &self.image_encoder,
            Stream::Text => &self.text_encoder,
        }
    }

    fn decoder(&self, stream: Stream) -> &Linear {
        match stream {
            Stream::Image => &self.image_decoder,
            Stream::Text => &self.text_decoder,
        }
    }

    fn parts_mut(&mut self, stream: Stream) -> (&mut Linear, &mut Linear) {
        match stream {
            Stream::Image => (&mut self.image_encoder, &mut self.image_decoder),
            Stream::Text => (&mut self.text_encoder, &mut self.text_decoder),
        }
    }
}

impl Params for TeacherHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.image_encoder.visit(&join(prefix, "image_encoder"), f);
        self.text_encoder.visit(&join(prefix, "text_encoder"), f);
        self.image_decoder.visit(&join(prefix, "image_decoder"), f);
        self.text_decoder.visit(&join(prefix, "text_decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.image_encoder.visit_mut(&join(prefix, "image_encoder"), f);
        self.text_encoder.visit_mut(&join(prefix, "text_encoder"), f);
        self.image_decoder.visit_mut(&join(prefix, "image_decoder"), f);
        self.text_decoder.visit_mut(&join(prefix, "text_decoder"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel {
    pub config: AlignmentConfig,
    pub teachers: BTreeMap<TeacherId, TeacherHeads>,
    pub image_autoencoder: Mlp,
    pub text_autoencoder: Mlp,
}

/// `rows × cols` matrix with ones on the leading diagonal plus small noise.
fn truncated_identity(rows: usize, cols: usize, noise: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut w = gaussian(rows, cols, noise, rng);
    for i in 0..rows.min(cols) {
        w[[i, i]] += 1.0;
    }
    w
}

impl AlignmentModel {
    /// One set of heads per `(teacher_id, native_dim)`.
    pub fn new(config: AlignmentConfig, teachers: &[(TeacherId, usize)]) -> Result<Self> {
        if config.joint_dim == 0 || config.latent_dim == 0 {
            return Err(Error::InvalidConfig("alignment dims must be positive".into()));
        }
        if teachers.is_empty() {
            return Err(Error::Empty("teacher list"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let j = config.joint_dim;
        let ae_dims = [j, config.latent_dim, j];
        let image_autoencoder = Mlp::new(&ae_dims, &mut rng);
        let text_autoencoder = Mlp::new(&ae_dims, &mut rng);
        let mut heads = BTreeMap::new();
        for &(id, d) in teachers {
            if d == 0 {
                return Err(Error::UnsupportedTeacherDim(d));
            }
            let mut layer = |rows: usize, cols: usize| {
                let mut l = Linear::new(cols, rows, &mut rng);
                l.weight = truncated_identity(rows, cols, config.init_noise, &mut rng);
                l.bias.fill(0.0);
                l
            };
            let h = TeacherHeads {
                native_dim: d,
                image_encoder: layer(j, d),
                text_encoder: layer(j, d),
                image_decoder: layer(d, j),
                text_decoder: layer(d, j),
            };
            if heads.insert(id, h).is_some() {
                return Err(Error::InvalidConfig(format!("teacher {id} registered twice")));
            }
        }
        Ok(Self {
            config,
            teachers: heads,
            image_autoencoder,
            text_autoencoder,
        })
    }

    pub fn teacher_ids(&self) -> Vec<TeacherId> {
        self.teachers.keys().copied().collect()
    }

    fn heads(&self, id: TeacherId) -> Result<&TeacherHeads> {
        self.teachers.get(&id).ok_or(Error::UnknownTeacher(id))
    }

    fn autoencoder(&self, stream: Stream) -> &Mlp {
        match stream {
            Stream::Image => &self.image_autoencoder,
            Stream::Text => &self.text_autoencoder,
        }
    }

    fn check_input(&self, id: TeacherId, cols: usize) -> Result<&TeacherHeads> {
        let h = self.heads(id)?;
        if cols != h.native_dim {
            return Err(Error::DimMismatch {
                expected: h.native_dim,
                actual: cols,
            });
        }
        Ok(h)
    }

    /// Unnormalized projection `tanh(W x + b)` for a batch of rows.
    fn project_raw(&self, h: &TeacherHeads, stream: Stream, x: ArrayView2<f64>) -> Array2<f64> {
        h.encoder(stream).forward(x).mapv(f64::tanh)
    }

    /// Joint-space embedding of one teacher feature.
    pub fn project(&self, id: TeacherId, feature: &Embedding, stream: Stream) -> Result<Embedding> {
        let h = self.check_input(id, feature.dim())?;
        let x = ArrayView2::from_shape((1, feature.dim()), feature.values()).expect("row shape");
        let p = self.project_raw(h, stream, x);
        normalize(p.as_slice().expect("contiguous"))
    }

    /// Batched [`project`](Self::project): rows in, unit rows out.
    pub fn project_batch(&self, id: TeacherId, stream: Stream, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.check_input(id, x.ncols())?;
        Ok(normalize_rows(&self.project_raw(h, stream, x))?.0)
    }

    fn reconstruct_raw(&self, h: &TeacherHeads, stream: Stream, x: ArrayView2<f64>) -> Array2<f64> {
        let p = self.project_raw(h, stream, x);
        let z = self.autoencoder(stream).forward(p.view());
        h.decoder(stream).forward(z.view())
    }

    /// Full encoder → autoencoder → decoder path, re-normalized.
    pub fn reconstruct(&self, id: TeacherId, feature: &Embedding, stream: Stream) -> Result<Embedding> {
        let h = self.check_input(id, feature.dim())?;
        let x = ArrayView2::from_shape((1, feature.dim()), feature.values()).expect("row shape");
        let y = self.reconstruct_raw(h, stream, x);
        normalize(y.as_slice().expect("contiguous"))
    }

    /// Mean over rows of `|decoder output - input|²`.
    pub fn reconstruction_mse(&self, id: TeacherId, stream: Stream, x: ArrayView2<f64>) -> Result<f64> {
        let h = self.check_input(id, x.ncols())?;
        if x.nrows() == 0 {
            return Err(Error::Empty("feature set"));
        }
        let y = self.reconstruct_raw(h, stream, x);
        Ok((&y - &x).mapv(|v| v * v).sum() / x.nrows() as f64)
    }

    /// Accumulates the gradient of the reconstruction MSE for one batch into
    /// `grads` and returns the loss.
    fn accumulate(
        &self,
        id: TeacherId,
        stream: Stream,
        x: ArrayView2<f64>,
        grads: &mut AlignmentModel,
    ) -> f64 {
        let h = &self.teachers[&id];
        let enc = h.encoder(stream);
        let ae = self.autoencoder(stream);
        let dec = h.decoder(stream);
        let p = enc.forward(x).mapv(f64::tanh);
        let (z, trace) = ae.forward_trace(p.view());
        let y = dec.forward(z.view());
        let n = x.nrows() as f64;
        let diff = &y - &x;
        let loss = diff.mapv(|v| v * v).sum() / n;
        let gy = diff * (2.0 / n);

        let (g_ae, g_heads) = match stream {
            Stream::Image => (&mut grads.image_autoencoder, grads.teachers.get_mut(&id)),
            Stream::Text => (&mut grads.text_autoencoder, grads.teachers.get_mut(&id)),
        };
        let (g_enc, g_dec) = g_heads.expect("grads mirror the model").parts_mut(stream);
        let gz = dec.backward(z.view(), gy.view(), g_dec);
        let mut gp = ae.backward(&trace, gz.view(), g_ae);
        gp.zip_mut_with(&p, |g, &a| *g *= 1.0 - a * a);
        enc.backward(x, gp.view(), g_enc);
        loss
    }
}

impl Params for AlignmentModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.image_autoencoder.visit(&join(prefix, "image_autoencoder"), f);
        self.text_autoencoder.visit(&join(prefix, "text_autoencoder"), f);
        for (id, h) in &self.teachers {
            h.visit(&join(prefix, &format!("teacher{id}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.image_autoencoder.visit_mut(&join(prefix, "image_autoencoder"), f);
        self.text_autoencoder.visit_mut(&join(prefix, "text_autoencoder"), f);
        for (id, h) in self.teachers.iter_mut() {
            h.visit_mut(&join(prefix, &format!("teacher{id}")), f);
        }
    }
}

/// Native-dimension features of one teacher, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

impl TeacherFeatures {
    pub fn new(image: &[Embedding], text: &[Embedding]) -> Result<Self> {
        Ok(Self {
            image: stack(image)?,
            text: stack(text)?,
        })
    }

    fn stream(&self, stream: Stream) -> &Array2<f64> {
        match stream {
            Stream::Image => &self.image,
            Stream::Text => &self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLog {
    /// Entry 0 is the full-data loss before training; entry `e` is the mean
    /// minibatch loss during epoch `e`. Each loss is summed over teachers
    /// and streams.
    pub epoch_loss: Vec<f64>,
    /// Names of every term in the objective.
    pub objective_terms: Vec<String>,
}

/// Trains all projection heads and both autoencoders jointly. Each step
/// draws one minibatch per (teacher, stream) and sums their MSEs. The
/// learning rate follows a cosine decay over the whole run.
pub fn train_alignment(
    model: &mut AlignmentModel,
    features: &BTreeMap<TeacherId, TeacherFeatures>,
    config: &AlignTrainConfig,
) -> Result<AlignmentLog> {
    if features.is_empty() {
        return Err(Error::Empty("feature set"));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidConfig("alignment batch size and lr must be positive".into()));
    }
    for (&id, f) in features {
        model.check_input(id, f.image.ncols())?;
        model.check_input(id, f.text.ncols())?;
        if f.image.nrows() == 0 || f.text.nrows() == 0 {
            return Err(Error::Empty("feature set"));
        }
    }
    let mut objective_terms = Vec::new();
    let mut initial = 0.0;
    for (&id, f) in features {
        for stream in Stream::BOTH {
            initial += model.reconstruction_mse(id, stream, f.stream(stream).view())?;
            objective_terms.push(format!("reconstruction_mse.teacher{id}.{}", stream.name()));
        }
    }
    let mut epoch_loss = vec![initial];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(0.0);
    let b = config.batch_size;
    let steps = features
        .values()
        .flat_map(|f| [f.image.nrows(), f.text.nrows()])
        .max()
        .unwrap_or(1)
        .div_ceil(b);
    // Cosine decay keeps late-epoch Adam noise from undoing progress.
    let schedule = LrSchedule {
        base: config.lr,
        warmup_steps: 0,
        decay: DecayKind::Cosine,
        total_steps: (steps * config.epochs) as u64,
    };
    for _ in 0..config.epochs {
        let mut perms: Vec<Vec<usize>> = Vec::new();
        for f in features.values() {
            for stream in Stream::BOTH {
                let mut p: Vec<usize> = (0..f.stream(stream).nrows()).collect();
                p.shuffle(&mut rng);
                perms.push(p);
            }
        }
        let mut total = 0.0;
        for step in 0..steps {
            let mut grads = zeros_like(model);
            let mut loss = 0.0;
            let mut k = 0;
            for (&id, f) in features {
                for stream in Stream::BOTH {
                    let perm = &perms[k];
                    k += 1;
                    let idx: Vec<usize> = (0..b.min(perm.len()))
                        .map(|j| perm[(step * b + j) % perm.len()])
                        .collect();
                    let x = f.stream(stream).select(ndarray::Axis(0), &idx);
                    loss += model.accumulate(id, stream, x.view(), &mut grads);
                }
            }
            let lr = schedule.lr_at(opt.steps_taken() + 1);
            opt.step(model, &grads, lr);
            total += loss;
        }
        epoch_loss.push(total / steps as f64);
    }
    Ok(AlignmentLog {
        epoch_loss,
        objective_terms,
    })
}

/// First `n` rows, a convenience for train/held-out splits.
pub fn head_rows(x: &Array2<f64>, n: usize) -> Array2<f64> {
    x.slice(s![..n.min(x.nrows()), ..]).to_owned()
}
