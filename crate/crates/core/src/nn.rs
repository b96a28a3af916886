//! Minimal dense-network toolkit with hand-written backward passes.
//!
//! Every trainable model implements [`Params`], which enumerates its tensors
//! as named flat slices in a fixed order. Gradients are stored in a second
//! instance of the same model type (see [`zeros_like`]), so optimizers and
//! checkpoints only ever deal with `(name, &[f64])` sequences.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn zeros_like<P: Params + Clone>(model: &P) -> P {
    let mut g = model.clone();
    g.visit_mut("", &mut |_, s| s.fill(0.0));
    g
}

pub fn param_count<P: Params>(model: &P) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, s| n += s.len());
    n
}

pub fn flatten<P: Params>(model: &P) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |_, s| out.extend_from_slice(s));
    out
}

pub fn load_flat<P: Params>(model: &mut P, flat: &[f64]) -> Result<()> {
    let expected = param_count(model);
    if flat.len() != expected {
        return Err(Error::DimMismatch {
            expected,
            actual: flat.len(),
        });
    }
    let mut offset = 0;
    model.visit_mut("", &mut |_, s| {
        s.copy_from_slice(&flat[offset..offset + s.len()]);
        offset += s.len();
    });
    Ok(())
}

pub fn named_tensors<P: Params>(model: &P) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, s| out.push((name.to_string(), s.to_vec())));
    out
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn array_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn array_slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// Fully connected layer `y = x W^T + b` on row-major batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Array2::from_shape_fn((output, input), |_| dist.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
        grads: &mut Linear,
    ) -> Array2<f64> {
        grads.weight += &grad_out.t().dot(&x);
        grads.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), array_slice(&self.weight));
        f(
            &join(prefix, "bias"),
            self.bias.as_slice().expect("contiguous"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), array_slice_mut(&mut self.weight));
        f(
            &join(prefix, "bias"),
            self.bias.as_slice_mut().expect("contiguous"),
        );
    }
}

/// Stack of linear layers with `tanh` between them and no activation on the
/// output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Intermediate activations kept for the backward pass. `inputs[l]` is the
/// input to layer `l`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_trace(x).0
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpTrace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(h.view());
            if l + 1 < self.layers.len() {
                y.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpTrace { inputs })
    }

    pub fn backward(
        &self,
        trace: &MlpTrace,
        grad_out: ArrayView2<f64>,
        grads: &mut Mlp,
    ) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            let mut gin = self.layers[l].backward(input.view(), g.view(), &mut grads.layers[l]);
            if l > 0 {
                // input[l] = tanh(pre[l-1])
                gin.zip_mut_with(input, |gi, &h| *gi *= 1.0 - h * h);
            }
            g = gin;
        }
        g
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// L2-normalizes each row. Returns the normalized rows and the original
/// norms, which [`normalize_rows_backward`] needs.
pub fn normalize_rows(raw: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = raw.clone();
    let mut norms = Vec::with_capacity(raw.nrows());
    for mut row in out.rows_mut() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// Gradient of `y = x / |x|`: `dx = (g - y (y·g)) / |x|` per row.
pub fn normalize_rows_backward(
    normalized: ArrayView2<f64>,
    norms: &[f64],
    grad: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = grad.to_owned();
    for ((mut g, y), &n) in out.rows_mut().into_iter().zip(normalized.rows()).zip(norms) {
        let proj = g.dot(&y);
        g.zip_mut_with(&y, |gi, &yi| *gi = (*gi - yi * proj) / n);
    }
    out
}

/// Decoupled-weight-decay Adam. Weight decay only touches tensors whose
/// name ends in `weight`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = flatten(grads);
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.visit_mut("", &mut |name, p| {
            let decay = if name.ends_with("weight") { wd } else { 0.0 };
            for (i, w) in p.iter_mut().enumerate() {
                let k = offset + i;
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
            }
            offset += p.len();
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    #[default]
    Constant,
    Cosine,
}

/// Linear warmup followed by a constant or cosine-decayed learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub decay: DecayKind,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate for the 1-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        match self.decay {
            DecayKind::Constant => self.base,
            DecayKind::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress =
                    (step.saturating_sub(self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}
