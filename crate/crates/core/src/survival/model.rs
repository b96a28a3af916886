//! Attention-based MIL pooling feeding a per-interval logistic hazard head.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{durations_events, IntervalGrid, SurvivalPrediction, SurvivalRecord};
use crate::error::{Error, Result};
use crate::nn::{join, zeros_like, AdamW, Linear, Params};
use crate::synth::gaussian;

/// Attention pooling `a = softmax_k(wᵀ tanh(V h_k))`, optionally gated by
/// `sigmoid(U h_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abmil {
    pub v: Linear,
    pub u: Option<Linear>,
    pub w: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AbmilTrace {
    pub tanh: Array2<f64>,
    pub gate: Option<Array2<f64>>,
    pub weights: Array1<f64>,
    pub pooled: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Abmil {
    pub fn new<R: rand::Rng + ?Sized>(input: usize, hidden: usize, gated: bool, rng: &mut R) -> Self {
        let v = Linear::new(input, hidden, rng);
        let u = gated.then(|| Linear::new(input, hidden, rng));
        let w = gaussian(1, hidden, 1.0 / (hidden as f64).sqrt(), rng).row(0).to_owned();
        Self { v, u, w }
    }

    pub fn input_dim(&self) -> usize {
        self.v.input_dim()
    }

    pub fn forward(&self, bag: ArrayView2<f64>) -> AbmilTrace {
        let tanh = self.v.forward(bag).mapv(f64::tanh);
        let gate = self.u.as_ref().map(|u| u.forward(bag).mapv(sigmoid));
        let m = match &gate {
            Some(g) => &tanh * g,
            None => tanh.clone(),
        };
        let scores = m.dot(&self.w);
        let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut weights = scores.mapv(|x| (x - max).exp());
        weights /= weights.sum();
        let pooled = weights.dot(&bag);
        AbmilTrace {
            tanh,
            gate,
            weights,
            pooled,
        }
    }

    /// Accumulates parameter gradients given `dL/d pooled`. Bag features are
    /// frozen, so no input gradient is returned.
    pub fn backward(&self, bag: ArrayView2<f64>, trace: &AbmilTrace, grad: &Array1<f64>, grads: &mut Abmil) {
        let da = bag.dot(grad);
        let mean = trace.weights.dot(&da);
        let ds = &trace.weights * &(da - mean);
        let m = match &trace.gate {
            Some(g) => &trace.tanh * g,
            None => trace.tanh.clone(),
        };
        grads.w += &m.t().dot(&ds);
        let ds_col = ds.insert_axis(Axis(1));
        let dm = ds_col.dot(&self.w.view().insert_axis(Axis(0)));
        let dt = match &trace.gate {
            Some(g) => &dm * g,
            None => dm.clone(),
        };
        let dv = &dt * &trace.tanh.mapv(|t| 1.0 - t * t);
        self.v.backward(bag, dv.view(), &mut grads.v);
        if let (Some(u), Some(g), Some(gu)) = (&self.u, &trace.gate, grads.u.as_mut()) {
            let du = &dm * &trace.tanh * &g.mapv(|x| x * (1.0 - x));
            u.backward(bag, du.view(), gu);
        }
    }
}

impl Params for Abmil {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.v.visit(&join(prefix, "v"), f);
        if let Some(u) = &self.u {
            u.visit(&join(prefix, "u"), f);
        }
        f(&join(prefix, "attention"), self.w.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.v.visit_mut(&join(prefix, "v"), f);
        if let Some(u) = &mut self.u {
            u.visit_mut(&join(prefix, "u"), f);
        }
        f(&join(prefix, "attention"), self.w.as_slice_mut().expect("contiguous"));
    }
}

/// Pools a bag into one vector; returns the vector and its attention weights.
pub fn abmil_aggregate(bag: ArrayView2<f64>, params: &Abmil) -> Result<(Array1<f64>, Array1<f64>)> {
    if bag.nrows() == 0 {
        return Err(Error::Empty("instance bag"));
    }
    if bag.ncols() != params.input_dim() {
        return Err(Error::DimMismatch {
            expected: params.input_dim(),
            actual: bag.ncols(),
        });
    }
    let t = params.forward(bag);
    Ok((t.pooled, t.weights))
}

/// Which inputs feed the hazard head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    ImageOnly,
    ReportOnly,
    /// Pooled bag and report embedding, concatenated.
    Combined,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::ImageOnly, Fusion::ReportOnly, Fusion::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::ImageOnly => "image",
            Fusion::ReportOnly => "report",
            Fusion::Combined => "image+report",
        }
    }

    fn uses_image(self) -> bool {
        self != Fusion::ReportOnly
    }

    fn uses_report(self) -> bool {
        self != Fusion::ImageOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalConfig {
    pub attention_dim: usize,
    pub gated: bool,
    pub fusion: Fusion,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub intervals: usize,
    pub seed: u64,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            attention_dim: 32,
            gated: false,
            fusion: Fusion::ImageOnly,
            epochs: 40,
            lr: 5e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            intervals: super::DEFAULT_INTERVALS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalModel {
    pub abmil: Abmil,
    pub head: Linear,
    pub fusion: Fusion,
    pub grid: IntervalGrid,
    pub epoch_loss: Vec<f64>,
}

impl Params for SurvivalModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.abmil.visit(&join(prefix, "abmil"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.abmil.visit_mut(&join(prefix, "abmil"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

struct Forward {
    trace: Option<AbmilTrace>,
    input: Array2<f64>,
    hazards: Array1<f64>,
}

impl SurvivalModel {
    fn forward(&self, r: &SurvivalRecord) -> Result<Forward> {
        let mut parts: Vec<f64> = Vec::new();
        let trace = if self.fusion.uses_image() {
            if r.bag.nrows() == 0 || r.bag.ncols() != self.abmil.input_dim() {
                return Err(Error::DimMismatch {
                    expected: self.abmil.input_dim(),
                    actual: r.bag.ncols(),
                });
            }
            let trace = self.abmil.forward(r.bag.view());
            parts.extend(trace.pooled.iter());
            Some(trace)
        } else {
            None
        };
        if self.fusion.uses_report() {
            let rep = r
                .report
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("subject {} has no report", r.subject_id)))?;
            parts.extend_from_slice(rep);
        }
        if parts.len() != self.head.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.head.input_dim(),
                actual: parts.len(),
            });
        }
        let input = Array2::from_shape_vec((1, parts.len()), parts).expect("row vector");
        let hazards = self.head.forward(input.view()).row(0).mapv(sigmoid);
        Ok(Forward {
            trace,
            input,
            hazards,
        })
    }

    pub fn predict(&self, record: &SurvivalRecord) -> Result<SurvivalPrediction> {
        Ok(SurvivalPrediction::from_hazards(self.forward(record)?.hazards.view()))
    }

    pub fn predict_all(&self, records: &[SurvivalRecord]) -> Result<Predictions> {
        let j = self.grid.len();
        let n = records.len();
        let mut hazards = Array2::zeros((n, j));
        let mut curves = Array2::zeros((n, j));
        let mut risk = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            let p = self.predict(r)?;
            hazards.row_mut(i).assign(&Array1::from(p.hazards.clone()));
            curves.row_mut(i).assign(&Array1::from(p.survival()));
            risk.push(p.risk());
        }
        Ok(Predictions {
            hazards,
            curves,
            risk,
        })
    }

    /// Mean per-subject negative log-likelihood on `records`.
    pub fn nll(&self, records: &[SurvivalRecord]) -> Result<f64> {
        let (d, e) = durations_events(records);
        let p = self.predict_all(records)?;
        super::metrics::inbll(p.hazards.view(), self.grid.outcome_matrix(&d, &e).view())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub hazards: Array2<f64>,
    pub curves: Array2<f64>,
    pub risk: Vec<f64>,
}

fn input_dims(records: &[SurvivalRecord], fusion: Fusion) -> Result<(usize, usize)> {
    let bag_dim = records[0].bag.ncols();
    let report_dim = records[0].report.as_ref().map_or(0, Vec::len);
    for r in records {
        r.validate()?;
        if r.bag.ncols() != bag_dim {
            return Err(Error::DimMismatch {
                expected: bag_dim,
                actual: r.bag.ncols(),
            });
        }
        if fusion.uses_report() && r.report.as_ref().map(Vec::len) != Some(report_dim) {
            return Err(Error::InvalidConfig(format!(
                "subject {} lacks a {report_dim}-d report",
                r.subject_id
            )));
        }
    }
    if fusion.uses_report() && report_dim == 0 {
        return Err(Error::InvalidConfig("report fusion needs report embeddings".into()));
    }
    let head_in = if fusion.uses_image() { bag_dim } else { 0 } + if fusion.uses_report() { report_dim } else { 0 };
    Ok((bag_dim, head_in))
}

/// Fits the model by maximizing the discrete-time Bernoulli likelihood. The
/// head starts at zero, so an untrained model scores every subject alike.
pub fn train_survival(records: &[SurvivalRecord], grid: &IntervalGrid, cfg: &SurvivalConfig) -> Result<SurvivalModel> {
    if records.len() < 2 {
        return Err(Error::InvalidConfig("need >= 2 subjects".into()));
    }
    if !records.iter().any(|r| r.event) {
        return Err(Error::NoEvents);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || cfg.attention_dim == 0 {
        return Err(Error::InvalidConfig(format!("survival config {cfg:?}")));
    }
    let (bag_dim, head_in) = input_dims(records, cfg.fusion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let abmil = Abmil::new(bag_dim, cfg.attention_dim, cfg.gated, &mut rng);
    let head = Linear {
        weight: Array2::zeros((grid.len(), head_in)),
        bias: Array1::zeros(grid.len()),
    };
    let mut model = SurvivalModel {
        abmil,
        head,
        fusion: cfg.fusion,
        grid: grid.clone(),
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    let outcomes: Vec<Vec<Option<bool>>> = records.iter().map(|r| grid.outcomes(r.duration, r.event)).collect();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = zeros_like(&model);
            let b = chunk.len() as f64;
            for &i in chunk {
                let fwd = model.forward(&records[i])?;
                let mut dlogit = Array2::zeros((1, grid.len()));
                for (m, y) in outcomes[i].iter().enumerate() {
                    if let Some(y) = y {
                        let p = fwd.hazards[m];
                        let target = f64::from(u8::from(*y));
                        let pc = p.clamp(super::metrics::PROB_CLIP, 1.0 - super::metrics::PROB_CLIP);
                        total -= if *y { pc.ln() } else { (1.0 - pc).ln() };
                        dlogit[[0, m]] = (p - target) / b;
                    }
                }
                let dx = model.head.backward(fwd.input.view(), dlogit.view(), &mut grads.head);
                if let Some(trace) = &fwd.trace {
                    let dz = dx.slice(s![0, ..bag_dim]).to_owned();
                    model.abmil.backward(records[i].bag.view(), trace, &dz, &mut grads.abmil);
                }
            }
            opt.step(&mut model, &grads, cfg.lr);
        }
        model.epoch_loss.push(total / records.len() as f64);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bag(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian(n, d, 1.0, &mut rng)
    }

    fn model(d: usize, gated: bool) -> Abmil {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Abmil::new(d, 6, gated, &mut rng);
        m.v.bias.mapv_inplace(|_| 0.1);
        m
    }

    #[test]
    fn single_instance_gets_full_weight() {
        let b = bag(1, 1, 5);
        let (z, a) = abmil_aggregate(b.view(), &model(5, false)).unwrap();
        assert_eq!(a.to_vec(), vec![1.0]);
        assert_eq!(z, b.row(0));
        assert!(abmil_aggregate(Array2::zeros((0, 5)).view(), &model(5, false)).is_err());
    }

    #[test]
    fn identical_instances_get_uniform_weights() {
        let row = bag(2, 1, 4);
        let b = Array2::from_shape_fn((5, 4), |(_, j)| row[[0, j]]);
        let (_, a) = abmil_aggregate(b.view(), &model(4, true)).unwrap();
        for w in a {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_matches_direct_formula() {
        let b = bag(4, 8, 5);
        let m = model(5, false);
        let (z, a) = abmil_aggregate(b.view(), &m).unwrap();
        let scores: Vec<f64> = b
            .rows()
            .into_iter()
            .map(|h| {
                let vh: Vec<f64> = (0..6).map(|r| (m.v.weight.row(r).dot(&h) + m.v.bias[r]).tanh()).collect();
                vh.iter().zip(m.w.iter()).map(|(x, w)| x * w).sum()
            })
            .collect();
        let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let total: f64 = e.iter().sum();
        for k in 0..8 {
            assert!((a[k] - e[k] / total).abs() < 1e-12);
        }
        for j in 0..5 {
            let want: f64 = (0..8).map(|k| e[k] / total * b[[k, j]]).sum();
            assert!((z[j] - want).abs() < 1e-12);
        }
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn abmil_gradients_match_finite_differences() {
        for gated in [false, true] {
            let b = bag(5, 6, 4);
            let m = model(4, gated);
            let probe = array![0.3, -1.1, 0.7, 0.2];
            let loss = |m: &Abmil| m.forward(b.view()).pooled.dot(&probe);
            let mut grads = zeros_like(&m);
            m.backward(b.view(), &m.forward(b.view()), &probe, &mut grads);
            let analytic = crate::nn::flatten(&grads);
            let base = crate::nn::flatten(&m);
            let eps = 1e-6;
            for (i, g) in analytic.iter().enumerate() {
                let mut p = base.clone();
                p[i] += eps;
                let mut mp = m.clone();
                crate::nn::load_flat(&mut mp, &p).unwrap();
                p[i] -= 2.0 * eps;
                let mut mm = m.clone();
                crate::nn::load_flat(&mut mm, &p).unwrap();
                let num = (loss(&mp) - loss(&mm)) / (2.0 * eps);
                assert!((num - g).abs() < 1e-7, "gated={gated} param {i}: {num} vs {g}");
            }
        }
    }

    fn toy_records(n: usize) -> Vec<SurvivalRecord> {
        (0..n)
            .map(|i| {
                let high = i % 2 == 0;
                let mut b = bag(100 + i as u64, 4, 3);
                if high {
                    b.column_mut(0).mapv_inplace(|x| x + 3.0);
                }
                SurvivalRecord {
                    subject_id: format!("s{i}"),
                    duration: if high { 1.0 + (i % 5) as f64 * 0.1 } else { 5.0 + (i % 5) as f64 * 0.1 },
                    event: i % 7 != 0,
                    bag: b,
                    report: Some(vec![if high { 1.0 } else { 0.0 }, 1.0]),
                }
            })
            .collect()
    }

    #[test]
    fn training_reduces_likelihood_loss() {
        let recs = toy_records(40);
        let grid = IntervalGrid::new(vec![1.2, 3.0, 5.4]).unwrap();
        let cfg = SurvivalConfig {
            epochs: 100,
            ..SurvivalConfig::default()
        };
        let m = train_survival(&recs, &grid, &cfg).unwrap();
        assert!(m.epoch_loss.last().unwrap() < &(0.5 * m.epoch_loss[0]));
        let p = m.predict_all(&recs).unwrap();
        let (d, e) = durations_events(&recs);
        // Only the group is visible, so within-group order is a coin flip.
        assert!(super::super::c_index(&p.risk, &d, &e).unwrap() > 0.7);
        let min_high = (0..40).step_by(2).map(|i| p.risk[i]).fold(f64::INFINITY, f64::min);
        let max_low = (1..40).step_by(2).map(|i| p.risk[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_high > max_low);
        for row in p.curves.rows() {
            assert!(row.windows(2).into_iter().all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn untrained_model_ties_everyone() {
        let recs = toy_records(10);
        let grid = IntervalGrid::new(vec![1.2, 5.4]).unwrap();
        let cfg = SurvivalConfig {
            epochs: 0,
            ..SurvivalConfig::default()
        };
        let m = train_survival(&recs, &grid, &cfg).unwrap();
        let p = m.predict_all(&recs).unwrap();
        assert!(p.risk.iter().all(|&r| r == p.risk[0]));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let grid = IntervalGrid::new(vec![1.0]).unwrap();
        let mut recs = toy_records(4);
        for r in &mut recs {
            r.event = false;
        }
        assert!(matches!(
            train_survival(&recs, &grid, &SurvivalConfig::default()),
            Err(Error::NoEvents)
        ));
        let mut recs = toy_records(4);
        recs[1].report = None;
        let cfg = SurvivalConfig {
            fusion: Fusion::Combined,
            ..SurvivalConfig::default()
        };
        assert!(train_survival(&recs, &grid, &cfg).is_err());
    }
}
