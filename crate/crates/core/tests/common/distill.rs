//! Distillation against a single frozen teacher, with no alignment stage.

use mmkd::encoders::{make_synthetic_teacher, mean_row_cosine, stack, DualEncoder, DualEncoderConfig, SyntheticTeacher, Teacher};
use mmkd::synth::{generate_corpus, Corpus, World, WorldConfig};
use mmkd::trainer::{distill, Stage, TrainConfig};
use mmkd::{KdWeights, Quadruplet};

pub const DIM: usize = 512;
pub const MAX_STEPS: usize = 2000;

fn quads(c: &Corpus, t: &SyntheticTeacher) -> Vec<Quadruplet> {
    c.pairs
        .iter()
        .map(|p| {
            Quadruplet::new(
                p.image_id,
                p.text_id,
                t.id(),
                t.encode_image(&p.image).unwrap().quantize_f32(),
                t.encode_text(&p.tokens).unwrap().quantize_f32(),
            )
            .unwrap()
        })
        .collect()
}

/// Mean over pairs of `‖v_T − v_S‖² + ‖t_T − t_S‖²`, by explicit loops.
fn held_out_fd(s: &DualEncoder, c: &Corpus, q: &[Quadruplet]) -> f64 {
    let v = s.encode_images(&c.images()).unwrap();
    let t = s.encode_texts(&c.token_lists()).unwrap();
    let mut total = 0.0;
    for (i, q) in q.iter().enumerate() {
        for k in 0..DIM {
            total += (q.teacher_image.values()[k] - v[[i, k]]).powi(2);
            total += (q.teacher_text.values()[k] - t[[i, k]]).powi(2);
        }
    }
    total / q.len() as f64
}

fn setup() -> (World, Corpus, Corpus, SyntheticTeacher) {
    let w = World::new(WorldConfig::default()).unwrap();
    let train = generate_corpus(&w, 512, 11, 0).unwrap();
    let held = generate_corpus(&w, 128, 12, 10_000).unwrap();
    let t = make_synthetic_teacher(&w, 1, 13, DIM).unwrap();
    (w, train, held, t)
}

pub struct Progress {
    pub before: f64,
    pub after: f64,
    pub steps: usize,
}

/// FD-only training from a random student; reports held-out FD.
pub fn fd_only() -> Progress {
    let (w, train, held, t) = setup();
    let (q, hq) = (quads(&train, &t), quads(&held, &t));
    let mut s = DualEncoder::new(DualEncoderConfig::for_world(&w, DIM, 5)).unwrap();
    let before = held_out_fd(&s, &held, &hq);
    let cfg = TrainConfig {
        kd_weights: KdWeights::new(0.0, 1.0, 0.0).unwrap(),
        epochs: 1000,
        max_steps: Some(MAX_STEPS as u64),
        ..TrainConfig::desk(Stage::Distill)
    };
    let log = distill(&mut s, &q, &train, &cfg).unwrap();
    Progress {
        before,
        after: held_out_fd(&s, &held, &hq),
        steps: log.steps.len(),
    }
}

/// Full KD from a random student; reports held-out mean cosine between
/// student and teacher embeddings.
pub fn full_kd() -> Progress {
    let (w, train, held, t) = setup();
    let (q, hq) = (quads(&train, &t), quads(&held, &t));
    let agreement = |s: &DualEncoder| {
        let ti = stack(&hq.iter().map(|q| q.teacher_image.clone()).collect::<Vec<_>>()).unwrap();
        let tt = stack(&hq.iter().map(|q| q.teacher_text.clone()).collect::<Vec<_>>()).unwrap();
        let vi = s.encode_images(&held.images()).unwrap();
        let vt = s.encode_texts(&held.token_lists()).unwrap();
        0.5 * (mean_row_cosine(vi.view(), ti.view()) + mean_row_cosine(vt.view(), tt.view()))
    };
    let mut s = DualEncoder::new(DualEncoderConfig::for_world(&w, DIM, 6)).unwrap();
    let before = agreement(&s);
    let cfg = TrainConfig {
        kd_weights: KdWeights::PAPER,
        epochs: 10,
        ..TrainConfig::desk(Stage::Distill)
    };
    let log = distill(&mut s, &q, &train, &cfg).unwrap();
    Progress {
        before,
        after: agreement(&s),
        steps: log.steps.len(),
    }
}
