//! End-to-end orchestration: configuration, stage functions, evaluation of
//! trained variants and run reports.

mod evaluate;
mod plots;
mod run;
mod stages;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{AlignTrainConfig, AlignmentConfig};
use crate::encoders::{TeacherConfig, TEACHER_DIMS};
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, RETRIEVAL_KS};
use crate::eval::probe::PROBE_FRACTIONS;
use crate::eval::stats::DEFAULT_REPLICATES;
use crate::survival::cohort::CohortConfig;
use crate::survival::model::SurvivalConfig;
use crate::synth::WorldConfig;
use crate::teacher_select::SelectConfig;
use crate::trainer::{Stage, TrainConfig};
use crate::TeacherId;

pub use evaluate::{
    eval_linear, eval_retrieval, eval_survival, eval_zeroshot, SurvivalEval, ZeroShotEval,
};
pub use plots::{line_chart_png, write_csv};
pub use run::{
    check_run, run_all, AblationTest, CheckResult, Layout, RunManifest, RunOutput, RunReport,
    StageTiming, TrainSummary, VariantReport, KD_IDENTITY_TOL, VARIANTS,
};
pub use stages::{
    align_teachers, build_teachers, load_alignment, load_student, new_student, read_corpus,
    read_quadruplets, save_alignment, save_student, select_teachers, synth_corpora,
    teacher_features, write_corpus, write_quadruplets, Corpora,
};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MMKD_SEED";

/// Wraps any error from `stage` so the failing step is named.
pub fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub id: TeacherId,
    pub native_dim: usize,
    /// 0 for a teacher with no cross-modal signal.
    pub signal: f64,
    pub nuisance: f64,
}

impl TeacherSpec {
    pub fn to_config(&self, seed: u64) -> TeacherConfig {
        TeacherConfig {
            id: self.id,
            seed,
            native_dim: self.native_dim,
            signal: self.signal,
            nuisance: self.nuisance,
        }
    }
}

/// Everything a run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub student_dim: usize,
    pub teachers: Vec<TeacherSpec>,
    pub alignment: AlignmentConfig,
    pub align_train: AlignTrainConfig,
    pub select: SelectConfig,
    pub pretrain: TrainConfig,
    pub distill: TrainConfig,
    pub probe: ProbeConfig,
    pub probe_fractions: Vec<f64>,
    pub retrieval_ks: Vec<usize>,
    pub bootstrap_replicates: usize,
    pub confidence: f64,
    pub cohort: CohortConfig,
    pub survival: SurvivalConfig,
    pub folds: usize,
    /// Also train the no-FD and no-ICL variants.
    pub ablations: bool,
}

fn desk_teachers() -> Vec<TeacherSpec> {
    let signal = |id, native_dim| TeacherSpec {
        id,
        native_dim,
        signal: 1.0,
        nuisance: 0.3,
    };
    vec![
        signal(1, 512),
        signal(2, 768),
        signal(3, 512),
        TeacherSpec {
            id: 4,
            native_dim: 768,
            signal: 0.0,
            nuisance: 1.0,
        },
    ]
}

impl PipelineConfig {
    /// Sized to finish in a few minutes on one CPU core.
    pub fn desk(seed: u64) -> Self {
        let mut c = Self {
            preset: "desk".into(),
            seed,
            world: WorldConfig {
                n_classes: 8,
                image_gain: 4.0,
                pixel_noise: 0.8,
                instance_noise: 0.1,
                attribute_scale: 0.7,
                ..WorldConfig::default()
            },
            train_pairs: 512,
            test_pairs: 400,
            student_dim: 512,
            teachers: desk_teachers(),
            alignment: AlignmentConfig::default(),
            align_train: AlignTrainConfig::default(),
            select: SelectConfig::default(),
            pretrain: TrainConfig {
                epochs: 10,
                ..TrainConfig::desk(Stage::Pretrain)
            },
            distill: TrainConfig::desk(Stage::Distill),
            probe: ProbeConfig::desk(0),
            probe_fractions: PROBE_FRACTIONS.to_vec(),
            retrieval_ks: RETRIEVAL_KS.to_vec(),
            bootstrap_replicates: DEFAULT_REPLICATES,
            confidence: 0.95,
            cohort: CohortConfig {
                report_signal: true,
                ..CohortConfig::default()
            },
            survival: SurvivalConfig::default(),
            folds: 5,
            ablations: true,
        };
        c.reseed(seed);
        c
    }

    /// Published optimizer settings (batch 512/384, lr 5e-5, 20 epochs,
    /// 2000 warmup steps). Kept for reference; the synthetic corpus is far
    /// too small for these to train a useful student.
    pub fn paper(seed: u64) -> Self {
        let mut c = Self {
            preset: "paper".into(),
            train_pairs: 20_000,
            test_pairs: 2_000,
            pretrain: TrainConfig::paper(Stage::Pretrain),
            distill: TrainConfig::paper(Stage::Distill),
            probe: ProbeConfig::paper(0),
            ..Self::desk(seed)
        };
        c.reseed(seed);
        c
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seed)),
            "paper" => Ok(Self::paper(seed)),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    /// Sets the run seed and derives every component seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.alignment.seed = seed.wrapping_add(1);
        self.align_train.seed = seed.wrapping_add(2);
        self.select.seed = seed.wrapping_add(3);
        self.pretrain.seed = seed.wrapping_add(4);
        self.distill.seed = seed.wrapping_add(5);
        self.probe.seed = seed.wrapping_add(6);
        self.cohort.seed = seed.wrapping_add(7);
        self.survival.seed = seed.wrapping_add(8);
    }

    /// Applies `MMKD_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not a u64")))?;
            self.reseed(seed);
        }
        Ok(())
    }

    pub(crate) fn corpus_seed(&self, split: u64) -> u64 {
        self.seed.wrapping_mul(10).wrapping_add(split)
    }

    pub(crate) fn student_seed(&self) -> u64 {
        self.seed.wrapping_add(9)
    }

    pub(crate) fn teacher_seed(&self, id: TeacherId) -> u64 {
        self.seed.wrapping_add(10 + u64::from(id))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.world.n_classes < 2 {
            return bad(format!("n_classes {} < 2", self.world.n_classes));
        }
        if self.train_pairs < self.world.n_classes || self.test_pairs < self.world.n_classes {
            return bad("every split needs at least one pair per class".into());
        }
        if self.student_dim == 0 {
            return bad("student_dim must be positive".into());
        }
        if self.teachers.is_empty() {
            return bad("no teachers configured".into());
        }
        let mut ids: Vec<_> = self.teachers.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.teachers.len() {
            return bad("duplicate teacher id".into());
        }
        for t in &self.teachers {
            if !(t.signal >= 0.0 && t.nuisance >= 0.0 && (t.signal + t.nuisance) > 0.0) {
                return bad(format!("teacher {} mixing weights", t.id));
            }
            if !TEACHER_DIMS.contains(&t.native_dim) {
                return Err(Error::UnsupportedTeacherDim(t.native_dim));
            }
        }
        if self.alignment.joint_dim != self.student_dim {
            return bad(format!(
                "alignment joint dim {} must equal student dim {}",
                self.alignment.joint_dim, self.student_dim
            ));
        }
        self.pretrain.validate()?;
        self.distill.validate()?;
        self.probe.validate()?;
        if self.probe_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("probe fractions must lie in (0, 1]".into());
        }
        if self.retrieval_ks.is_empty() || self.retrieval_ks.iter().any(|&k| k == 0 || k > self.test_pairs) {
            return bad("retrieval ks must lie in [1, test_pairs]".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence {}", self.confidence));
        }
        if self.folds < 2 || self.folds > self.cohort.n_subjects {
            return bad(format!("{} folds for {} subjects", self.folds, self.cohort.n_subjects));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form. Object keys are sorted, so the
    /// hash does not depend on key order in the source document.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(canonical_hash(&value))
    }
}

/// Hex SHA-256 of `value` serialized with sorted object keys.
pub fn canonical_hash(value: &serde_json::Value) -> String {
    let text = canonicalize(value).to_string();
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn canonicalize(value: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(m) => {
            let mut entries: Vec<_> = m.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k.clone(), canonicalize(v))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(canonicalize).collect()),
        v => v.clone(),
    }
}
