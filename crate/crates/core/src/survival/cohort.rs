//! Synthetic survival cohorts, the cohort file format and cross-validation.
//!
//! A cohort file is JSON lines, one subject per line:
//! `{"subject_id", "duration", "event", "bag_path", "report_text"?}`. Each
//! `bag_path` names a feature shard whose records hold one instance each in
//! the image slot; the text slot is zero.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{c_index, c_index_td, ibs, inbll, logrank_test, median_stratify, LogRank};
use super::{durations_events, equal_probability_cuts, km_estimate, train_survival, SurvivalConfig, SurvivalRecord};
use crate::error::{Error, Result};
use crate::feature_store::{RawRecord, ShardReader, ShardWriter};
use crate::synth::{standard_normal, unit_rows};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub instance_dim: usize,
    pub min_bag: usize,
    pub max_bag: usize,
    /// Share of instances in each bag that carry the prognostic signal.
    pub signal_fraction: f64,
    /// When set, an independent risk factor is visible only in the report.
    pub report_signal: bool,
    /// Censoring times are uniform on `[0, censor_max]`.
    pub censor_max: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            instance_dim: 16,
            min_bag: 4,
            max_bag: 12,
            signal_fraction: 0.5,
            report_signal: false,
            censor_max: 60.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSubject {
    pub subject_id: String,
    pub duration: f64,
    pub event: bool,
    /// Planted short-survival group.
    pub high_risk: bool,
    pub bag: Array2<f64>,
    pub report_text: String,
}

const REPORT_FILLER: [&str; 4] = ["reviewed", "noted", "confirmed", "described"];

/// Report grade 1 to 5 from a standard-normal factor, cut at its quintiles.
fn grade(x: f64) -> usize {
    const CUTS: [f64; 4] = [-0.8416, -0.2533, 0.2533, 0.8416];
    1 + CUTS.iter().filter(|&&c| x > c).count()
}

/// Two planted groups with a continuous severity inside each. Log survival
/// time falls linearly in the risk score plus small noise. The image part of
/// the score is written into a subset of each bag's instances along a fixed
/// direction, next to a marker direction that lets attention find them.
pub fn planted_cohort(cfg: &CohortConfig) -> Result<Vec<CohortSubject>> {
    if cfg.n_subjects < 2 || cfg.instance_dim < 2 || cfg.min_bag == 0 || cfg.max_bag < cfg.min_bag {
        return Err(Error::InvalidConfig(format!("cohort config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = unit_rows(2, cfg.instance_dim, 1.0, &mut rng);
    let (signal, marker) = (dirs.row(0).to_owned(), dirs.row(1).to_owned());
    let mut out = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let high_risk = i % 2 == 0;
        let image_risk = 1.5 * f64::from(u8::from(high_risk)) + 0.5 * standard_normal(&mut rng);
        let report_factor = standard_normal(&mut rng);
        let report_risk = if cfg.report_signal { report_factor } else { 0.0 };
        let time = 10.0 * (-(image_risk + report_risk) + 0.25 * standard_normal(&mut rng)).exp();
        let censor = rng.random_range(0.0..cfg.censor_max);
        let n_inst = rng.random_range(cfg.min_bag..=cfg.max_bag);
        let n_signal = ((cfg.signal_fraction * n_inst as f64).round() as usize).clamp(1, n_inst);
        let mut flags: Vec<bool> = (0..n_inst).map(|k| k < n_signal).collect();
        flags.shuffle(&mut rng);
        let mut bag = Array2::zeros((n_inst, cfg.instance_dim));
        for (k, &carries) in flags.iter().enumerate() {
            let mut row: Array1<f64> = (0..cfg.instance_dim).map(|_| 0.5 * standard_normal(&mut rng)).collect();
            if carries {
                row.scaled_add(2.0, &marker);
                row.scaled_add(image_risk, &signal);
            }
            // Shards hold f32, so keep bags exactly representable.
            bag.row_mut(k).assign(&row.mapv(|x| f64::from(x as f32)));
        }
        let shown = if cfg.report_signal {
            report_factor
        } else {
            standard_normal(&mut rng)
        };
        let filler = REPORT_FILLER[rng.random_range(0..REPORT_FILLER.len())];
        out.push(CohortSubject {
            subject_id: format!("subject-{i:04}"),
            duration: f64::from(time.min(censor) as f32),
            event: time <= censor,
            high_risk,
            bag,
            report_text: format!("tumor grade {} {filler}", grade(shown)),
        });
    }
    Ok(out)
}

/// Bag-of-words report features over a fixed, sorted vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFeaturizer {
    pub vocab: BTreeMap<String, usize>,
}

impl ReportFeaturizer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        words.sort();
        words.dedup();
        Self {
            vocab: words.into_iter().enumerate().map(|(i, w)| (w, i)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vocab.len()
    }

    /// Word counts; words outside the vocabulary are ignored.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for w in text.split_whitespace() {
            if let Some(&i) = self.vocab.get(&w.to_lowercase()) {
                v[i] += 1.0;
            }
        }
        v
    }
}

pub fn to_records(subjects: &[CohortSubject], featurizer: Option<&ReportFeaturizer>) -> Vec<SurvivalRecord> {
    subjects
        .iter()
        .map(|s| SurvivalRecord {
            subject_id: s.subject_id.clone(),
            duration: s.duration,
            event: s.event,
            bag: s.bag.clone(),
            report: featurizer.map(|f| f.embed(&s.report_text)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortEntry {
    pub subject_id: String,
    pub duration: f64,
    pub event: bool,
    pub bag_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_text: Option<String>,
}

pub fn write_bag(path: &Path, bag: &Array2<f64>) -> Result<()> {
    let dim = bag.ncols();
    let mut w = ShardWriter::create(path, dim)?;
    for (k, row) in bag.rows().into_iter().enumerate() {
        w.push_raw(&RawRecord {
            image_id: k as u64,
            text_id: k as u64,
            teacher_id: 0,
            image: row.iter().map(|&x| x as f32).collect(),
            text: vec![0.0; dim],
        })?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_bag(path: &Path) -> Result<Array2<f64>> {
    let reader = ShardReader::open(path)?;
    let dim = reader.header().feature_dim as usize;
    let mut values = Vec::new();
    let mut rows = 0;
    for r in reader.raw() {
        values.extend(r?.image.iter().map(|&x| f64::from(x)));
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("instance bag"));
    }
    Ok(Array2::from_shape_vec((rows, dim), values).expect("rows × dim values"))
}

/// Writes `cohort.jsonl` plus one bag shard per subject under `dir/bags`.
/// Bag paths in the file are relative to `dir`.
pub fn write_cohort(dir: &Path, subjects: &[CohortSubject]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("bags"))?;
    let path = dir.join("cohort.jsonl");
    let mut out = std::io::BufWriter::new(fs::File::create(&path)?);
    for s in subjects {
        let rel = PathBuf::from("bags").join(format!("{}.mkd", s.subject_id));
        write_bag(&dir.join(&rel), &s.bag)?;
        let entry = CohortEntry {
            subject_id: s.subject_id.clone(),
            duration: s.duration,
            event: s.event,
            bag_path: rel,
            report_text: Some(s.report_text.clone()),
        };
        writeln!(out, "{}", serde_json::to_string(&entry)?)?;
    }
    out.flush()?;
    Ok(path)
}

pub fn parse_cohort(reader: impl BufRead) -> Result<Vec<CohortEntry>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: CohortEntry = serde_json::from_str(&line).map_err(|err| Error::Manifest {
            line: i + 1,
            msg: err.to_string(),
        })?;
        if !e.duration.is_finite() || e.duration < 0.0 {
            return Err(Error::Manifest {
                line: i + 1,
                msg: format!("bad duration {}", e.duration),
            });
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Empty("cohort file"));
    }
    Ok(out)
}

/// Reads a cohort file and its bags. Relative bag paths resolve against the
/// file's directory.
pub fn read_cohort(path: &Path) -> Result<Vec<CohortSubject>> {
    let entries = parse_cohort(BufReader::new(fs::File::open(path)?))?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let bag = read_bag(&base.join(&e.bag_path))?;
            Ok(CohortSubject {
                subject_id: e.subject_id,
                duration: e.duration,
                event: e.event,
                high_risk: false,
                bag,
                report_text: e.report_text.unwrap_or_default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub c_index: f64,
    pub c_index_td: f64,
    pub ibs: f64,
    pub inbll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    /// Log-rank test between median-split out-of-fold risk groups.
    pub logrank: Option<LogRank>,
    /// Out-of-fold risk per input record.
    pub oof_risk: Vec<f64>,
}

/// Fold assignment: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// K-fold cross-validation. Each fold fits its own interval grid on the
/// training subjects' Kaplan-Meier curve.
pub fn cross_validate(records: &[SurvivalRecord], cfg: &SurvivalConfig, folds: usize) -> Result<CvReport> {
    if folds < 2 || folds > records.len() {
        return Err(Error::InvalidConfig(format!("{folds} folds for {} subjects", records.len())));
    }
    let assign = fold_assignment(records.len(), folds, cfg.seed);
    let mut out = Vec::with_capacity(folds);
    let mut oof_risk = vec![0.0; records.len()];
    for f in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..records.len()).partition(|&i| assign[i] == f);
        let train_recs: Vec<SurvivalRecord> = train.iter().map(|&i| records[i].clone()).collect();
        let test_recs: Vec<SurvivalRecord> = test.iter().map(|&i| records[i].clone()).collect();
        let (d, e) = durations_events(&train_recs);
        let grid = equal_probability_cuts(&km_estimate(&d, &e)?, cfg.intervals)?;
        let fold_cfg = SurvivalConfig {
            seed: cfg.seed.wrapping_add(f as u64),
            ..*cfg
        };
        let model = train_survival(&train_recs, &grid, &fold_cfg)?;
        let p = model.predict_all(&test_recs)?;
        let (td, te) = durations_events(&test_recs);
        for (k, &i) in test.iter().enumerate() {
            oof_risk[i] = p.risk[k];
        }
        out.push(FoldMetrics {
            c_index: c_index(&p.risk, &td, &te)?,
            c_index_td: c_index_td(p.curves.view(), &td, &te, &grid)?,
            ibs: ibs(p.curves.view(), &td, &te, grid.horizon(), &grid)?,
            inbll: inbll(p.hazards.view(), grid.outcome_matrix(&td, &te).view())?,
        });
    }
    let k = out.len() as f64;
    let mean = FoldMetrics {
        c_index: out.iter().map(|m| m.c_index).sum::<f64>() / k,
        c_index_td: out.iter().map(|m| m.c_index_td).sum::<f64>() / k,
        ibs: out.iter().map(|m| m.ibs).sum::<f64>() / k,
        inbll: out.iter().map(|m| m.inbll).sum::<f64>() / k,
    };
    let logrank = match median_stratify(&oof_risk) {
        Ok((high, low)) => {
            let pick = |idx: &[usize]| -> Vec<(f64, bool)> {
                idx.iter().map(|&i| (records[i].duration, records[i].event)).collect()
            };
            Some(logrank_test(&pick(&high), &pick(&low))?)
        }
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CvReport {
        folds: out,
        mean,
        logrank,
        oof_risk,
    })
}
