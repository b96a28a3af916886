//! Downstream evaluation of a trained student, with bootstrap intervals.

use std::collections::BTreeMap;

use ndarray::Axis;

use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::eval::metrics::{accuracy, auc_ovr_macro, retrieval_ranks};
use crate::eval::stats::{bootstrap, Bootstrap};
use crate::eval::{linear_probe, zero_shot_classify, EvalReport, Interval, ProbeConfig};
use crate::survival::cohort::{cross_validate, to_records, CohortSubject, CvReport, ReportFeaturizer};
use crate::survival::metrics::c_index;
use crate::survival::model::{Fusion, SurvivalConfig};
use crate::synth::{Corpus, World};

/// Zero-shot report plus the raw AUC replicates, kept for significance
/// tests between variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotEval {
    pub report: EvalReport,
    pub auc: Bootstrap,
}

pub fn eval_zeroshot(
    student: &DualEncoder,
    world: &World,
    test: &Corpus,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<ZeroShotEval> {
    let z = zero_shot_classify(student, &world.vocab, &test.images(), &world.prompt_set())?;
    let labels = test.labels();
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let auc = bootstrap(
        labels.len(),
        |idx| auc_ovr_macro(z.scores.select(Axis(0), idx).view(), &pick(idx)),
        replicates,
        seed,
    )?;
    let acc = bootstrap(
        labels.len(),
        |idx| {
            let pred: Vec<usize> = idx.iter().map(|&i| z.predictions[i]).collect();
            accuracy(&pred, &pick(idx))
        },
        replicates,
        seed,
    )?;
    let mut report = EvalReport::new("zero_shot");
    report.insert("auc", auc.interval(level)?);
    report.insert("accuracy", acc.interval(level)?);
    Ok(ZeroShotEval { report, auc })
}

/// Recall@K in both directions over the paired test set. The bootstrap
/// resamples queries; the gallery stays the full test set.
pub fn eval_retrieval(
    student: &DualEncoder,
    test: &Corpus,
    ks: &[usize],
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<EvalReport> {
    let images = student.encode_images(&test.images())?;
    let texts = student.encode_texts(&test.token_lists())?;
    let truth: Vec<usize> = (0..test.len()).collect();
    let mut report = EvalReport::new("retrieval");
    for (dir, q, g) in [("image_to_text", &images, &texts), ("text_to_image", &texts, &images)] {
        let ranks = retrieval_ranks(q.view(), g.view(), &truth)?;
        for &k in ks {
            if k == 0 || k > test.len() {
                return Err(Error::InvalidConfig(format!("k = {k} for gallery of {}", test.len())));
            }
            let b = bootstrap(
                ranks.len(),
                |idx| Ok(idx.iter().filter(|&&i| ranks[i] < k).count() as f64 / idx.len() as f64),
                replicates,
                seed,
            )?;
            report.insert(format!("{dir}@{k}"), b.interval(level)?);
        }
    }
    Ok(report)
}

/// Linear probe on frozen image embeddings at each training fraction.
/// Keys are `auc@{fraction}`.
#[allow(clippy::too_many_arguments)]
pub fn eval_linear(
    student: &DualEncoder,
    train: &Corpus,
    test: &Corpus,
    fractions: &[f64],
    cfg: &ProbeConfig,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<EvalReport> {
    let train_x = student.encode_images(&train.images())?;
    let test_x = student.encode_images(&test.images())?;
    let (train_y, test_y) = (train.labels(), test.labels());
    let mut report = EvalReport::new("linear_probe");
    for &f in fractions {
        let out = linear_probe(train_x.view(), &train_y, test_x.view(), &test_y, f, cfg)?;
        let probs = out.probe.probabilities(test_x.view());
        let b = bootstrap(
            test_y.len(),
            |idx| {
                let y: Vec<usize> = idx.iter().map(|&i| test_y[i]).collect();
                auc_ovr_macro(probs.select(Axis(0), idx).view(), &y)
            },
            replicates,
            seed,
        )?;
        report.insert(format!("auc@{f}"), b.interval(level)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalEval {
    pub report: EvalReport,
    /// Keyed by fusion name.
    pub cv: BTreeMap<String, CvReport>,
}

fn point(v: f64) -> Interval {
    Interval {
        point: v,
        ci_low: v,
        ci_high: v,
        replicates: 0,
    }
}

/// Cross-validated survival models for every fusion mode. Fold means carry
/// no interval; the pooled out-of-fold C-index is bootstrapped over
/// subjects.
pub fn eval_survival(
    subjects: &[CohortSubject],
    cfg: &SurvivalConfig,
    folds: usize,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<SurvivalEval> {
    let featurizer = ReportFeaturizer::fit(subjects.iter().map(|s| s.report_text.as_str()));
    let records = to_records(subjects, Some(&featurizer));
    let durations: Vec<f64> = records.iter().map(|r| r.duration).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event).collect();
    let mut report = EvalReport::new("survival");
    let mut cv = BTreeMap::new();
    for fusion in Fusion::ALL {
        let name = fusion.name();
        let r = cross_validate(&records, &SurvivalConfig { fusion, ..*cfg }, folds)?;
        report.insert(format!("{name}/c_index"), point(r.mean.c_index));
        report.insert(format!("{name}/c_index_td"), point(r.mean.c_index_td));
        report.insert(format!("{name}/ibs"), point(r.mean.ibs));
        report.insert(format!("{name}/inbll"), point(r.mean.inbll));
        if let Some(lr) = &r.logrank {
            report.insert(format!("{name}/logrank_p"), point(lr.p_value));
        }
        let pooled = bootstrap(
            records.len(),
            |idx| {
                let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
                let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
                c_index(&pick(&r.oof_risk), &pick(&durations), &e)
            },
            replicates,
            seed,
        )?;
        report.insert(format!("{name}/c_index_oof"), pooled.interval(level)?);
        cv.insert(name.to_string(), r);
    }
    Ok(SurvivalEval { report, cv })
}
