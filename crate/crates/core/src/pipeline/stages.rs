//! Individual pipeline stages and their on-disk artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use super::PipelineConfig;
use crate::alignment::{train_alignment, AlignmentLog, AlignmentModel, TeacherFeatures};
use crate::checkpoint;
use crate::encoders::{DualEncoder, DualEncoderConfig, SyntheticTeacher, Teacher};
use crate::error::{Error, Result};
use crate::feature_store::{list_shards, read_all, read_manifest, write_manifest, write_shard, ManifestEntry};
use crate::synth::{generate_corpus, Corpus, CorpusPair, World};
use crate::teacher_select::{build_quadruplets, Selection};
use crate::{Quadruplet, TeacherId};

/// The synthetic world plus its train and held-out splits.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub world: World,
    pub train: Corpus,
    pub test: Corpus,
}

pub fn synth_corpora(cfg: &PipelineConfig) -> Result<Corpora> {
    let world = World::new(cfg.world.clone())?;
    let train = generate_corpus(&world, cfg.train_pairs, cfg.corpus_seed(1), 0)?;
    let test = generate_corpus(&world, cfg.test_pairs, cfg.corpus_seed(2), cfg.train_pairs as u64)?;
    Ok(Corpora { world, train, test })
}

fn to_png(world: &World, pixels: &[f64]) -> Result<DynamicImage> {
    let c = &world.config;
    let bytes: Vec<u8> = pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let (w, h) = (c.width as u32, c.height as u32);
    let bad = || Error::InvalidConfig(format!("{} pixels for {}x{}x{}", pixels.len(), c.height, c.width, c.channels));
    match c.channels {
        1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).ok_or_else(bad)?)),
        3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).ok_or_else(bad)?)),
        n => Err(Error::InvalidConfig(format!("cannot store {n}-channel images as PNG"))),
    }
}

fn from_png(world: &World, path: &Path) -> Result<Vec<f64>> {
    let img = image::open(path)?;
    let c = &world.config;
    if (img.width() as usize, img.height() as usize) != (c.width, c.height) {
        return Err(Error::InvalidConfig(format!(
            "{} is {}x{}, expected {}x{}",
            path.display(),
            img.width(),
            img.height(),
            c.width,
            c.height
        )));
    }
    let bytes = match c.channels {
        1 => img.to_luma8().into_raw(),
        _ => img.to_rgb8().into_raw(),
    };
    Ok(bytes.into_iter().map(|b| f64::from(b) / 255.0).collect())
}

/// Writes `images/{image_id}.png` under `dir` and a `{split}.jsonl` manifest.
/// Images are 8-bit, so a corpus read back with [`read_corpus`] is identical.
pub fn write_corpus(dir: &Path, world: &World, corpus: &Corpus, split: &str) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for p in &corpus.pairs {
        let rel = format!("images/{}.png", p.image_id);
        to_png(world, &p.image)?.save(dir.join(&rel))?;
        entries.push(ManifestEntry {
            image_id: p.image_id,
            text_id: p.text_id,
            modality: p.modality.clone(),
            image_path: rel,
            text: p.text.clone(),
        });
    }
    let manifest = dir.join(format!("{split}.jsonl"));
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads a manifest written by [`write_corpus`]. Class labels are recovered
/// from the caption text.
pub fn read_corpus(manifest: &Path, world: &World) -> Result<Corpus> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let m = read_manifest(manifest)?;
    let pairs = m
        .entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let class = world.class_of_text(&e.text).ok_or_else(|| Error::Manifest {
                line: i + 1,
                msg: format!("no class name in caption {:?}", e.text),
            })?;
            Ok(CorpusPair {
                image_id: e.image_id,
                text_id: e.text_id,
                class,
                modality: e.modality,
                image: from_png(world, &root.join(&e.image_path))?,
                tokens: world.vocab.tokenize(&e.text),
                text: e.text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { pairs })
}

pub fn new_student(cfg: &PipelineConfig, world: &World) -> Result<DualEncoder> {
    DualEncoder::new(DualEncoderConfig::for_world(world, cfg.student_dim, cfg.student_seed()))
}

pub fn save_student(path: &Path, student: &DualEncoder) -> Result<()> {
    checkpoint::save(path, &student.config(), student)
}

pub fn load_student(path: &Path) -> Result<DualEncoder> {
    let ck = checkpoint::load(path)?;
    let mut s = DualEncoder::new(ck.config_as()?)?;
    ck.load_into(&mut s)?;
    Ok(s)
}

pub fn build_teachers(cfg: &PipelineConfig, world: &World) -> Result<Vec<SyntheticTeacher>> {
    cfg.teachers
        .iter()
        .map(|t| SyntheticTeacher::new(world, t.to_config(cfg.teacher_seed(t.id))))
        .collect()
}

/// Native-dimension teacher embeddings of every corpus pair.
pub fn teacher_features(
    teachers: &[SyntheticTeacher],
    corpus: &Corpus,
) -> Result<BTreeMap<TeacherId, TeacherFeatures>> {
    teachers
        .iter()
        .map(|t| {
            let im = corpus.pairs.iter().map(|p| t.encode_image(&p.image)).collect::<Result<Vec<_>>>()?;
            let tx = corpus.pairs.iter().map(|p| t.encode_text(&p.tokens)).collect::<Result<Vec<_>>>()?;
            Ok((t.id(), TeacherFeatures::new(&im, &tx)?))
        })
        .collect()
}

pub fn align_teachers(
    cfg: &PipelineConfig,
    teachers: &[SyntheticTeacher],
    corpus: &Corpus,
) -> Result<(AlignmentModel, AlignmentLog)> {
    let dims: Vec<_> = teachers.iter().map(|t| (t.id(), t.native_dim())).collect();
    let mut model = AlignmentModel::new(cfg.alignment.clone(), &dims)?;
    let log = train_alignment(&mut model, &teacher_features(teachers, corpus)?, &cfg.align_train)?;
    Ok((model, log))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AlignmentCheckpoint {
    config: crate::alignment::AlignmentConfig,
    teachers: Vec<(TeacherId, usize)>,
}

pub fn save_alignment(path: &Path, model: &AlignmentModel, teachers: &[SyntheticTeacher]) -> Result<()> {
    let meta = AlignmentCheckpoint {
        config: model.config.clone(),
        teachers: teachers.iter().map(|t| (t.id(), t.native_dim())).collect(),
    };
    checkpoint::save(path, &meta, model)
}

pub fn load_alignment(path: &Path) -> Result<AlignmentModel> {
    let ck = checkpoint::load(path)?;
    let meta: AlignmentCheckpoint = ck.config_as()?;
    let mut model = AlignmentModel::new(meta.config, &meta.teachers)?;
    ck.load_into(&mut model)?;
    Ok(model)
}

pub fn select_teachers(
    cfg: &PipelineConfig,
    teachers: &[SyntheticTeacher],
    alignment: &AlignmentModel,
    corpus: &Corpus,
) -> Result<Selection> {
    let refs: Vec<&dyn Teacher> = teachers.iter().map(|t| t as &dyn Teacher).collect();
    build_quadruplets(&refs, alignment, corpus, &cfg.select)
}

/// One shard per teacher, named so that sorted order is teacher-id order.
pub fn write_quadruplets(dir: &Path, quadruplets: &[Quadruplet]) -> Result<Vec<PathBuf>> {
    let first = quadruplets.first().ok_or(Error::Empty("quadruplet list"))?;
    let dim = first.feature_dim();
    let mut by_teacher: BTreeMap<TeacherId, Vec<Quadruplet>> = BTreeMap::new();
    for q in quadruplets {
        by_teacher.entry(q.teacher_id).or_default().push(q.clone());
    }
    std::fs::create_dir_all(dir)?;
    by_teacher
        .into_iter()
        .map(|(id, qs)| {
            let path = dir.join(format!("teacher_{id:05}.mkd"));
            write_shard(&path, &qs, dim)?;
            Ok(path)
        })
        .collect()
}

/// Every shard in `dir`, in name order.
pub fn read_quadruplets(dir: &Path) -> Result<Vec<Quadruplet>> {
    let shards = list_shards(dir)?;
    if shards.is_empty() {
        return Err(Error::Empty("shard directory"));
    }
    read_all(&shards)
}
