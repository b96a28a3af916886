//! Binary quadruplet shards and JSONL corpus manifests.
//!
//! Shard layout, all little-endian:
//!
//! ```text
//! header  "MKD1" | version u32 | feature_dim u32 | record_count u64     (20 bytes)
//! record  image_id u64 | text_id u64 | teacher_id u16 | pad u16 | reserved u32
//!         | image f32[feature_dim] | text f32[feature_dim]              (24 + 8·dim bytes)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Embedding, Quadruplet, SampleId, TeacherId};

pub const MAGIC: &[u8; 4] = b"MKD1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 20;

pub fn record_stride(feature_dim: usize) -> u64 {
    24 + 8 * feature_dim as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub version: u32,
    pub feature_dim: u32,
    pub record_count: u64,
}

impl ShardHeader {
    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.feature_dim.to_le_bytes());
        b[12..20].copy_from_slice(&self.record_count.to_le_bytes());
        b
    }
}

/// A record as stored, before any unit-norm check. Bag shards for survival
/// cohorts use this form with an all-zero text slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub image_id: SampleId,
    pub text_id: SampleId,
    pub teacher_id: TeacherId,
    pub image: Vec<f32>,
    pub text: Vec<f32>,
}

impl RawRecord {
    pub fn into_quadruplet(self) -> Result<Quadruplet> {
        Quadruplet::new(
            self.image_id,
            self.text_id,
            self.teacher_id,
            Embedding::from_f32_unit(&self.image)?,
            Embedding::from_f32_unit(&self.text)?,
        )
    }
}

impl From<&Quadruplet> for RawRecord {
    fn from(q: &Quadruplet) -> Self {
        Self {
            image_id: q.image_id,
            text_id: q.text_id,
            teacher_id: q.teacher_id,
            image: q.teacher_image.to_f32(),
            text: q.teacher_text.to_f32(),
        }
    }
}

/// Streaming single-writer for one shard. The header count is patched in by
/// [`finish`](Self::finish).
pub struct ShardWriter {
    out: BufWriter<File>,
    feature_dim: usize,
    count: u64,
    buf: Vec<u8>,
}

impl ShardWriter {
    pub fn create(path: &Path, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 || feature_dim > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!("feature dim {feature_dim}")));
        }
        let mut out = BufWriter::new(File::create(path)?);
        let header = ShardHeader {
            version: VERSION,
            feature_dim: feature_dim as u32,
            record_count: 0,
        };
        out.write_all(&header.encode())?;
        Ok(Self {
            out,
            feature_dim,
            count: 0,
            buf: Vec::with_capacity(record_stride(feature_dim) as usize),
        })
    }

    pub fn push_raw(&mut self, r: &RawRecord) -> Result<()> {
        for len in [r.image.len(), r.text.len()] {
            if len != self.feature_dim {
                return Err(Error::DimMismatch {
                    expected: self.feature_dim,
                    actual: len,
                });
            }
        }
        if r.image.iter().chain(&r.text).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        self.buf.clear();
        self.buf.extend_from_slice(&r.image_id.to_le_bytes());
        self.buf.extend_from_slice(&r.text_id.to_le_bytes());
        self.buf.extend_from_slice(&r.teacher_id.to_le_bytes());
        self.buf.extend_from_slice(&[0u8; 6]);
        for x in r.image.iter().chain(&r.text) {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self.out.write_all(&self.buf)?;
        self.count += 1;
        Ok(())
    }

    pub fn push(&mut self, q: &Quadruplet) -> Result<()> {
        self.push_raw(&RawRecord::from(q))
    }

    pub fn finish(mut self) -> Result<ShardHeader> {
        let header = ShardHeader {
            version: VERSION,
            feature_dim: self.feature_dim as u32,
            record_count: self.count,
        };
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        file.write_all(&header.encode())?;
        file.sync_all()?;
        Ok(header)
    }
}

pub fn write_shard(path: &Path, quadruplets: &[Quadruplet], feature_dim: usize) -> Result<ShardHeader> {
    let mut w = ShardWriter::create(path, feature_dim)?;
    for q in quadruplets {
        w.push(q)?;
    }
    w.finish()
}

/// Streaming reader; holds one record in memory at a time.
pub struct ShardReader {
    input: BufReader<File>,
    header: ShardHeader,
    remaining: u64,
    buf: Vec<u8>,
}

impl ShardReader {
    /// Opens a shard and validates magic, version and that the file length
    /// agrees with the header count.
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut input = BufReader::new(file);
        let mut head = [0u8; HEADER_LEN as usize];
        let got = read_up_to(&mut input, &mut head)?;
        if got >= 4 && &head[..4] != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        if got < HEADER_LEN as usize {
            return Err(Error::Truncated(format!("header is {got} of {HEADER_LEN} bytes")));
        }
        let header = ShardHeader {
            version: u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")),
            feature_dim: u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")),
            record_count: u64::from_le_bytes(head[12..20].try_into().expect("8 bytes")),
        };
        if header.version != VERSION {
            return Err(Error::UnsupportedVersion(header.version));
        }
        if header.feature_dim == 0 {
            return Err(Error::InvalidConfig("shard feature dim is 0".into()));
        }
        let stride = record_stride(header.feature_dim as usize);
        let body = len - HEADER_LEN;
        if !body.is_multiple_of(stride) {
            return Err(Error::Truncated(format!(
                "{} trailing bytes after {} whole records",
                body % stride,
                body / stride
            )));
        }
        if body / stride != header.record_count {
            return Err(Error::CountMismatch {
                header: header.record_count,
                actual: body / stride,
            });
        }
        Ok(Self {
            input,
            header,
            remaining: header.record_count,
            buf: vec![0u8; stride as usize],
        })
    }

    pub fn header(&self) -> ShardHeader {
        self.header
    }

    fn read_record(&mut self) -> Result<RawRecord> {
        let got = read_up_to(&mut self.input, &mut self.buf)?;
        if got < self.buf.len() {
            return Err(Error::Truncated(format!("record cut at {got} of {} bytes", self.buf.len())));
        }
        let b = &self.buf;
        let d = self.header.feature_dim as usize;
        let f = |i: usize| f32::from_le_bytes(b[24 + 4 * i..28 + 4 * i].try_into().expect("4 bytes"));
        Ok(RawRecord {
            image_id: u64::from_le_bytes(b[0..8].try_into().expect("8 bytes")),
            text_id: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
            teacher_id: u16::from_le_bytes(b[16..18].try_into().expect("2 bytes")),
            image: (0..d).map(f).collect(),
            text: (d..2 * d).map(f).collect(),
        })
    }

    /// Iterates raw records without unit-norm validation.
    pub fn raw(self) -> RawRecords {
        RawRecords(self)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

impl Iterator for ShardReader {
    type Item = Result<Quadruplet>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.read_record().and_then(RawRecord::into_quadruplet))
    }
}

pub struct RawRecords(ShardReader);

impl Iterator for RawRecords {
    type Item = Result<RawRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.0.remaining == 0 {
            return None;
        }
        self.0.remaining -= 1;
        Some(self.0.read_record())
    }
}

pub fn read_shard(path: &Path) -> Result<ShardReader> {
    ShardReader::open(path)
}

/// Reads every shard in `paths` in order into memory.
pub fn read_all(paths: &[PathBuf]) -> Result<Vec<Quadruplet>> {
    let mut out = Vec::new();
    for p in paths {
        for q in read_shard(p)? {
            out.push(q?);
        }
    }
    Ok(out)
}

/// `*.mkd` files in `dir`, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.retain(|p| p.extension().is_some_and(|e| e == "mkd"));
    v.sort();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: SampleId,
    pub text_id: SampleId,
    pub modality: String,
    pub image_path: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Pairs per modality.
    pub tally: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut tally = BTreeMap::new();
        for e in &entries {
            if !seen.insert((e.image_id, e.text_id)) {
                return Err(Error::DuplicatePair {
                    image_id: e.image_id,
                    text_id: e.text_id,
                });
            }
            *tally.entry(e.modality.clone()).or_insert(0) += 1;
        }
        Ok(Self { entries, tally })
    }

    pub fn total(&self) -> usize {
        self.tally.values().sum()
    }
}

/// Parses line-delimited JSON. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_manifest(reader: impl BufRead) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| Error::Manifest {
            line: i + 1,
            msg: err.to_string(),
        })?;
        if !seen.insert((e.image_id, e.text_id)) {
            return Err(Error::Manifest {
                line: i + 1,
                msg: format!("duplicate pair (image {}, text {})", e.image_id, e.text_id),
            });
        }
        entries.push(e);
    }
    Manifest::new(entries)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    parse_manifest(BufReader::new(File::open(path)?))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
