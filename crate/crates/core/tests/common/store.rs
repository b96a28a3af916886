//! Large-shard round trips and damaged-file fixtures for the feature store.

use std::path::Path;

use mmkd::feature_store::{read_shard, record_stride, write_shard, HEADER_LEN};
use mmkd::types::normalize;
use mmkd::{Error, Quadruplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_quads(n: usize, dim: usize, seed: u64) -> Vec<Quadruplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut unit = || {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                normalize(&v).unwrap().quantize_f32()
            };
            let (a, b) = (unit(), unit());
            Quadruplet::new(i as u64, (n + i) as u64, (i % 4) as u16 + 1, a, b).unwrap()
        })
        .collect()
}

/// Writes `n` records at `dim`, reads them back and compares every field,
/// floats by bit pattern.
pub fn round_trip(dir: &Path, n: usize, dim: usize) -> Result<(), String> {
    let path = dir.join(format!("rt_{dim}.mkd"));
    let qs = random_quads(n, dim, dim as u64);
    write_shard(&path, &qs, dim).map_err(|e| e.to_string())?;
    let want_len = HEADER_LEN + n as u64 * record_stride(dim);
    let len = std::fs::metadata(&path).map_err(|e| e.to_string())?.len();
    if len != want_len {
        return Err(format!("file is {len} bytes, expected {want_len}"));
    }
    let mut count = 0;
    for (i, got) in read_shard(&path).map_err(|e| e.to_string())?.enumerate() {
        let got = got.map_err(|e| e.to_string())?;
        let want = &qs[i];
        let same_ids = (got.image_id, got.text_id, got.teacher_id) == (want.image_id, want.text_id, want.teacher_id);
        let bits = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same_ids
            || !bits(got.teacher_image.values(), want.teacher_image.values())
            || !bits(got.teacher_text.values(), want.teacher_text.values())
        {
            return Err(format!("record {i} differs at dim {dim}"));
        }
        count += 1;
    }
    if count != n {
        return Err(format!("read {count} of {n} records"));
    }
    Ok(())
}

type Expect = fn(&Error) -> bool;

/// Damages a valid shard in several ways and checks the error kind for
/// each.
pub fn corruption(dir: &Path) -> Result<(), String> {
    let path = dir.join("damaged.mkd");
    let dim = 16;
    write_shard(&path, &random_quads(5, dim, 9), dim).map_err(|e| e.to_string())?;
    let good = std::fs::read(&path).map_err(|e| e.to_string())?;
    let stride = record_stride(dim) as usize;

    let mut cases: Vec<(&str, Vec<u8>, Expect)> = Vec::new();
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"MKD2");
    cases.push(("bad magic", magic, |e| matches!(e, Error::BadMagic(_))));
    let mut version = good.clone();
    version[4] = 9;
    cases.push(("bad version", version, |e| matches!(e, Error::UnsupportedVersion(9))));
    cases.push(("short header", good[..12].to_vec(), |e| matches!(e, Error::Truncated(_))));
    cases.push(("partial record", good[..good.len() - 7].to_vec(), |e| matches!(e, Error::Truncated(_))));
    cases.push((
        "missing record",
        good[..good.len() - stride].to_vec(),
        |e| matches!(e, Error::CountMismatch { header: 5, actual: 4 }),
    ));

    for (name, bytes, expected) in cases {
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        match read_shard(&path) {
            Err(e) if expected(&e) => {}
            Err(e) => return Err(format!("{name}: wrong error {e}")),
            Ok(_) => return Err(format!("{name}: accepted")),
        }
    }
    Ok(())
}
