//! Checkpoint files: a JSON config followed by a flat list of named `f64`
//! tensors.
//!
//! Layout (little-endian):
//! `b"MKCK" | version u32 | json_len u64 | json | tensor_count u32 |
//!  { name_len u32 | name | len u64 | f64[len] }*`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{named_tensors, Params};

const MAGIC: &[u8; 4] = b"MKCK";
const VERSION: u32 = 1;

pub fn save<C: Serialize, P: Params>(path: &Path, config: &C, model: &P) -> Result<()> {
    let json = serde_json::to_vec(config)?;
    let tensors = named_tensors(model);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, data) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw checkpoint contents.
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Copies tensors into `model`, matching by name and length.
    pub fn load_into<P: Params>(&self, model: &mut P) -> Result<()> {
        let mut missing = None;
        let mut iter = self.tensors.iter();
        model.visit_mut("", &mut |name, slot| {
            if missing.is_some() {
                return;
            }
            match iter.next() {
                Some((n, data)) if n == name && data.len() == slot.len() => {
                    slot.copy_from_slice(data)
                }
                _ => missing = Some(name.to_string()),
            }
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("tensor {name} missing or misshapen")));
        }
        if iter.next().is_some() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let json_len = read_u64(&mut r)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let config = serde_json::from_slice(&json)?;
    let count = read_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let len = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((name, data));
    }
    Ok(Checkpoint { config, tensors })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
