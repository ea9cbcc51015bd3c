//! Named-tensor container: one JSON header line, then little-endian `f32`
//! payloads in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamVisitor};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub type TensorMap = BTreeMap<String, ArrayD<f32>>;

pub fn save_tensors(path: &Path, meta: serde_json::Value, tensors: &TensorMap) -> Result<()> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for t in tensors.values() {
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<(serde_json::Value, TensorMap)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header line", path.display())))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let mut payload = &bytes[nl + 1..];
    let mut tensors = TensorMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(Error::Checkpoint(format!(
                "{}: payload ends inside tensor {}",
                path.display(),
                entry.name
            )));
        }
        let values: Vec<f32> = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        payload = &payload[4 * n..];
        let t = ArrayD::from_shape_vec(entry.shape, values).expect("length checked");
        tensors.insert(entry.name, t);
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            payload.len()
        )));
    }
    Ok((header.meta, tensors))
}

/// Copies every parameter value and buffer into a map.
#[derive(Default)]
pub struct Collect {
    pub tensors: TensorMap,
}

impl ParamVisitor for Collect {
    fn param(&mut self, name: &str, p: &mut Param) {
        self.tensors.insert(name.to_string(), p.value.clone());
    }

    fn buffer(&mut self, name: &str, b: &mut ArrayD<f32>) {
        self.tensors.insert(name.to_string(), b.clone());
    }
}

/// Overwrites parameters and buffers from a map, recording any name that is
/// missing or has the wrong shape.
pub struct Assign<'a> {
    pub tensors: &'a TensorMap,
    pub problems: Vec<String>,
}

impl<'a> Assign<'a> {
    pub fn new(tensors: &'a TensorMap) -> Self {
        Self {
            tensors,
            problems: Vec::new(),
        }
    }

    fn set(&mut self, name: &str, dst: &mut ArrayD<f32>) {
        match self.tensors.get(name) {
            Some(t) if t.shape() == dst.shape() => dst.assign(t),
            Some(t) => self.problems.push(format!(
                "{name}: shape {:?} != {:?}",
                t.shape(),
                dst.shape()
            )),
            None => self.problems.push(format!("{name}: missing")),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(self.problems.join("; ")))
        }
    }
}

impl ParamVisitor for Assign<'_> {
    fn param(&mut self, name: &str, p: &mut Param) {
        self.set(name, &mut p.value);
    }

    fn buffer(&mut self, name: &str, b: &mut ArrayD<f32>) {
        self.set(name, b);
    }
}
