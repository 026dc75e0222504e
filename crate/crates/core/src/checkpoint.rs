//! Binary checkpoint: `REMP1`, a little-endian `u32` tensor count, then per
//! tensor a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32`
//! dims and the data as little-endian `f32`.
//!
//! Parameters are held as `f64` in memory and narrowed to `f32` on save, so
//! `save → load → save` is byte-identical but `load(save(p))` equals `p`
//! only up to `f32` rounding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dense, Embedder, GlobalHead, ModelParams, ProjectionLayer};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 5] = b"REMP1";

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(16 + 4 * params.n_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic, expected REMP1".into()));
    }
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if tensors.insert(name.clone(), RawTensor { shape, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    assemble(tensors)
}

fn take_matrix(tensors: &mut BTreeMap<String, RawTensor>, name: &str) -> Result<Option<Matrix>> {
    match tensors.remove(name) {
        None => Ok(None),
        Some(t) if t.shape.len() == 2 => Ok(Some(Matrix::from_vec(t.shape[0], t.shape[1], t.data)?)),
        Some(t) => Err(Error::Checkpoint(format!("`{name}` has rank {}, expected 2", t.shape.len()))),
    }
}

fn take_vector(tensors: &mut BTreeMap<String, RawTensor>, name: &str, len: usize) -> Result<Vec<f64>> {
    match tensors.remove(name) {
        Some(t) if t.shape == [len] => Ok(t.data),
        Some(t) => Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected [{len}]", t.shape))),
        None => Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
    }
}

fn assemble(mut tensors: BTreeMap<String, RawTensor>) -> Result<ModelParams> {
    let mut layers = Vec::new();
    while let Some(weight) = take_matrix(&mut tensors, &format!("embedder.{}.weight", layers.len()))? {
        let bias = take_vector(&mut tensors, &format!("embedder.{}.bias", layers.len()), weight.rows())?;
        layers.push(Dense { weight, bias });
    }
    let head = take_matrix(&mut tensors, "global_head.weight")?
        .ok_or_else(|| Error::Checkpoint("missing tensor `global_head.weight`".into()))?;
    let mut projections = Vec::new();
    while let Some(weight) = take_matrix(&mut tensors, &format!("projection.{}.weight", projections.len()))? {
        let bias = take_vector(&mut tensors, &format!("projection.{}.bias", projections.len()), weight.rows())?;
        projections.push(ProjectionLayer { weight, bias });
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
    }
    let params = ModelParams {
        embedder: Embedder { layers },
        global_head: GlobalHead { weights: head },
        projections,
    };
    params
        .validate()
        .map_err(|e| Error::Checkpoint(format!("inconsistent shapes: {e}")))?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
