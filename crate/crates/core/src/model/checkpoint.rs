//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SERK"  u32 version  u64 record_count
//! per record: u32 id_len, id bytes (UTF-8), 4 x u64 shape (N, C, H, W), f64 payload
//! ```
//!
//! Record ids are `<layer>.<slot>` where slot is one of `weight`, `bias`,
//! `bn_scale`, `bn_shift`, `bn_running_mean`, `bn_running_var`.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"SERK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub id: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

fn records(model: &Model) -> Vec<CheckpointRecord> {
    let mut out = Vec::new();
    let mut push = |id: String, t: &Tensor| {
        out.push(CheckpointRecord {
            id,
            shape: t.shape(),
            data: t.data().to_vec(),
        })
    };
    for layer in model.store.iter() {
        push(format!("{}.weight", layer.id), &layer.weight);
        if let Some(b) = &layer.bias {
            push(format!("{}.bias", layer.id), b);
        }
        if let Some(bn) = &layer.bn {
            let cs = bn.scale.shape();
            push(format!("{}.bn_scale", layer.id), &bn.scale);
            push(format!("{}.bn_shift", layer.id), &bn.shift);
            let mean = Tensor::from_vec(cs, bn.running_mean.clone()).expect("running mean matches scale");
            let var = Tensor::from_vec(cs, bn.running_var.clone()).expect("running var matches scale");
            push(format!("{}.bn_running_mean", layer.id), &mean);
            push(format!("{}.bn_running_var", layer.id), &var);
        }
    }
    out
}

pub fn write_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let recs = records(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(recs.len() as u64).to_le_bytes());
    for r in &recs {
        buf.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.id.as_bytes());
        for d in r.shape.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path.as_ref(), buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointRecord>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.as_ref().display())),
        other => other,
    })
}

fn parse(bytes: &[u8]) -> Result<Vec<CheckpointRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Data("record id is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?).map_err(|_| Error::Data(format!("{id}: dimension overflow")))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = r.take(shape.numel().checked_mul(8).ok_or_else(|| Error::Data(format!("{id}: size overflow")))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(CheckpointRecord { id, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok(out)
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(self, path)
    }

    /// Builds the network for `config` and overwrites every parameter with the
    /// checkpoint's. Record ids and shapes must match exactly.
    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Model> {
        let recs = read_checkpoint(path.as_ref())?;
        let mut model = Model::build(config)?;
        let expected = records(&model);
        let mismatch = |detail: String| {
            Error::Data(format!(
                "checkpoint {} does not match the model config: {detail}",
                path.as_ref().display()
            ))
        };
        if recs.len() != expected.len() {
            return Err(mismatch(format!("{} records, model has {}", recs.len(), expected.len())));
        }
        for (r, e) in recs.iter().zip(&expected) {
            if r.id != e.id || r.shape != e.shape {
                return Err(mismatch(format!("found {} {:?}, expected {} {:?}", r.id, r.shape, e.id, e.shape)));
            }
        }
        let mut it = recs.into_iter();
        for layer in model.store.iter_mut() {
            layer.weight.data_mut().copy_from_slice(&it.next().expect("count checked").data);
            if let Some(b) = &mut layer.bias {
                b.data_mut().copy_from_slice(&it.next().expect("count checked").data);
            }
            if let Some(bn) = &mut layer.bn {
                bn.scale.data_mut().copy_from_slice(&it.next().expect("count checked").data);
                bn.shift.data_mut().copy_from_slice(&it.next().expect("count checked").data);
                bn.running_mean = it.next().expect("count checked").data;
                bn.running_var = it.next().expect("count checked").data;
            }
        }
        Ok(model)
    }
}
