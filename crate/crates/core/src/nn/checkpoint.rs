//! Named-array archive. Layout (little-endian):
//!
//! ```text
//! "QERLCKPT" | u16 version | u32 entry count
//! per entry: u32 name length | UTF-8 name | u8 dtype | u8 rank | rank × u32 dims | data
//! ```
//!
//! dtype 0 = f64, 1 = f32, 2 = embedded `QERL` quant container, 3 = raw bytes.
//! For dtype 2 the dims are `(rows, cols)` and the data is one container.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::linear::BaseWeight;
use super::model::{ModelConfig, PolicyModel, LINEAR_NAMES};
use super::NnError;
use crate::quant::{read_tensor, QuantizedTensor};

pub const CKPT_MAGIC: &[u8; 8] = b"QERLCKPT";
pub const CKPT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    Quant(QuantizedTensor),
    Bytes(Vec<u8>),
}

impl EntryData {
    fn tag(&self) -> u8 {
        match self {
            EntryData::F64(_) => 0,
            EntryData::F32(_) => 1,
            EntryData::Quant(_) => 2,
            EntryData::Bytes(_) => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

impl ArrayEntry {
    pub fn matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        ArrayEntry {
            name: name.into(),
            dims: vec![m.nrows(), m.ncols()],
            data: EntryData::F64(m.iter().copied().collect()),
        }
    }

    pub fn vector(name: impl Into<String>, v: &Array1<f64>) -> Self {
        ArrayEntry {
            name: name.into(),
            dims: vec![v.len()],
            data: EntryData::F64(v.to_vec()),
        }
    }

    pub fn as_matrix(&self) -> Result<Array2<f64>, NnError> {
        let err = || NnError::Checkpoint(format!("{}: expected an f64 matrix", self.name));
        let (EntryData::F64(v), [r, c]) = (&self.data, self.dims.as_slice()) else {
            return Err(err());
        };
        Array2::from_shape_vec((*r, *c), v.clone()).map_err(|_| err())
    }

    pub fn as_vector(&self) -> Result<Array1<f64>, NnError> {
        match (&self.data, self.dims.as_slice()) {
            (EntryData::F64(v), [_]) => Ok(Array1::from(v.clone())),
            _ => Err(NnError::Checkpoint(format!("{}: expected an f64 vector", self.name))),
        }
    }
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_archive<W: Write>(w: &mut W, entries: &[ArrayEntry]) -> Result<(), NnError> {
    w.write_all(CKPT_MAGIC)?;
    w.write_u16::<LittleEndian>(CKPT_VERSION)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for e in entries {
        w.write_u32::<LittleEndian>(e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        w.write_u8(e.data.tag())?;
        w.write_u8(e.dims.len() as u8)?;
        for &d in &e.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        match &e.data {
            EntryData::F64(v) => {
                for &x in v {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
            EntryData::F32(v) => {
                for &x in v {
                    w.write_f32::<LittleEndian>(x)?;
                }
            }
            EntryData::Quant(t) => w.write_all(&t.to_bytes())?,
            EntryData::Bytes(b) => w.write_all(b)?,
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<ArrayEntry>, NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = Vec::new();
        r.take(len as u64).read_to_end(&mut name)?;
        if name.len() != len {
            return Err(bad("truncated entry name"));
        }
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        let tag = r.read_u8()?;
        let rank = r.read_u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let data = match tag {
            0 => EntryData::F64((0..n).map(|_| r.read_f64::<LittleEndian>()).collect::<Result<_, _>>()?),
            1 => EntryData::F32((0..n).map(|_| r.read_f32::<LittleEndian>()).collect::<Result<_, _>>()?),
            2 => {
                let t = read_tensor(r)?;
                if dims != [t.rows, t.cols] {
                    return Err(bad(format!("{name}: dims disagree with embedded container")));
                }
                EntryData::Quant(t)
            }
            3 => {
                let mut b = Vec::new();
                r.take(n as u64).read_to_end(&mut b)?;
                if b.len() != n {
                    return Err(bad("truncated byte entry"));
                }
                EntryData::Bytes(b)
            }
            t => return Err(bad(format!("unknown dtype tag {t}"))),
        };
        out.push(ArrayEntry { name, dims, data });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(bad("trailing bytes after last entry"));
    }
    Ok(out)
}

/// Flattens a model into archive entries. Merged noise is transient and not saved.
pub fn model_entries(model: &PolicyModel) -> Vec<ArrayEntry> {
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    let mut out = vec![
        ArrayEntry { name: "config".into(), dims: vec![cfg.len()], data: EntryData::Bytes(cfg) },
        ArrayEntry::matrix("tok_emb", &model.tok_emb),
        ArrayEntry::matrix("pos_emb", &model.pos_emb),
    ];
    for (i, b) in model.blocks.iter().enumerate() {
        out.push(ArrayEntry::vector(format!("blocks.{i}.attn_norm"), &b.attn_norm.weight));
        out.push(ArrayEntry::vector(format!("blocks.{i}.ffn_norm"), &b.ffn_norm.weight));
        for (name, l) in LINEAR_NAMES.iter().zip(b.linears()) {
            let key = format!("blocks.{i}.{name}");
            out.push(match &l.base {
                BaseWeight::Dense(w) => ArrayEntry::matrix(format!("{key}.base"), w),
                BaseWeight::Quantized { tensor, .. } => ArrayEntry {
                    name: format!("{key}.base"),
                    dims: vec![tensor.rows, tensor.cols],
                    data: EntryData::Quant(tensor.clone()),
                },
            });
            out.push(ArrayEntry::matrix(format!("{key}.lora_a"), &l.adapter.a));
            out.push(ArrayEntry::matrix(format!("{key}.lora_b"), &l.adapter.b));
        }
    }
    out.push(ArrayEntry::vector("final_norm", &model.final_norm.weight));
    out.push(ArrayEntry::matrix("head", &model.head));
    out
}

pub fn model_from_entries(entries: Vec<ArrayEntry>) -> Result<PolicyModel, NnError> {
    let mut map: HashMap<String, ArrayEntry> = HashMap::new();
    for e in entries {
        if map.insert(e.name.clone(), e).is_some() {
            return Err(bad("duplicate entry name"));
        }
    }
    let mut take = |k: &str| map.remove(k).ok_or_else(|| bad(format!("missing entry {k}")));
    let cfg: ModelConfig = match take("config")?.data {
        EntryData::Bytes(b) => serde_json::from_slice(&b).map_err(|e| bad(format!("config: {e}")))?,
        _ => return Err(bad("config entry must be raw bytes")),
    };
    let mut m = PolicyModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let fit = |want: (usize, usize), got: Array2<f64>, k: &str| {
        if got.dim() == want {
            Ok(got)
        } else {
            Err(bad(format!("{k}: shape {:?}, expected {:?}", got.dim(), want)))
        }
    };
    let fitv = |want: usize, got: Array1<f64>, k: &str| {
        if got.len() == want {
            Ok(got)
        } else {
            Err(bad(format!("{k}: length {}, expected {want}", got.len())))
        }
    };
    m.tok_emb = fit(m.tok_emb.dim(), take("tok_emb")?.as_matrix()?, "tok_emb")?;
    m.pos_emb = fit(m.pos_emb.dim(), take("pos_emb")?.as_matrix()?, "pos_emb")?;
    let d = m.config.d_model;
    for i in 0..m.blocks.len() {
        let blk = &mut m.blocks[i];
        let k = format!("blocks.{i}.attn_norm");
        blk.attn_norm.weight = fitv(d, take(&k)?.as_vector()?, &k)?;
        let k = format!("blocks.{i}.ffn_norm");
        blk.ffn_norm.weight = fitv(d, take(&k)?.as_vector()?, &k)?;
        for (name, l) in LINEAR_NAMES.iter().zip(blk.linears_mut()) {
            let key = format!("blocks.{i}.{name}");
            let shape = l.base.shape();
            let base = take(&format!("{key}.base"))?;
            l.base = match base.data {
                EntryData::Quant(t) if t.shape() == shape => BaseWeight::quantized(t),
                EntryData::Quant(_) => return Err(bad(format!("{key}.base: shape mismatch"))),
                _ => BaseWeight::Dense(fit(shape, base.as_matrix()?, &key)?),
            };
            let ka = format!("{key}.lora_a");
            l.adapter.a = fit(l.adapter.a.dim(), take(&ka)?.as_matrix()?, &ka)?;
            let kb = format!("{key}.lora_b");
            l.adapter.b = fit(l.adapter.b.dim(), take(&kb)?.as_matrix()?, &kb)?;
        }
    }
    m.final_norm.weight = fitv(d, take("final_norm")?.as_vector()?, "final_norm")?;
    m.head = fit(m.head.dim(), take("head")?.as_matrix()?, "head")?;
    Ok(m)
}

pub fn save_model(model: &PolicyModel, path: &Path) -> Result<(), NnError> {
    let mut buf = Vec::new();
    write_archive(&mut buf, &model_entries(model))?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PolicyModel, NnError> {
    let bytes = std::fs::read(path)?;
    model_from_entries(read_archive(&mut bytes.as_slice())?)
}
