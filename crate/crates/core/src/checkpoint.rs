//! Binary checkpoint container.
//!
//! ```text
//! "REORACKP"  u32 version
//! u32 manifest_len, manifest (JSON)
//! u32 n_tensors
//! per tensor: u32 name_len, name, u8 dtype, u32 rank, u64 extents[rank], payload
//! ```
//! All integers and payload values are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterState};
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig, TargetModule};
use crate::numerics::scalar::DType;
use crate::numerics::{Rng, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"REORACKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub alive: Vec<(usize, TargetModule, Vec<bool>)>,
    pub trainable: Vec<String>,
    /// Caller data such as reducer scores.
    pub extra: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("{what} too large for the container")))
}

pub fn encode<T: Scalar>(manifest: &Manifest, tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let m = serde_json::to_vec(manifest)?;
    put_u32(&mut out, len_u32(m.len(), "manifest")?);
    out.extend_from_slice(&m);
    put_u32(&mut out, len_u32(tensors.len(), "tensor count")?);
    for (name, t) in tensors {
        put_u32(&mut out, len_u32(name.len(), "tensor name")?);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        put_u32(&mut out, len_u32(t.shape().len(), "rank")?);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data().iter() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
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

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor '{name}' stored as {dtype:?}, requested {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        let w = dtype.width();
        let payload = r.take(count.checked_mul(w).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let data: Vec<T> = payload.chunks_exact(w).map(T::read_le).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok((manifest, tensors))
}

pub fn save_backbone<T: Scalar>(path: &Path, model: &Backbone<T>) -> Result<()> {
    let manifest = Manifest {
        kind: CheckpointKind::Backbone,
        model: model.config().clone(),
        adapter: None,
        alive: Vec::new(),
        trainable: Vec::new(),
        extra: serde_json::Value::Null,
    };
    fs::write(path, encode(&manifest, &model.named_tensors())?)?;
    Ok(())
}

pub fn load_backbone<T: Scalar>(path: &Path) -> Result<Backbone<T>> {
    let (manifest, tensors) = decode::<T>(&fs::read(path)?)?;
    if manifest.kind != CheckpointKind::Backbone {
        return Err(Error::Format(format!("{} holds adapters, not a backbone", path.display())));
    }
    Backbone::from_parts(manifest.model, tensors.into_iter().collect())
}

pub fn encode_adapters<T: Scalar>(model: &ModelConfig, adapters: &AdapterState<T>, extra: serde_json::Value) -> Result<Vec<u8>> {
    let named = adapters.named_parameters();
    let manifest = Manifest {
        kind: CheckpointKind::Adapter,
        model: model.clone(),
        adapter: Some(adapters.config().clone()),
        alive: adapters.alive_mask(),
        trainable: named.iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n.clone()).collect(),
        extra,
    };
    encode(&manifest, &named)
}

pub fn decode_adapters<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, AdapterState<T>, serde_json::Value)> {
    let (manifest, tensors) = decode::<T>(bytes)?;
    let acfg = match (&manifest.kind, manifest.adapter) {
        (CheckpointKind::Adapter, Some(a)) => a,
        _ => return Err(Error::Format("checkpoint holds no adapter state".into())),
    };
    let mut state = AdapterState::init(&manifest.model, &acfg, &mut Rng::new(0))?;
    let mut by_name: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
    for (name, t) in state.named_parameters() {
        let src = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
        if src.shape() != t.shape() {
            return Err(Error::Format(format!("tensor '{name}' has the wrong shape")));
        }
        t.assign(&src.data())?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected tensor '{extra}' in checkpoint")));
    }
    state.restore_masks(&manifest.alive, &manifest.trainable)?;
    Ok((manifest.model, state, manifest.extra))
}

pub fn save_adapters<T: Scalar>(path: &Path, model: &ModelConfig, adapters: &AdapterState<T>, extra: serde_json::Value) -> Result<()> {
    fs::write(path, encode_adapters(model, adapters, extra)?)?;
    Ok(())
}

pub fn load_adapters<T: Scalar>(path: &Path) -> Result<(ModelConfig, AdapterState<T>, serde_json::Value)> {
    decode_adapters(&fs::read(path)?)
}
