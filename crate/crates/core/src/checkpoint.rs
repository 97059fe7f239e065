//! Binary checkpoints for targets and drafters.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "KVSH" | version u32 | kind u8 | stage hash u64
//! config  u32 length + JSON
//! stage   u32 length + JSON
//! count   u32
//! per tensor: name (u32 length + UTF-8) | rank u32 | dims u64… | f64 data…
//! ```
//!
//! The stage record describes how the weights were produced; its hash lets a
//! pipeline decide whether an existing file can be reused.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drafter::{Drafter, DrafterConfig};
use crate::error::{Error, Result};
use crate::model::{TargetConfig, TargetModel, TargetWeights};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KVSH";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Target = 1,
    Drafter = 2,
}

impl Kind {
    fn from_u8(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Kind::Target),
            2 => Ok(Kind::Drafter),
            _ => Err(Error::Format(format!("unknown checkpoint kind {b}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrafterRecord {
    pub drafter: DrafterConfig,
    pub target: TargetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub kind: Kind,
    pub stage_hash: u64,
    pub config: String,
    pub stage: String,
}

/// First eight bytes of the SHA-256 of `text`.
pub fn stage_hash(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn encode<T: Scalar>(kind: Kind, config: &str, stage: &str, tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind as u8);
    buf.extend_from_slice(&stage_hash(stage).to_le_bytes());
    put_str(&mut buf, config);
    put_str(&mut buf, stage);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

fn decode_header(c: &mut Cursor<'_>) -> Result<Header> {
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = Kind::from_u8(c.take(1)?[0])?;
    let stage_hash = c.u64()?;
    let config = c.string()?;
    let stage = c.string()?;
    Ok(Header {
        kind,
        stage_hash,
        config,
        stage,
    })
}

fn decode<T: Scalar>(buf: &[u8]) -> Result<(Header, ParamSet<Tensor<T>>)> {
    let mut c = Cursor { buf, at: 0 };
    let header = decode_header(&mut c)?;
    let n = c.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = c.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        params.push(name, Tensor::new(shape, data)?);
    }
    if c.at != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((header, params))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_json<S: for<'de> Deserialize<'de>>(s: &str) -> Result<S> {
    serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
}

fn target_names(n_layers: usize, qk_norm: bool) -> Vec<String> {
    let mut names = vec!["embed".to_string()];
    for l in 0..n_layers {
        for p in ["attn_norm", "wq", "wk", "wv", "wo"] {
            names.push(format!("layers.{l}.{p}"));
        }
        if qk_norm {
            names.push(format!("layers.{l}.q_norm"));
            names.push(format!("layers.{l}.k_norm"));
        }
        for p in ["mlp_norm", "w_up", "w_down"] {
            names.push(format!("layers.{l}.{p}"));
        }
    }
    names.push("final_norm".into());
    names
}

pub fn save_target<T: Scalar>(path: &Path, model: &TargetModel<T>, stage: &str) -> Result<()> {
    let params = model.weights.params();
    let names = target_names(model.config.n_layers, model.config.qk_norm);
    if names.len() != params.len() {
        return Err(Error::Contract("target parameter naming out of sync".into()));
    }
    let tensors: Vec<(&str, &Tensor<T>)> = names.iter().map(String::as_str).zip(params).collect();
    write_atomic(path, &encode(Kind::Target, &to_json(&model.config)?, stage, &tensors))
}

pub fn load_target<T: Scalar>(path: &Path) -> Result<(TargetModel<T>, Header)> {
    let (header, params) = decode::<T>(&fs::read(path)?)?;
    if header.kind != Kind::Target {
        return Err(Error::Format(format!("{} is not a target checkpoint", path.display())));
    }
    let config: TargetConfig = from_json(&header.config)?;
    config.validate()?;
    if params.names() != target_names(config.n_layers, config.qk_norm).as_slice() {
        return Err(Error::Format("target tensor names do not match its config".into()));
    }
    let weights = TargetWeights::from_flat(&config, params.values().to_vec())?;
    Ok((TargetModel { config, weights }, header))
}

pub fn save_drafter<T: Scalar>(path: &Path, drafter: &Drafter<T>, stage: &str) -> Result<()> {
    let record = DrafterRecord {
        drafter: drafter.config.clone(),
        target: drafter.target.clone(),
    };
    let tensors: Vec<(&str, &Tensor<T>)> = drafter.params.iter().collect();
    write_atomic(path, &encode(Kind::Drafter, &to_json(&record)?, stage, &tensors))
}

pub fn load_drafter<T: Scalar>(path: &Path) -> Result<(Drafter<T>, Header)> {
    let (header, params) = decode::<T>(&fs::read(path)?)?;
    if header.kind != Kind::Drafter {
        return Err(Error::Format(format!("{} is not a drafter checkpoint", path.display())));
    }
    let record: DrafterRecord = from_json(&header.config)?;
    let drafter = Drafter::with_params(record.drafter, &record.target, params)?;
    Ok((drafter, header))
}

/// Reads only the header; missing files give `Ok(None)`.
pub fn read_header(path: &Path) -> Result<Option<Header>> {
    let mut f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    decode_header(&mut Cursor { buf: &buf, at: 0 }).map(Some)
}

/// Whether `path` holds a checkpoint produced by exactly `stage`.
pub fn is_current(path: &Path, stage: &str) -> Result<bool> {
    Ok(match read_header(path) {
        Ok(Some(h)) => h.stage_hash == stage_hash(stage) && h.stage == stage,
        Ok(None) | Err(Error::Format(_)) => false,
        Err(e) => return Err(e),
    })
}
