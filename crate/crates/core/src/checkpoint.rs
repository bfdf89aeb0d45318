//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "DMFF"  u32 version
//! u32 len, config text (canonical `key = value` lines)
//! u32 count, then per parameter: u32 len, name, u32 ndim, u32 dims…, f32 values…
//! u8 has_optimizer; if 1: u64 step, then per parameter: f32 m…, f32 v…
//! ```

use std::path::Path;

use dmffn_tensor::{Element, Tensor};

use crate::error::{io_err, Error, Result};
use crate::model::{build_model, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"DMFF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Adam moments in parameter order plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<Entry>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &Model<T>, optimizer: Option<OptimizerState>) -> Self {
        let entries = model
            .params
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint {
            config: model.config.clone(),
            entries,
            optimizer,
        }
    }

    /// Rebuilds the model from the stored config and overwrites every
    /// parameter with the stored values.
    pub fn to_model<T: Element>(&self) -> Result<Model<T>> {
        let mut model = build_model::<T>(&self.config)?;
        if model.params.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameters, file has {}",
                model.params.len(),
                self.entries.len()
            )));
        }
        for e in &self.entries {
            let id = model
                .params
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", e.name)))?;
            let expected = model.params.get(id).shape();
            if expected != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    e.name, e.shape, expected
                )));
            }
            let data = e.data.iter().map(|&v| T::lit(v as f64)).collect();
            model
                .params
                .set(id, Tensor::from_vec(e.shape.clone(), data)?)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_string());
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            put_str(&mut out, &e.name);
            put_u32(&mut out, e.shape.len() as u32);
            for &d in &e.shape {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, &e.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let text = r.string()?;
        let config = parse_config_text(&text)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.f32s(n)?;
            entries.push(Entry { name, shape, data });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut m = Vec::with_capacity(entries.len());
                let mut v = Vec::with_capacity(entries.len());
                for e in &entries {
                    m.push(r.f32s(e.data.len())?);
                    v.push(r.f32s(e.data.len())?);
                }
                Some(OptimizerState { step, m, v })
            }
            flag => {
                return Err(Error::Checkpoint(format!("bad optimizer flag {flag}")));
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after optimizer section",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            entries,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_config_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line `{line}`")))?;
        match cfg.set(k, v) {
            Ok(true) => {}
            Ok(false) => return Err(Error::Checkpoint(format!("unknown config key `{k}`"))),
            Err(msg) => return Err(Error::Checkpoint(format!("config key `{k}`: {msg}"))),
        }
    }
    Ok(cfg)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
