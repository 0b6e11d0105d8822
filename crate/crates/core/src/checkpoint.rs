//! Binary checkpoint container.
//!
//! Layout, all integers little-endian: magic `MOGD1`, `u32` segment count,
//! then per segment a name and a `u32` entry count, and per entry a name,
//! `u32` rank, `u64` dims and row-major `f64` values. Names are `u32`
//! length-prefixed UTF-8. Segments and entries are written in name order,
//! so equal contents always give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"MOGD1";

/// Model parameter segments.
pub const MODEL_SEGMENTS: [&str; 4] = ["backbone", "rsa", "amg", "encoders"];
pub const CONFIG_SEGMENT: &str = "config";

pub type Segment = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub segments: BTreeMap<String, Segment>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Every parameter of `store`, grouped by segment.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut ck = Checkpoint::default();
        for id in store.ids() {
            let name = store.name(id);
            ck.segments
                .entry(ParamStore::segment_of(name).to_string())
                .or_default()
                .insert(name.to_string(), store.value(id).clone());
        }
        ck
    }

    pub fn from_model(model: &Model) -> Result<Self> {
        let mut ck = Self::from_store(&model.store);
        ck.segments.insert(CONFIG_SEGMENT.into(), config_segment(&model.cfg)?);
        Ok(ck)
    }

    /// Rebuilds a model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Model> {
        let cfg = self.config()?;
        let mut model = Model::new(cfg, 0)?;
        self.apply(&mut model.store, |_| true)?;
        Ok(model)
    }

    pub fn config(&self) -> Result<ModelConfig> {
        let seg = self.segments.get(CONFIG_SEGMENT).ok_or_else(|| bad("no config segment"))?;
        let map: serde_json::Map<String, serde_json::Value> = seg
            .iter()
            .map(|(k, t)| Ok((k.clone(), serde_json::Value::from(t.item()? as u64))))
            .collect::<Result<_>>()?;
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| bad(format!("config: {e}")))
    }

    /// Copies the values of the parameters selected by `pred` into `store`.
    pub fn apply(&self, store: &mut ParamStore, pred: impl Fn(&str) -> bool) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if !pred(&name) {
                continue;
            }
            let t = self
                .segments
                .get(ParamStore::segment_of(&name))
                .and_then(|s| s.get(&name))
                .ok_or_else(|| bad(format!("missing parameter {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(bad(format!("shape mismatch for {name}: {:?} vs {:?}", t.shape(), store.value(id).shape())));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Serialized bytes of one segment (empty if absent).
    pub fn segment_bytes(&self, name: &str) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(seg) = self.segments.get(name) {
            write_segment(&mut out, name, seg);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.segments.len() as u32).to_le_bytes());
        for (name, seg) in &self.segments {
            write_segment(&mut out, name, seg);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("bad magic header"));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let seg_name = r.name()?;
            let mut seg = Segment::new();
            for _ in 0..r.u32()? {
                let name = r.name()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
                if n > (r.bytes.len() - r.pos) / 8 {
                    return Err(bad(format!("truncated values for {name}")));
                }
                let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                seg.insert(name, Tensor::new(shape, data)?);
            }
            ck.segments.insert(seg_name, seg);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn config_segment(cfg: &ModelConfig) -> Result<Segment> {
    let v = serde_json::to_value(cfg).map_err(|e| bad(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| bad("config is not a map"))?;
    obj.iter()
        .map(|(k, v)| {
            let n = v.as_u64().ok_or_else(|| bad(format!("config field {k} is not an integer")))?;
            Ok((k.clone(), Tensor::scalar(n as f64)))
        })
        .collect()
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
}

fn write_segment(out: &mut Vec<u8>, name: &str, seg: &Segment) {
    put_name(out, name);
    out.extend((seg.len() as u32).to_le_bytes());
    for (n, t) in seg {
        put_name(out, n);
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("unexpected end of file"))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }
}
