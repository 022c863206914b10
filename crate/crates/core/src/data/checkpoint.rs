//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "EFPN"  u32 version  u32 len  config JSON
//! u32 tensor count, then per tensor:
//!   u32 len  name  u8 trainable  4 × u32 shape  f32 values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EfpnConfig, EfpnModel};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"EFPN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &EfpnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params().iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        for d in p.tensor.shape().dims() {
            put_u32(&mut out, d as u32);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &EfpnModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EfpnModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::file(path, reason))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated while reading {what} at byte {}", self.pos)),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<EfpnModel, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("not an E-FPN checkpoint (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"));
    }
    let len = r.u32("config length")? as usize;
    let config: EfpnConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| format!("invalid config: {e}"))?;
    let count = r.u32("tensor count")? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| format!("tensor {i} name is not UTF-8"))?
            .to_string();
        let trainable = match r.take(1, "trainable flag")?[0] {
            0 => false,
            1 => true,
            v => return Err(format!("tensor {name}: bad trainable flag {v}")),
        };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("shape")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(shape.numel().checked_mul(4).ok_or("shape overflow")?, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        let id = store.add(name, tensor).map_err(|e| e.to_string())?;
        store.get_mut(id).trainable = trainable;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    EfpnModel::from_parts(config, store).map_err(|e| e.to_string())
}
