//! Model checkpoints, little-endian like the epoch file:
//!
//! ```text
//! "ASMK" | version u32 | manifest_len u32 | manifest (UTF-8 backbone config)
//! n_tensors u32
//! n_tensors × (name_len u8, name, ndim u8, ndim × dim u32, numel × f64)
//! ```
//!
//! Tensors are all trainable parameters followed by the running buffers of
//! both BN layers for both domains. Values are stored as `f64`, so a
//! save/load cycle is exact.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::Domain;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ASMK";
const CHECKPOINT_VERSION: u32 = 1;

fn domains() -> [(Domain, &'static str); 2] {
    [(Domain::Source, "source"), (Domain::Target, "target")]
}

fn tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for (layer, bn) in [("bn_temporal", &model.bn_temporal), ("bn_spatial", &model.bn_spatial)] {
        for (d, tag) in domains() {
            out.push((format!("{layer}.running_mean.{tag}"), Tensor::from_vec(bn.running_mean(d).to_vec())));
            out.push((format!("{layer}.running_var.{tag}"), Tensor::from_vec(bn.running_var(d).to_vec())));
        }
    }
    out
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let manifest = model.config().manifest();
    let items = tensors(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in &items {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("checkpoint {what} at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let len = r.u32("manifest length")? as usize;
    let manifest = std::str::from_utf8(r.take(len, "manifest")?)
        .map_err(|_| Error::invalid("load_checkpoint", "manifest is not UTF-8"))?;
    let config = BackboneConfig::from_manifest(manifest)?;
    let mut model = Model::build(config, 0)?;
    let expected = tensors(&model);
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::invalid(
            "load_checkpoint",
            format!("{count} tensors, manifest implies {}", expected.len()),
        ));
    }
    for _ in 0..count {
        let name_len = r.u8("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::invalid("load_checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel.saturating_mul(8), "tensor data")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        set_named(&mut model, &name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("load_checkpoint", "trailing bytes"));
    }
    Ok(model)
}

fn set_named(model: &mut Model, name: &str, value: Tensor) -> Result<()> {
    for (layer, tag) in [("bn_temporal", 0), ("bn_spatial", 1)] {
        for (d, dtag) in domains() {
            let is_mean = name == format!("{layer}.running_mean.{dtag}");
            let is_var = name == format!("{layer}.running_var.{dtag}");
            if !(is_mean || is_var) {
                continue;
            }
            let bn = if tag == 0 {
                &mut model.bn_temporal
            } else {
                &mut model.bn_spatial
            };
            let (mean, var) = if is_mean {
                (value.into_data(), bn.running_var(d).to_vec())
            } else {
                (bn.running_mean(d).to_vec(), value.into_data())
            };
            return bn.set_buffers(d, mean, var);
        }
    }
    model.set_parameter(name, value)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
