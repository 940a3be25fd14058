//! `EAMC` checkpoint files.
//!
//! Layout (all integers little-endian):
//! magic `EAMC`, version `u32`, `u16` field count, then per config field a
//! `u16`-length UTF-8 name and a `u64` value; `u32` tensor count, then per
//! tensor a `u16`-length name, `u8` rank, `u64` dims and raw `f32` data.
//! Parameters are followed by the input normalization tensors `input.mean`
//! and `input.std`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{Reader, WriteLe};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{InputNorm, ModelConfig, Parameters, Vit};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EAMC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(vit: &Vit<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.put_u32(CHECKPOINT_VERSION);
    let fields = vit.config.fields();
    out.put_u16(fields.len() as u16);
    for (name, value) in fields {
        out.put_str(name);
        out.put_u64(value);
    }
    let c = vit.config.channels;
    let mean = Tensor::new(&[c], vit.norm.mean.clone()).expect("norm length");
    let std = Tensor::new(&[c], vit.norm.std.clone()).expect("norm length");
    let mut tensors = vit.params.tensors();
    tensors.push(("input.mean".into(), &mean));
    tensors.push(("input.std".into(), &std));
    out.put_u32(tensors.len() as u32);
    for (name, t) in tensors {
        out.put_str(&name);
        out.put_u8(t.shape().len() as u8);
        for &d in t.shape() {
            out.put_u64(d as u64);
        }
        out.put_f32s(t.data());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vit<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let nfields = r.u16("config field count")?;
    let mut config = ModelConfig::default();
    let mut seen = Vec::new();
    for _ in 0..nfields {
        let name = r.string("config field name")?;
        let value = r.u64(&format!("config field {name}"))?;
        config.set_field(&name, value)?;
        seen.push(name);
    }
    for (name, _) in config.fields() {
        if !seen.iter().any(|s| s == name) {
            return Err(Error::Format(format!(
                "checkpoint lacks config field {name}"
            )));
        }
    }
    config.validate()?;

    let count = r.u32("tensor count")?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u8(&format!("rank of {name}"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.usize(&format!("dims of {name}"))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims of {name} overflow")))?;
        let data = r.f32_vec(n, &format!("tensor {name}"))?;
        let t = Tensor::new(&dims, data)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = records
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Shape {
                op: "load_checkpoint",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(t)
    };
    let mut params = Parameters::<f32>::zeros(&config);
    for (name, slot) in params.tensors_mut() {
        let shape = slot.shape().to_vec();
        *slot = take(&name, &shape)?;
    }
    let c = config.channels;
    let norm = InputNorm {
        mean: take("input.mean", &[c])?.into_data(),
        std: take("input.std", &[c])?.into_data(),
    };
    if let Some(extra) = records.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(Vit {
        config,
        params,
        norm,
    })
}

pub fn save_checkpoint(vit: &Vit<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(vit))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vit<f32>> {
    read_checkpoint(&std::fs::read(path)?)
}
