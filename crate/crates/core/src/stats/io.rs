//! `EAMS` bank files and map renderings.
//!
//! Bank layout (little-endian): magic `EAMS`, version `u32`, bits `u32`,
//! image count `u64`, dims `(L, H, S, S)` as four `u64`, the `u32` counters
//! with bins innermost, then one exact running sum per weight as three `u64`
//! fixed-point limbs.

use std::path::Path;

use crate::binio::{Reader, WriteLe};
use crate::error::{Error, Result};

use super::{ExactSum, HistogramBank};

pub const BANK_MAGIC: [u8; 4] = *b"EAMS";
pub const BANK_VERSION: u32 = 2;

pub fn write_bank(bank: &HistogramBank) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + bank.counts().len() * 4 + bank.num_weights() * 24);
    out.extend_from_slice(&BANK_MAGIC);
    out.put_u32(BANK_VERSION);
    out.put_u32(bank.bits());
    out.put_u64(bank.images());
    for d in bank.dims() {
        out.put_u64(d as u64);
    }
    for &c in bank.counts() {
        out.put_u32(c);
    }
    for s in bank.sums() {
        for limb in s.limbs() {
            out.put_u64(limb);
        }
    }
    out
}

pub fn read_bank(bytes: &[u8]) -> Result<HistogramBank> {
    let mut r = Reader::new(bytes);
    r.magic(BANK_MAGIC)?;
    r.version(BANK_VERSION)?;
    let bits = r.u32("histogram bits")?;
    if !(1..=16).contains(&bits) {
        return Err(Error::Format(format!(
            "histogram bits {bits} outside 1..=16"
        )));
    }
    let images = r.u64("image count")?;
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = r.usize(&format!("dimension {k}"))?;
    }
    if dims[2] != dims[3] {
        return Err(Error::Format(format!(
            "attention maps must be square, got {dims:?}"
        )));
    }
    let weights = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("bank dimensions overflow".into()))?;
    let nbins = 1usize << bits;
    let ncounts = weights
        .checked_mul(nbins)
        .ok_or_else(|| Error::Format("bank dimensions overflow".into()))?;
    let raw = r.take(
        ncounts
            .checked_mul(4)
            .ok_or_else(|| Error::Format("bank dimensions overflow".into()))?,
        "histogram counters",
    )?;
    let counts: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut sums = Vec::with_capacity(weights);
    for w in 0..weights {
        let mut limbs = [0u64; 3];
        for l in &mut limbs {
            *l = r.u64(&format!("running sum {w}"))?;
        }
        sums.push(ExactSum::from_limbs(limbs));
    }
    r.finish()?;
    for (w, h) in counts.chunks(nbins).enumerate() {
        let total: u64 = h.iter().map(|&c| c as u64).sum();
        if total != images {
            return Err(Error::Format(format!(
                "weight {w} has {total} histogram entries but the bank records {images} images"
            )));
        }
    }
    Ok(HistogramBank::from_parts(bits, dims, images, counts, sums))
}

pub fn save_bank(bank: &HistogramBank, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_bank(bank))?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<HistogramBank> {
    read_bank(&std::fs::read(path)?)
}

/// An 8-bit grayscale image with the value range it was normalized from.
#[derive(Clone, Debug, PartialEq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub min: f64,
    pub max: f64,
}

impl PgmImage {
    /// Min-max normalization to `[0, 255]`; a constant input maps to 0.
    pub fn from_values(values: &[f64], width: usize, height: usize) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let pixels = values
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - min) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        Self {
            width,
            height,
            pixels,
            min,
            max,
        }
    }

    /// Binary `P5` encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Sidecar text mapping pixel values back to map values.
    pub fn scale_text(&self) -> String {
        format!(
            "min = {:?}\nmax = {:?}\n# value = min + pixel / 255 * (max - min)\n",
            self.min, self.max
        )
    }
}
