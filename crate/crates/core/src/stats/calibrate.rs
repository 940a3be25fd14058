use rayon::prelude::*;

use crate::data::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::quant::QuantizedVit;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{Engine, Probe, Vit};

use super::{AttentionRecord, HistogramBank};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationMode {
    FullPrecision,
    /// Attention observed through the fake-quantized model.
    Quantized,
}

impl CalibrationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibrationMode::FullPrecision => "fp32",
            CalibrationMode::Quantized => "quantized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(CalibrationMode::FullPrecision),
            "quantized" => Ok(CalibrationMode::Quantized),
            _ => Err(Error::Invalid(format!("unknown calibration mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    /// Histogram resolution `b`; the bank has `2^b` bins per weight.
    pub bits: u32,
    pub fraction: f64,
    pub mode: CalibrationMode,
    /// Seed of the shuffle that selects the calibration subset.
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            fraction: 0.05,
            mode: CalibrationMode::FullPrecision,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::Invalid(format!(
                "histogram bits {} outside 1..=16",
                self.bits
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "calibration fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// The first `⌈fraction·n⌉` indices of a seeded shuffle of `0..n`.
pub fn calibration_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut idx = shuffled_indices(n, seed);
    idx.truncate(k);
    idx
}

/// Probe that copies every attention map of one forward pass.
pub struct AttentionRecorder {
    pub record: AttentionRecord,
}

impl AttentionRecorder {
    pub fn new(layers: usize, heads: usize, seq: usize) -> Self {
        Self {
            record: AttentionRecord::zeros(layers, heads, seq),
        }
    }
}

impl<T: Scalar> Probe<T> for AttentionRecorder {
    fn attention(&mut self, layer: usize, head: usize, map: &Tensor<T>) {
        for (dst, &v) in self.record.map_mut(layer, head).iter_mut().zip(map.data()) {
            *dst = v.as_f32();
        }
    }
}

fn engine_for<'a, T: Scalar>(
    vit: &'a Vit<T>,
    quantized: Option<&'a QuantizedVit<T>>,
    mode: CalibrationMode,
) -> Result<Engine<'a, T>> {
    match (mode, quantized) {
        (CalibrationMode::FullPrecision, _) => Ok(Engine::new(vit)),
        (CalibrationMode::Quantized, Some(q)) => Ok(Engine::quantized(q)),
        (CalibrationMode::Quantized, None) => Err(Error::Invalid(
            "quantized calibration needs a quantized model".into(),
        )),
    }
}

fn fill_bank<T: Scalar>(
    engine: &Engine<'_, T>,
    ds: &Dataset,
    indices: &[usize],
    bits: u32,
) -> Result<HistogramBank> {
    let cfg = &engine.vit.config;
    let (l, h, s) = (cfg.num_layers, cfg.num_heads, cfg.seq_len());
    let mut bank = HistogramBank::new(bits, l, h, s)?;
    let mut rec = AttentionRecorder::new(l, h, s);
    for &i in indices {
        let img = engine.vit.image_tensor(ds.image(i))?;
        engine.forward(&img, Some(&mut rec))?;
        bank.accumulate(&rec.record)?;
    }
    Ok(bank)
}

fn selection(ds: &Dataset, cfg: &CalibrationConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Invalid("calibration dataset is empty".into()));
    }
    Ok(calibration_indices(ds.len(), cfg.fraction, cfg.seed))
}

/// Single-pass calibration over the selected subset, in order.
/// `quantized` must be given when `cfg.mode` is `Quantized`.
pub fn run_calibration<T: Scalar>(
    vit: &Vit<T>,
    quantized: Option<&QuantizedVit<T>>,
    ds: &Dataset,
    cfg: &CalibrationConfig,
) -> Result<HistogramBank> {
    let engine = engine_for(vit, quantized, cfg.mode)?;
    fill_bank(&engine, ds, &selection(ds, cfg)?, cfg.bits)
}

/// Splits the subset into `workers` contiguous shards, fills one bank per
/// shard in parallel and merges them. Equal to [`run_calibration`] bit for
/// bit.
pub fn run_calibration_sharded<T: Scalar>(
    vit: &Vit<T>,
    quantized: Option<&QuantizedVit<T>>,
    ds: &Dataset,
    cfg: &CalibrationConfig,
    workers: usize,
) -> Result<HistogramBank> {
    let engine = engine_for(vit, quantized, cfg.mode)?;
    let idx = selection(ds, cfg)?;
    let shard = idx.len().div_ceil(workers.max(1)).max(1);
    let banks: Vec<HistogramBank> = idx
        .par_chunks(shard)
        .map(|part| fill_bank(&engine, ds, part, cfg.bits))
        .collect::<Result<_>>()?;
    let mut iter = banks.into_iter();
    let first = iter.next().expect("non-empty selection");
    iter.try_fold(first, |acc, b| acc.merge(&b))
}
