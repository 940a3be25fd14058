//! Uniform affine fake quantization with min-max calibration.
//!
//! A value `x` maps to the integer `q = clamp(round(x/scale) + zp, 0, 2^bits − 1)`
//! and back to `(q − zp)·scale`. Rounding is half-to-even throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{Engine, Parameters, Probe, Site, Vit};

/// Scale used when the calibrated range is empty (`max == min`).
pub const DEGENERATE_SCALE: f64 = 1e-8;

/// Bit width that disables frozen-attention quantization.
pub const FULL_PRECISION_BITS: u32 = 32;

/// Activation ranges are observed over at most this many batches of
/// [`CALIBRATION_BATCH`] images.
pub const MAX_CALIBRATION_BATCHES: usize = 32;
pub const CALIBRATION_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One grid per column of an `in × out` weight matrix.
    PerOutputChannel,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::PerTensor => "per-tensor",
            Granularity::PerOutputChannel => "per-output-channel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-tensor" => Ok(Granularity::PerTensor),
            "per-output-channel" => Ok(Granularity::PerOutputChannel),
            _ => Err(Error::Invalid(format!("unknown granularity {s:?}"))),
        }
    }
}

/// One quantization grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantGrid {
    pub scale: f64,
    pub zero_point: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub granularity: Granularity,
    /// A single grid for per-tensor; one per output channel otherwise.
    pub grids: Vec<QuantGrid>,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Invalid(format!(
            "quantization bits {bits} outside 2..=16"
        )));
    }
    Ok(())
}

impl QuantGrid {
    /// Min-max grid: `scale = (max − min)/(2^bits − 1)`,
    /// `zero_point = round(−min/scale)` clamped to the integer range.
    pub fn from_range(min: f64, max: f64, bits: u32) -> Self {
        let levels = ((1u64 << bits) - 1) as f64;
        let scale = if max > min {
            (max - min) / levels
        } else {
            DEGENERATE_SCALE
        };
        let zp = (-min / scale).round_ties_even().clamp(0.0, levels) as i64;
        Self {
            scale,
            zero_point: zp,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, bits: u32) -> f64 {
        let qmax = ((1u64 << bits) - 1) as f64;
        let zp = self.zero_point as f64;
        let q = ((x / self.scale).round_ties_even() + zp).clamp(0.0, qmax);
        (q - zp) * self.scale
    }
}

impl QuantParams {
    pub fn per_tensor(bits: u32, grid: QuantGrid) -> Self {
        Self {
            bits,
            granularity: Granularity::PerTensor,
            grids: vec![grid],
        }
    }
}

/// Min-max calibration over a stream of finite tensors. Per-output-channel
/// granularity treats the last axis as the channel axis.
pub fn calibrate_minmax<'a, T: Scalar>(
    samples: impl IntoIterator<Item = &'a Tensor<T>>,
    bits: u32,
    granularity: Granularity,
) -> Result<QuantParams> {
    check_bits(bits)?;
    let mut ranges: Option<Vec<(f64, f64)>> = None;
    for t in samples {
        if !t.all_finite() {
            return Err(Error::NonFinite("quantization calibration sample".into()));
        }
        let width = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerOutputChannel => t.cols(),
        };
        let r = ranges.get_or_insert_with(|| vec![(f64::INFINITY, f64::NEG_INFINITY); width]);
        if r.len() != width {
            return Err(Error::Shape {
                op: "calibrate_minmax",
                left: vec![r.len()],
                right: t.shape().to_vec(),
            });
        }
        for (i, &v) in t.data().iter().enumerate() {
            let v = v.as_f64();
            let slot = &mut r[i % width];
            slot.0 = slot.0.min(v);
            slot.1 = slot.1.max(v);
        }
    }
    let ranges = ranges.ok_or_else(|| Error::Invalid("no calibration samples".into()))?;
    if ranges.iter().any(|(lo, _)| lo.is_infinite()) {
        return Err(Error::Invalid("empty calibration tensor".into()));
    }
    Ok(QuantParams {
        bits,
        granularity,
        grids: ranges
            .iter()
            .map(|&(lo, hi)| QuantGrid::from_range(lo, hi, bits))
            .collect(),
    })
}

/// Quantize-dequantize every element.
pub fn fake_quantize<T: Scalar>(x: &Tensor<T>, qp: &QuantParams) -> Tensor<T> {
    let mut out = x.clone();
    fake_quantize_in_place(&mut out, qp);
    out
}

pub fn fake_quantize_in_place<T: Scalar>(x: &mut Tensor<T>, qp: &QuantParams) {
    let n = qp.grids.len();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let grid = &qp.grids[if n == 1 { 0 } else { i % n }];
        *v = T::lit(grid.apply(v.as_f64(), qp.bits));
    }
}

/// Quantizes mean attention values onto the uniform `[0, 1]` grid with
/// `2^bits` levels. `bits >= 32` is the identity.
pub fn quantize_frozen_attention(values: &[f32], bits: u32) -> Result<Vec<f32>> {
    const SLACK: f32 = 1e-6;
    if let Some(&bad) = values.iter().find(|&&v| !(v >= -SLACK && v <= 1.0 + SLACK)) {
        return Err(Error::Range { value: bad as f64 });
    }
    if bits >= FULL_PRECISION_BITS {
        return Ok(values.to_vec());
    }
    if bits == 0 || bits > 16 {
        return Err(Error::Invalid(format!("frozen attention bits {bits}")));
    }
    let grid = QuantGrid {
        scale: 1.0 / ((1u64 << bits) - 1) as f64,
        zero_point: 0,
    };
    Ok(values
        .iter()
        .map(|&v| grid.apply(v.clamp(0.0, 1.0) as f64, bits) as f32)
        .collect())
}

/// Quantization settings plus calibrated per-site parameters, keyed by
/// weight tensor name (`layers.0.attn.w_q`) or activation site
/// (`act.layers.0.qkv_in`).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub activation_bits: u32,
    /// `32` keeps frozen attention values in full precision.
    pub frozen_attention_bits: u32,
    pub calibration_samples: usize,
    pub sites: BTreeMap<String, QuantParams>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            activation_bits: 4,
            frozen_attention_bits: 4,
            calibration_samples: 0,
            sites: BTreeMap::new(),
        }
    }
}

impl QuantConfig {
    pub fn activation(&self, site: Site) -> Option<&QuantParams> {
        self.sites.get(&site.key())
    }

    /// Text form: one `key = value` line per setting, then one `site` line
    /// per calibrated tensor.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "weight_bits = {}", self.weight_bits).unwrap();
        writeln!(s, "activation_bits = {}", self.activation_bits).unwrap();
        writeln!(s, "frozen_attention_bits = {}", self.frozen_attention_bits).unwrap();
        writeln!(s, "calibration_samples = {}", self.calibration_samples).unwrap();
        for (name, qp) in &self.sites {
            let scales: Vec<String> = qp.grids.iter().map(|g| format!("{:?}", g.scale)).collect();
            let zps: Vec<String> = qp.grids.iter().map(|g| g.zero_point.to_string()).collect();
            writeln!(
                s,
                "site {name} bits={} granularity={} scale={} zero_point={}",
                qp.bits,
                qp.granularity.as_str(),
                scales.join(","),
                zps.join(",")
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = QuantConfig::default();
        let bad =
            |line: usize, msg: &str| Error::Format(format!("quant config line {line}: {msg}"));
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let no = no + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("site ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| bad(no, "missing site name"))?;
                let mut kv = BTreeMap::new();
                for p in parts {
                    let (k, v) = p
                        .split_once('=')
                        .ok_or_else(|| bad(no, "expected key=value"))?;
                    kv.insert(k, v);
                }
                let get = |k: &str| {
                    kv.get(k)
                        .copied()
                        .ok_or_else(|| bad(no, &format!("missing {k}")))
                };
                let bits: u32 = get("bits")?.parse().map_err(|_| bad(no, "bits"))?;
                let granularity = Granularity::parse(get("granularity")?)?;
                let scales: Vec<f64> = get("scale")?
                    .split(',')
                    .map(|v| v.parse().map_err(|_| bad(no, "scale")))
                    .collect::<Result<_>>()?;
                let zps: Vec<i64> = get("zero_point")?
                    .split(',')
                    .map(|v| v.parse().map_err(|_| bad(no, "zero_point")))
                    .collect::<Result<_>>()?;
                if scales.len() != zps.len() || scales.iter().any(|&s| !(s > 0.0)) {
                    return Err(bad(no, "scale/zero_point lists disagree or scale <= 0"));
                }
                let grids = scales
                    .into_iter()
                    .zip(zps)
                    .map(|(scale, zero_point)| QuantGrid { scale, zero_point })
                    .collect();
                cfg.sites.insert(
                    name.to_string(),
                    QuantParams {
                        bits,
                        granularity,
                        grids,
                    },
                );
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(no, "expected key = value"))?;
            let v = v.trim();
            let num = || v.parse::<u64>().map_err(|_| bad(no, "expected an integer"));
            match k.trim() {
                "weight_bits" => cfg.weight_bits = num()? as u32,
                "activation_bits" => cfg.activation_bits = num()? as u32,
                "frozen_attention_bits" => cfg.frozen_attention_bits = num()? as u32,
                "calibration_samples" => cfg.calibration_samples = num()? as usize,
                other => return Err(bad(no, &format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// A model with fake-quantized weights and the configuration whose
/// activation quantizers must accompany it.
#[derive(Clone, Debug)]
pub struct QuantizedVit<T> {
    pub vit: Vit<T>,
    pub config: QuantConfig,
}

#[derive(Default)]
struct RangeObserver {
    ranges: BTreeMap<Site, (f64, f64)>,
}

impl<T: Scalar> Probe<T> for RangeObserver {
    fn activation(&mut self, site: Site, x: &Tensor<T>) {
        let r = self
            .ranges
            .entry(site)
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        for &v in x.data() {
            let v = v.as_f64();
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
}

/// Quantizes weights per output channel, then calibrates per-tensor
/// activation ranges by running the weight-quantized model over
/// `calibration` (normalized images).
pub fn quantize_model<T: Scalar>(
    vit: &Vit<T>,
    calibration: &[Tensor<T>],
    weight_bits: u32,
    activation_bits: u32,
    frozen_attention_bits: u32,
) -> Result<QuantizedVit<T>> {
    check_bits(weight_bits)?;
    check_bits(activation_bits)?;
    if calibration.is_empty() {
        return Err(Error::Invalid(
            "activation calibration needs at least one image".into(),
        ));
    }
    let mut config = QuantConfig {
        weight_bits,
        activation_bits,
        frozen_attention_bits,
        calibration_samples: calibration.len(),
        sites: BTreeMap::new(),
    };
    let weight_names = Parameters::<T>::linear_weight_names(vit.config.num_layers);
    let mut qvit = vit.clone();
    for (name, t) in qvit.params.tensors_mut() {
        if weight_names.contains(&name) {
            let qp = calibrate_minmax([&*t], weight_bits, Granularity::PerOutputChannel)?;
            fake_quantize_in_place(t, &qp);
            config.sites.insert(name, qp);
        }
    }
    let mut observer = RangeObserver::default();
    let engine = Engine::new(&qvit);
    for img in calibration {
        engine.forward(img, Some(&mut observer))?;
    }
    for (site, (lo, hi)) in observer.ranges {
        let grid = QuantGrid::from_range(lo, hi, activation_bits);
        config
            .sites
            .insert(site.key(), QuantParams::per_tensor(activation_bits, grid));
    }
    Ok(QuantizedVit { vit: qvit, config })
}

/// [`quantize_model`] calibrated on `ds` images at `indices`, in order, up
/// to [`MAX_CALIBRATION_BATCHES`] batches.
pub fn quantize_on_dataset<T: Scalar>(
    vit: &Vit<T>,
    ds: &Dataset,
    indices: &[usize],
    weight_bits: u32,
    activation_bits: u32,
    frozen_attention_bits: u32,
) -> Result<QuantizedVit<T>> {
    let cap = MAX_CALIBRATION_BATCHES * CALIBRATION_BATCH;
    let images = indices
        .iter()
        .take(cap)
        .map(|&i| vit.image_tensor(ds.image(i)))
        .collect::<Result<Vec<_>>>()?;
    quantize_model(
        vit,
        &images,
        weight_bits,
        activation_bits,
        frozen_attention_bits,
    )
}
