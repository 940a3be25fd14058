//! Per-weight attention statistics: histogram banks, entropy maps, mean
//! maps and KL divergence maps.

mod calibrate;
mod exact;
mod io;

pub use calibrate::{
    calibration_indices, run_calibration, run_calibration_sharded, AttentionRecorder,
    CalibrationConfig, CalibrationMode,
};
pub use exact::ExactSum;
pub use io::{load_bank, read_bank, save_bank, write_bank, PgmImage, BANK_MAGIC, BANK_VERSION};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance for attention values just outside `[0, 1]`.
pub const RANGE_SLACK: f64 = 1e-6;

/// Histogram bin of an attention value: `floor(v·2^b)`, with `1.0` clamped
/// into the top bin.
pub fn bin_index(value: f64, bits: u32) -> Result<usize> {
    if !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&value) {
        return Err(Error::Range { value });
    }
    let bins = 1usize << bits;
    let v = value.clamp(0.0, 1.0);
    Ok(((v * bins as f64).floor() as usize).min(bins - 1))
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Invalid(format!(
            "histogram bits {bits} outside 1..=16"
        )));
    }
    Ok(())
}

/// Attention maps of one image for every layer and head, flattened
/// `(layer, head, i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layers: usize,
    pub heads: usize,
    pub seq: usize,
    pub values: Vec<f32>,
}

impl AttentionRecord {
    pub fn zeros(layers: usize, heads: usize, seq: usize) -> Self {
        Self {
            layers,
            heads,
            seq,
            values: vec![0.0; layers * heads * seq * seq],
        }
    }

    pub fn map(&self, layer: usize, head: usize) -> &[f32] {
        let n = self.seq * self.seq;
        let start = (layer * self.heads + head) * n;
        &self.values[start..start + n]
    }

    pub fn map_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let n = self.seq * self.seq;
        let start = (layer * self.heads + head) * n;
        &mut self.values[start..start + n]
    }
}

/// Dimensions `(L, H, S, S)` of a per-weight map, `S = N + 1`.
pub type MapDims = [usize; 4];

/// Streaming per-weight histograms and mean accumulators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramBank {
    bits: u32,
    dims: MapDims,
    images: u64,
    /// `(l, h, i, j, bin)`, bins innermost.
    counts: Vec<u32>,
    sums: Vec<ExactSum>,
}

impl HistogramBank {
    pub fn new(bits: u32, layers: usize, heads: usize, seq: usize) -> Result<Self> {
        check_bits(bits)?;
        let weights = layers * heads * seq * seq;
        Ok(Self {
            bits,
            dims: [layers, heads, seq, seq],
            images: 0,
            counts: vec![0; weights << bits],
            sums: vec![ExactSum::ZERO; weights],
        })
    }

    pub(crate) fn from_parts(
        bits: u32,
        dims: MapDims,
        images: u64,
        counts: Vec<u32>,
        sums: Vec<ExactSum>,
    ) -> Self {
        Self {
            bits,
            dims,
            images,
            counts,
            sums,
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn num_bins(&self) -> usize {
        1 << self.bits
    }

    pub fn dims(&self) -> MapDims {
        self.dims
    }

    /// Number of accumulated images `M`.
    pub fn images(&self) -> u64 {
        self.images
    }

    pub fn num_weights(&self) -> usize {
        self.sums.len()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// The `2^b` counters of weight `w` (flat `(l, h, i, j)` index).
    pub fn histogram(&self, w: usize) -> &[u32] {
        let b = self.num_bins();
        &self.counts[w * b..(w + 1) * b]
    }

    pub fn sums(&self) -> &[ExactSum] {
        &self.sums
    }

    fn check_record(&self, r: &AttentionRecord) -> Result<()> {
        if [r.layers, r.heads, r.seq, r.seq] != self.dims || r.values.len() != self.num_weights() {
            return Err(Error::Shape {
                op: "accumulate",
                left: self.dims.to_vec(),
                right: vec![r.layers, r.heads, r.seq, r.seq],
            });
        }
        Ok(())
    }

    /// Adds one image. The bank is left untouched on error.
    pub fn accumulate(&mut self, record: &AttentionRecord) -> Result<()> {
        self.check_record(record)?;
        if self.images >= u32::MAX as u64 {
            return Err(Error::CounterSaturated(self.images + 1));
        }
        let bins: Vec<usize> = record
            .values
            .iter()
            .map(|&v| bin_index(v as f64, self.bits))
            .collect::<Result<_>>()?;
        let nb = self.num_bins();
        for (w, (&bin, &v)) in bins.iter().zip(&record.values).enumerate() {
            self.counts[w * nb + bin] += 1;
            self.sums[w].add_f32(v);
        }
        self.images += 1;
        Ok(())
    }

    /// Elementwise sum of two banks.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.bits != other.bits || self.dims != other.dims {
            return Err(Error::Mismatch(format!(
                "cannot merge a {}-bit {:?} bank with a {}-bit {:?} bank",
                self.bits, self.dims, other.bits, other.dims
            )));
        }
        let images = self.images + other.images;
        if images > u32::MAX as u64 {
            return Err(Error::CounterSaturated(images));
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        let sums = self
            .sums
            .iter()
            .zip(&other.sums)
            .map(|(a, b)| {
                let mut s = *a;
                s.add(b);
                s
            })
            .collect();
        Ok(Self {
            bits: self.bits,
            dims: self.dims,
            images,
            counts,
            sums,
        })
    }

    fn require_images(&self) -> Result<f64> {
        if self.images == 0 {
            return Err(Error::EmptyCalibration);
        }
        Ok(self.images as f64)
    }

    /// Mean attention per weight, flattened `(l, h, i, j)`.
    pub fn mean_values(&self) -> Result<Vec<f64>> {
        let m = self.require_images()?;
        Ok(self.sums.iter().map(|s| s.as_f64() / m).collect())
    }
}

/// Per-weight real values over `(L, H, S, S)`, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub dims: MapDims,
    pub values: Vec<f64>,
}

impl WeightMap {
    pub fn flat_index(&self, l: usize, h: usize, i: usize, j: usize) -> usize {
        let [_, nh, s, _] = self.dims;
        ((l * nh + h) * s + i) * s + j
    }

    pub fn get(&self, l: usize, h: usize, i: usize, j: usize) -> f64 {
        self.values[self.flat_index(l, h, i, j)]
    }

    /// The `S×S` block of one layer and head.
    pub fn head(&self, l: usize, h: usize) -> &[f64] {
        let s = self.dims[2];
        let start = self.flat_index(l, h, 0, 0);
        &self.values[start..start + s * s]
    }

    /// Row 0 of a head: the CLS token's attention.
    pub fn cls_row(&self, l: usize, h: usize) -> &[f64] {
        &self.head(l, h)[..self.dims[3]]
    }

    /// `layer,head,i,j,value` rows for one head, or every head.
    pub fn to_csv(&self, only: Option<(usize, usize)>) -> String {
        let [nl, nh, s, _] = self.dims;
        let mut out = String::from("layer,head,i,j,value\n");
        for l in 0..nl {
            for h in 0..nh {
                if only.is_some_and(|o| o != (l, h)) {
                    continue;
                }
                for i in 0..s {
                    for j in 0..s {
                        out.push_str(&format!("{l},{h},{i},{j},{:?}\n", self.get(l, h, i, j)));
                    }
                }
            }
        }
        out
    }

    /// Like [`to_csv`](Self::to_csv) but only row `i = 0` of each head.
    pub fn cls_csv(&self, only: Option<(usize, usize)>) -> String {
        let [nl, nh, _, s] = self.dims;
        let mut out = String::from("layer,head,i,j,value\n");
        for l in 0..nl {
            for h in 0..nh {
                if only.is_some_and(|o| o != (l, h)) {
                    continue;
                }
                for (j, v) in self.cls_row(l, h).iter().enumerate().take(s) {
                    out.push_str(&format!("{l},{h},0,{j},{v:?}\n"));
                }
            }
        }
        out
    }

    /// 8-bit grayscale rendering of one head, min-max normalized.
    pub fn to_pgm(&self, l: usize, h: usize) -> PgmImage {
        let s = self.dims[2];
        PgmImage::from_values(self.head(l, h), s, s)
    }
}

/// Per-weight Shannon entropy in bits.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub bits: u32,
    pub map: WeightMap,
}

/// Per-weight KL divergence in bits, with per-head summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceMap {
    pub map: WeightMap,
    /// Mean over the `S²` weights of each `(l, h)`, flattened.
    pub head_mean: Vec<f64>,
    pub head_max: Vec<f64>,
}

/// Entropy in bits of the empirical distribution `counts / total`.
pub fn histogram_entropy(counts: &[u32], total: u64) -> f64 {
    let m = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / m;
            h -= p * p.log2();
        }
    }
    h.max(0.0)
}

pub fn entropy_map(bank: &HistogramBank) -> Result<EntropyMap> {
    bank.require_images()?;
    let cap = bank.bits as f64;
    let values = (0..bank.num_weights())
        .map(|w| histogram_entropy(bank.histogram(w), bank.images).min(cap))
        .collect();
    Ok(EntropyMap {
        bits: bank.bits,
        map: WeightMap {
            dims: bank.dims,
            values,
        },
    })
}

/// Mean attention map of every `(l, h)`, indexed `l·H + h`.
pub fn mean_map(bank: &HistogramBank) -> Result<Vec<Tensor<f64>>> {
    let means = bank.mean_values()?;
    let s = bank.dims[2];
    means
        .chunks(s * s)
        .map(|c| Tensor::new(&[s, s], c.to_vec()))
        .collect()
}

/// KL divergence in bits between two bin-count histograms. Bins where `q`
/// is empty but `p` is not are floored at `1/(M_q·2^b)`, after which `q` is
/// renormalized.
pub fn histogram_kl(p: &[u32], mp: u64, q: &[u32], mq: u64) -> f64 {
    let floor = 1.0 / (mq as f64 * p.len() as f64);
    let mq = mq as f64;
    let mp = mp as f64;
    let floored = p.iter().zip(q).any(|(&a, &b)| a > 0 && b == 0);
    let qv = |a: u32, b: u32| {
        if a > 0 && b == 0 {
            floor
        } else {
            b as f64 / mq
        }
    };
    let z = if floored {
        p.iter().zip(q).map(|(&a, &b)| qv(a, b)).sum::<f64>()
    } else {
        1.0
    };
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0 {
            let pk = a as f64 / mp;
            kl += pk * (pk / (qv(a, b) / z)).log2();
        }
    }
    kl.max(0.0)
}

pub fn kl_map(p: &HistogramBank, q: &HistogramBank) -> Result<DivergenceMap> {
    if p.bits != q.bits || p.dims != q.dims {
        return Err(Error::Mismatch(format!(
            "KL between a {}-bit {:?} bank and a {}-bit {:?} bank",
            p.bits, p.dims, q.bits, q.dims
        )));
    }
    p.require_images()?;
    q.require_images()?;
    let values: Vec<f64> = (0..p.num_weights())
        .map(|w| histogram_kl(p.histogram(w), p.images, q.histogram(w), q.images))
        .collect();
    let per_head = p.dims[2] * p.dims[3];
    let head_mean = values
        .chunks(per_head)
        .map(|c| c.iter().sum::<f64>() / per_head as f64)
        .collect();
    let head_max = values
        .chunks(per_head)
        .map(|c| c.iter().fold(0.0f64, |m, &v| m.max(v)))
        .collect();
    Ok(DivergenceMap {
        map: WeightMap {
            dims: p.dims,
            values,
        },
        head_mean,
        head_max,
    })
}
