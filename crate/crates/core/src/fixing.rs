//! Attention-weight fixing: choose the lowest-entropy weights and replace
//! them with their calibrated means at inference time.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index::sample;

use crate::binio::{Reader, WriteLe};
use crate::error::{Error, Result};
use crate::quant::quantize_frozen_attention;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::stats::{EntropyMap, HistogramBank, MapDims};
use crate::tensor::Tensor;
use crate::vit::ModelConfig;

pub const PLAN_MAGIC: [u8; 4] = *b"EAMP";
pub const PLAN_VERSION: u32 = 1;

/// Guards `⌊τ·W⌋` against `τ` values such as `0.29` that land just below
/// an integer in binary floating point.
const COUNT_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// One threshold over every `(l, h, i, j)`.
    Global,
    /// A separate threshold and count for each `(l, h)`.
    PerHead,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::PerHead => "per-head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Scope::Global),
            "per-head" => Ok(Scope::PerHead),
            _ => Err(Error::Invalid(format!("unknown scope {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Entropy,
    Random { seed: u64 },
}

/// Number of positions fixed at level `tau` among `w`.
pub fn fixed_count(tau: f64, w: usize) -> usize {
    ((tau * w as f64 + COUNT_GUARD).floor().max(0.0) as usize).min(w)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!(
            "sparsity level {tau} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Positions of `values` in ascending `(value, index)` order.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| match values[a].total_cmp(&values[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}

/// Selects the fixed set of one block: the `k` lowest `(value, index)`
/// pairs. Returns the threshold, the value of the first unselected
/// position (`+∞` when everything is selected).
fn select_block(values: &[f64], tau: f64, mask: &mut [bool]) -> f64 {
    let order = ranked(values);
    let k = fixed_count(tau, values.len());
    for &i in &order[..k] {
        mask[i] = true;
    }
    order.get(k).map_or(f64::INFINITY, |&i| values[i])
}

/// Thresholds `ε_τ` for `scope`: one value for global scope, `L·H` values
/// (flattened `l·H + h`) per head. A position is fixed when its entropy is
/// below its threshold, or equal to it and earlier in `(l, h, i, j)` order
/// than the first unfixed position.
pub fn select_threshold(entropy: &EntropyMap, tau: f64, scope: Scope) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(select(entropy, tau, scope).0)
}

fn select(entropy: &EntropyMap, tau: f64, scope: Scope) -> (Vec<f64>, Vec<bool>) {
    let values = &entropy.map.values;
    let mut mask = vec![false; values.len()];
    match scope {
        Scope::Global => {
            let eps = select_block(values, tau, &mut mask);
            (vec![eps], mask)
        }
        Scope::PerHead => {
            let per = entropy.map.dims[2] * entropy.map.dims[3];
            let eps = values
                .chunks(per)
                .zip(mask.chunks_mut(per))
                .map(|(v, m)| select_block(v, tau, m))
                .collect();
            (eps, mask)
        }
    }
}

/// Self-contained fixing plan over `(L, H, S, S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixPlan {
    pub tau: f64,
    pub scope: Scope,
    pub provenance: Provenance,
    /// Empty for random plans.
    pub thresholds: Vec<f64>,
    /// Bits of the frozen values; `32` keeps full precision.
    pub frozen_bits: u32,
    dims: MapDims,
    mask: Vec<bool>,
    frozen: Vec<f32>,
}

fn frozen_values(bank: &HistogramBank, bits: u32) -> Result<Vec<f32>> {
    let means: Vec<f32> = bank.mean_values()?.iter().map(|&m| m as f32).collect();
    quantize_frozen_attention(&means, bits)
}

fn check_entropy_dims(entropy: &EntropyMap, bank: &HistogramBank) -> Result<()> {
    if entropy.map.dims != bank.dims() {
        return Err(Error::Shape {
            op: "build_plan",
            left: entropy.map.dims.to_vec(),
            right: bank.dims().to_vec(),
        });
    }
    Ok(())
}

/// Fixes the `⌊τ·W⌋` lowest-entropy weights (per scope) to their mean,
/// quantized to `frozen_bits`.
pub fn build_plan(
    entropy: &EntropyMap,
    bank: &HistogramBank,
    tau: f64,
    scope: Scope,
    frozen_bits: u32,
) -> Result<FixPlan> {
    check_tau(tau)?;
    check_entropy_dims(entropy, bank)?;
    let (thresholds, mask) = select(entropy, tau, scope);
    Ok(FixPlan {
        tau,
        scope,
        provenance: Provenance::Entropy,
        thresholds,
        frozen_bits,
        dims: bank.dims(),
        mask,
        frozen: frozen_values(bank, frozen_bits)?,
    })
}

/// Fixes `⌊τ·W⌋` positions drawn uniformly without replacement, with the
/// same frozen values an entropy plan would use.
pub fn random_plan(
    cfg: &ModelConfig,
    bank: &HistogramBank,
    tau: f64,
    seed: u64,
    frozen_bits: u32,
) -> Result<FixPlan> {
    check_tau(tau)?;
    let s = cfg.seq_len();
    let want = [cfg.num_layers, cfg.num_heads, s, s];
    if bank.dims() != want {
        return Err(Error::Shape {
            op: "random_plan",
            left: bank.dims().to_vec(),
            right: want.to_vec(),
        });
    }
    let w = bank.num_weights();
    let mut mask = vec![false; w];
    for i in sample(&mut RngState::new(seed), w, fixed_count(tau, w)) {
        mask[i] = true;
    }
    Ok(FixPlan {
        tau,
        scope: Scope::Global,
        provenance: Provenance::Random { seed },
        thresholds: Vec::new(),
        frozen_bits,
        dims: bank.dims(),
        mask,
        frozen: frozen_values(bank, frozen_bits)?,
    })
}

impl FixPlan {
    pub fn dims(&self) -> MapDims {
        self.dims
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn frozen(&self) -> &[f32] {
        &self.frozen
    }

    pub fn num_fixed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fixed_fraction(&self) -> f64 {
        self.num_fixed() as f64 / self.mask.len().max(1) as f64
    }

    /// Fixed positions per layer.
    pub fn fixed_per_layer(&self) -> Vec<usize> {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        self.mask
            .chunks(per.max(1))
            .map(|c| c.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Whether every position fixed here is also fixed in `other`.
    pub fn is_subset_of(&self, other: &FixPlan) -> bool {
        self.dims == other.dims && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    pub fn check_dims(&self, layers: usize, heads: usize, seq: usize) -> Result<()> {
        if self.dims != [layers, heads, seq, seq] {
            return Err(Error::Shape {
                op: "fixing plan",
                left: self.dims.to_vec(),
                right: vec![layers, heads, seq, seq],
            });
        }
        Ok(())
    }

    fn block(&self, layer: usize, head: usize) -> (usize, usize) {
        let n = self.dims[2] * self.dims[3];
        ((layer * self.dims[1] + head) * n, n)
    }

    /// Mask of one `(l, h)` block.
    pub fn head_mask(&self, layer: usize, head: usize) -> &[bool] {
        let (start, n) = self.block(layer, head);
        &self.mask[start..start + n]
    }

    /// Frozen values of one `(l, h)` block.
    pub fn head_frozen(&self, layer: usize, head: usize) -> &[f32] {
        let (start, n) = self.block(layer, head);
        &self.frozen[start..start + n]
    }

    /// Replaces masked entries of a row-major `S×S` map by their frozen
    /// values. With `renormalize`, rows containing a fixed entry are
    /// rescaled to sum to one.
    pub fn apply_in_place<T: Scalar>(
        &self,
        layer: usize,
        head: usize,
        map: &mut [T],
        renormalize: bool,
    ) {
        let s = self.dims[3];
        let mask = self.head_mask(layer, head);
        let frozen = self.head_frozen(layer, head);
        for (r, row) in map.chunks_mut(s).enumerate() {
            let mut touched = false;
            for (c, v) in row.iter_mut().enumerate() {
                if mask[r * s + c] {
                    *v = T::from_f32(frozen[r * s + c]);
                    touched = true;
                }
            }
            if renormalize && touched {
                let sum: T = row.iter().copied().sum();
                if sum > T::zero() {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                } else {
                    let u = T::one() / T::lit(s as f64);
                    row.iter_mut().for_each(|v| *v = u);
                }
            }
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&PLAN_MAGIC);
        out.put_u32(PLAN_VERSION);
        for d in &self.dims[..3] {
            out.put_u64(*d as u64);
        }
        out.put_f64(self.tau);
        out.put_u8(match self.scope {
            Scope::Global => 0,
            Scope::PerHead => 1,
        });
        out.put_u32(self.thresholds.len() as u32);
        for &t in &self.thresholds {
            out.put_f64(t);
        }
        match self.provenance {
            Provenance::Entropy => {
                out.put_u8(0);
                out.put_u64(0);
            }
            Provenance::Random { seed } => {
                out.put_u8(1);
                out.put_u64(seed);
            }
        }
        out.put_u32(self.frozen_bits);
        let mut packed = vec![0u8; self.mask.len().div_ceil(8)];
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            packed[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&packed);
        out.put_f32s(&self.frozen);
        out
    }
}

/// Plan file (little-endian): magic `EAMP`, version `u32`, `L`, `H`, `S` as
/// `u64`, `τ` as `f64`, scope `u8`, `u32` threshold count and `f64`
/// thresholds, provenance `u8` plus `u64` seed, frozen bits `u32`, the mask
/// bit-packed LSB first, then the frozen values as `f32`.
pub fn write_plan(plan: &FixPlan) -> Vec<u8> {
    plan.to_bytes()
}

pub fn read_plan(bytes: &[u8]) -> Result<FixPlan> {
    let mut r = Reader::new(bytes);
    r.magic(PLAN_MAGIC)?;
    r.version(PLAN_VERSION)?;
    let l = r.usize("layer count")?;
    let h = r.usize("head count")?;
    let s = r.usize("sequence length")?;
    let w = [l, h, s, s]
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("plan dimensions overflow".into()))?;
    let tau = r.f64("tau")?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Format(format!("tau {tau} outside [0, 1]")));
    }
    let scope = match r.u8("scope")? {
        0 => Scope::Global,
        1 => Scope::PerHead,
        x => return Err(Error::Format(format!("unknown scope tag {x}"))),
    };
    let nt = r.u32("threshold count")? as usize;
    let mut thresholds = Vec::with_capacity(nt.min(1 << 16));
    for k in 0..nt {
        thresholds.push(r.f64(&format!("threshold {k}"))?);
    }
    let tag = r.u8("provenance")?;
    let seed = r.u64("provenance seed")?;
    let provenance = match tag {
        0 => Provenance::Entropy,
        1 => Provenance::Random { seed },
        x => return Err(Error::Format(format!("unknown provenance tag {x}"))),
    };
    let frozen_bits = r.u32("frozen bits")?;
    let packed = r.take(w.div_ceil(8), "mask")?;
    let mask: Vec<bool> = (0..w).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    if w % 8 != 0 && packed[w / 8] >> (w % 8) != 0 {
        return Err(Error::Format("nonzero mask padding bits".into()));
    }
    let frozen = r.f32_vec(w, "frozen values")?;
    r.finish()?;
    if let Some(v) = frozen.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Format(format!("frozen value {v} outside [0, 1]")));
    }
    Ok(FixPlan {
        tau,
        scope,
        provenance,
        thresholds,
        frozen_bits,
        dims: [l, h, s, s],
        mask,
        frozen,
    })
}

pub fn save_plan(plan: &FixPlan, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_plan(plan))?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<FixPlan> {
    read_plan(&std::fs::read(path)?)
}

/// Pure form of [`FixPlan::apply_in_place`] for one `S×S` map.
pub fn apply_fixing<T: Scalar>(
    a: &Tensor<T>,
    plan: &FixPlan,
    layer: usize,
    head: usize,
    renormalize: bool,
) -> Result<Tensor<T>> {
    let [l, h, s, _] = plan.dims;
    if a.shape() != [s, s] || layer >= l || head >= h {
        return Err(Error::Shape {
            op: "apply_fixing",
            left: a.shape().to_vec(),
            right: vec![s, s],
        });
    }
    let mut out = a.clone();
    plan.apply_in_place(layer, head, out.data_mut(), renormalize);
    Ok(out)
}
