//! Analytic FLOPs of the transformer layers and the theoretical savings of
//! a fixing plan.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fixing::FixPlan;
use crate::vit::ModelConfig;

/// `4·N·d² + 2·N²·d`: the Q/K/V/output projections plus the two attention
/// products.
pub fn flops_mhsa(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

/// `8·N·d²`: two projections through a `4d` hidden layer.
pub fn flops_mlp(n: u64, d: u64) -> u64 {
    8 * n * d * d
}

/// `12·N·d² + 2·N²·d`.
pub fn flops_layer(n: u64, d: u64) -> u64 {
    12 * n * d * d + 2 * n * n * d
}

pub const SAVINGS_CAVEAT: &str = "theoretical: fixed weights replace softmax outputs, so the full \
QK^T product is still computed; savings assume each fixed position's logit dot-product is skipped";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFlops {
    pub layer: usize,
    pub mhsa_flops: u64,
    pub mlp_flops: u64,
    pub layer_flops: u64,
    pub fixed_positions: u64,
    pub saved_flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    /// Sequence length the formulas were evaluated at (`N + 1`).
    pub seq_len: u64,
    pub embed_dim: u64,
    pub head_dim: u64,
    pub layers: Vec<LayerFlops>,
    pub total_flops: u64,
    pub fixed_fraction: f64,
    pub saved_flops: u64,
    /// `saved_flops / total_flops` in percent.
    pub saved_pct: f64,
    pub caveat: &'static str,
}

/// Per-layer FLOPs of `cfg` and the savings of `plan`, at `2·d_h` FLOPs per
/// fixed position.
pub fn savings(plan: Option<&FixPlan>, cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let s = cfg.seq_len() as u64;
    let d = cfg.embed_dim as u64;
    let dh = cfg.head_dim() as u64;
    let fixed = match plan {
        Some(p) => {
            p.check_dims(cfg.num_layers, cfg.num_heads, cfg.seq_len())?;
            p.fixed_per_layer()
        }
        None => vec![0; cfg.num_layers],
    };
    if fixed.len() != cfg.num_layers {
        return Err(Error::Invalid("plan layer count mismatch".into()));
    }
    let layers: Vec<LayerFlops> = fixed
        .iter()
        .enumerate()
        .map(|(layer, &f)| LayerFlops {
            layer,
            mhsa_flops: flops_mhsa(s, d),
            mlp_flops: flops_mlp(s, d),
            layer_flops: flops_layer(s, d),
            fixed_positions: f as u64,
            saved_flops: f as u64 * 2 * dh,
        })
        .collect();
    let total_flops: u64 = layers.iter().map(|l| l.layer_flops).sum();
    let saved_flops: u64 = layers.iter().map(|l| l.saved_flops).sum();
    Ok(FlopsReport {
        seq_len: s,
        embed_dim: d,
        head_dim: dh,
        total_flops,
        fixed_fraction: plan.map_or(0.0, |p| p.fixed_fraction()),
        saved_flops,
        saved_pct: 100.0 * saved_flops as f64 / total_flops as f64,
        layers,
        caveat: SAVINGS_CAVEAT,
    })
}

impl FlopsReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("layer,mhsa_flops,mlp_flops,layer_flops,fixed_positions,saved_flops\n");
        for l in &self.layers {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                l.layer, l.mhsa_flops, l.mlp_flops, l.layer_flops, l.fixed_positions, l.saved_flops
            )
            .unwrap();
        }
        let fixed: u64 = self.layers.iter().map(|l| l.fixed_positions).sum();
        let mhsa: u64 = self.layers.iter().map(|l| l.mhsa_flops).sum();
        let mlp: u64 = self.layers.iter().map(|l| l.mlp_flops).sum();
        writeln!(
            s,
            "total,{mhsa},{mlp},{},{fixed},{}",
            self.total_flops, self.saved_flops
        )
        .unwrap();
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "sequence length (N+1) = {}, d_e = {}, d_h = {}",
            self.seq_len, self.embed_dim, self.head_dim
        )
        .unwrap();
        for l in &self.layers {
            writeln!(
                s,
                "layer {}: mhsa {} + mlp {} = {} FLOPs; {} fixed positions save {}",
                l.layer, l.mhsa_flops, l.mlp_flops, l.layer_flops, l.fixed_positions, l.saved_flops
            )
            .unwrap();
        }
        writeln!(s, "total {} FLOPs", self.total_flops).unwrap();
        writeln!(
            s,
            "fixed fraction {:.4}, saved {} FLOPs ({:.4}%)",
            self.fixed_fraction, self.saved_flops, self.saved_pct
        )
        .unwrap();
        writeln!(s, "note: {}", self.caveat).unwrap();
        s
    }
}
