//! A small DeiT-style vision transformer with a CLS token.
//!
//! Pre-norm residual blocks, per-head attention scaling by `1/sqrt(d_h)`,
//! classification from the CLS token. The forward pass exposes probes for
//! attention maps and activations, attention fixing, and activation fake
//! quantization; a hand-derived backward pass supports desk-scale training.

mod backward;
mod checkpoint;
mod forward;
mod params;
mod train;

pub use backward::{loss_and_grads, LossAndGrads};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{argmax, image_patches, mhsa_forward, patchify, Engine, Probe, Site};
pub use params::{LayerParams, Parameters};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyper-parameters. Every parameter shape follows from these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    /// 28×28 grayscale, 7×7 patches (16 tokens + CLS), d_e = 64, 4 layers
    /// of 4 heads, 10 classes.
    fn default() -> Self {
        Self {
            image_size: 28,
            patch_size: 7,
            channels: 1,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            num_classes: 10,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// The gradient-check configuration: d_e = 8, one layer, two heads, four
    /// patch tokens.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            num_classes: 3,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("model {name} must be positive")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Invalid(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count N (CLS excluded).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Attention sequence length N + 1.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Flattened patch length `patch_size² · channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Named integer fields, in checkpoint order.
    pub fn fields(&self) -> [(&'static str, u64); 8] {
        [
            ("image_size", self.image_size as u64),
            ("patch_size", self.patch_size as u64),
            ("channels", self.channels as u64),
            ("embed_dim", self.embed_dim as u64),
            ("num_layers", self.num_layers as u64),
            ("num_heads", self.num_heads as u64),
            ("num_classes", self.num_classes as u64),
            ("mlp_ratio", self.mlp_ratio as u64),
        ]
    }

    pub fn set_field(&mut self, name: &str, value: u64) -> Result<()> {
        let v = usize::try_from(value).map_err(|_| Error::Invalid(format!("{name} too large")))?;
        match name {
            "image_size" => self.image_size = v,
            "patch_size" => self.patch_size = v,
            "channels" => self.channels = v,
            "embed_dim" => self.embed_dim = v,
            "num_layers" => self.num_layers = v,
            "num_heads" => self.num_heads = v,
            "num_classes" => self.num_classes = v,
            "mlp_ratio" => self.mlp_ratio = v,
            _ => return Err(Error::Invalid(format!("unknown model field {name:?}"))),
        }
        Ok(())
    }
}

/// Per-channel input standardization applied to `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputNorm {
    /// No-op normalization for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// A model: architecture, weights, and the input normalization it was
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    pub norm: InputNorm,
}

impl<T: Scalar> Vit<T> {
    /// Fresh model: N(0, 0.02²) weights and embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: Parameters::init(&config, rng),
            norm: InputNorm::identity(config.channels),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Vit<U> {
        Vit {
            config: self.config,
            params: self.params.cast(),
            norm: self.norm.clone(),
        }
    }

    /// Converts a `H×W×C` byte image into a normalized tensor.
    pub fn image_tensor(&self, pixels: &[u8]) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = c.image_size;
        if pixels.len() != s * s * c.channels {
            return Err(Error::Shape {
                op: "image_tensor",
                left: vec![s, s, c.channels],
                right: vec![pixels.len()],
            });
        }
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = i % c.channels;
                let v = (p as f32 / 255.0 - self.norm.mean[ch]) / self.norm.std[ch];
                T::from_f32(v)
            })
            .collect();
        Tensor::new(&[s, s, c.channels], data)
    }
}
