use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{randn, Tensor};

use super::ModelConfig;

const INIT_STD: f64 = 0.02;

/// Weights of one transformer block. Linear weights are stored
/// `in × out`, so `y = x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc1: Tensor<T>,
    pub b_fc1: Tensor<T>,
    pub w_fc2: Tensor<T>,
    pub b_fc2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_g, "ln1.g");
        $m!(ln1_b, "ln1.b");
        $m!(w_q, "attn.w_q");
        $m!(b_q, "attn.b_q");
        $m!(w_k, "attn.w_k");
        $m!(b_k, "attn.b_k");
        $m!(w_v, "attn.w_v");
        $m!(b_v, "attn.b_v");
        $m!(w_proj, "attn.w_proj");
        $m!(b_proj, "attn.b_proj");
        $m!(ln2_g, "ln2.g");
        $m!(ln2_b, "ln2.b");
        $m!(w_fc1, "mlp.w_fc1");
        $m!(b_fc1, "mlp.b_fc1");
        $m!(w_fc2, "mlp.w_fc2");
        $m!(b_fc2, "mlp.b_fc2");
    };
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let hid = cfg.hidden_dim();
        let z = |s: &[usize]| Tensor::zeros(s);
        Self {
            ln1_g: Tensor::full(&[d], T::one()),
            ln1_b: z(&[d]),
            w_q: z(&[d, d]),
            b_q: z(&[d]),
            w_k: z(&[d, d]),
            b_k: z(&[d]),
            w_v: z(&[d, d]),
            b_v: z(&[d]),
            w_proj: z(&[d, d]),
            b_proj: z(&[d]),
            ln2_g: Tensor::full(&[d], T::one()),
            ln2_b: z(&[d]),
            w_fc1: z(&[d, hid]),
            b_fc1: z(&[hid]),
            w_fc2: z(&[hid, d]),
            b_fc2: z(&[d]),
        }
    }
}

fn normal<T: Scalar>(rng: &mut RngState, shape: &[usize]) -> Tensor<T> {
    let mut t = randn(rng, shape);
    t.scale(T::lit(INIT_STD));
    t
}

impl<T: Scalar> Parameters<T> {
    /// All-zero tensors shaped by `cfg` (layer-norm gains set to one).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_w: Tensor::zeros(&[cfg.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            cls: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[cfg.seq_len(), d]),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams::zeros(cfg))
                .collect(),
            norm_g: Tensor::full(&[d], T::one()),
            norm_b: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, cfg.num_classes]),
            head_b: Tensor::zeros(&[cfg.num_classes]),
        }
    }

    /// Zero tensors everywhere, including the gains; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data_mut().fill(T::zero());
        }
        out
    }

    pub fn init(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(cfg);
        let d = cfg.embed_dim;
        let hid = cfg.hidden_dim();
        p.patch_w = normal(rng, &[cfg.patch_dim(), d]);
        p.cls = normal(rng, &[d]);
        p.pos = normal(rng, &[cfg.seq_len(), d]);
        for layer in &mut p.layers {
            layer.w_q = normal(rng, &[d, d]);
            layer.w_k = normal(rng, &[d, d]);
            layer.w_v = normal(rng, &[d, d]);
            layer.w_proj = normal(rng, &[d, d]);
            layer.w_fc1 = normal(rng, &[d, hid]);
            layer.w_fc2 = normal(rng, &[hid, d]);
        }
        p.head_w = normal(rng, &[d, cfg.num_classes]);
        p
    }

    /// Every tensor with its stable name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
            ("cls".into(), &self.cls),
            ("pos".into(), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($f:ident, $n:expr) => {
                    out.push((format!("layers.{l}.{}", $n), &layer.$f));
                };
            }
            layer_fields!(push);
        }
        out.push(("norm.g".into(), &self.norm_g));
        out.push(("norm.b".into(), &self.norm_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("patch.w".into(), &mut self.patch_w),
            ("patch.b".into(), &mut self.patch_b),
            ("cls".into(), &mut self.cls),
            ("pos".into(), &mut self.pos),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            macro_rules! push {
                ($f:ident, $n:expr) => {
                    out.push((format!("layers.{l}.{}", $n), &mut layer.$f));
                };
            }
            layer_fields!(push);
        }
        out.push(("norm.g".into(), &mut self.norm_g));
        out.push(("norm.b".into(), &mut self.norm_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    /// Names of the linear-layer weight matrices (the weight quantization
    /// sites).
    pub fn linear_weight_names(num_layers: usize) -> Vec<String> {
        let mut names = vec!["patch.w".to_string()];
        for l in 0..num_layers {
            for w in [
                "attn.w_q",
                "attn.w_k",
                "attn.w_v",
                "attn.w_proj",
                "mlp.w_fc1",
                "mlp.w_fc2",
            ] {
                names.push(format!("layers.{l}.{w}"));
            }
        }
        names.push("head.w".into());
        names
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let cast_layer = |l: &LayerParams<T>| LayerParams {
            ln1_g: l.ln1_g.cast(),
            ln1_b: l.ln1_b.cast(),
            w_q: l.w_q.cast(),
            b_q: l.b_q.cast(),
            w_k: l.w_k.cast(),
            b_k: l.b_k.cast(),
            w_v: l.w_v.cast(),
            b_v: l.b_v.cast(),
            w_proj: l.w_proj.cast(),
            b_proj: l.b_proj.cast(),
            ln2_g: l.ln2_g.cast(),
            ln2_b: l.ln2_b.cast(),
            w_fc1: l.w_fc1.cast(),
            b_fc1: l.b_fc1.cast(),
            w_fc2: l.w_fc2.cast(),
            b_fc2: l.b_fc2.cast(),
        };
        Parameters {
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            cls: self.cls.cast(),
            pos: self.pos.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
            norm_g: self.norm_g.cast(),
            norm_b: self.norm_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b).expect("parameter sets share a config");
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
