use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fixing::FixPlan;
use crate::quant::{fake_quantize_in_place, QuantConfig, QuantizedVit};
use crate::scalar::Scalar;
use crate::tensor::{
    gelu, layer_norm_cached, matmul, matmul_nt, softmax_in_place, LayerNormCache, Tensor,
};

use super::{LayerParams, ModelConfig, Parameters, Vit, LN_EPS};

/// Activation points that feed a linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    PatchIn,
    QkvIn(usize),
    ProjIn(usize),
    Fc1In(usize),
    Fc2In(usize),
    HeadIn,
}

impl Site {
    pub fn key(&self) -> String {
        match self {
            Site::PatchIn => "act.patch_in".into(),
            Site::QkvIn(l) => format!("act.layers.{l}.qkv_in"),
            Site::ProjIn(l) => format!("act.layers.{l}.proj_in"),
            Site::Fc1In(l) => format!("act.layers.{l}.fc1_in"),
            Site::Fc2In(l) => format!("act.layers.{l}.fc2_in"),
            Site::HeadIn => "act.head_in".into(),
        }
    }

    pub fn all(num_layers: usize) -> Vec<Site> {
        let mut v = vec![Site::PatchIn];
        for l in 0..num_layers {
            v.extend([
                Site::QkvIn(l),
                Site::ProjIn(l),
                Site::Fc1In(l),
                Site::Fc2In(l),
            ]);
        }
        v.push(Site::HeadIn);
        v
    }
}

/// Observer hooked into the forward pass.
pub trait Probe<T> {
    /// Called once per layer and head with the attention map actually used
    /// (after fixing, if a plan is active).
    fn attention(&mut self, _layer: usize, _head: usize, _map: &Tensor<T>) {}

    /// Called with a linear layer's input before any fake quantization.
    fn activation(&mut self, _site: Site, _x: &Tensor<T>) {}
}

/// Inference setup: a model, optional activation quantization (the model's
/// weights are expected to be quantized already), and an optional fixing
/// plan.
#[derive(Clone, Copy)]
pub struct Engine<'a, T> {
    pub vit: &'a Vit<T>,
    pub quant: Option<&'a QuantConfig>,
    pub plan: Option<&'a FixPlan>,
    pub renormalize: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache<T> {
    pub ln1: LayerNormCache<T>,
    pub h: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub attn: Vec<Tensor<T>>,
    pub o: Tensor<T>,
    pub ln2: LayerNormCache<T>,
    pub h2: Tensor<T>,
    pub u: Tensor<T>,
    pub g: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct ForwardCache<T> {
    pub patches: Option<Tensor<T>>,
    pub layers: Vec<LayerCache<T>>,
    pub lnf: Option<LayerNormCache<T>>,
    pub cls_out: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct AttnCache<T> {
    h: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Vec<Tensor<T>>,
    o: Tensor<T>,
}

/// Splits an `H×W×C` image into `N` flattened patches (row-major over the
/// patch grid; each patch flattened in `(y, x, c)` order).
pub fn image_patches<T: Scalar>(image: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    if image.shape() != [s, s, cfg.channels] {
        return Err(Error::Shape {
            op: "patchify",
            left: image.shape().to_vec(),
            right: vec![s, s, cfg.channels],
        });
    }
    let p = cfg.patch_size;
    let c = cfg.channels;
    let grid = cfg.grid();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    let px = image.data();
    for pr in 0..grid {
        for pc in 0..grid {
            for y in 0..p {
                let row = (pr * p + y) * s;
                let start = (row + pc * p) * c;
                out.extend_from_slice(&px[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

/// Token matrix `(N+1)×d_e`: CLS row then projected patches, plus positional
/// embeddings.
pub fn patchify<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ModelConfig,
    params: &Parameters<T>,
) -> Result<Tensor<T>> {
    let patches = image_patches(image, cfg)?;
    embed_patches(&patches, cfg, params)
}

fn embed_patches<T: Scalar>(
    patches: &Tensor<T>,
    cfg: &ModelConfig,
    params: &Parameters<T>,
) -> Result<Tensor<T>> {
    let mut proj = matmul(patches, &params.patch_w)?;
    proj.add_row_vector(&params.patch_b)?;
    let d = cfg.embed_dim;
    let mut data = Vec::with_capacity(cfg.seq_len() * d);
    data.extend_from_slice(params.cls.data());
    data.extend_from_slice(proj.data());
    let mut x = Tensor::new(&[cfg.seq_len(), d], data)?;
    x.add_assign(&params.pos)?;
    Ok(x)
}

/// Columns `[head·d_h, (head+1)·d_h)` of an `S×d_e` matrix.
pub(crate) fn head_slice<T: Scalar>(x: &Tensor<T>, head: usize, dh: usize) -> Tensor<T> {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x.row(r)[head * dh..(head + 1) * dh]);
    }
    Tensor::new(&[rows, dh], out).expect("head slice shape")
}

pub(crate) fn head_write<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, head: usize, dh: usize) {
    for r in 0..dst.rows() {
        dst.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(src.row(r));
    }
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub fn new(vit: &'a Vit<T>) -> Self {
        Self {
            vit,
            quant: None,
            plan: None,
            renormalize: false,
        }
    }

    /// Fake-quantized inference: quantized weights plus activation quantizers.
    pub fn quantized(q: &'a QuantizedVit<T>) -> Self {
        Self {
            vit: &q.vit,
            quant: Some(&q.config),
            plan: None,
            renormalize: false,
        }
    }

    pub fn with_plan(mut self, plan: Option<&'a FixPlan>, renormalize: bool) -> Self {
        self.plan = plan;
        self.renormalize = renormalize;
        self
    }

    fn site(&self, site: Site, x: &mut Tensor<T>, probe: &mut Option<&mut dyn Probe<T>>) {
        if let Some(p) = probe.as_deref_mut() {
            p.activation(site, x);
        }
        if let Some(qp) = self.quant.and_then(|q| q.activation(site)) {
            fake_quantize_in_place(x, qp);
        }
    }

    /// Logits for one normalized `H×W×C` image.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        probe: Option<&mut dyn Probe<T>>,
    ) -> Result<Tensor<T>> {
        self.run(image, probe, None)
    }

    pub(crate) fn run(
        &self,
        image: &Tensor<T>,
        mut probe: Option<&mut dyn Probe<T>>,
        mut cache: Option<&mut ForwardCache<T>>,
    ) -> Result<Tensor<T>> {
        let cfg = &self.vit.config;
        let params = &self.vit.params;
        if let Some(plan) = self.plan {
            plan.check_dims(cfg.num_layers, cfg.num_heads, cfg.seq_len())?;
        }
        let mut patches = image_patches(image, cfg)?;
        self.site(Site::PatchIn, &mut patches, &mut probe);
        let mut x = embed_patches(&patches, cfg, params)?;
        if let Some(c) = cache.as_deref_mut() {
            c.patches = Some(patches);
            c.layers.clear();
        }
        let eps = T::lit(LN_EPS);
        for (l, lp) in params.layers.iter().enumerate() {
            let (h, ln1) = layer_norm_cached(&x, &lp.ln1_g, &lp.ln1_b, eps)?;
            let want = cache.is_some();
            let (attn_out, ac) = self.mhsa(&h, l, lp, &mut probe, want)?;
            x.add_assign(&attn_out)?;
            let (mut h2, ln2) = layer_norm_cached(&x, &lp.ln2_g, &lp.ln2_b, eps)?;
            let h2_raw = if want { Some(h2.clone()) } else { None };
            self.site(Site::Fc1In(l), &mut h2, &mut probe);
            let u = linear(&h2, &lp.w_fc1, &lp.b_fc1)?;
            let mut g = gelu(&u);
            let g_raw = if want { Some(g.clone()) } else { None };
            self.site(Site::Fc2In(l), &mut g, &mut probe);
            let m = linear(&g, &lp.w_fc2, &lp.b_fc2)?;
            x.add_assign(&m)?;
            if !x.all_finite() {
                return Err(Error::NonFinite(format!("layer {l} output")));
            }
            if let (Some(c), Some(ac)) = (cache.as_deref_mut(), ac) {
                c.layers.push(LayerCache {
                    ln1,
                    h: ac.h,
                    q: ac.q,
                    k: ac.k,
                    v: ac.v,
                    attn: ac.attn,
                    o: ac.o,
                    ln2,
                    h2: h2_raw.expect("cached"),
                    u,
                    g: g_raw.expect("cached"),
                });
            }
        }
        let cls_row = Tensor::new(&[1, cfg.embed_dim], x.row(0).to_vec())?;
        let (mut c, lnf) = layer_norm_cached(&cls_row, &params.norm_g, &params.norm_b, eps)?;
        if let Some(cc) = cache.as_deref_mut() {
            cc.lnf = Some(lnf);
            cc.cls_out = Some(c.clone());
        }
        self.site(Site::HeadIn, &mut c, &mut probe);
        let logits = linear(&c, &params.head_w, &params.head_b)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        logits.reshape(&[cfg.num_classes])
    }

    fn mhsa(
        &self,
        h: &Tensor<T>,
        layer: usize,
        lp: &LayerParams<T>,
        probe: &mut Option<&mut dyn Probe<T>>,
        want_cache: bool,
    ) -> Result<(Tensor<T>, Option<AttnCache<T>>)> {
        let cfg = &self.vit.config;
        let dh = cfg.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut hq = h.clone();
        self.site(Site::QkvIn(layer), &mut hq, probe);
        let q = linear(&hq, &lp.w_q, &lp.b_q)?;
        let k = linear(&hq, &lp.w_k, &lp.b_k)?;
        let v = linear(&hq, &lp.w_v, &lp.b_v)?;
        let mut o = Tensor::zeros(&[cfg.seq_len(), cfg.embed_dim]);
        let mut maps = Vec::new();
        for head in 0..cfg.num_heads {
            let qh = head_slice(&q, head, dh);
            let kh = head_slice(&k, head, dh);
            let vh = head_slice(&v, head, dh);
            let mut a = matmul_nt(&qh, &kh)?;
            a.scale(scale);
            if !a.all_finite() {
                return Err(Error::NonFinite(format!(
                    "attention logits, layer {layer} head {head}"
                )));
            }
            let s = a.cols();
            for row in a.data_mut().chunks_mut(s) {
                softmax_in_place(row);
            }
            if let Some(plan) = self.plan {
                plan.apply_in_place(layer, head, a.data_mut(), self.renormalize);
            }
            if !a.all_finite() {
                return Err(Error::NonFinite(format!(
                    "attention map, layer {layer} head {head}"
                )));
            }
            if let Some(p) = probe.as_deref_mut() {
                p.attention(layer, head, &a);
            }
            let oh = matmul(&a, &vh)?;
            head_write(&mut o, &oh, head, dh);
            if want_cache {
                maps.push(a);
            }
        }
        let o_raw = if want_cache { Some(o.clone()) } else { None };
        self.site(Site::ProjIn(layer), &mut o, probe);
        let out = linear(&o, &lp.w_proj, &lp.b_proj)?;
        let cache = o_raw.map(|o| AttnCache {
            h: h.clone(),
            q,
            k,
            v,
            attn: maps,
            o,
        });
        Ok((out, cache))
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        let logits = self.forward(image, None)?;
        Ok(argmax(logits.data()))
    }

    /// Predicted class for every image of `ds`, evaluated in parallel.
    pub fn predictions(&self, ds: &Dataset) -> Result<Vec<usize>> {
        (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let img = self.vit.image_tensor(ds.image(i))?;
                self.predict(&img)
            })
            .collect()
    }

    /// Top-1 accuracy in percent.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Invalid("accuracy of an empty dataset".into()));
        }
        let preds = self.predictions(ds)?;
        let correct = preds
            .iter()
            .enumerate()
            .filter(|(i, &p)| p == ds.label(*i) as usize)
            .count();
        Ok(100.0 * correct as f64 / ds.len() as f64)
    }
}

/// One multi-head self-attention module applied to `x` (`(N+1)×d_e`, the
/// already-normalized block input), including the output projection.
pub fn mhsa_forward<T: Scalar>(
    engine: &Engine<'_, T>,
    x: &Tensor<T>,
    layer: usize,
    mut probe: Option<&mut dyn Probe<T>>,
) -> Result<Tensor<T>> {
    let lp = engine
        .vit
        .params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range")))?;
    let cfg = &engine.vit.config;
    if x.shape() != [cfg.seq_len(), cfg.embed_dim] {
        return Err(Error::Shape {
            op: "mhsa_forward",
            left: x.shape().to_vec(),
            right: vec![cfg.seq_len(), cfg.embed_dim],
        });
    }
    if let Some(plan) = engine.plan {
        plan.check_dims(cfg.num_layers, cfg.num_heads, cfg.seq_len())?;
    }
    engine.mhsa(x, layer, lp, &mut probe, false).map(|(o, _)| o)
}

/// Index of the largest value; the first one on ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
