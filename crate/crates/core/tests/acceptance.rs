//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use eam_core::complexity::{flops_layer, flops_mhsa, flops_mlp};
use eam_core::data::{generate_shapes, Dataset, SyntheticSpec};
use eam_core::fixing::{build_plan, random_plan, read_plan, write_plan, FixPlan, Scope};
use eam_core::quant::{quantize_on_dataset, QuantizedVit};
use eam_core::stats::{
    calibration_indices, entropy_map, kl_map, mean_map, read_bank, run_calibration,
    run_calibration_sharded, write_bank, AttentionRecorder, CalibrationConfig, CalibrationMode,
    HistogramBank,
};
use eam_core::tensor::{mac_count, randn, reset_mac_count};
use eam_core::vit::{
    loss_and_grads, mhsa_forward, read_checkpoint, train, write_checkpoint, Engine, ModelConfig,
    TrainConfig, Vit,
};
use eam_core::{Error, RngState, Tensor};
use rand::Rng;

struct Outcome {
    id: u32,
    pass: bool,
}

fn report(out: &mut Vec<Outcome>, id: u32, name: &str, pass: bool, detail: String) {
    println!(
        "{} criterion {id:>2} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    out.push(Outcome { id, pass });
}

fn random_dataset(n: usize, cfg: &ModelConfig, seed: u64) -> Dataset {
    let mut rng = RngState::new(seed);
    let per = cfg.image_size * cfg.image_size * cfg.channels;
    let images = (0..n * per).map(|_| rng.random::<u8>()).collect();
    let labels = (0..n).map(|i| (i % cfg.num_classes) as u8).collect();
    Dataset::new(images, labels, cfg.image_size, cfg.image_size, cfg.channels).unwrap()
}

fn full_calibration(mode: CalibrationMode) -> CalibrationConfig {
    CalibrationConfig {
        fraction: 1.0,
        mode,
        ..Default::default()
    }
}

fn entropy_oracle(vit: &Vit<f32>, ds: &Dataset, bits: u32) -> Vec<f64> {
    let cfg = &vit.config;
    let s = cfg.seq_len();
    let bins = (1u64 << bits) as f64;
    let mut hists: Vec<BTreeMap<u64, u64>> =
        vec![BTreeMap::new(); cfg.num_layers * cfg.num_heads * s * s];
    for i in 0..ds.len() {
        let mut rec = AttentionRecorder::new(cfg.num_layers, cfg.num_heads, s);
        let img = vit.image_tensor(ds.image(i)).unwrap();
        Engine::new(vit).forward(&img, Some(&mut rec)).unwrap();
        for (h, &v) in hists.iter_mut().zip(&rec.record.values) {
            let bin = ((v as f64).clamp(0.0, 1.0) * bins).floor().min(bins - 1.0) as u64;
            *h.entry(bin).or_default() += 1;
        }
    }
    let m = ds.len() as f64;
    hists
        .iter()
        .map(|h| {
            let mut e = 0.0f64;
            for &c in h.values() {
                let p = c as f64 / m;
                e -= p * p.log2();
            }
            e.max(0.0).min(bits as f64)
        })
        .collect()
}

fn criterion_1(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let cfg = ModelConfig::tiny();
    let vit = Vit::<f32>::init(cfg, &mut RngState::new(21)).unwrap();
    let ds = random_dataset(20, &cfg, 22);
    let bank = run_calibration(
        &vit,
        None,
        &ds,
        &full_calibration(CalibrationMode::FullPrecision),
    )
    .unwrap();
    let got = entropy_map(&bank).unwrap().map.values;
    let want = entropy_oracle(&vit, &ds, 8);
    let exact = bank.images() == 20 && got == want;
    let secs = t.elapsed().as_secs_f64();
    report(
        out,
        1,
        "entropy matches brute-force oracle",
        exact && secs < 10.0,
        format!("{} weights, exact = {exact}, {secs:.2} s", got.len()),
    );
}

fn criterion_2(out: &mut Vec<Outcome>) {
    let mut rng = RngState::new(2);
    let mut ok = true;
    let mut concentrated = 0;
    for _ in 0..1000 {
        let mut bank = HistogramBank::new(8, 1, 1, 3).unwrap();
        let m = rng.random_range(1..40);
        let w = bank.num_weights();
        let fixed: Vec<Option<f32>> = (0..w)
            .map(|_| rng.random_bool(0.3).then(|| rng.random::<f32>()))
            .collect();
        let spread: Vec<f32> = (0..w).map(|_| rng.random_range(0.001f32..0.2)).collect();
        let mut rec = eam_core::stats::AttentionRecord::zeros(1, 1, 3);
        for _ in 0..m {
            for (k, v) in rec.values.iter_mut().enumerate() {
                *v = fixed[k].unwrap_or_else(|| rng.random_range(0.0..spread[k]));
            }
            bank.accumulate(&rec).unwrap();
        }
        let ent = entropy_map(&bank).unwrap();
        for (k, &h) in ent.map.values.iter().enumerate() {
            let occupied = bank.histogram(k).iter().filter(|&&c| c > 0).count();
            ok &= (0.0..=8.0).contains(&h);
            ok &= (h == 0.0) == (occupied == 1);
            concentrated += (occupied == 1) as usize;
        }
    }
    report(
        out,
        2,
        "entropy bounds",
        ok && concentrated > 0,
        format!("1000 banks, {concentrated} single-bin weights, bounds and zero-iff-single-bin hold = {ok}"),
    );
}

fn scrambled_tiny(seed: u64) -> Vit<f64> {
    let cfg = ModelConfig::tiny();
    let mut vit = Vit::<f64>::init(cfg, &mut RngState::new(seed)).unwrap();
    let mut rng = RngState::new(seed + 1);
    for (name, t) in vit.params.tensors_mut() {
        let noise: Tensor<f64> = randn(&mut rng, t.shape());
        let base = if name.ends_with("_g") || name.ends_with(".g") {
            1.0
        } else {
            0.0
        };
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = base + 0.4 * n;
        }
    }
    vit
}

fn criterion_3(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let vit = scrambled_tiny(31);
    let cfg = vit.config;
    let ds = random_dataset(4, &cfg, 32);
    let imgs: Vec<Tensor<f64>> = (0..ds.len())
        .map(|i| vit.image_tensor(ds.image(i)).unwrap())
        .collect();
    let labels: Vec<usize> = (0..ds.len()).map(|i| ds.label(i) as usize).collect();
    let analytic = loss_and_grads(&vit, &imgs, &labels).unwrap().grads;
    let step = 1e-3;
    let loss_at = |v: &Vit<f64>| loss_and_grads(v, &imgs, &labels).unwrap().loss;
    let mut worst = (0.0f64, String::new());
    let mut max_diff = 0.0f64;
    let mut checked = 0;
    let mut failures = 0;
    let grads = analytic.tensors();
    for (k, (name, g)) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let mut plus = vit.clone();
            plus.params.tensors_mut()[k].1.data_mut()[e] += step;
            let mut minus = vit.clone();
            minus.params.tensors_mut()[k].1.data_mut()[e] -= step;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let a = g.data()[e];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(1e-12);
            let ok = diff <= 1e-4 || rel <= 1e-2;
            checked += 1;
            max_diff = max_diff.max(diff);
            if !ok {
                failures += 1;
            }
            if diff > 1e-4 && rel > worst.0 {
                worst = (rel, format!("{name}[{e}]"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        out,
        3,
        "gradient check",
        failures == 0 && secs < 60.0,
        format!(
            "{checked} scalars, {failures} outside tolerance, max abs diff {max_diff:.2e}, worst relative error above 1e-4 abs {:.2e} at {}, {secs:.1} s",
            worst.0,
            if worst.1.is_empty() { "-" } else { &worst.1 }
        ),
    );
}

fn criterion_4(out: &mut Vec<Outcome>) {
    let cfg = ModelConfig::default();
    let vit = Vit::<f32>::init(cfg, &mut RngState::new(41)).unwrap();
    let ds = random_dataset(100, &cfg, 42);
    let bank = run_calibration(
        &vit,
        None,
        &ds,
        &full_calibration(CalibrationMode::FullPrecision),
    )
    .unwrap();
    let plan = build_plan(&entropy_map(&bank).unwrap(), &bank, 0.0, Scope::Global, 32).unwrap();
    let fixed = Engine::new(&vit).with_plan(Some(&plan), false);
    let mut identical = 0;
    for i in 0..ds.len() {
        let img = vit.image_tensor(ds.image(i)).unwrap();
        let a = Engine::new(&vit).forward(&img, None).unwrap();
        let b = fixed.forward(&img, None).unwrap();
        identical += (a.data() == b.data()) as usize;
    }
    report(
        out,
        4,
        "identity chain",
        identical == 100,
        format!("{identical}/100 logit vectors bit-identical"),
    );
}

// Forward pass written out independently, with every attention map replaced
// by a fixed matrix.
mod oracle {
    use super::*;

    fn layer_norm(x: &mut [f32], g: &[f32], b: &[f32]) {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for ((v, &gg), &bb) in x.iter_mut().zip(g).zip(b) {
            *v = gg * (*v - mean) * inv + bb;
        }
    }

    fn affine(x: &[f32], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout)
            .map(|o| (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum::<f32>() + b.data()[o])
            .collect()
    }

    fn gelu(x: f32) -> f32 {
        let c = (2.0f32 / std::f32::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    /// `maps[l·H + h]` is the `S×S` matrix used in place of attention.
    pub fn logits(vit: &Vit<f32>, pixels: &[u8], maps: &[Vec<f32>]) -> Vec<f32> {
        let c = &vit.config;
        let p = &vit.params;
        let (s, d, grid, ps) = (
            c.seq_len(),
            c.embed_dim,
            c.image_size / c.patch_size,
            c.patch_size,
        );
        let img = vit.image_tensor(pixels).unwrap();
        let px = img.data();
        let mut x: Vec<Vec<f32>> = vec![p.cls.data().to_vec()];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut patch = Vec::new();
                for y in 0..ps {
                    for xx in 0..ps {
                        for ch in 0..c.channels {
                            patch.push(
                                px[((gy * ps + y) * c.image_size + gx * ps + xx) * c.channels + ch],
                            );
                        }
                    }
                }
                x.push(affine(&patch, &p.patch_w, &p.patch_b));
            }
        }
        for (t, row) in x.iter_mut().enumerate() {
            for (v, &e) in row.iter_mut().zip(&p.pos.data()[t * d..(t + 1) * d]) {
                *v += e;
            }
        }
        let dh = d / c.num_heads;
        for (l, lp) in p.layers.iter().enumerate() {
            let v: Vec<Vec<f32>> = x
                .iter()
                .map(|row| {
                    let mut h = row.clone();
                    layer_norm(&mut h, lp.ln1_g.data(), lp.ln1_b.data());
                    affine(&h, &lp.w_v, &lp.b_v)
                })
                .collect();
            let mut o = vec![vec![0.0f32; d]; s];
            for h in 0..c.num_heads {
                let a = &maps[l * c.num_heads + h];
                for i in 0..s {
                    for k in 0..dh {
                        o[i][h * dh + k] = (0..s).map(|j| a[i * s + j] * v[j][h * dh + k]).sum();
                    }
                }
            }
            for (row, oi) in x.iter_mut().zip(&o) {
                for (xv, pv) in row.iter_mut().zip(affine(oi, &lp.w_proj, &lp.b_proj)) {
                    *xv += pv;
                }
            }
            for row in x.iter_mut() {
                let mut h = row.clone();
                layer_norm(&mut h, lp.ln2_g.data(), lp.ln2_b.data());
                let u: Vec<f32> = affine(&h, &lp.w_fc1, &lp.b_fc1)
                    .into_iter()
                    .map(gelu)
                    .collect();
                for (xv, m) in row.iter_mut().zip(affine(&u, &lp.w_fc2, &lp.b_fc2)) {
                    *xv += m;
                }
            }
        }
        let mut cls = x[0].clone();
        layer_norm(&mut cls, p.norm_g.data(), p.norm_b.data());
        affine(&cls, &p.head_w, &p.head_b)
    }
}

fn argmax(v: &[f32]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn criterion_5(out: &mut Vec<Outcome>, vit: &Vit<f32>, bank: &HistogramBank, test: &Dataset) {
    let plan = build_plan(&entropy_map(bank).unwrap(), bank, 1.0, Scope::Global, 32).unwrap();
    let maps: Vec<Vec<f32>> = mean_map(bank)
        .unwrap()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f32).collect())
        .collect();
    let engine = Engine::new(vit).with_plan(Some(&plan), false);
    let n = 500.min(test.len());
    let mut agree = 0;
    for i in 0..n {
        let img = vit.image_tensor(test.image(i)).unwrap();
        agree += (engine.predict(&img).unwrap()
            == argmax(&oracle::logits(vit, test.image(i), &maps))) as usize;
    }
    report(
        out,
        5,
        "total replacement matches hard-wired forward",
        agree == n && n == 500 && plan.fixed_fraction() == 1.0,
        format!("{agree}/{n} predictions agree"),
    );
}

fn criterion_6(out: &mut Vec<Outcome>, bank: &HistogramBank) {
    let mut worst = 0.0f64;
    for m in mean_map(bank).unwrap() {
        for r in 0..m.rows() {
            worst = worst.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    report(
        out,
        6,
        "mean-map rows are stochastic",
        bank.images() == 200 && worst <= 1e-6,
        format!("M = {}, max |row sum - 1| = {worst:.2e}", bank.images()),
    );
}

fn criterion_7(out: &mut Vec<Outcome>) {
    let mut rng = RngState::new(7);
    let mut identities = true;
    for _ in 0..1000 {
        let n: u64 = rng.random_range(1..2000);
        let d: u64 = rng.random_range(1..2000);
        identities &= flops_layer(n, d) == flops_mhsa(n, d) + flops_mlp(n, d);
        identities &= flops_mhsa(n, d) == 4 * n * d * d + 2 * n * n * d;
        identities &= flops_mlp(n, d) == 8 * n * d * d;
    }
    let cfg = ModelConfig::tiny();
    let vit = Vit::<f32>::init(cfg, &mut RngState::new(70)).unwrap();
    let x: Tensor<f32> = randn(&mut rng, &[cfg.seq_len(), cfg.embed_dim]);
    reset_mac_count();
    mhsa_forward(&Engine::new(&vit), &x, 0, None).unwrap();
    let macs = mac_count();
    let formula = flops_mhsa(cfg.seq_len() as u64, cfg.embed_dim as u64);
    let deit = flops_mhsa(197, 192);
    report(
        out,
        7,
        "FLOPs identities",
        identities && macs == formula && deit == 43_951_488,
        format!("1000 random (N, d_e) identities = {identities}, counted {macs} vs formula {formula}, N=197 d_e=192 -> {deit}"),
    );
}

struct Trained {
    vit: Vit<f32>,
    train: Dataset,
    test: Dataset,
    top1: f64,
    secs: f64,
}

fn train_default() -> Trained {
    let t = Instant::now();
    let ds = generate_shapes(&SyntheticSpec::default()).unwrap();
    let (train_set, test_set) = ds.train_test_split(0.2, 1);
    let (vit, rep) = train::<f32>(
        &train_set,
        Some(&test_set),
        ModelConfig::default(),
        &TrainConfig::default(),
        &mut RngState::new(0),
        |_| {},
    )
    .unwrap();
    Trained {
        vit,
        top1: rep.final_eval_accuracy().unwrap(),
        train: train_set,
        test: test_set,
        secs: t.elapsed().as_secs_f64(),
    }
}

const SEEDS: u64 = 5;

fn criterion_8(out: &mut Vec<Outcome>, m: &Trained) {
    let t = Instant::now();
    let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut eam = [0.0f64; 5];
    let mut rnd = [0.0f64; 5];
    for seed in 0..SEEDS {
        let cfg = CalibrationConfig {
            seed,
            ..Default::default()
        };
        let bank = run_calibration(&m.vit, None, &m.train, &cfg).unwrap();
        let ent = entropy_map(&bank).unwrap();
        for (k, &tau) in taus.iter().enumerate() {
            let pe = build_plan(&ent, &bank, tau, Scope::Global, 32).unwrap();
            let pr = random_plan(&m.vit.config, &bank, tau, seed, 32).unwrap();
            eam[k] += Engine::new(&m.vit)
                .with_plan(Some(&pe), false)
                .accuracy(&m.test)
                .unwrap()
                / SEEDS as f64;
            rnd[k] += Engine::new(&m.vit)
                .with_plan(Some(&pr), false)
                .accuracy(&m.test)
                .unwrap()
                / SEEDS as f64;
        }
    }
    let mut not_worse = true;
    let mut strictly = 0;
    let mut cells = Vec::new();
    for k in 0..taus.len() {
        if taus[k] >= 0.3 - 1e-9 {
            not_worse &= eam[k] >= rnd[k];
        }
        strictly += (eam[k] > rnd[k]) as usize;
        cells.push(format!(
            "{:.0}%: {:.2} vs {:.2}",
            taus[k] * 100.0,
            eam[k],
            rnd[k]
        ));
    }
    let total = m.secs + t.elapsed().as_secs_f64();
    report(
        out,
        8,
        "entropy fixing beats random fixing",
        m.top1 >= 90.0 && not_worse && strictly >= 2 && total < 1800.0,
        format!(
            "baseline {:.2}%, EAM vs random [{}], {total:.0} s",
            m.top1,
            cells.join(", ")
        ),
    );
}

fn quantized(m: &Trained, seed: u64, frozen_bits: u32) -> QuantizedVit<f32> {
    let idx = calibration_indices(m.train.len(), 0.05, seed);
    quantize_on_dataset(&m.vit, &m.train, &idx, 4, 4, frozen_bits).unwrap()
}

fn criterion_9(out: &mut Vec<Outcome>, m: &Trained) {
    let taus = [0.0, 0.1, 0.2];
    let mut acc = [0.0f64; 3];
    for seed in 0..SEEDS {
        let q = quantized(m, seed, 4);
        let cfg = CalibrationConfig {
            seed,
            mode: CalibrationMode::Quantized,
            ..Default::default()
        };
        let bank = run_calibration(&m.vit, Some(&q), &m.train, &cfg).unwrap();
        let ent = entropy_map(&bank).unwrap();
        for (k, &tau) in taus.iter().enumerate() {
            let plan = build_plan(&ent, &bank, tau, Scope::Global, 4).unwrap();
            acc[k] += Engine::quantized(&q)
                .with_plan(Some(&plan), false)
                .accuracy(&m.test)
                .unwrap()
                / SEEDS as f64;
        }
    }
    let drops = [acc[0] - acc[1], acc[0] - acc[2]];
    report(
        out,
        9,
        "low-sparsity robustness under 4-bit quantization",
        drops.iter().all(|&d| d <= 1.0),
        format!(
            "W4/A4 baseline {:.2}%, tau 10% {:.2}% (drop {:.2}), tau 20% {:.2}% (drop {:.2})",
            acc[0], acc[1], drops[0], acc[2], drops[1]
        ),
    );
}

fn criterion_10(out: &mut Vec<Outcome>, m: &Trained, fp: &HistogramBank) {
    let q = quantized(m, 0, 4);
    let cfg = CalibrationConfig {
        mode: CalibrationMode::Quantized,
        ..Default::default()
    };
    let qb = run_calibration(&m.vit, Some(&q), &m.train, &cfg).unwrap();
    let self_kl = kl_map(fp, fp).unwrap();
    let self_zero = self_kl.map.values.iter().all(|&v| v == 0.0);
    let cross = kl_map(fp, &qb).unwrap();
    let nonneg = cross.map.values.iter().all(|&v| v >= 0.0);
    let positive = cross.map.values.iter().filter(|&&v| v > 0.0).count();
    let s = m.vit.config.seq_len();
    let (l, h) = (m.vit.config.num_layers, m.vit.config.num_heads);
    let mut changed = false;
    for &i in &calibration_indices(m.train.len(), cfg.fraction, cfg.seed) {
        let img = m.vit.image_tensor(m.train.image(i)).unwrap();
        let mut a = AttentionRecorder::new(l, h, s);
        let mut b = AttentionRecorder::new(l, h, s);
        Engine::new(&m.vit).forward(&img, Some(&mut a)).unwrap();
        Engine::quantized(&q).forward(&img, Some(&mut b)).unwrap();
        if a.record != b.record {
            changed = true;
            break;
        }
    }
    report(
        out,
        10,
        "KL sanity",
        self_zero && nonneg && (!changed || positive > 0),
        format!(
            "self KL all zero = {self_zero}, cross KL nonnegative = {nonneg}, {positive} of {} weights positive, quantization changed attention = {changed}",
            cross.map.values.len()
        ),
    );
}

fn criterion_11(out: &mut Vec<Outcome>, m: &Trained) {
    let first: Vec<usize> = (0..100).collect();
    let ds = m.train.subset(&first);
    let cfg = full_calibration(CalibrationMode::FullPrecision);
    let seq = write_bank(&run_calibration(&m.vit, None, &ds, &cfg).unwrap());
    let par = write_bank(&run_calibration_sharded(&m.vit, None, &ds, &cfg, 4).unwrap());
    report(
        out,
        11,
        "merge equivalence",
        seq == par,
        format!(
            "100 images, 4 shards, {} bytes, identical = {}",
            seq.len(),
            seq == par
        ),
    );
}

fn corrupt_magic(bytes: &[u8]) -> Vec<u8> {
    let mut b = bytes.to_vec();
    b[0] ^= 0xff;
    b
}

fn criterion_12(out: &mut Vec<Outcome>, m: &Trained, bank: &HistogramBank) {
    let plan: FixPlan =
        build_plan(&entropy_map(bank).unwrap(), bank, 0.3, Scope::PerHead, 4).unwrap();
    let ck = write_checkpoint(&m.vit);
    let bk = write_bank(bank);
    let pl = write_plan(&plan);
    let ck_back = read_checkpoint(&ck).unwrap();
    let bk_back = read_bank(&bk).unwrap();
    let pl_back = read_plan(&pl).unwrap();
    let round = [
        ck_back == m.vit && write_checkpoint(&ck_back) == ck,
        &bk_back == bank && write_bank(&bk_back) == bk,
        pl_back == plan && write_plan(&pl_back) == pl,
    ];
    let magic = [
        matches!(
            read_checkpoint(&corrupt_magic(&ck)),
            Err(Error::BadMagic { .. })
        ),
        matches!(read_bank(&corrupt_magic(&bk)), Err(Error::BadMagic { .. })),
        matches!(read_plan(&corrupt_magic(&pl)), Err(Error::BadMagic { .. })),
    ];
    let truncated = [
        matches!(
            read_checkpoint(&ck[..ck.len() / 2]),
            Err(Error::Truncated { .. })
        ),
        matches!(read_bank(&bk[..bk.len() / 2]), Err(Error::Truncated { .. })),
        matches!(read_plan(&pl[..pl.len() / 2]), Err(Error::Truncated { .. })),
    ];
    let ok = round.iter().all(|&b| b) && magic.iter().all(|&b| b) && truncated.iter().all(|&b| b);
    report(
        out,
        12,
        "serialization round trips",
        ok,
        format!("round trip = {round:?}, bad magic detected = {magic:?}, truncation detected = {truncated:?}"),
    );
}

fn main() -> ExitCode {
    let mut out = Vec::new();
    criterion_1(&mut out);
    criterion_2(&mut out);
    criterion_3(&mut out);
    criterion_4(&mut out);
    let m = train_default();
    let bank = run_calibration(&m.vit, None, &m.train, &CalibrationConfig::default()).unwrap();
    criterion_5(&mut out, &m.vit, &bank, &m.test);
    criterion_6(&mut out, &bank);
    criterion_7(&mut out);
    criterion_8(&mut out, &m);
    criterion_9(&mut out, &m);
    criterion_10(&mut out, &m, &bank);
    criterion_11(&mut out, &m);
    criterion_12(&mut out, &m, &bank);

    out.sort_by_key(|o| o.id);
    let passed = out.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", out.len());
    let failed: Vec<u32> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
