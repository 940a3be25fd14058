use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use eam_core::complexity::savings;
use eam_core::data::{generate_shapes, load_idx, Dataset, SyntheticSpec};
use eam_core::fixing::{build_plan, load_plan, random_plan, save_plan, FixPlan, Scope};
use eam_core::quant::{quantize_on_dataset, QuantizedVit, FULL_PRECISION_BITS};
use eam_core::stats::{
    calibration_indices, entropy_map, kl_map, load_bank, run_calibration_sharded, save_bank,
    CalibrationConfig, CalibrationMode, HistogramBank, WeightMap,
};
use eam_core::vit::{load_checkpoint, save_checkpoint, train, Engine, Vit};
use eam_core::RngState;

use crate::config::{DataSource, ExportFormat, ExportSource, Method, RunConfig};

/// A broken invariant rather than bad input.
#[derive(Debug, thiserror::Error)]
#[error("internal error: {0}")]
pub struct Internal(pub String);

pub const SWEEP_HEADER: &str = "tau,method,seed,top1,fixed_fraction,flops_saved_pct";

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Ctx {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    /// Writes `<cmd>.resolved.cfg` and a `<cmd>.sha256` manifest covering
    /// it and `outputs`.
    fn finish(&self, cmd: &str, outputs: &[PathBuf]) -> Result<()> {
        let cfg_path = self.write(&format!("{cmd}.resolved.cfg"), self.cfg.to_text())?;
        let mut manifest = String::new();
        for p in outputs.iter().chain(std::iter::once(&cfg_path)) {
            let name = p.strip_prefix(&self.out).unwrap_or(p);
            manifest.push_str(&format!("{}  {}\n", sha256_hex(p)?, name.display()));
        }
        self.write(&format!("{cmd}.sha256"), manifest)?;
        Ok(())
    }

    fn dataset(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.cfg.data;
        let m = &self.cfg.model;
        let ds = match &d.source {
            DataSource::Shapes => generate_shapes(&SyntheticSpec {
                classes: m.num_classes,
                image_size: m.image_size,
                samples_per_class: d.samples_per_class,
                noise: d.noise,
                seed: d.data_seed,
            })?,
            DataSource::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.exists() {
                        bail!("dataset file {} does not exist", p.display());
                    }
                }
                load_idx(images, labels)?
            }
        };
        if ds.height != m.image_size || ds.width != m.image_size || ds.channels != m.channels {
            bail!(
                "dataset images are {}x{}x{} but the model expects {}x{}x{}",
                ds.height,
                ds.width,
                ds.channels,
                m.image_size,
                m.image_size,
                m.channels
            );
        }
        Ok(ds.train_test_split(d.test_fraction, d.split_seed))
    }

    fn checkpoint(&self) -> Result<Vit<f32>> {
        let p = self.path("model.eamc");
        if !p.exists() {
            bail!("no checkpoint at {}; run `eam train` first", p.display());
        }
        Ok(load_checkpoint(&p)?)
    }

    fn bank_name(mode: CalibrationMode) -> String {
        format!("bank_{}.eams", mode.as_str())
    }

    fn bank(&self, mode: CalibrationMode) -> Result<HistogramBank> {
        let p = self.path(&Self::bank_name(mode));
        if !p.exists() {
            bail!(
                "no {} bank at {}; run `eam calibrate` first",
                mode.as_str(),
                p.display()
            );
        }
        Ok(load_bank(&p)?)
    }

    fn calibration_config(&self, mode: CalibrationMode, seed: u64) -> CalibrationConfig {
        CalibrationConfig {
            bits: self.cfg.calibrate.bits,
            fraction: self.cfg.calibrate.fraction,
            mode,
            seed,
        }
    }

    fn frozen_bits(&self) -> u32 {
        if self.cfg.quant.enabled {
            self.cfg.quant.frozen_attention_bits
        } else {
            FULL_PRECISION_BITS
        }
    }

    fn quantize(&self, vit: &Vit<f32>, train: &Dataset, seed: u64) -> Result<QuantizedVit<f32>> {
        let q = &self.cfg.quant;
        let idx = calibration_indices(train.len(), self.cfg.calibrate.fraction, seed);
        Ok(quantize_on_dataset(
            vit,
            train,
            &idx,
            q.weight_bits,
            q.activation_bits,
            q.frozen_attention_bits,
        )?)
    }
}

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let (train_set, test_set) = ctx.dataset()?;
    let eval = (!test_set.is_empty()).then_some(&test_set);
    let mut log = String::from("epoch,loss,train_top1,test_top1\n");
    let epochs = ctx.cfg.train.epochs;
    let (vit, report) = train::<f32>(
        &train_set,
        eval,
        ctx.cfg.model,
        &ctx.cfg.train,
        &mut RngState::new(ctx.cfg.seed),
        |e| {
            let test = e.eval_accuracy.map_or("-".into(), |a| format!("{a:.2}%"));
            println!(
                "epoch {}/{epochs}  loss {:.4}  train {:.2}%  test {test}",
                e.epoch + 1,
                e.mean_loss,
                e.train_accuracy
            );
            log.push_str(&format!(
                "{},{:.6},{:.4},{}\n",
                e.epoch + 1,
                e.mean_loss,
                e.train_accuracy,
                e.eval_accuracy.map_or(String::new(), |a| format!("{a:.4}"))
            ));
        },
    )?;
    fs::create_dir_all(&ctx.out)?;
    let ckpt = ctx.path("model.eamc");
    save_checkpoint(&vit, &ckpt)?;
    let log_path = ctx.write("train_log.csv", log)?;
    if let Some(a) = report.final_eval_accuracy() {
        println!("final test top-1 {a:.2}%");
    }
    println!("wrote {}", ckpt.display());
    ctx.finish("train", &[ckpt, log_path])
}

pub fn cmd_calibrate(ctx: &Ctx) -> Result<()> {
    let vit = ctx.checkpoint()?;
    let (train_set, _) = ctx.dataset()?;
    let workers = rayon::current_num_threads();
    let mut outputs = Vec::new();
    let mut banks = Vec::new();
    for &mode in &ctx.cfg.calibrate.modes {
        let qvit = match mode {
            CalibrationMode::Quantized => {
                let q = ctx.quantize(&vit, &train_set, ctx.cfg.seed)?;
                outputs.push(ctx.write("quant.cfg", q.config.to_text())?);
                Some(q)
            }
            CalibrationMode::FullPrecision => None,
        };
        let ccfg = ctx.calibration_config(mode, ctx.cfg.seed);
        let bank = run_calibration_sharded(&vit, qvit.as_ref(), &train_set, &ccfg, workers)?;
        let ent = entropy_map(&bank)?;
        let mean_h = ent.map.values.iter().sum::<f64>() / ent.map.values.len() as f64;
        let p = ctx.path(&Ctx::bank_name(mode));
        save_bank(&bank, &p)?;
        println!(
            "{} bank: M = {}, b = {}, mean entropy {:.4} bits -> {}",
            mode.as_str(),
            bank.images(),
            bank.bits(),
            mean_h,
            p.display()
        );
        outputs.push(p);
        banks.push(bank);
    }
    if let [p, q] = banks.as_slice() {
        let kl = kl_map(p, q)?;
        let max = kl.head_max.iter().fold(0.0f64, |m, &v| m.max(v));
        println!(
            "banks differ: {}; max per-weight KL {:.6} bits",
            if p == q { "no" } else { "yes" },
            max
        );
    }
    ctx.finish("calibrate", &outputs)
}

fn make_plan(
    ctx: &Ctx,
    vit: &Vit<f32>,
    bank: &HistogramBank,
    tau: f64,
    method: Method,
    seed: u64,
) -> Result<FixPlan> {
    Ok(match method {
        Method::Entropy => build_plan(
            &entropy_map(bank)?,
            bank,
            tau,
            ctx.cfg.fixing.scope,
            ctx.frozen_bits(),
        )?,
        Method::Random => random_plan(&vit.config, bank, tau, seed, ctx.frozen_bits())?,
    })
}

pub fn cmd_plan(ctx: &Ctx) -> Result<()> {
    let vit = ctx.checkpoint()?;
    let bank = ctx.bank(ctx.cfg.fixing.bank)?;
    let f = &ctx.cfg.fixing;
    let plan = make_plan(ctx, &vit, &bank, f.tau, f.method, ctx.cfg.seed)?;
    let p = ctx.path("plan.eamp");
    save_plan(&plan, &p)?;
    let report = savings(Some(&plan), &vit.config)?;
    println!(
        "{} plan: tau {:.4}, {} of {} weights fixed ({:.4}), thresholds {:?}, frozen bits {}",
        f.method.as_str(),
        plan.tau,
        plan.num_fixed(),
        plan.mask().len(),
        plan.fixed_fraction(),
        plan.thresholds,
        plan.frozen_bits
    );
    print!("{}", report.to_text());
    let csv = ctx.write("plan_flops.csv", report.to_csv())?;
    let txt = ctx.write("plan_flops.txt", report.to_text())?;
    ctx.finish("plan", &[p, csv, txt])
}

pub fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let vit = ctx.checkpoint()?;
    let (train_set, test_set) = ctx.dataset()?;
    if test_set.is_empty() {
        bail!("evaluation needs data.test_fraction > 0");
    }
    let plan = if ctx.cfg.eval.use_plan {
        let p = ctx.path("plan.eamp");
        if !p.exists() {
            bail!("eval.use_plan is set but {} does not exist", p.display());
        }
        Some(load_plan(&p)?)
    } else {
        None
    };
    let qvit = if ctx.cfg.quant.enabled {
        Some(ctx.quantize(&vit, &train_set, ctx.cfg.seed)?)
    } else {
        None
    };
    let engine = match &qvit {
        Some(q) => Engine::quantized(q),
        None => Engine::new(&vit),
    }
    .with_plan(plan.as_ref(), ctx.cfg.fixing.renormalize);
    let top1 = engine.accuracy(&test_set)?;
    let report = savings(plan.as_ref(), &vit.config)?;
    println!(
        "top-1 {top1:.2}%  fixed fraction {:.4}  theoretical FLOPs saved {} ({:.4}%)",
        report.fixed_fraction, report.saved_flops, report.saved_pct
    );
    let p = ctx.path("eval.csv");
    let fresh = !p.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&p)?;
    if fresh {
        writeln!(
            f,
            "top1,fixed_fraction,flops_saved,flops_saved_pct,quantized,plan"
        )?;
    }
    writeln!(
        f,
        "{top1:.4},{:.6},{},{:.4},{},{}",
        report.fixed_fraction,
        report.saved_flops,
        report.saved_pct,
        ctx.cfg.quant.enabled,
        plan.is_some()
    )?;
    ctx.finish("eval", &[p])
}

fn read_done(path: &Path) -> Result<BTreeSet<(String, String, String)>> {
    let mut done = BTreeSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let mut lines = BufReader::new(File::open(path)?).lines();
    match lines.next().transpose()? {
        Some(h) if h == SWEEP_HEADER => {}
        None => return Ok(done),
        Some(h) => bail!(
            "{} has header {h:?}, expected {SWEEP_HEADER:?}",
            path.display()
        ),
    }
    for line in lines {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            bail!("{}: malformed row {line:?}", path.display());
        }
        done.insert((
            cols[0].to_string(),
            cols[1].to_string(),
            cols[2].to_string(),
        ));
    }
    Ok(done)
}

pub fn cmd_sweep(ctx: &Ctx) -> Result<()> {
    let vit = ctx.checkpoint()?;
    let (train_set, test_set) = ctx.dataset()?;
    if test_set.is_empty() {
        bail!("sweeps need data.test_fraction > 0");
    }
    let mode = ctx.cfg.fixing.bank;
    if mode == CalibrationMode::Quantized && !ctx.cfg.quant.enabled {
        bail!("fixing.bank = quantized requires quant.enabled = true");
    }
    let mut taus = ctx.cfg.sweep.taus.clone();
    taus.sort_unstable();
    taus.dedup();

    fs::create_dir_all(&ctx.out)?;
    let path = ctx.path("sweep.csv");
    let done = read_done(&path)?;
    let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
    file.try_lock()
        .map_err(|_| anyhow!("{} is locked by another sweep", path.display()))?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{SWEEP_HEADER}")?;
    }

    let mut written = 0usize;
    for &seed in &ctx.cfg.sweep.seeds {
        let key = |tau: u32, m: Method| {
            (
                format!("{:.2}", tau as f64 / 100.0),
                m.as_str().to_string(),
                seed.to_string(),
            )
        };
        let pending = taus.iter().any(|&t| {
            ctx.cfg
                .sweep
                .methods
                .iter()
                .any(|&m| !done.contains(&key(t, m)))
        });
        if !pending {
            continue;
        }
        let qvit = if ctx.cfg.quant.enabled {
            Some(ctx.quantize(&vit, &train_set, seed)?)
        } else {
            None
        };
        let bank = run_calibration_sharded(
            &vit,
            qvit.as_ref(),
            &train_set,
            &ctx.calibration_config(mode, seed),
            rayon::current_num_threads(),
        )?;
        let mut previous: Option<FixPlan> = None;
        for &t in &taus {
            let tau = t as f64 / 100.0;
            for &method in &ctx.cfg.sweep.methods {
                let plan = make_plan(ctx, &vit, &bank, tau, method, seed)?;
                if method == Method::Entropy && ctx.cfg.fixing.scope == Scope::Global {
                    if let Some(prev) = &previous {
                        if !prev.is_subset_of(&plan) {
                            return Err(Internal(format!(
                                "fixed set at tau {:.2} is not contained in the set at tau {tau:.2} (seed {seed})",
                                prev.tau
                            ))
                            .into());
                        }
                    }
                    previous = Some(plan.clone());
                }
                let k = key(t, method);
                if done.contains(&k) {
                    continue;
                }
                let engine = match &qvit {
                    Some(q) => Engine::quantized(q),
                    None => Engine::new(&vit),
                }
                .with_plan(Some(&plan), ctx.cfg.fixing.renormalize);
                let top1 = engine.accuracy(&test_set)?;
                let report = savings(Some(&plan), &vit.config)?;
                writeln!(
                    file,
                    "{},{},{},{top1:.4},{:.6},{:.4}",
                    k.0, k.1, k.2, report.fixed_fraction, report.saved_pct
                )?;
                file.flush()?;
                written += 1;
                println!(
                    "tau {:>4}  {:<7}  seed {seed}  top-1 {top1:.2}%  fixed {:.4}  saved {:.4}%",
                    k.0, k.1, report.fixed_fraction, report.saved_pct
                );
            }
        }
    }
    file.unlock()?;
    drop(file);
    println!(
        "{written} new rows, {} already present -> {}",
        done.len(),
        path.display()
    );
    ctx.finish("sweep", &[path])
}

fn export_map(ctx: &Ctx) -> Result<WeightMap> {
    let e = &ctx.cfg.export;
    Ok(match e.source {
        ExportSource::Entropy => entropy_map(&ctx.bank(e.bank)?)?.map,
        ExportSource::Mean => {
            let bank = ctx.bank(e.bank)?;
            WeightMap {
                dims: bank.dims(),
                values: bank.mean_values()?,
            }
        }
        ExportSource::Divergence => {
            let p = ctx.bank(CalibrationMode::FullPrecision)?;
            let q = ctx.bank(CalibrationMode::Quantized)?;
            let kl = kl_map(&p, &q)?;
            let heads = p.dims()[1];
            for (k, (mean, max)) in kl.head_mean.iter().zip(&kl.head_max).enumerate() {
                println!(
                    "layer {} head {}: mean KL {mean:.6} bits, max {max:.6}",
                    k / heads,
                    k % heads
                );
            }
            kl.map
        }
    })
}

pub fn cmd_export(ctx: &Ctx) -> Result<()> {
    let e = &ctx.cfg.export;
    let map = export_map(ctx)?;
    let [nl, nh, s, _] = map.dims;
    let only = e.layer.zip(e.head);
    if let Some((l, h)) = only {
        if l >= nl || h >= nh {
            bail!("export.layer/head ({l}, {h}) outside the {nl}x{nh} model");
        }
    }
    let name = e.source.as_str();
    let mut outputs = Vec::new();
    match e.format {
        ExportFormat::Csv => {
            let (file, text) = if e.cls_row {
                (format!("export/{name}_cls.csv"), map.cls_csv(only))
            } else {
                (format!("export/{name}.csv"), map.to_csv(only))
            };
            outputs.push(ctx.write(&file, text)?);
        }
        ExportFormat::Pgm => {
            for l in 0..nl {
                for h in 0..nh {
                    if only.is_some_and(|o| o != (l, h)) {
                        continue;
                    }
                    let (img, stem) = if e.cls_row {
                        (
                            eam_core::stats::PgmImage::from_values(map.cls_row(l, h), s, 1),
                            format!("export/{name}_cls_l{l}_h{h}"),
                        )
                    } else {
                        (map.to_pgm(l, h), format!("export/{name}_l{l}_h{h}"))
                    };
                    outputs.push(ctx.write(&format!("{stem}.pgm"), img.encode())?);
                    outputs.push(ctx.write(&format!("{stem}.scale.txt"), img.scale_text())?);
                }
            }
        }
    }
    println!(
        "wrote {} files under {}",
        outputs.len(),
        ctx.path("export").display()
    );
    ctx.finish("export", &outputs)
}
