//! Run configuration: `[section]` headers and `key = value` lines, `#`
//! comments. Unknown sections and keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use eam_core::fixing::Scope;
use eam_core::stats::CalibrationMode;
use eam_core::vit::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Shapes,
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub samples_per_class: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrateSection {
    pub bits: u32,
    pub fraction: f64,
    pub modes: Vec<CalibrationMode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantSection {
    pub enabled: bool,
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub frozen_attention_bits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Entropy,
    Random,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Entropy => "entropy",
            Method::Random => "random",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Method::Entropy),
            "random" => Ok(Method::Random),
            _ => bail!("unknown fixing method {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixingSection {
    pub tau: f64,
    pub scope: Scope,
    pub method: Method,
    pub renormalize: bool,
    /// Which bank the plan is built from.
    pub bank: CalibrationMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    /// Sparsity levels in percent.
    pub taus: Vec<u32>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportSource {
    Entropy,
    Divergence,
    Mean,
}

impl ExportSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExportSource::Entropy => "entropy",
            ExportSource::Divergence => "divergence",
            ExportSource::Mean => "mean",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Pgm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSection {
    pub source: ExportSource,
    pub format: ExportFormat,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub cls_row: bool,
    pub bank: CalibrationMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub use_plan: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub calibrate: CalibrateSection,
    pub quant: QuantSection,
    pub fixing: FixingSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub export: ExportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig {
                source: DataSource::Shapes,
                samples_per_class: 500,
                noise: 0.2,
                data_seed: 0,
                test_fraction: 0.2,
                split_seed: 1,
            },
            train: TrainConfig::default(),
            calibrate: CalibrateSection {
                bits: 8,
                fraction: 0.05,
                modes: vec![CalibrationMode::FullPrecision],
            },
            quant: QuantSection {
                enabled: false,
                weight_bits: 4,
                activation_bits: 4,
                frozen_attention_bits: 4,
            },
            fixing: FixingSection {
                tau: 0.1,
                scope: Scope::Global,
                method: Method::Entropy,
                renormalize: false,
                bank: CalibrationMode::FullPrecision,
            },
            eval: EvalSection { use_plan: false },
            sweep: SweepSection {
                taus: (0..10).map(|k| k * 10).collect(),
                seeds: (0..5).collect(),
                methods: vec![Method::Entropy, Method::Random],
            },
            export: ExportSection {
                source: ExportSource::Entropy,
                format: ExportFormat::Csv,
                layer: None,
                head: None,
                cls_row: false,
                bank: CalibrationMode::FullPrecision,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut images: Option<PathBuf> = None;
        let mut labels: Option<PathBuf> = None;
        let mut source = "shapes".to_string();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(
                    section.as_str(),
                    "run"
                        | "model"
                        | "data"
                        | "train"
                        | "calibrate"
                        | "quant"
                        | "fixing"
                        | "eval"
                        | "sweep"
                        | "export"
                ) {
                    bail!("line {}: unknown section [{section}]", no + 1);
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
            let (k, v) = (k.trim(), v.trim());
            let key = format!("{section}.{k}");
            cfg.set(&key, v, &mut source, &mut images, &mut labels)
                .with_context(|| format!("line {}", no + 1))?;
        }
        cfg.data.source = match source.as_str() {
            "shapes" => DataSource::Shapes,
            "idx" => DataSource::Idx {
                images: images.ok_or_else(|| anyhow!("data.source = idx needs data.images"))?,
                labels: labels.ok_or_else(|| anyhow!("data.source = idx needs data.labels"))?,
            },
            other => bail!("unknown data source {other:?}"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(
        &mut self,
        key: &str,
        v: &str,
        source: &mut String,
        images: &mut Option<PathBuf>,
        labels: &mut Option<PathBuf>,
    ) -> Result<()> {
        let m = &mut self.model;
        match key {
            "run.seed" => self.seed = parse_num(key, v)?,
            "model.image_size" => m.image_size = parse_num(key, v)?,
            "model.patch_size" => m.patch_size = parse_num(key, v)?,
            "model.channels" => m.channels = parse_num(key, v)?,
            "model.embed_dim" => m.embed_dim = parse_num(key, v)?,
            "model.num_layers" => m.num_layers = parse_num(key, v)?,
            "model.num_heads" => m.num_heads = parse_num(key, v)?,
            "model.num_classes" => m.num_classes = parse_num(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse_num(key, v)?,
            "data.source" => *source = v.to_string(),
            "data.images" => *images = Some(PathBuf::from(v)),
            "data.labels" => *labels = Some(PathBuf::from(v)),
            "data.samples_per_class" => self.data.samples_per_class = parse_num(key, v)?,
            "data.noise" => self.data.noise = parse_num(key, v)?,
            "data.seed" => self.data.data_seed = parse_num(key, v)?,
            "data.test_fraction" => self.data.test_fraction = parse_num(key, v)?,
            "data.split_seed" => self.data.split_seed = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "calibrate.bits" => self.calibrate.bits = parse_num(key, v)?,
            "calibrate.fraction" => self.calibrate.fraction = parse_num(key, v)?,
            "calibrate.modes" => {
                self.calibrate.modes = parse_list(v, |s| Ok(CalibrationMode::parse(s)?))?
            }
            "quant.enabled" => self.quant.enabled = parse_bool(key, v)?,
            "quant.weight_bits" => self.quant.weight_bits = parse_num(key, v)?,
            "quant.activation_bits" => self.quant.activation_bits = parse_num(key, v)?,
            "quant.frozen_attention_bits" => self.quant.frozen_attention_bits = parse_num(key, v)?,
            "fixing.tau" => self.fixing.tau = parse_num(key, v)?,
            "fixing.scope" => self.fixing.scope = Scope::parse(v)?,
            "fixing.method" => self.fixing.method = Method::parse(v)?,
            "fixing.renormalize" => self.fixing.renormalize = parse_bool(key, v)?,
            "fixing.bank" => self.fixing.bank = CalibrationMode::parse(v)?,
            "eval.use_plan" => self.eval.use_plan = parse_bool(key, v)?,
            "sweep.taus" => self.sweep.taus = parse_list(v, |s| parse_num(key, s))?,
            "sweep.seeds" => self.sweep.seeds = parse_list(v, |s| parse_num(key, s))?,
            "sweep.methods" => self.sweep.methods = parse_list(v, Method::parse)?,
            "export.source" => {
                self.export.source = match v {
                    "entropy" => ExportSource::Entropy,
                    "divergence" => ExportSource::Divergence,
                    "mean" => ExportSource::Mean,
                    _ => bail!("unknown export source {v:?}"),
                }
            }
            "export.format" => {
                self.export.format = match v {
                    "csv" => ExportFormat::Csv,
                    "pgm" => ExportFormat::Pgm,
                    _ => bail!("unknown export format {v:?}"),
                }
            }
            "export.layer" => self.export.layer = Some(parse_num(key, v)?),
            "export.head" => self.export.head = Some(parse_num(key, v)?),
            "export.cls_row" => self.export.cls_row = parse_bool(key, v)?,
            "export.bank" => self.export.bank = CalibrationMode::parse(v)?,
            _ => bail!("unknown key {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            bail!("data.test_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.data.noise) {
            bail!("data.noise must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fixing.tau) {
            bail!("fixing.tau must be in [0, 1]");
        }
        if self.sweep.taus.iter().any(|&t| t > 100) {
            bail!("sweep.taus are percentages in 0..=100");
        }
        if self.calibrate.modes.is_empty() {
            bail!("calibrate.modes must name at least one mode");
        }
        if self.export.layer.is_some() != self.export.head.is_some() {
            bail!("export.layer and export.head must be given together");
        }
        Ok(())
    }

    /// Fully resolved configuration in the input syntax.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let w = &mut s;
        writeln!(w, "[run]\nseed = {}\n", self.seed).unwrap();
        writeln!(w, "[model]").unwrap();
        for (k, v) in m.fields() {
            writeln!(w, "{k} = {v}").unwrap();
        }
        writeln!(w, "\n[data]").unwrap();
        match &self.data.source {
            DataSource::Shapes => writeln!(w, "source = shapes").unwrap(),
            DataSource::Idx { images, labels } => writeln!(
                w,
                "source = idx\nimages = {}\nlabels = {}",
                images.display(),
                labels.display()
            )
            .unwrap(),
        }
        let d = &self.data;
        writeln!(
            w,
            "samples_per_class = {}\nnoise = {:?}\nseed = {}\ntest_fraction = {:?}\nsplit_seed = {}",
            d.samples_per_class, d.noise, d.data_seed, d.test_fraction, d.split_seed
        )
        .unwrap();
        let t = &self.train;
        writeln!(
            w,
            "\n[train]\nepochs = {}\nbatch_size = {}\nlr = {:?}\nweight_decay = {:?}",
            t.epochs, t.batch_size, t.lr, t.weight_decay
        )
        .unwrap();
        let c = &self.calibrate;
        let modes: Vec<&str> = c.modes.iter().map(|m| m.as_str()).collect();
        writeln!(
            w,
            "\n[calibrate]\nbits = {}\nfraction = {:?}\nmodes = {}",
            c.bits,
            c.fraction,
            modes.join(",")
        )
        .unwrap();
        let q = &self.quant;
        writeln!(
            w,
            "\n[quant]\nenabled = {}\nweight_bits = {}\nactivation_bits = {}\nfrozen_attention_bits = {}",
            q.enabled, q.weight_bits, q.activation_bits, q.frozen_attention_bits
        )
        .unwrap();
        let f = &self.fixing;
        writeln!(
            w,
            "\n[fixing]\ntau = {:?}\nscope = {}\nmethod = {}\nrenormalize = {}\nbank = {}",
            f.tau,
            f.scope.as_str(),
            f.method.as_str(),
            f.renormalize,
            f.bank.as_str()
        )
        .unwrap();
        writeln!(w, "\n[eval]\nuse_plan = {}", self.eval.use_plan).unwrap();
        let methods: Vec<&str> = self.sweep.methods.iter().map(|m| m.as_str()).collect();
        writeln!(
            w,
            "\n[sweep]\ntaus = {}\nseeds = {}\nmethods = {}",
            join(&self.sweep.taus),
            join(&self.sweep.seeds),
            methods.join(",")
        )
        .unwrap();
        let e = &self.export;
        writeln!(w, "\n[export]\nsource = {}", e.source.as_str()).unwrap();
        writeln!(
            w,
            "format = {}",
            match e.format {
                ExportFormat::Csv => "csv",
                ExportFormat::Pgm => "pgm",
            }
        )
        .unwrap();
        if let (Some(l), Some(h)) = (e.layer, e.head) {
            writeln!(w, "layer = {l}\nhead = {h}").unwrap();
        }
        writeln!(w, "cls_row = {}\nbank = {}", e.cls_row, e.bank.as_str()).unwrap();
        s
    }
}
