use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[run]
seed = 3
[model]
image_size = 16
patch_size = 4
embed_dim = 8
num_layers = 1
num_heads = 2
num_classes = 3
[data]
samples_per_class = 20
[train]
epochs = 2
batch_size = 16
[calibrate]
fraction = 0.5
modes = fp32,quantized
[quant]
enabled = true
[fixing]
tau = 0.3
[eval]
use_plan = true
[sweep]
taus = 0,20,40
seeds = 0,1
methods = entropy,random
";

fn eam(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eam"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn setup(extra: &str) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let out = dir.path().join("out");
    (dir, cfg, out)
}

#[test]
fn full_pipeline_writes_manifests_and_is_reproducible() {
    let (_dir, cfg, out) = setup("");
    for cmd in ["train", "calibrate", "plan", "eval", "sweep", "export"] {
        ok(&eam(&cfg, &out, &[cmd]));
        assert!(out.join(format!("{cmd}.resolved.cfg")).exists(), "{cmd}");
        assert!(out.join(format!("{cmd}.sha256")).exists(), "{cmd}");
    }
    for f in [
        "model.eamc",
        "bank_fp32.eams",
        "bank_quantized.eams",
        "plan.eamp",
        "sweep.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(out.join("train.sha256")).unwrap();
    assert!(manifest
        .lines()
        .any(|l| l.ends_with("model.eamc") && l.split_whitespace().next().unwrap().len() == 64));

    let (_dir2, _, out2) = setup("");
    ok(&eam(&cfg, &out2, &["train"]));
    assert_eq!(
        fs::read(out.join("model.eamc")).unwrap(),
        fs::read(out2.join("model.eamc")).unwrap()
    );
    assert_eq!(
        fs::read(out.join("train.sha256")).unwrap(),
        fs::read(out2.join("train.sha256")).unwrap()
    );
}

#[test]
fn sweep_resumes_without_duplicating_rows() {
    let (_dir, cfg, out) = setup("");
    ok(&eam(&cfg, &out, &["train"]));
    ok(&eam(&cfg, &out, &["sweep"]));
    let first = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(
        first.lines().next().unwrap(),
        "tau,method,seed,top1,fixed_fraction,flops_saved_pct"
    );
    assert_eq!(first.lines().count(), 1 + 3 * 2 * 2);

    let lines: Vec<&str> = first.lines().collect();
    fs::write(
        out.join("sweep.csv"),
        format!("{}\n", lines[..5].join("\n")),
    )
    .unwrap();
    ok(&eam(&cfg, &out, &["sweep"]));
    let resumed = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut a: Vec<&str> = first.lines().collect();
    let mut b: Vec<&str> = resumed.lines().collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);

    ok(&eam(&cfg, &out, &["sweep"]));
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap(), resumed);
}

#[test]
fn missing_dataset_is_a_user_error() {
    let (dir, cfg, out) = setup("");
    let extra = format!(
        "[data]\nsource = idx\nimages = {}\nlabels = {}\n",
        dir.path().join("nope-images").display(),
        dir.path().join("nope-labels").display()
    );
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let o = eam(&cfg, &out, &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn missing_checkpoint_and_bad_flags_exit_one() {
    let (_dir, cfg, out) = setup("");
    assert_eq!(eam(&cfg, &out, &["eval"]).status.code(), Some(1));
    assert_eq!(eam(&cfg, &out, &["frobnicate"]).status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_eam"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn invalid_config_is_rejected() {
    let (_dir, cfg, out) = setup("[fixing]\ntau = 1.5\n");
    assert_eq!(eam(&cfg, &out, &["plan"]).status.code(), Some(1));
    let (_dir, cfg, out) = setup("[model]\nwidth = 3\n");
    assert_eq!(eam(&cfg, &out, &["train"]).status.code(), Some(1));
}
