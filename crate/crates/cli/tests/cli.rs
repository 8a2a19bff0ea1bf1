//! The `lmim` binary end to end: outputs, determinism and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "preset = full
synth_classes = 4
synth_count = 40
synth_side = 16
patch_size = 4
dim = 16
depth = 2
heads = 2
decoder_depth = 1
projector_hidden = 32
target_depth = 2
grid = 4
gap = 0
pool_k = 4
batch_size = 8
epochs = 2
warmup_epochs = 1
base_lr = 0.05
";

fn lmim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmim"))
        .args(args)
        .env_remove("LMIM_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(o: &Output, key: &str) -> String {
    let text = stdout(o);
    let prefix = format!("{key}=");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix).map(str::to_owned))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

fn pretrain(dir: &Path, name: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let cfg = tiny_config(dir);
    let out = dir.join(name);
    let mut args = vec!["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (lmim(&args), out)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for p in [&a, &b] {
        let o = lmim(&["synth", "--classes", "3", "--count", "12", "--seed", "4", "--side", "16", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{o:?}");
        assert_eq!(value(&o, "images"), "12");
    }
    assert_eq!(tree(&a), tree(&b));
    let index = fs::read_to_string(a.join("labels.txt")).unwrap();
    assert_eq!(index.lines().filter(|l| !l.starts_with('#')).count(), 12);
}

#[test]
fn synth_errors_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("plain");
    fs::write(&file, "x").unwrap();
    let under_file = file.join("sub");
    let o = lmim(&["synth", "--count", "2", "--side", "16", "--out", under_file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    let o = lmim(&["synth", "--count", "0", "--out", d.path().join("z").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_writes_artifacts_deterministically() {
    let d = tempfile::tempdir().unwrap();
    let (a, out_a) = pretrain(d.path(), "a", &[]);
    let (b, out_b) = pretrain(d.path(), "b", &[]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(b.status.success());
    assert_eq!(value(&a, "outcome"), "completed");
    for f in ["metrics.csv", "config.txt", "checkpoint.lmim"] {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{f}");
    }
    let cfg = fs::read_to_string(out_a.join("config.txt")).unwrap();
    // every key is written out, defaults included
    assert!(cfg.contains("weight_decay = ") && cfg.contains("gamma_end = ") && cfg.contains("preset = full"));
}

#[test]
fn seed_env_and_overrides() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let out = d.path().join("s");
    let o = Command::new(env!("CARGO_BIN_EXE_lmim"))
        .args(["pretrain", "--config", &cfg, "--override", "epochs=2", "--out", out.to_str().unwrap()])
        .env("LMIM_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("seed = 17\n"));

    let (o, _) = pretrain(d.path(), "bad", &["--override", "mask_ratoi=0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mask_ratoi"));
    let o = lmim(&["pretrain", "--preset", "nonexistent", "--out", d.path().join("n").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_three_with_partial_logs() {
    let d = tempfile::tempdir().unwrap();
    let (o, out) = pretrain(d.path(), "nan", &["--override", "base_lr=1e30", "--override", "warmup_epochs=0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(last.ends_with(",1"), "{last}");
    assert!(out.join("checkpoint.lmim").exists());
}

#[test]
fn eval_protocols() {
    let d = tempfile::tempdir().unwrap();
    let (o, out) = pretrain(d.path(), "run", &[]);
    assert!(o.status.success());
    let ck = out.join("checkpoint.lmim");
    let ck = ck.to_str().unwrap();
    for p in ["nn", "probe"] {
        let o = lmim(&["eval", "--checkpoint", ck, "--protocol", p]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let acc: f64 = value(&o, "accuracy").parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(value(&o, "pooling"), "topk4");
    }
    let o = lmim(&["eval", "--checkpoint", ck, "--protocol", "collapse"]);
    let cos: f64 = value(&o, "pooled_pair_cos").parse().unwrap();
    assert!((-1.0..=1.0).contains(&cos));

    let seg = d.path().join("seg");
    let o = lmim(&["eval", "--checkpoint", ck, "--protocol", "segment", "--out", seg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgms = fs::read_dir(&seg).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm").count();
    assert_eq!(pgms, 40);
    let csv = fs::read_to_string(seg.join("segments.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 40 * 16);
    let ari: f64 = value(&o, "mean_ari").parse().unwrap();
    assert!((-1.0..=1.0).contains(&ari));
}

#[test]
fn eval_rejects_mismatched_and_corrupt_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let (_, out) = pretrain(d.path(), "run", &[]);
    let ck = out.join("checkpoint.lmim");
    let other = d.path().join("other.cfg");
    fs::write(&other, format!("{TINY}dim = 32\n")).unwrap();
    let o = lmim(&["eval", "--checkpoint", ck.to_str().unwrap(), "--protocol", "nn", "--config", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = d.path().join("bad.lmim");
    fs::write(&bad, bytes).unwrap();
    let o = lmim(&["eval", "--checkpoint", bad.to_str().unwrap(), "--protocol", "nn"]);
    assert_eq!(o.status.code(), Some(5));
    let o = lmim(&["eval", "--checkpoint", d.path().join("missing").to_str().unwrap(), "--protocol", "nn"]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn gradcheck_passes_and_can_be_made_to_fail() {
    let o = lmim(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(value(&o, "result"), "pass");
    let worst: f64 = value(&o, "max_rel_err").parse().unwrap();
    assert!(worst < 1e-4);

    let o = lmim(&["gradcheck", "--tolerance", "0"]);
    assert!(!o.status.success());
    assert_eq!(value(&o, "result"), "fail");

    let o = lmim(&["gradcheck", "--mutate", "gelu"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gelu"));
}
