use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMOKE: &str = r#"
name = "tiny"
seed = 3

[data]
train_covers = 8
eval_covers = 4

[model]
height = 16
width = 16
msg_len = 8
enc_channels = 4
ext_channels = 4
feature_dim = 8

[train]
epochs = 1
pool = ["identity"]

[eval]
attacks = ["identity", "purify(gamma=0.5,sigma=0.02)"]
"#;

const FOUR_SYMBOL: &str = "2 4\n0.25 0.25 0 0\n0 0 0.25 0.25\n";

fn vibmark(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vibmark"))
        .args(args)
        .env("VIBMARK_OUT", out_root)
        .output()
        .expect("spawn vibmark")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(out: Output) -> Value {
    serde_json::from_str(&ok(out)).unwrap()
}

#[test]
fn help_lists_subcommands_and_attack_grammar() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(vibmark(&["--help"], dir.path()));
    for cmd in ["train", "decode", "analyze", "detect", "ib-curve", "mss-verify", "sweep-beta", "compare"] {
        assert!(help.contains(cmd), "missing {cmd}");
    }
    assert!(help.contains("purify(gamma=0.5,sigma=0.02)"));
}

#[test]
fn mss_verify_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let joint = dir.path().join("j.txt");
    fs::write(&joint, FOUR_SYMBOL).unwrap();
    let v = json(vibmark(&["mss-verify", "--joint", joint.to_str().unwrap()], dir.path()));
    assert_eq!(v["theorem2_holds"], true);
    assert_eq!(v["theorem3_holds"], true);
    assert_eq!(v["partitions_checked"], 15);
}

#[test]
fn ib_curve_emits_one_row_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let joint = dir.path().join("j.txt");
    fs::write(&joint, FOUR_SYMBOL).unwrap();
    let csv = ok(vibmark(&["ib-curve", "--joint", joint.to_str().unwrap(), "--betas", "4,1,0.5,0.1", "--z-size", "2"], dir.path()));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta,rate,relevance,epsilon,objective,converged");
    assert_eq!(lines.len(), 5);
    let last: Vec<f64> = lines[4].split(',').take(5).map(|f| f.parse().unwrap()).collect();
    assert!((last[2] - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn malformed_joint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let joint = dir.path().join("j.txt");
    fs::write(&joint, "2 2\n0.5 0.5\n").unwrap();
    let out = vibmark(&["mss-verify", "--joint", joint.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_config_key_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "name = \"x\"\n[train]\nepochz = 2\n").unwrap();
    let out = vibmark(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz") && err.contains("line 3"), "{err}");
}

#[test]
fn train_decode_analyze_detect_compare() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let ckpt = root.join("ckpt.json");
    let run_dir = ok(vibmark(&["train", "--quiet", "--config", cfg.to_str().unwrap(), "--out", ckpt.to_str().unwrap()], root));
    assert_eq!(Path::new(run_dir.trim()), root.join("tiny"));
    for f in ["metrics.csv", "report.json", "model.json", "loss.dat", "val_ber.dat"] {
        assert!(root.join("tiny").join(f).is_file(), "{f}");
    }
    let ckpt = ckpt.to_str().unwrap();

    let covers = root.join("covers");
    ok(vibmark(&["gen-covers", "--out-dir", covers.to_str().unwrap(), "--n", "6", "--size", "16"], root));
    let cover = covers.join("cover_0.pgm");
    let marked = root.join("marked.pgm");
    ok(vibmark(&["embed", "--ckpt", ckpt, "--image", cover.to_str().unwrap(), "--bits", "10110010", "--out", marked.to_str().unwrap()], root));
    let d = json(vibmark(&["decode", "--ckpt", ckpt, "--image", marked.to_str().unwrap()], root));
    assert_eq!(d["bits"].as_str().unwrap().len(), 8);
    assert_eq!(d["logits"].as_array().unwrap().len(), 8);

    let c = covers.to_str().unwrap();
    let a = json(vibmark(&["analyze", "--ckpt", ckpt, "--covers", c, "--attack", "purify(gamma=0.5,sigma=0.02)"], root));
    assert_eq!(a["images"], 6);
    let s = &a["spectral"]["s_atk"];
    let total = s["low"].as_f64().unwrap() + s["mid"].as_f64().unwrap() + s["high"].as_f64().unwrap();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(a["interference"]["rho"]["mean"].is_number());

    let det = json(vibmark(&["detect", "--ckpt", ckpt, "--covers", c, "--noise-sigma", "0.05"], root));
    for k in ["fp_rate", "fn_rate", "fn_rate_noised"] {
        let r = det[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r), "{k}");
    }

    let run = root.join("tiny");
    let cmp = json(vibmark(&["compare", run.to_str().unwrap(), run.to_str().unwrap()], root));
    for row in cmp["attacks"].as_array().unwrap() {
        assert_eq!(row["ber_delta"], 0.0);
        assert_eq!(row["rho_delta"], 0.0);
    }
}

#[test]
fn sweep_beta_writes_one_run_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, SMOKE).unwrap();
    ok(vibmark(&["sweep-beta", "--quiet", "--config", cfg.to_str().unwrap(), "--betas", "0,1e-4"], root));
    let sweep = root.join("tiny");
    let dat = fs::read_to_string(sweep.join("ber_vs_beta.dat")).unwrap();
    assert_eq!(dat.lines().count(), 2);
    let ckpts = fs::read_dir(&sweep)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("model.json").is_file())
        .count();
    assert_eq!(ckpts, 2);
}

#[test]
fn bad_attack_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vibmark(&["analyze", "--ckpt", "x", "--covers", "y", "--attack", "blur(k=3)"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
