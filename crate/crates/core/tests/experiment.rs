use std::fs;
use std::path::Path;

use vibmark::experiment::{compare_runs, run_experiment, ExperimentConfig, Outcome, DEFAULT_BETA_SWEEP, METRICS_HEADER};

fn tiny(name: &str, root: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
name = "{name}"
seed = 5
output_dir = "{}"

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
attacks = ["identity"]
"#,
        root.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn leftovers(root: &Path) -> Vec<String> {
    fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial"))
        .collect()
}

#[test]
fn minimal_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (out, outcome) = run_experiment(&tiny("smoke", dir.path())).unwrap();
    assert_eq!(out, dir.path().join("smoke"));
    for f in ["metrics.csv", "report.json", "model.json", "loss.dat", "val_ber.dat"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(lines[1].starts_with("smoke,epoch:0,"));
    assert!(lines[2].starts_with("smoke,eval,"));
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), METRICS_HEADER.split(',').count());
        let ber: f64 = cols[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&ber));
        for c in cols[4..].iter().filter(|c| !c.is_empty()) {
            assert!(c.parse::<f64>().unwrap().is_finite(), "{line}");
        }
    }
    for dat in ["loss.dat", "val_ber.dat"] {
        let text = fs::read_to_string(out.join(dat)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 2);
    }
    let Outcome::Single(report) = outcome else { panic!("expected a single run") };
    assert_eq!(report.history.len(), 1);
    assert!(leftovers(dir.path()).is_empty());
}

#[test]
fn beta_sweep_writes_one_checkpoint_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("sweep", dir.path());
    cfg.beta_sweep = Some(DEFAULT_BETA_SWEEP.to_vec());
    let (out, outcome) = run_experiment(&cfg).unwrap();
    let Outcome::Sweep(sweep) = outcome else { panic!("expected a sweep") };
    assert_eq!(sweep.points.len(), 7);
    let ckpts = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("model.json").is_file())
        .count();
    assert_eq!(ckpts, 7);
    let dat = fs::read_to_string(out.join("ber_vs_beta.dat")).unwrap();
    let rows: Vec<Vec<f64>> = dat.lines().map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 7);
    for (row, beta) in rows.iter().zip(DEFAULT_BETA_SWEEP) {
        assert_eq!(row.len(), 2);
        assert_eq!(row[0], beta);
    }
    assert!(out.join("report.json").is_file());
}

#[test]
fn same_config_gives_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, _) = run_experiment(&tiny("det", a.path())).unwrap();
    let (db, _) = run_experiment(&tiny("det", b.path())).unwrap();
    for f in ["metrics.csv", "model.json", "loss.dat"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_identical_and_mismatched_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = run_experiment(&tiny("a", dir.path())).unwrap();
    let same = compare_runs(&a, &a).unwrap();
    assert!(same.attacks.iter().all(|d| d.ber_delta == 0.0 && d.rho_delta == 0.0));

    let mut other = tiny("b", dir.path());
    other.eval.attacks = vec!["gaussian(sigma=0.05)".parse().unwrap()];
    let (b, _) = run_experiment(&other).unwrap();
    assert!(compare_runs(&a, &b).is_err());
}

#[test]
fn failed_run_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("broken", dir.path());
    cfg.eval.checkpoint = Some(dir.path().join("missing.json"));
    assert!(run_experiment(&cfg).is_err());
    assert!(!dir.path().join("broken").exists());
    assert!(leftovers(dir.path()).is_empty());
}

#[test]
fn evaluating_a_checkpoint_reproduces_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = run_experiment(&tiny("train", dir.path())).unwrap();
    let mut cfg = tiny("reload", dir.path());
    cfg.eval.checkpoint = Some(a.join("model.json"));
    let (b, outcome) = run_experiment(&cfg).unwrap();
    let Outcome::Single(report) = outcome else { panic!() };
    assert!(report.history.is_empty());
    let eval_rows = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("metrics.csv"))
            .unwrap()
            .lines()
            .filter(|l| l.contains(",eval,"))
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert_eq!(eval_rows(&a), eval_rows(&b));
}

#[test]
fn config_errors_name_the_field() {
    let unknown = ExperimentConfig::from_toml("name = \"x\"\n\n[model]\nwidht = 3\n").unwrap_err().to_string();
    assert!(unknown.contains("widht") && unknown.contains("line 4"), "{unknown}");
    let bad_attack = ExperimentConfig::from_toml("name = \"x\"\n[eval]\nattacks = [\"blur\"]\n").unwrap_err().to_string();
    assert!(bad_attack.contains("blur"), "{bad_attack}");
    let dup = ExperimentConfig::from_toml("name = \"x\"\nbeta_sweep = [0.0, 0.0]\n").unwrap_err().to_string();
    assert!(dup.contains("beta_sweep"), "{dup}");
    assert!(ExperimentConfig::from_toml("name = \"../x\"\n").is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("rt", dir.path());
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["smoke.toml", "acceptance.toml"] {
        ExperimentConfig::load(&root.join(name)).unwrap();
    }
}
