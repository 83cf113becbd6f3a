use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gdr::experiment::{cmd_verify, VerifyHooks};
use gdr::geometry::{self, GradientSet};
use gdr::{Ensemble, RatingEstimate};
use serde_json::Value;

const SMALL: &str = r#"
[dataset]
train_size = 300
test_size = 100

[dataset.synthetic]
n = 16
classes = 4
spread = 0.3
sibling_flip = 0.5

[ensemble]
hidden = [12]
grad_trained = 1
baselines = 1

[train]
learning_rate = 0.1
batch_size = 32
log_probe = 32

[gdr]
examples = 60
samples = 4000

[attack]
examples = 60
sweeps = [{ kind = "fgsm", epsilons = [0.0, 0.1, 0.3] }, { kind = "pgd_linf", epsilons = [0.1] }]
"#;

fn gdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn unknown_keys_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nbetta = 0.5\n");
    for cmd in ["train", "gdr", "attack"] {
        let o = gdr(&[cmd, "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains("betta"), "{}", stderr(&o));
    }
    assert!(!dir.path().join("ensembles").exists());
}

#[test]
fn invalid_values_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        ("[train]\nbeta = -1.0\n", "train.beta"),
        ("[dataset]\ntrain_size = 0\n", "dataset.train_size"),
        ("[attack]\nsweeps = [{ kind = \"fgsm\", epsilons = [-0.1] }]\n", "attack.sweeps"),
    ] {
        let cfg = write_config(dir.path(), text);
        let o = gdr(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{key} missing from: {}", stderr(&o));
    }
    let o = gdr(&["train", "--preset", "cifar"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_and_lists_every_check() {
    let o = gdr(&["verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for check in [
        "closed_form_single",
        "closed_form_pair",
        "closed_form_triple",
        "fd_grad_loss_cosine",
        "fd_grad_loss_angle_sum",
        "fd_grad_loss_quad",
        "attack_constraints",
        "metric_identities",
        "idx_round_trip",
    ] {
        assert!(out.contains(check), "{check}");
    }
}

fn wrong_sign_pair(g: &GradientSet) -> gdr::Result<RatingEstimate> {
    let mut r = geometry::r_pair(g)?;
    r.value = -r.value;
    Ok(r)
}

#[test]
fn verify_names_an_injected_fault() {
    let hooks = VerifyHooks {
        r_pair: wrong_sign_pair,
        ..VerifyHooks::default()
    };
    let r = cmd_verify(&hooks);
    assert!(!r.passed());
    assert_eq!(r.failed(), vec!["closed_form_pair"]);
    assert!(cmd_verify(&VerifyHooks::default()).passed());
}

#[test]
fn train_gdr_attack_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gdr(&["train", "--config", cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    // Same seeds: byte-identical checkpoints and models.
    let (fa, fb) = (files_under(&a.join("ensembles")), files_under(&b.join("ensembles")));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        if k.extension().is_some_and(|e| e == "gden") {
            assert_eq!(v, &fb[k], "{}", k.display());
        }
    }
    assert!(fa.keys().any(|k| k.starts_with("grad-0/checkpoints")));

    let report = read_json(&a.join("train_report.json"));
    let kinds: Vec<&str> = report["ensembles"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"grad") && kinds.contains(&"baseline") && kinds.contains(&"mixed"), "{kinds:?}");

    let out = a.to_str().unwrap();
    let o = gdr(&["gdr", "--config", cfg, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&a.join("gdr_report.json"));
    for e in summary["ensembles"].as_array().unwrap() {
        let g = e["gdr"].as_f64().unwrap();
        assert!((0.0..=0.5).contains(&g));
        let csv = std::fs::read_to_string(a.join("gdr").join(format!("{}.csv", e["name"].as_str().unwrap()))).unwrap();
        assert!(csv.starts_with("example_index,rating,std_error,sample_count,schema_version"));
        assert_eq!(csv.lines().count(), 61);
    }

    // A lone member and a duplicated member both rate exactly 1/2.
    let base = Ensemble::load(&a.join("ensembles/base-0")).unwrap();
    let single = dir.path().join("single");
    base.member(0).save_dir(&single).unwrap();
    let copies = dir.path().join("copies");
    Ensemble::copies(&base.models()[0], 3).unwrap().save_dir(&copies).unwrap();
    let o = gdr(&["gdr", "--config", cfg, "--out", dir.path().join("solo").to_str().unwrap(), single.to_str().unwrap(), copies.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let solo = read_json(&dir.path().join("solo/gdr_report.json"));
    for e in solo["ensembles"].as_array().unwrap() {
        assert_eq!(e["gdr"].as_f64().unwrap(), 0.5, "{}", e["name"]);
    }

    let o = gdr(&["attack", "--config", cfg, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(a.join("attack_sweep.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let header = rows.headers().unwrap().clone();
    for col in ["gdr", "attack", "epsilon", "ensemble_success", "cr", "cr_note", "consensus_accuracy", "schema_version"] {
        assert!(header.iter().any(|h| h == col), "{col} missing from {header:?}");
    }
    let idx = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut zero_rows = 0;
    for row in rows.records() {
        let row = row.unwrap();
        let eps: f64 = row[idx("epsilon")].parse().unwrap();
        let success: f64 = row[idx("ensemble_success")].parse().unwrap();
        if eps == 0.0 {
            assert_eq!(success, 0.0);
            assert_eq!(&row[idx("cr")], "", "CR must be null at zero budget");
            assert!(!row[idx("cr_note")].is_empty());
            zero_rows += 1;
        }
    }
    assert_eq!(zero_rows, kinds.len());
    let attack = read_json(&a.join("attack_report.json"));
    let zero = attack["reports"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["report"]["attack_config"]["epsilon"].as_f64() == Some(0.0))
        .expect("zero-budget report");
    assert!(zero["report"]["collaboration_rating"].is_null());
    assert!(zero["report"]["collaboration_rating_note"].is_string());
}

#[test]
fn seed_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("grad_trained = 1", "grad_trained = 0").replace("baselines = 1", "baselines = 1\nrecombine = false"));
    let cfg = cfg.to_str().unwrap();
    let run = |out: &str, seed: &str| {
        let o = gdr(&["train", "--config", cfg, "--out", out, "--seed-init", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(Path::new(out).join("ensembles/base-0/m0.gden")).unwrap()
    };
    let d = dir.path();
    let one = run(d.join("1").to_str().unwrap(), "1");
    let again = run(d.join("1b").to_str().unwrap(), "1");
    let two = run(d.join("2").to_str().unwrap(), "2");
    assert_eq!(one, again);
    assert_ne!(one, two);
    let report = read_json(&d.join("2/train_report.json"));
    assert_eq!(report["seeds"]["init"], 2);
}
