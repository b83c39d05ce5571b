use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn equipair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equipair"))
        .args(args)
        .env("EQUIPAIR_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

const TINY_CONFIG: &str = r#"{
  "encoder": {"k_small": 4, "k_large": 8, "widths": [4, 6, 8], "depth": 2, "head_hidden": 6, "points": 48},
  "train": {"batch_size": 2, "learning_rate": 0.001}
}"#;

fn tiny_dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    let out = equipair(&["gen", "--task", "lid", "--count", "3", "--seed", "4", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    data
}

#[test]
fn gen_splits_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = equipair(&["gen", "--task", "peg", "--count", "10", "--seed", "1", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("train 6, test 4"));
    let pair_dirs = std::fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(pair_dirs, 10);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 6);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 4);
    assert!(data.join("run-config.json").exists());
    assert_eq!(code(&equipair(&["validate", "--data", p(&data)])), 0);

    let again = dir.path().join("e");
    equipair(&["gen", "--task", "peg", "--count", "10", "--seed", "1", "--out", p(&again)]);
    let (a, b) = (snapshot(&data), snapshot(&again));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        if k != Path::new("run-config.json") {
            assert_eq!(v, &b[k], "{} differs", k.display());
        }
    }
}

#[test]
fn gen_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    assert_eq!(code(&equipair(&["gen", "--task", "lid", "--count", "1", "--out", out])), 2);
    assert_eq!(code(&equipair(&["gen", "--task", "chair", "--count", "4", "--out", out])), 2);
    assert_eq!(code(&equipair(&["gen", "--task", "lid", "--out", out])), 2);
}

#[test]
fn validate_reports_mutations() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let xyz = data.join("pair_0001").join("B.xyz");
    let original = std::fs::read_to_string(&xyz).unwrap();
    let mut lines: Vec<String> = original.lines().map(String::from).collect();
    let fields: Vec<&str> = lines[1].split_whitespace().collect();
    lines[1] = format!("{} {} -1.0e-1", fields[0], fields[1]);
    std::fs::write(&xyz, lines.join("\n") + "\n").unwrap();
    let out = equipair(&["validate", "--data", p(&data)]);
    assert_eq!(code(&out), 1);
    assert!(text(&out.stdout).contains("pair_0001"), "{}", text(&out.stdout));
    std::fs::write(&xyz, original).unwrap();
    assert_eq!(code(&equipair(&["validate", "--data", p(&data)])), 0);

    let manifest_path = data.join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let first = manifest["train"][0].clone();
    manifest["test"].as_array_mut().unwrap().push(first);
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();
    let out = equipair(&["validate", "--data", p(&data)]);
    assert_eq!(code(&out), 1);
    assert!(text(&out.stdout).contains("both train and test"));
}

#[test]
fn sample_cube_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("cube.off");
    std::fs::write(
        &mesh,
        "OFF\n8 6 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n\
         4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 1 2 6 5\n4 2 3 7 6\n4 3 0 4 7\n",
    )
    .unwrap();
    let out_path = dir.path().join("cube.xyz");
    let out = equipair(&["sample", "--mesh", p(&mesh), "--out", p(&out_path), "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let spacing: f64 = stdout.trim().rsplit(' ').next().unwrap().trim_end_matches(')').parse().unwrap();
    let body = std::fs::read_to_string(&out_path).unwrap();
    let pts: Vec<[f64; 3]> = body
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    assert_eq!(pts.len(), 1024);
    let mut min = f64::INFINITY;
    for i in 0..pts.len() {
        let on_face = pts[i].iter().any(|c| c.abs() < 1e-12 || (c - 1.0).abs() < 1e-12);
        assert!(on_face && pts[i].iter().all(|c| (-1e-12..=1.0 + 1e-12).contains(c)));
        for j in i + 1..pts.len() {
            let d: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
            min = min.min(d.sqrt());
        }
    }
    assert!(min >= spacing * (1.0 - 1e-9), "min {min} spacing {spacing}");

    let again = dir.path().join("again.xyz");
    equipair(&["sample", "--mesh", p(&mesh), "--out", p(&again), "--seed", "3"]);
    assert_eq!(std::fs::read(&again).unwrap(), body.into_bytes());

    assert_eq!(code(&equipair(&["sample", "--mesh", p(&mesh), "--out", p(&again), "--n", "0"])), 2);
    std::fs::write(&mesh, "OFF\n3 1 0\n0 0 0\n1 0 zero\n0 1 0\n3 0 1 2\n").unwrap();
    let out = equipair(&["sample", "--mesh", p(&mesh), "--out", p(&again)]);
    assert_eq!(code(&out), 2);
    assert!(text(&out.stderr).contains(":4:"), "{}", text(&out.stderr));
}

#[test]
fn train_and_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let train = |branch: &str, out: &Path| {
        let o = equipair(&[
            "train", "--branch", branch, "--data", p(&data), "--config", p(&cfg), "--out", p(out), "--epochs", "2", "--seed",
            "5",
        ]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    };
    let (b, a, b2) = (dir.path().join("b"), dir.path().join("a"), dir.path().join("b2"));
    train("B", &b);
    train("A", &a);
    train("B", &b2);
    for name in ["checkpoint.json", "loss_history.csv", "run-config.json"] {
        assert!(b.join(name).exists(), "{name} missing");
    }
    assert_eq!(std::fs::read_to_string(b.join("loss_history.csv")).unwrap().lines().count(), 3);
    assert_eq!(std::fs::read(b.join("checkpoint.json")).unwrap(), std::fs::read(b2.join("checkpoint.json")).unwrap());

    let names = |d: &Path| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("checkpoint.json")).unwrap()).unwrap();
        v["tensors"].as_object().unwrap().keys().cloned().collect()
    };
    let (nb, na) = (names(&b), names(&a));
    assert!(nb.iter().all(|n| !na.contains(n)));

    let ckb = b.join("checkpoint.json");
    let cka = a.join("checkpoint.json");
    let eval = |out: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--data", p(&data), "--seed", "2", "--out", p(out)];
        args.extend_from_slice(extra);
        equipair(&args)
    };
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    assert_eq!(code(&eval(&e1, &["--ckpt-b", p(&ckb), "--ckpt-a", p(&cka)])), 0);
    assert_eq!(code(&eval(&e2, &["--ckpt-b", p(&ckb), "--ckpt-a", p(&cka)])), 0);
    for f in ["metrics.json", "metrics.csv", "samples.csv"] {
        assert_eq!(std::fs::read(e1.join(f)).unwrap(), std::fs::read(e2.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(e1.join("metrics.csv")).unwrap().lines().count(), 3);

    let oracle = dir.path().join("oracle");
    assert_eq!(code(&eval(&oracle, &["--oracle-gt"])), 0);
    let csv = std::fs::read_to_string(oracle.join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(1).take(3).map(|x| x.parse().unwrap()).collect();
        assert!(f.iter().all(|v| v.abs() < 1e-9), "{line}");
    }

    let missing = dir.path().join("nope.json");
    assert_eq!(code(&eval(&e1, &["--ckpt-b", p(&missing), "--ckpt-a", p(&cka)])), 2);
    assert_eq!(code(&eval(&e1, &["--ckpt-b", p(&cka), "--ckpt-a", p(&cka)])), 2);

    let other_cfg = dir.path().join("other.json");
    std::fs::write(&other_cfg, TINY_CONFIG.replace("\"points\": 48", "\"points\": 40")).unwrap();
    let other = dir.path().join("other");
    let o = equipair(&[
        "train", "--branch", "A", "--data", p(&data), "--config", p(&other_cfg), "--out", p(&other), "--epochs", "1",
    ]);
    assert_eq!(code(&o), 0);
    let o = eval(&e1, &["--ckpt-b", p(&ckb), "--ckpt-a", p(&other.join("checkpoint.json"))]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("points"), "{}", text(&o.stderr));
}

#[test]
fn joint_checkpoint_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let j = dir.path().join("j");
    let o = equipair(&["train", "--branch", "joint", "--data", p(&data), "--config", p(&cfg), "--out", p(&j), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let e = dir.path().join("e");
    let o = equipair(&["eval", "--data", p(&data), "--ckpt-joint", p(&j.join("checkpoint.json")), "--out", p(&e)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "joint");
}

#[test]
fn bad_config_and_environment_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = dir.path().join("o");
    let o = equipair(&["train", "--branch", "B", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_equipair"))
        .args(["validate", "--data", p(&data)])
        .env("EQUIPAIR_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(code(&equipair(&["train", "--branch", "C", "--data", p(&data), "--out", p(&out)])), 2);
}
