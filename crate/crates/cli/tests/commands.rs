use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "spec": {"T": 20, "beta_start": 1e-3, "beta_end": 0.2, "tau": 2, "dim": 1},
  "seed": 11,
  "dataset": {"kind": "gaussian", "mu": [1.5], "s2": 0.5},
  "train_score": {"steps": 60, "batch_size": 16, "lr": 1e-3, "hidden": [16]},
  "train_schedule": {"steps": 40, "batch_size": 16, "lr": 1e-3, "hidden": [8], "loss_variant": "exact"},
  "schedule_search": {"grid_m": 2, "eval_count": 64, "metric_samples": 64},
  "bounds": {"mc_draws": 200},
  "evaluate": {"held_out": 128}
}"#;

fn bddm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bddm"))
        .args(args)
        .env("BDDM_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    score: PathBuf,
    net: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let score = root.join("score.json");
        let net = root.join("schedule-net.json");
        ok(&bddm(&[
            "train-score",
            "--config",
            s(&config),
            "--out",
            s(&score),
        ]));
        ok(&bddm(&[
            "train-schedule",
            "--config",
            s(&config),
            "--score",
            s(&score),
            "--out",
            s(&net),
        ]));
        Fixture {
            _dir: dir,
            root,
            config,
            score,
            net,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn schedule(&self, grid_m: &str, out: &Path) -> Output {
        bddm(&[
            "schedule",
            "--config",
            s(&self.config),
            "--score",
            s(&self.score),
            "--schedule-net",
            s(&self.net),
            "--grid-m",
            grid_m,
            "--out",
            s(out),
        ])
    }
}

#[test]
fn missing_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, TINY.replace(r#""T": 20, "#, "")).unwrap();
    let out = bddm(&[
        "train-score",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("spec.T"), "{}", stderr(&out));

    fs::write(
        &cfg,
        TINY.replace(
            r#""lr": 1e-3, "hidden": [16]"#,
            r#""lr": "fast", "hidden": [16]"#,
        ),
    )
    .unwrap();
    let out = bddm(&[
        "train-score",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("train_score.lr") && stderr(&out).contains("line 5"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn pipeline_artifacts_embed_spec_and_seed() {
    let f = Fixture::new();
    for p in [
        f.score.clone(),
        f.path("score.report.json"),
        f.net.clone(),
        f.path("schedule-net.report.json"),
    ] {
        let v = json(&p);
        assert_eq!(v["spec"]["T"], 20, "{}", p.display());
        assert!(
            v.get("master_seed").or(v.get("seed")).is_some(),
            "{}",
            p.display()
        );
    }
    assert_eq!(
        json(&f.path("score.report.json"))["report"]["loss_curve"]
            .as_array()
            .unwrap()
            .len(),
        60
    );
    assert!(json(&f.net)["score_fingerprint"].is_string());

    let sched = f.path("sched.json");
    ok(&f.schedule("1", &sched));
    assert_eq!(
        json(&f.path("sched.search.json"))["report"]["candidates"]
            .as_array()
            .unwrap()
            .len(),
        1
    );
    ok(&f.schedule("2", &sched));
    assert_eq!(
        json(&f.path("sched.search.json"))["report"]["candidates"]
            .as_array()
            .unwrap()
            .len(),
        4
    );
    let file = json(&sched);
    assert_eq!(file["master_seed"], 11);
    let betas: Vec<f64> = file["betas_hat"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b.as_f64().unwrap())
        .collect();
    assert!(!betas.is_empty() && betas.windows(2).all(|w| w[0] < w[1]));

    let empty = f.path("empty.csv");
    ok(&bddm(&[
        "sample",
        "--schedule",
        s(&sched),
        "--score",
        s(&f.score),
        "--count",
        "0",
        "--out",
        s(&empty),
    ]));
    assert_eq!(fs::read_to_string(&empty).unwrap(), "x1\n");
    assert_eq!(json(&f.path("empty.json"))["count"], 0);

    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = f.path(&format!("ddim{k}.csv"));
        ok(&bddm(&[
            "sample",
            "--schedule",
            s(&sched),
            "--score",
            s(&f.score),
            "--count",
            "50",
            "--process",
            "ddim",
            "--eta",
            "0",
            "--seed",
            "5",
            "--out",
            s(&out),
        ]));
        bytes.push(fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(String::from_utf8_lossy(&bytes[0]).lines().count(), 51);

    let report = f.path("eval.json");
    ok(&bddm(&[
        "evaluate",
        "--config",
        s(&f.config),
        "--samples",
        s(&f.path("ddim0.csv")),
        "--out",
        s(&report),
    ]));
    let v = json(&report);
    assert_eq!(v["count"], 50);
    assert!(v["mmd2"].as_f64().unwrap().is_finite());
    assert_eq!(v["covariance"].as_array().unwrap().len(), 1);
}

#[test]
fn sample_rejects_unknown_process() {
    let f = Fixture::new();
    let sched = f.path("sched.json");
    ok(&f.schedule("1", &sched));
    let out = bddm(&[
        "sample",
        "--schedule",
        s(&sched),
        "--score",
        s(&f.score),
        "--count",
        "4",
        "--process",
        "langevin",
        "--out",
        s(&f.path("x.csv")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("langevin"));
}

#[test]
fn mismatched_spec_is_a_compatibility_error() {
    let f = Fixture::new();
    let other = f.path("other.json");
    fs::write(&other, TINY.replace(r#""T": 20"#, r#""T": 30"#)).unwrap();
    let out = bddm(&[
        "train-schedule",
        "--config",
        s(&other),
        "--score",
        s(&f.score),
        "--out",
        s(&f.path("n.json")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // A schedule net paired with a different score network is refused.
    let score2 = f.path("score2.json");
    ok(&bddm(&[
        "train-score",
        "--config",
        s(&f.config),
        "--seed",
        "12",
        "--out",
        s(&score2),
    ]));
    let out = bddm(&[
        "schedule",
        "--config",
        s(&f.config),
        "--score",
        s(&score2),
        "--schedule-net",
        s(&f.net),
        "--out",
        s(&f.path("s.json")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn compare_bounds_rows_and_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, TINY).unwrap();
    let csv = dir.path().join("bounds.csv");
    ok(&bddm(&[
        "compare-bounds",
        "--config",
        s(&cfg),
        "--out",
        s(&csv),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let t: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(t, ["2", "4", "6", "8", "10", "12", "14", "16", "18"]);
    assert_eq!(json(&dir.path().join("bounds.json"))["rows"], 9);

    fs::write(
        &cfg,
        TINY.replace(
            r#""mc_draws": 200"#,
            r#""mc_draws": 200, "t_values": [1, 5]"#,
        ),
    )
    .unwrap();
    let out = bddm(&["compare-bounds", "--config", s(&cfg), "--out", s(&csv)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn gs_baseline_counts_and_refusal() {
    let f = Fixture::new();
    let out = bddm(&[
        "gs-baseline",
        "--config",
        s(&f.config),
        "--score",
        s(&f.score),
        "--steps",
        "7",
        "--out",
        s(&f.path("g.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("9^7"), "{}", stderr(&out));

    let g = f.path("g1.json");
    let out = bddm(&[
        "gs-baseline",
        "--config",
        s(&f.config),
        "--score",
        s(&f.score),
        "--steps",
        "1",
        "--out",
        s(&g),
    ]);
    ok(&out);
    assert!(
        stderr(&out).contains("exhaustive search over 9 candidate schedules"),
        "{}",
        stderr(&out)
    );
    assert_eq!(
        json(&f.path("g1.search.json"))["report"]["candidate_count"],
        9
    );
    assert_eq!(json(&g)["betas_hat"].as_array().unwrap().len(), 1);
}
