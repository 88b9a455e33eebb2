use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaitlab_core::checkpoint::Checkpoint;
use gaitlab_core::dataset::read_jsonl;
use gaitlab_core::models::{Encoder, ModelConfig};
use gaitlab_core::pose::height;
use serde_json::{json, Value};
use tempfile::TempDir;

fn gaitlab(dir: &Path, args: &[&str]) -> Output {
    gaitlab_env(dir, args, &[])
}

fn gaitlab_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gaitlab"));
    cmd.current_dir(dir).args(args).env_remove("GAITLAB_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn gaitlab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn record(subject: &str, seq: &str, frames: Vec<Vec<[f64; 2]>>) -> String {
    json!({ "subject_id": subject, "sequence_id": seq, "frames": frames }).to_string()
}

fn write_lines(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// Small synthetic dataset with split files under `dir/d`.
fn generated(dir: &Path) -> PathBuf {
    let out = gaitlab(
        dir,
        &[
            "generate", "--mode", "height-only", "--identities", "5", "--seqs", "4", "--frames", "16", "--seed", "3",
            "--train-per-identity", "2", "--out", "d",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("d")
}

const SMALL_TRAIN: [&str; 8] = [
    "--set", "p=3", "--set", "k=2", "--set", "samples_per_sequence=2", "--set", "model.c_emb=16",
];

#[test]
fn help_and_version_exit_zero() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&gaitlab(dir.path(), &["--help"])), 0);
    assert_eq!(code(&gaitlab(dir.path(), &["--version"])), 0);
    assert_eq!(code(&gaitlab(dir.path(), &["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_64() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&gaitlab(dir.path(), &[])), 64);
    assert_eq!(code(&gaitlab(dir.path(), &["frobnicate"])), 64);
    assert_eq!(code(&gaitlab(dir.path(), &["stats", "--dataset", "x.jsonl", "--out", "s.json", "--bogus"])), 64);
    assert_eq!(code(&gaitlab(dir.path(), &["stats", "--dataset", "x.jsonl"])), 64);
    assert_eq!(code(&gaitlab(dir.path(), &["normalize", "--dataset", "x", "--scheme", "nope", "--out", "y"])), 64);
}

#[test]
fn empty_dataset_exits_2_and_records_failure() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = gaitlab(dir.path(), &["stats", "--dataset", "empty.jsonl", "--out", "s.json"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!dir.path().join("s.json").exists());
    let m = read_json(dir.path().join("s.run.json"));
    assert_eq!(m["status"], "error");
    assert_eq!(m["exit_code"], 2);
    assert!(m["error"].as_str().unwrap().contains("empty"), "{m}");
}

#[test]
fn missing_and_malformed_inputs_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = gaitlab(dir.path(), &["stats", "--dataset", "absent.jsonl", "--out", "s.json"]);
    assert_eq!(code(&out), 2);
    std::fs::write(dir.path().join("bad.jsonl"), "{\"subject_id\": 3}\n").unwrap();
    let out = gaitlab(dir.path(), &["stats", "--dataset", "bad.jsonl", "--out", "s.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

#[test]
fn zero_height_pose_exits_3_naming_the_sequence() {
    let dir = TempDir::new().unwrap();
    let flat: Vec<[f64; 2]> = (0..18).map(|j| [j as f64, 5.0]).collect();
    write_lines(&dir.path().join("flat.jsonl"), &[record("a", "walk-7", vec![flat])]);
    let out = gaitlab(dir.path(), &["normalize", "--dataset", "flat.jsonl", "--scheme", "skeleton-scale", "--out", "n.jsonl"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("walk-7"), "{}", stderr(&out));
    assert!(!dir.path().join("n.jsonl").exists());
}

#[test]
fn stats_of_two_poses_match_hand_values() {
    let dir = TempDir::new().unwrap();
    // pose a: joint j at (j, 2j); pose b: joint j at (10 + j, 3j)
    let a: Vec<[f64; 2]> = (0..18).map(|j| [j as f64, 2.0 * j as f64]).collect();
    let b: Vec<[f64; 2]> = (0..18).map(|j| [10.0 + j as f64, 3.0 * j as f64]).collect();
    write_lines(&dir.path().join("two.jsonl"), &[record("s", "q", vec![a, b])]);
    let out = gaitlab(dir.path(), &["stats", "--dataset", "two.jsonl", "--frame-width", "100", "--out", "s.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s = read_json(dir.path().join("s.json"));
    let f = |v: &Value| v.as_f64().unwrap();
    let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
    // pelvis is the hip midpoint (joints 8 and 11): (9.5, 19) and (19.5, 28.5)
    assert!(close(f(&s["mean_pelvis"][0]), 14.5));
    assert!(close(f(&s["mean_pelvis"][1]), 23.75));
    // heights 34 and 51
    assert!(close(f(&s["mean_height"]), 42.5));
    assert!(close(f(&s["frame_width"]), 100.0));
    for j in 0..18 {
        let jf = j as f64;
        assert!(close(f(&s["per_joint_mean"][j][0]), jf + 5.0));
        assert!(close(f(&s["per_joint_mean"][j][1]), 2.5 * jf));
        assert!(close(f(&s["per_joint_std"][j][0]), 5.0));
        assert!(close(f(&s["per_joint_std"][j][1]), 0.5 * jf));
    }
}

#[test]
fn stats_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let ds = d.join("dataset.jsonl");
    let ids = d.join("train_ids.json");
    let args = |out: &str| {
        vec![
            "stats".to_string(),
            "--dataset".into(),
            ds.display().to_string(),
            "--ids".into(),
            ids.display().to_string(),
            "--out".into(),
            out.into(),
        ]
    };
    for out in ["s1.json", "s2.json"] {
        let a = args(out);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        assert_eq!(code(&gaitlab(dir.path(), &a)), 0);
    }
    assert_eq!(std::fs::read(dir.path().join("s1.json")).unwrap(), std::fs::read(dir.path().join("s2.json")).unwrap());
    let m = read_json(dir.path().join("s1.run.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn generate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let o = gaitlab(dir.path(), &["generate", "--mode", "mixed", "--identities", "3", "--seqs", "2", "--frames", "8", "--seed", "5", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["dataset.jsonl", "manifest.json", "probe_ids.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn normalize_none_round_trips() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let ds = d.join("dataset.jsonl");
    let o = gaitlab(dir.path(), &["normalize", "--dataset", ds.to_str().unwrap(), "--scheme", "none", "--out", "n.jsonl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_jsonl(&ds).unwrap(), read_jsonl(dir.path().join("n.jsonl")).unwrap());
}

#[test]
fn skeleton_scale_gives_unit_height_after_reread() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let ds = d.join("dataset.jsonl");
    let o = gaitlab(
        dir.path(),
        &["normalize", "--dataset", ds.to_str().unwrap(), "--scheme", "skeleton-translate,skeleton-scale", "--out", "n.jsonl", "--preview"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("l_ankle") && stdout.contains("pelvis"), "{stdout}");
    for s in read_jsonl(dir.path().join("n.jsonl")).unwrap() {
        for p in s.poses() {
            assert!((height(p) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn global_scheme_without_stats_exits_2() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let o = gaitlab(
        dir.path(),
        &["normalize", "--dataset", d.join("dataset.jsonl").to_str().unwrap(), "--scheme", "global-avg-skeleton", "--out", "n.jsonl"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn refuses_to_overwrite_input() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let ds = d.join("dataset.jsonl");
    let before = std::fs::read(&ds).unwrap();
    let o = gaitlab(dir.path(), &["normalize", "--dataset", ds.to_str().unwrap(), "--scheme", "skeleton-scale", "--out", ds.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(std::fs::read(&ds).unwrap(), before);
}

fn train_args<'a>(d: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec!["train", "--dataset", d, "--out", out];
    a.extend_from_slice(&SMALL_TRAIN);
    a.extend_from_slice(extra);
    a
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let ds = d.join("dataset.jsonl");
    let o = gaitlab(dir.path(), &train_args(ds.to_str().unwrap(), "tr", &["--epochs", "0", "--seed", "4"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(dir.path().join("tr/checkpoint.gckpt")).unwrap();
    let m = read_json(dir.path().join("tr/run.json"));
    let cfg: ModelConfig = serde_json::from_value(m["config"]["model"].clone()).unwrap();
    let fresh = Encoder::new(&cfg, 4).unwrap();
    assert_eq!(ck.encoder.store(), fresh.store());
    assert_eq!(ck.seed, 4);
    let echo = std::fs::read_to_string(dir.path().join("tr/config.txt")).unwrap();
    assert!(echo.contains("epochs = 0") && echo.contains("model.c_emb = 16"), "{echo}");
}

#[test]
fn train_then_evaluate() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let ds = d.join("dataset.jsonl");
    let (g, p) = (d.join("gallery_ids.json"), d.join("probe_ids.json"));
    let t = d.join("train_ids.json");
    let o = gaitlab(
        dir.path(),
        &train_args(
            ds.to_str().unwrap(),
            "tr",
            &["--epochs", "2", "--train-ids", t.to_str().unwrap(), "--scheme", "frame-scale"],
        ),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("tr/metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 2);
    let o = gaitlab(
        dir.path(),
        &[
            "evaluate", "--checkpoint", "tr/checkpoint.gckpt", "--dataset", ds.to_str().unwrap(), "--gallery",
            g.to_str().unwrap(), "--probe", p.to_str().unwrap(), "--out", "ev.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ev = read_json(dir.path().join("ev.json"));
    assert_eq!(ev["probes"], 5);
    assert_eq!(ev["gallery_subjects"], 5);
    assert_eq!(ev["scheme"], "frame-scale");
    let r1 = ev["rank1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1) && ev["rank5"].as_f64().unwrap() >= r1);
}

#[test]
fn seed_precedence_flag_over_config_over_env() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let ds = d.join("dataset.jsonl");
    let ds = ds.to_str().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), "# run settings\nseed = 9\n").unwrap();
    let seed_of = |out: &str, extra: &[&str], env: &[(&str, &str)]| {
        let mut a = train_args(ds, out, &["--epochs", "0"]);
        a.extend_from_slice(extra);
        let o = gaitlab_env(dir.path(), &a, env);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        read_json(dir.path().join(out).join("run.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("a", &[], &[]), 0);
    assert_eq!(seed_of("b", &[], &[("GAITLAB_SEED", "7")]), 7);
    assert_eq!(seed_of("c", &["--config", "cfg.txt"], &[("GAITLAB_SEED", "7")]), 9);
    assert_eq!(seed_of("e", &["--config", "cfg.txt", "--seed", "11"], &[("GAITLAB_SEED", "7")]), 11);

    let mut a = train_args(ds, "f", &["--epochs", "0"]);
    a.push("--set");
    a.push("no_such_key=1");
    assert_eq!(code(&gaitlab(dir.path(), &a)), 2);
    let o = gaitlab_env(dir.path(), &train_args(ds, "g", &["--epochs", "0"]), &[("GAITLAB_SEED", "x")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablation_resumes_from_cache() {
    let dir = TempDir::new().unwrap();
    let d = generated(dir.path());
    let s = |f: &str| d.join(f).display().to_string();
    let (ds, t, g, p) = (s("dataset.jsonl"), s("train_ids.json"), s("gallery_ids.json"), s("probe_ids.json"));
    let mut args = vec![
        "ablate", "--dataset", &ds, "--train-ids", &t, "--gallery-ids", &g, "--probe-ids", &p, "--scheme", "none", "--scheme",
        "skeleton-translate,skeleton-scale", "--seeds", "0", "--epochs", "1", "--out", "ab",
    ];
    args.extend_from_slice(&SMALL_TRAIN);
    let o = gaitlab(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ab/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    let cells: Vec<_> = std::fs::read_dir(dir.path().join("ab/cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cells.len(), 2);

    // doctor one cached cell: a resumed run must report it rather than retrain
    let victim = &cells[0];
    let mut cell = read_json(victim);
    cell["rank1"] = json!(0.125);
    std::fs::write(victim, serde_json::to_string(&cell).unwrap()).unwrap();
    let o = gaitlab(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv2 = std::fs::read_to_string(dir.path().join("ab/results.csv")).unwrap();
    assert!(csv2.contains("0.125"), "{csv2}");
    assert!(dir.path().join("ab/results.md").exists());
}

#[test]
fn grad_check_passes_for_both_models() {
    let dir = TempDir::new().unwrap();
    for model in ["spe", "temporal"] {
        let o = gaitlab(dir.path(), &["grad-check", "--model", model, "--seeds", "2", "--coords", "3", "--out", "gc.json"]);
        assert_eq!(code(&o), 0, "{model}: {}", stderr(&o));
        let rows = read_json(dir.path().join("gc.json"));
        assert!(rows.as_array().unwrap().iter().all(|r| r["passed"] == true));
    }
    let o = gaitlab(dir.path(), &["grad-check", "--seeds", "1", "--coords", "2", "--tolerance", "0", "--out", "gc.json"]);
    assert_eq!(code(&o), 1);
}
