use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pointcot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointcot")).args(args).env("POINTCOT_LOG", "quiet").output().expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

const TINY: &str = "\
# toy sizes so the test runs in seconds
n_points = 128
n_tokens = 8
knn = 4
d_model = 8
d_llm = 8
layers = 1
heads = 2
ff_hidden = 16
proj_dim = 4
steps = 3
batch_size = 2
max_decode = 10
";

fn write_config(dir: &Path, corpus: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}corpus = {}\n{extra}", corpus.display())).unwrap();
    p.display().to_string()
}

#[test]
fn generate_train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let cfg = write_config(tmp.path(), &corpus, "");

    let out = pointcot(&["generate", "--config", &cfg, "--objects", "10", "--seed", "3", "--out", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["objects"], 10);
    assert_eq!(summary["records"], 30);
    assert_eq!(fs::read_dir(corpus.join("clouds")).unwrap().count(), 10);

    // Same seed, byte-identical corpus.
    let again = tmp.path().join("again");
    assert!(pointcot(&["generate", "--config", &cfg, "--objects", "10", "--seed", "3", "--out", again.to_str().unwrap()]).status.success());
    for f in ["corpus.jsonl", "objects.jsonl", "manifest.json", "views/obj-00004.npy", "clouds/obj-00004.pts"] {
        assert_eq!(fs::read(corpus.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = pointcot(&["train", "--config", &cfg, "--stage", "1", "--mode", "explicit", "--out", run_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("metrics_stage1.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["metrics"]["pred_detached"], true);
    assert!(lines[0]["metrics"]["loss_pred"].is_number());
    let ln_v = (pointcot::reasoner::Vocab::standard().len() as f64).ln();
    assert!((lines[0]["metrics"]["loss_gen"].as_f64().unwrap() - ln_v).abs() < 0.5);

    let ckpt = run.join("model.ckpt");
    let stage2 = tmp.path().join("run2");
    let out = pointcot(&["train", "--config", &cfg, "--stage", "2", "--checkpoint", ckpt.to_str().unwrap(), "--out", stage2.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(stage2.join("metrics_stage2.jsonl")).unwrap();
    assert!(log.contains("\"pred_detached\":false"));

    let ckpt2 = stage2.join("model.ckpt");
    let out = pointcot(&["eval", "--config", &cfg, "--checkpoint", ckpt2.to_str().unwrap(), "--split", "train", "--mode", "direct", "--out", run_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    for col in ["L1", "L2", "L3", "EM%", "GHR%"] {
        assert!(table.contains(col), "{table}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval_train_direct.json")).unwrap()).unwrap();
    assert_eq!(report["split"], "train");
    assert_eq!(report["per_level"].as_object().unwrap().len(), 3);

    let cloud = corpus.join("clouds/obj-00001.pts");
    let out = pointcot(&["infer", "--checkpoint", ckpt2.to_str().unwrap(), "--cloud", cloud.to_str().unwrap(), "--question", "is the object stable ?", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(trace["object_id"], "obj-00001");
    assert!(trace["answer"].is_string() && trace["assertions"].is_array());
}

#[test]
fn unknown_config_key_is_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = pointcot(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert!(err["error"].as_str().unwrap().contains("learning_rate"));
    assert_eq!(err["kind"], "InvalidArgument");
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    let cfg = write_config(tmp.path(), &corpus, "objects = 50\nseed = 1\n");
    let out = pointcot(&["generate", "--config", &cfg, "--objects", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["objects"], 4);
    assert!(corpus.join("manifest.json").exists());
}

#[test]
fn bad_flags_and_missing_files_fail_with_json() {
    let out = pointcot(&["eval", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["kind"], "Usage");

    let out = pointcot(&["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert!(err["error"].as_str().unwrap().contains("/nonexistent/model.ckpt"));

    let out = pointcot(&["train", "--stage", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_group() {
    let out = pointcot(&["gradcheck", "--instances", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let groups: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = groups.iter().map(|g| g["group"].as_str().unwrap()).collect();
    assert_eq!(names, ["gcma", "gate", "anchor", "reasoner", "total"]);
    assert!(groups.iter().all(|g| g["passed"] == true && g["max_rel_error"].as_f64().unwrap() < 1e-4));
}
