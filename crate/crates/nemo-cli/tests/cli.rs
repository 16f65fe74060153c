use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
profile = "tiny"
n_calibration = 20
n_detection = 4
n_fresh = 2
gen_steps = 4

[train]
steps = 12
batch = 4

[train.data]
n_unique = 200
n_memorized = 2
duplication = 20

[seeds]
localization = [1, 2, 3]
evaluation = [101, 102]
baseline_trials = 2
"#;

fn nemo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nemo")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nemo(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the small config and trains a model into `dir/model.bin`.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let model = dir.join("model.bin");
    ok(&["train", "--config", s(&cfg), "--out", s(&dir.join("runs")), "--model", s(&model)]);
    (cfg, model)
}

fn only_subdir(dir: &Path, suffix: &str) -> PathBuf {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    assert_eq!(v.len(), 1, "expected one *{suffix} run in {}", dir.display());
    v.pop().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn train_is_reproducible_and_reports_are_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, model) = setup(dir.path());
    let other = dir.path().join("nested/deeper/model2.bin");
    ok(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("runs2")), "--model", s(&other)]);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&other).unwrap());

    let run = only_subdir(&dir.path().join("runs"), "-train");
    let report = json(&run.join("train.json"));
    assert_eq!(report["command"], "train");
    assert_eq!(report["config"]["profile"], "tiny");
    assert_eq!(report["config"]["seeds"]["localization"], serde_json::json!([1, 2, 3]));
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    let ids: Vec<&str> =
        report["payload"]["duplicated_prompts"].as_array().unwrap().iter().map(|p| p["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["mem0", "mem1"]);
    assert!(run.join("config.toml").exists());
}

#[test]
fn pipeline_commands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, model) = setup(dir.path());
    let out = dir.path().join("runs");
    let base = ["--config", s(&cfg), "--model", s(&model), "--out", s(&out)];

    ok(&[&["calibrate"], &base[..]].concat());
    let threshold = only_subdir(&out, "-calibrate").join("threshold.json");
    assert!(json(&threshold)["payload"]["tau"]["tau_mem"].is_number());

    ok(&[&["localize", "--threshold", s(&threshold)], &base[..]].concat());
    let loc = only_subdir(&out, "-localize");
    for id in ["mem0", "mem1"] {
        let r = json(&loc.join(format!("selection_{id}.json")));
        assert_eq!(r["payload"]["prompt"]["id"], id);
        assert!(r["payload"]["result"]["s_final"].is_array());
    }

    ok(&[&["mitigate", "--selections", s(&loc), "--scale", "1"], &base[..]].concat());
    let mit = only_subdir(&out, "-mitigate");
    let images = json(&mit.join("images.json"));
    let imgs = images["payload"].as_array().unwrap();
    let pick = |cond: &str| -> Vec<&Value> { imgs.iter().filter(|r| r["condition"] == cond).map(|r| &r["image"]).collect() };
    assert_eq!(pick("masked"), pick("unmasked"), "scale 1 must reproduce unmasked images exactly");

    let report = ok(&["report", "--out", s(&out)]);
    assert!(report.contains("-localize"));
}

#[test]
fn scale_one_images_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, model) = setup(dir.path());
    let sel = dir.path().join("sel");
    std::fs::create_dir_all(&sel).unwrap();
    // a hand-written selection that names two neurons
    let body = serde_json::json!({"payload": {"prompt": {"id": "fresh0", "tokens": []}, "result": {
        "s_initial": [], "s_final": [{"layer": 0, "index": 1}, {"layer": 1, "index": 3}],
        "tau_mem_ref": 0.0, "theta_act_final": 0.0, "k_final": 0, "trace": [], "refine_scores": []}}});
    std::fs::write(sel.join("selection_fresh0.json"), body.to_string()).unwrap();
    let out = dir.path().join("runs");
    ok(&["mitigate", "--config", s(&cfg), "--model", s(&model), "--out", s(&out), "--prompts", "fresh0", "--selections", s(&sel), "--scale", "1"]);
    let images = json(&only_subdir(&out, "-mitigate").join("images.json"));
    let data = |cond: &str| -> Vec<Vec<f64>> {
        images["payload"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|r| r["condition"] == cond)
            .map(|r| r["image"]["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect())
            .collect()
    };
    let (a, b) = (data("masked"), data("unmasked"));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, model) = setup(dir.path());
    let out = s(&dir.path().join("runs")).to_string();

    assert_eq!(nemo(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        nemo(&["localize", "--config", s(&cfg), "--model", s(&model), "--out", &out, "--prompts", "mem9"]).status.code(),
        Some(1),
        "unknown prompt id"
    );
    assert_eq!(nemo(&["localize", "--config", s(&cfg), "--out", &out]).status.code(), Some(1), "missing --model");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "profile = [").unwrap();
    assert_eq!(nemo(&["train", "--config", s(&bad), "--out", &out]).status.code(), Some(1));

    let missing = dir.path().join("nope.bin");
    assert_eq!(
        nemo(&["calibrate", "--config", s(&cfg), "--model", s(&missing), "--out", &out]).status.code(),
        Some(2),
        "missing model file"
    );
    assert_eq!(
        nemo(&["localize", "--config", s(&cfg), "--model", s(&model), "--out", &out, "--threshold", s(&missing)]).status.code(),
        Some(2),
        "missing threshold file"
    );

    let diverge = dir.path().join("diverge.toml");
    std::fs::write(&diverge, format!("{SMALL}\n")).unwrap();
    let text = std::fs::read_to_string(&diverge).unwrap().replace("[train]\n", "[train]\nloss_ceiling = 0.0\n");
    std::fs::write(&diverge, text).unwrap();
    assert_eq!(nemo(&["train", "--config", s(&diverge), "--out", &out]).status.code(), Some(3));

    let overlap = dir.path().join("seeds.toml");
    std::fs::write(&overlap, "localization = [1, 2]\nevaluation = [2, 3]\n").unwrap();
    assert_eq!(
        nemo(&["calibrate", "--config", s(&cfg), "--model", s(&model), "--out", &out, "--seed-registry", s(&overlap)])
            .status
            .code(),
        Some(1),
        "overlapping seed registries"
    );
}

#[test]
fn unwritable_output_is_an_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, "x").unwrap();
    let out = nemo(&["train", "--out", s(&file.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("creating run directory"));
}

#[test]
fn oracle_requires_tiny_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = nemo(&["oracle", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}
