use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prefixmerge"))
}

#[test]
fn grad_check_reports_json() {
    let out = bin().args(["grad-check", "--configs", "2"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-5);
    assert_eq!(v["configs"].as_array().unwrap().len(), 2);
}

#[test]
fn leakage_check_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.txt");
    let test = dir.path().join("test.txt");
    std::fs::write(&train, "a b c d\ne f g h\n").unwrap();
    std::fs::write(&test, "a b c x\np q r s\n").unwrap();
    let out = bin()
        .args(["leakage-check", "--train"])
        .arg(&train)
        .arg("--test")
        .arg(&test)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n_leaked"], 1);
    assert_eq!(v["ratio"], 0.5);
}

#[test]
fn bad_override_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["merge-train", "--set", "model.n_heads=3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("n_heads"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = bin().args(["eval", "--config", "/nonexistent.toml", "--prefix", "p.bin"]).output().unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "io");
}

#[test]
fn merge_train_then_eval_and_viz() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
seeds = [0, 1]
[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
vocab_size = 80
[data.gen]
vocab_size = 80
[data]
aux_size = 16
target_train = 8
target_test = 6
[backbone]
pretrain_steps = 5
corpus_size = 32
[stage1]
steps = 5
batch_size = 4
[stage2]
steps = 3
batch_size = 4
[eval]
profile_samples = 3
"#,
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = bin().args(args).arg("--config").arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let v = run(&["merge-train", "--set", "stage1.learning_rate=1e-3"]);
    assert!(v["final_loss"].as_f64().unwrap().is_finite());
    let prefix = dir.path().join("prefix.bin");
    let p = prefix.to_str().unwrap();
    let e = run(&["eval", "--prefix", p]);
    assert_eq!(e["n"], 6);
    let z = run(&["viz", "--prefix", p]);
    assert_eq!(z["sites"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("profile.csv").exists());
    let t = run(&["transfer", "--prefix", p]);
    assert_eq!(t["seeds"].as_array().unwrap().len(), 2);
    let a = run(&["adapt", "--init-len", "6", "--top-n", "3"]);
    assert!(a["split"].is_array());
}
