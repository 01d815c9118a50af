use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lobforge_cli::manifest::{manifest_path, RunManifest};
use lobforge_core::market_data::{read_snapshots, synth_lob, write_snapshots, Format, ReplayServer, SynthConfig};

fn lobforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lobforge"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lobforge(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    lobforge(dir, args).status.code().expect("exited normally")
}

const PIPELINE: &str = r#"
seed = 4
out_dir = "run"
[data.synth]
n_ticks = 3000
regime = { kind = "sawtooth", period = 100, amplitude_ticks = 20.0 }
[dataset]
lx = 20
k = 10
split = { mode = "fraction", train = 0.6, val = 0.2, test = 0.2 }
[model]
kind = "lstm"
hidden_dim = 8
[train]
epochs = 2
lr = 0.001
[backtest]
cost_rate = 0.00002
cost_grid = "0:0.0001:5"
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn stage_by_stage_chain_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "synth.toml", "n_ticks = 2000\nregime = { kind = \"sawtooth\", period = 80, amplitude_ticks = 15.0 }\n");
    ok(d, &["synth", "--config", "synth.toml", "--seed", "2", "--out", "ticks.csv"]);
    let label = ok(d, &["label", "--ticks", "ticks.csv", "--k", "10", "--out", "labels.csv"]);
    let summary: serde_json::Value = serde_json::from_str(&label).unwrap();
    assert!(summary["delta"].as_f64().unwrap() > 0.0);
    ok(d, &[
        "dataset", "--ticks", "ticks.csv", "--labels", "labels.csv", "--lx", "16", "--k", "10", "--split",
        "fraction:0.6,0.2,0.2", "--out", "ds.json",
    ]);
    ok(d, &["train", "--dataset", "ds.json", "--model", "mlp", "--hidden", "8", "--epochs", "1", "--out-dir", "m"]);
    ok(d, &["eval", "--model", "m", "--dataset", "ds.json", "--out", "report.json", "--signals", "sig.csv"]);
    let bt = ok(d, &["backtest", "--signals", "sig.csv", "--ticks", "ticks.csv", "--out", "ledger.json", "--equity", "eq.csv"]);
    let bt: serde_json::Value = serde_json::from_str(&bt).unwrap();
    assert!(bt["cpr"].as_f64().unwrap().is_finite());
    let sweep = ok(d, &["sweep", "--signals", "sig.csv", "--ticks", "ticks.csv", "--grid", "0:0.001:3", "--out", "sweep.json"]);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&sweep).unwrap();
    assert_eq!(rows.len(), 3);

    let chain = [
        ("ticks.csv", "synth"),
        ("labels.csv", "label"),
        ("ds.json", "dataset"),
        ("m/model.ckpt", "train"),
        ("report.json", "eval"),
        ("ledger.json", "backtest"),
        ("sweep.json", "sweep"),
    ];
    for (artifact, command) in chain {
        let m = RunManifest::read(&manifest_path(&d.join(artifact))).unwrap();
        assert_eq!(m.command, command);
        assert!(m.outputs.iter().any(|o| o.ends_with(artifact)), "{artifact}");
    }
    let eval = RunManifest::read(&manifest_path(&d.join("report.json"))).unwrap();
    assert!(eval.parents.iter().any(|p| p.ends_with("ds.json.manifest.json")));
    let train = RunManifest::read(&manifest_path(&d.join("m/model.ckpt"))).unwrap();
    assert_eq!(train.config["train"]["epochs"], 1);
}

#[test]
fn pipeline_resumes_and_reruns_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "p.toml", PIPELINE);
    ok(d, &["pipeline", "--config", "p.toml"]);
    let report = std::fs::read(d.join("run/report.json")).unwrap();
    let ckpt = std::fs::read(d.join("run/model/model.ckpt")).unwrap();

    // A second run reuses the trained model.
    let before = std::fs::metadata(d.join("run/model/model.ckpt")).unwrap().modified().unwrap();
    let again = lobforge(d, &["pipeline", "--config", "p.toml"]);
    assert!(again.status.success());
    let after = std::fs::metadata(d.join("run/model/model.ckpt")).unwrap().modified().unwrap();
    assert_eq!(before, after);

    ok(d, &["pipeline", "--manifest", "run/pipeline.manifest.json", "--out-dir", "rerun"]);
    assert_eq!(std::fs::read(d.join("rerun/report.json")).unwrap(), report);
    assert_eq!(std::fs::read(d.join("rerun/model/model.ckpt")).unwrap(), ckpt);
    assert_eq!(std::fs::read(d.join("rerun/sweep.json")).unwrap(), std::fs::read(d.join("run/sweep.json")).unwrap());

    // A different seed changes the model.
    ok(d, &["pipeline", "--config", "p.toml", "--seed", "5", "--out-dir", "other"]);
    assert_ne!(std::fs::read(d.join("other/model/model.ckpt")).unwrap(), ckpt);
}

#[test]
fn changed_train_settings_retrain_but_keep_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "p.toml", PIPELINE);
    ok(d, &["pipeline", "--config", "p.toml"]);
    let ds_time = std::fs::metadata(d.join("run/dataset.json")).unwrap().modified().unwrap();
    let ckpt = std::fs::read(d.join("run/model/model.ckpt")).unwrap();
    write(d, "p.toml", &PIPELINE.replace("epochs = 2", "epochs = 1"));
    ok(d, &["pipeline", "--config", "p.toml"]);
    assert_eq!(std::fs::metadata(d.join("run/dataset.json")).unwrap().modified().unwrap(), ds_time);
    assert_ne!(std::fs::read(d.join("run/model/model.ckpt")).unwrap(), ckpt);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    write(d, "unknown.toml", &format!("{PIPELINE}\n[label]\nwindow = 3\n"));
    assert_eq!(code(d, &["pipeline", "--config", "unknown.toml"]), 2);
    assert_eq!(code(d, &["label", "--ticks", "missing.csv", "--out", "l.csv"]), 3);

    write(d, "p.toml", PIPELINE);
    ok(d, &["pipeline", "--config", "p.toml"]);
    let bad = std::fs::read_to_string(d.join("run/ticks.csv")).unwrap().replacen(',', ";", 3);
    write(d, "bad.csv", &bad);
    assert_eq!(code(d, &["label", "--ticks", "bad.csv", "--out", "l.csv"]), 3);

    // Training with an absurd learning rate blows up the weights.
    assert_eq!(
        code(d, &["train", "--dataset", "run/dataset.json", "--lr", "1.5e308", "--hidden", "4", "--epochs", "3", "--out-dir", "boom"]),
        4
    );

    // Editing stored statistics breaks the rebuild check.
    let mut file: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/dataset.json")).unwrap()).unwrap();
    file["meta"]["counts"][0] = serde_json::json!(1);
    std::fs::write(d.join("tampered.json"), serde_json::to_vec(&file).unwrap()).unwrap();
    assert_eq!(code(d, &["train", "--dataset", "tampered.json", "--out-dir", "t"]), 5);
}

#[test]
fn ingest_file_and_stream_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let series = synth_lob(&SynthConfig { n_ticks: 500, seed: 8, ..Default::default() }).unwrap();
    write_snapshots(&d.join("cap.jsonl"), &series, Format::Jsonl).unwrap();
    let report = ok(d, &["ingest", "--input", "cap.jsonl", "--out", "from_file.csv"]);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&report).unwrap()["rows"], 500);

    let server = ReplayServer::from_file(&d.join("cap.jsonl"), Some(200)).unwrap();
    let addr = server.addr().to_string();
    let report = ok(d, &["ingest", "--stream", &addr, "--out", "from_stream.csv", "--follow", "--max-retries", "2"]);
    drop(server);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["rows"], 500);
    assert_eq!(
        read_snapshots(&d.join("from_stream.csv"), Format::Csv).unwrap().snapshots,
        read_snapshots(&d.join("from_file.csv"), Format::Csv).unwrap().snapshots
    );
    assert_eq!(std::fs::read(d.join("from_stream.csv")).unwrap(), std::fs::read(d.join("from_file.csv")).unwrap());
}
