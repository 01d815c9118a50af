use std::path::Path;
use std::process::Command;

use lobforge_cli::manifest::{manifest_path, RunManifest};

const CONFIG: &str = r#"
seed = 11
out_dir = "first"
[data.synth]
n_ticks = 6000
regime = { kind = "sawtooth", period = 100, amplitude_ticks = 25.0 }
[dataset]
lx = 24
k = 20
split = { mode = "fraction", train = 0.6, val = 0.2, test = 0.2 }
[model]
kind = "dlstm"
hidden_dim = 8
decompose_window = 9
[train]
epochs = 2
lr = 0.001
[backtest]
cost_rate = 0.00002
cost_grid = "0:0.0001:6"
"#;

const COMPARED: [&str; 7] = [
    "ticks.csv",
    "labels.csv",
    "model/model.ckpt",
    "report.json",
    "signals.csv",
    "ledger.json",
    "sweep.json",
];

fn lobforge(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_lobforge"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

pub fn pipeline_rerun() -> String {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    lobforge(d, &["pipeline", "--config", "run.toml"]);
    lobforge(d, &["pipeline", "--manifest", "first/pipeline.manifest.json", "--out-dir", "second"]);

    for name in COMPARED {
        let a = std::fs::read(d.join("first").join(name)).unwrap();
        let b = std::fs::read(d.join("second").join(name)).unwrap();
        assert!(a == b, "{name} differs between the run and its re-execution");
        let m = RunManifest::read(&manifest_path(&d.join("second").join(name)));
        // Signals are listed in the eval manifest next to report.json.
        if name != "signals.csv" {
            assert!(m.is_ok(), "{name} has no manifest");
        }
    }
    let top = RunManifest::read(&d.join("second/pipeline.manifest.json")).unwrap();
    assert_eq!(top.command, "pipeline");
    assert!(top.outputs.iter().all(|o| d.join(o).exists()));
    format!("{} artifacts byte-identical after re-running from the manifest", COMPARED.len())
}
