use std::path::Path;
use std::process::{Command, Output};

use fedexit::client::{write_update, LayerUpdate};
use fedexit::datagen::read_shard;
use fedexit::model::{decode_params, encode_params, init_model, ExitSet, HeadKey, ModelConfig};
use fedexit::numerics::Prng;

fn fedexit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedexit")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"{
  "mode": "hetero_fl",
  "task": "kws-like",
  "model": { "width": 4, "hidden": 8 },
  "clients": [
    { "count": 2, "samples": 10, "memory_budget_mb": 350, "device_speed": 1e6 },
    { "count": 2, "samples": 10, "memory_budget_mb": 1000, "device_speed": 4e6 }
  ],
  "rounds": 2,
  "eval_samples": 40
}"#;

#[test]
fn run_writes_all_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scenario.json");
    std::fs::write(&config, CONFIG).unwrap();
    let mut seen = Vec::new();
    for (run, format) in [("a", "csv"), ("b", "csv"), ("c", "jsonl")] {
        let out = dir.path().join(run);
        let o = fedexit(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--format", format]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("exit  3"));
        let metrics = std::fs::read(out.join(format!("metrics.{format}"))).unwrap();
        let model = std::fs::read(out.join("final_model.fxp")).unwrap();
        decode_params(&model).unwrap();
        let echo = std::fs::read_to_string(out.join("scenario.json")).unwrap();
        assert!(echo.contains("\"fraction\": 1.0"));
        let info: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
        assert_eq!(info["fedavg_missing_layers"], "contributors_only");
        seen.push((metrics, model));
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[0].1, seen[2].1);
    assert!(String::from_utf8_lossy(&seen[0].0).starts_with("round,exit,loss,accuracy,wall_time_s,bytes,contributors_l1"));
}

#[test]
fn run_dumps_shards() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scenario.json");
    std::fs::write(&config, CONFIG).unwrap();
    let shards = dir.path().join("shards");
    let out = dir.path().join("out");
    let o = fedexit(&[
        "run",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--shards",
        shards.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for id in 0..4 {
        let shard = read_shard(&shards.join(format!("client_{id:03}.fxs"))).unwrap();
        assert_eq!(shard.client_id, id);
        assert_eq!(shard.len(), 10);
    }
}

#[test]
fn run_accepts_a_preset_name() {
    let o = fedexit(&["presets"]);
    assert!(o.status.success());
    for name in ["centralized", "homo-fl", "hetero-fedavg", "hetero-layerwise"] {
        assert!(stdout(&o).contains(name));
    }
    let o = fedexit(&["presets", "homo-fl"]);
    assert!(stdout(&o).contains("\"mode\": \"homo_fl\""));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, CONFIG.replace("\"rounds\": 2", "\"rounds\": 2, \"epochs\": 9")).unwrap();
    let o = fedexit(&["run", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`epochs`"), "{}", stderr(&o));

    let o = fedexit(&["run", "/nonexistent/x.json"]);
    assert_eq!(o.status.code(), Some(3));

    let o = fedexit(&["presets", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

fn model_and_updates(dir: &Path) -> (std::path::PathBuf, Vec<String>) {
    let config = ModelConfig {
        input_dim: 2,
        width: 2,
        hidden: 2,
        depth: 12,
        exits: ExitSet::default(),
        task_classes: vec![2],
    };
    let global = init_model(&config, &mut Prng::new(3)).unwrap();
    let global_path = dir.join("global.fxp");
    std::fs::write(&global_path, encode_params(&global)).unwrap();
    let mut files = Vec::new();
    for (client, samples, depth, value) in [(0u32, 100usize, 3usize, 1.0), (1, 300, 12, 2.0)] {
        let head = HeadKey { exit: depth, task: 0 };
        let update = LayerUpdate {
            client,
            round: 0,
            samples,
            depth,
            layers: (0..=depth).map(|l| vec![value; config.layer_len(l)]).collect(),
            head,
            head_values: vec![value; config.head_len(0)],
            samples_processed: samples as u64,
            final_loss: 0.5,
        };
        let path = dir.join(format!("u{client}.fxu"));
        write_update(&path, &update).unwrap();
        files.push(path.to_str().unwrap().to_string());
    }
    (global_path, files)
}

#[test]
fn aggregate_applies_the_chosen_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let (global, files) = model_and_updates(dir.path());
    for (strategy, expected) in [("layerwise", 7500.0 / 3900.0), ("fedavg", 1.75)] {
        let out = dir.path().join(format!("{strategy}.fxp"));
        let mut args = vec!["aggregate"];
        args.extend(files.iter().map(String::as_str));
        args.extend(["--strategy", strategy, "--global", global.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let o = fedexit(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("[2, 2, 2, 2, 1, 1, 1, 1, 1, 1, 1, 1, 1]"), "{}", stdout(&o));
        let model = decode_params(&std::fs::read(&out).unwrap()).unwrap();
        assert!((model.layer_values(1)[0] - expected).abs() < 1e-12);
        assert_eq!(model.layer_values(12)[0], 2.0);
    }
}

#[test]
fn aggregate_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (global, files) = model_and_updates(dir.path());
    let g = global.to_str().unwrap();

    let o = fedexit(&["aggregate", &files[0], &files[0], "--global", g]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    let corrupt = dir.path().join("corrupt.fxu");
    let mut bytes = std::fs::read(&files[0]).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&corrupt, bytes).unwrap();
    let o = fedexit(&["aggregate", corrupt.to_str().unwrap(), "--global", g]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("byte"), "{}", stderr(&o));

    let o = fedexit(&["aggregate", &files[0], "--global", g, "--strategy", "median"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = fedexit(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("192 tensor checks over 1 seeds"));
}
