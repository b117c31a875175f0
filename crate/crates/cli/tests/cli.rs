//! End-to-end runs of the `formgen` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const CONFIG: &str = r#"
[synthetic]
plays_per_concept = 6

[model]
hidden_dim = 8
num_layers = 1
num_heads = 2
mixture_components = 2
relational_dim = 4
role_embed_dim = 4
max_frames = 20

[train]
max_epochs = 2
batch_size = 8
warmup_steps = 2
learning_rate = 0.003
seed = 3

[sample]
num_samples = 3
temperature = 0.8
seed = 11

[eval]
apd_samples = 3
horizons = [5, 20]

[serve]
num_players = 5
"#;

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn formgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesized data and one trained run shared by every test.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        fs::write(&config, CONFIG).unwrap();
        let data = root.join("plays.json");
        let run = root.join("run");
        ok(formgen(&["--config", s(&config), "synth-data", "--out", s(&data)]));
        ok(formgen(&["--config", s(&config), "train", "--data", s(&data), "--out", s(&run)]));
        Fixture {
            _dir: dir,
            root,
            config,
            data,
            run,
        }
    })
}

#[test]
fn synth_data_is_deterministic_and_guards_existing_files() {
    let f = fixture();
    let again = f.root.join("plays_again.json");
    ok(formgen(&["--config", s(&f.config), "synth-data", "--out", s(&again)]));
    assert_eq!(fs::read(&f.data).unwrap(), fs::read(&again).unwrap());
    let text = fs::read_to_string(&again).unwrap();
    assert_eq!(text.lines().count(), 24);
    for line in text.lines() {
        let play: Value = serde_json::from_str(line).unwrap();
        assert!(play["concept"].is_string());
    }

    let refused = formgen(&["--config", s(&f.config), "synth-data", "--out", s(&again)]);
    assert_eq!(refused.status.code(), Some(1));
    assert_eq!(error_line(&refused)["error"], "exists");
    ok(formgen(&["--config", s(&f.config), "synth-data", "--out", s(&again), "--force"]));

    let reseeded = f.root.join("plays_seed9.json");
    ok(formgen(&["--config", s(&f.config), "--set", "data.synth_seed=9", "synth-data", "--out", s(&reseeded)]));
    assert_ne!(fs::read(&f.data).unwrap(), fs::read(&reseeded).unwrap());
}

#[test]
fn training_writes_all_artifacts() {
    let f = fixture();
    for name in ["best.json", "last.json", "report.json", "config.toml", "timing.json"] {
        assert!(f.run.join(name).is_file(), "{name} missing");
    }
    let report: Value = serde_json::from_slice(&fs::read(f.run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert!(report["best_val_ade"].as_f64().unwrap() > 0.0);
    assert!(report.get("wall_seconds").is_none());
    let timing: Value = serde_json::from_slice(&fs::read(f.run.join("timing.json")).unwrap()).unwrap();
    assert!(timing["wall_seconds"].as_f64().unwrap() > 0.0);
    let saved = fs::read_to_string(f.run.join("config.toml")).unwrap();
    assert!(saved.contains("max_epochs = 2"));
}

#[test]
fn train_refuses_a_non_empty_directory() {
    let f = fixture();
    let out = formgen(&["--config", s(&f.config), "train", "--data", s(&f.data), "--out", s(&f.run)]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "exists");
    assert!(err["detail"].as_str().unwrap().contains("--force"));
}

#[test]
fn training_and_generation_are_byte_identical_across_runs() {
    let f = fixture();
    let second = f.root.join("run_again");
    ok(formgen(&["--config", s(&f.config), "train", "--data", s(&f.data), "--out", s(&second)]));
    for name in ["best.json", "last.json", "report.json", "config.toml"] {
        assert_eq!(fs::read(f.run.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name} differs");
    }
    let ckpt = f.run.join("best.json");
    let (a, b) = (f.root.join("gen_a.json"), f.root.join("gen_b.json"));
    ok(formgen(&["--config", s(&f.config), "generate", "--checkpoint", s(&ckpt), "--out", s(&a)]));
    ok(formgen(&["--config", s(&f.config), "generate", "--checkpoint", s(&ckpt), "--out", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn generate_writes_samples_and_svg() {
    let f = fixture();
    let out = f.root.join("gen_k3.json");
    let svg = f.root.join("gen_k3.svg");
    let ckpt = f.run.join("best.json");
    let stdout = ok(formgen(&[
        "--config",
        s(&f.config),
        "generate",
        "--checkpoint",
        s(&ckpt),
        "-k",
        "3",
        "--seed",
        "5",
        "--frames",
        "12",
        "--out",
        s(&out),
        "--svg",
        s(&svg),
    ]))
    .stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("wrote 3 samples"));
    let resp: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let samples = resp["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(resp["seed"], 5);
    for sample in samples {
        let traj = sample["trajectory"].as_array().unwrap();
        assert_eq!(traj.len(), 12);
        assert_eq!(traj[0].as_array().unwrap().len(), 5);
    }
    let picture = fs::read_to_string(&svg).unwrap();
    assert!(picture.starts_with("<svg"));
    assert_eq!(picture.matches("<g id=\"panel-").count(), 3);
    assert_eq!(picture.matches("<circle").count(), 15);
}

#[test]
fn generate_reads_a_formation_file() {
    let f = fixture();
    let formation = f.root.join("formation.json");
    fs::write(
        &formation,
        r#"{"formation": [[0, 0], [-5, 0], [-7, 0], [0, -15], [0, 15]], "roles": ["C", "QB", "RB", "WR", "WR"]}"#,
    )
    .unwrap();
    let out = f.root.join("gen_file.json");
    let ckpt = f.run.join("best.json");
    ok(formgen(&[
        "--config",
        s(&f.config),
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--formation",
        s(&formation),
        "--temperature",
        "0",
        "--component",
        "1",
        "--out",
        s(&out),
    ]));
    let resp: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    for sample in resp["samples"].as_array().unwrap() {
        assert_eq!(sample["component"], 1);
        assert_eq!(sample["trajectory"], resp["samples"][0]["trajectory"]);
        assert_eq!(sample["trajectory"][0][3][1], -15.0);
    }

    fs::write(&formation, r#"{"formation": [[0, 0]], "roles": ["C", "QB"]}"#).unwrap();
    let bad = formgen(&[
        "--config",
        s(&f.config),
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--formation",
        s(&formation),
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(error_line(&bad)["detail"].as_str().unwrap().contains("roles"));
}

#[test]
fn eval_prints_a_horizon_table_and_json() {
    let f = fixture();
    let json = f.root.join("eval.json");
    let out = ok(formgen(&[
        "--config",
        s(&f.config),
        "eval",
        "--checkpoint",
        s(&f.run.join("best.json")),
        "--data",
        s(&f.data),
        "--split",
        "val",
        "--horizons",
        "5,10,20",
        "--json",
        s(&json),
    ]));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("ADE"));
    let report: Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["per_horizon"].as_array().unwrap().len(), 3);
    assert_eq!(report["plays"], 5);
    assert!(report["apd"].as_f64().unwrap() >= 0.0);
    assert_matches_schema(&report);

    let sampled = f.root.join("eval_sampled.json");
    ok(formgen(&[
        "--config",
        s(&f.config),
        "eval",
        "--checkpoint",
        s(&f.run.join("best.json")),
        "--data",
        s(&f.data),
        "--sampled-temperature",
        "0.8",
        "--json",
        s(&sampled),
    ]));
    let report: Value = serde_json::from_slice(&fs::read(&sampled).unwrap()).unwrap();
    assert_eq!(report["mode"]["kind"], "sampled");
    assert_matches_schema(&report);
}

fn assert_matches_schema(report: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/metrics_report.schema.json");
    let schema: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let mut extra = report.clone();
    extra["unexpected"] = Value::Bool(true);
    assert!(!validator.is_valid(&extra));
}

#[test]
fn shipped_config_describes_the_acceptance_setup() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let cfg = formgen::RunConfig::load(Some(&path), &[]).unwrap();
    assert_eq!(cfg.synthetic.plays_per_concept * cfg.synthetic.concepts.len(), 2000);
    assert_eq!(
        (cfg.model.hidden_dim, cfg.model.num_layers, cfg.model.num_heads, cfg.model.mixture_components),
        (32, 2, 4, 4)
    );
    assert_eq!(cfg.eval.horizons, [5, 10, 15, 20]);
}

#[test]
fn missing_inputs_exit_with_usage_code() {
    let f = fixture();
    let missing = f.root.join("nope.json");
    let out = formgen(&[
        "--config",
        s(&f.config),
        "eval",
        "--checkpoint",
        s(&missing),
        "--data",
        s(&f.data),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "input");
    assert!(err["detail"].as_str().unwrap().contains("nope.json"));

    let out = formgen(&["--config", s(&f.config), "train", "--data", s(&missing), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_usage_code() {
    let f = fixture();
    let out = formgen(&["--config", s(&f.config), "--set", "model.no_such_key=1", "synth-data", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "config");

    let out = formgen(&["--set", "train.learning_rate=-1", "train", "--data", s(&f.data), "--out", s(&f.root.join("neg"))]);
    assert_eq!(out.status.code(), Some(2));

    let missing_cfg = formgen(&["--config", s(&f.root.join("absent.toml")), "synth-data", "--out", "unused"]);
    assert_eq!(missing_cfg.status.code(), Some(2));
}
