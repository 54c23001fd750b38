//! Drives the `snds` binary end to end on tiny models.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use snds_core::dataio::{generate_synthetic, load_model, save_dataset, save_model};
use snds_core::simeval::{rollout, RolloutConfig};
use snds_core::{Dataset, Demonstration, Matrix, ModelConfig};
use tempfile::TempDir;

const SMALL: [&str; 4] = ["--policy-sizes", "2,16,16,2", "--icnn-sizes", "2,16,16,1"];

fn snds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snds")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, doc: &Value) {
    if let Err(e) = jsonschema::validate(&schema(schema_name), doc) {
        panic!("{schema_name}: {e}\n{doc:#}");
    }
}

fn sine_data(dir: &Path) -> PathBuf {
    let path = dir.join("data");
    save_dataset(&generate_synthetic(snds_core::dataio::SyntheticShape::Sine, 2, 80, 0.0, 0).unwrap(), &path).unwrap();
    path
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(SMALL);
    args.extend(extra);
    snds(&args)
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let tmp = TempDir::new().unwrap();
    let data = sine_data(tmp.path());
    let out = tmp.path().join("m.json");
    let run = train(&data, &out, &["--epochs", "0", "--seed", "4"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let saved = load_model(&out).unwrap();
    let ds = snds_core::dataio::load_dataset(&data).unwrap();
    let config = ModelConfig { policy_sizes: vec![2, 16, 16, 2], icnn_sizes: vec![2, 16, 16, 1], ..Default::default() };
    let init = config.build(&ds.target, 4).unwrap();
    assert_eq!(saved.parameters(), init.parameters());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("m.report.json")).unwrap()).unwrap();
    assert_valid("train_report.schema.json", &report);
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 0);
}

#[test]
fn config_file_sets_values_and_flags_override_it() {
    let tmp = TempDir::new().unwrap();
    let data = sine_data(tmp.path());
    let cfg = tmp.path().join("train.cfg");
    std::fs::write(&cfg, "# small run\nepochs = 3\nlearning-rate = 0.002\nmode = unconstrained\nclip = 0\n").unwrap();
    let out = tmp.path().join("m.json");
    let run = train(&data, &out, &["--config", s(&cfg), "--epochs", "2"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("m.report.json")).unwrap()).unwrap();
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);
    assert_eq!(report["mode"], "unconstrained");
    assert_eq!(report["config"]["adam"]["learning_rate"], 0.002);
    assert!(report["config"]["grad_clip_norm"].is_null());
    let losses = std::fs::read_to_string(tmp.path().join("m.losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);

    std::fs::write(&cfg, "epochs = 3\nwidth = 9\n").unwrap();
    let bad = train(&data, &out, &["--config", s(&cfg)]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains(":2:"));
}

#[test]
fn several_seeds_give_one_model_each_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    let data = sine_data(tmp.path());
    let out = tmp.path().join("m.json");
    let run = train(&data, &out, &["--epochs", "3", "--seeds", "1,2"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let a = load_model(&tmp.path().join("m.seed1.json")).unwrap();
    let b = load_model(&tmp.path().join("m.seed2.json")).unwrap();
    assert_ne!(a, b);
    assert!(!out.exists());

    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("m.summary.json")).unwrap()).unwrap();
    assert_valid("seed_summary.schema.json", &summary);
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(tmp.path().join("m.summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["row", "run", "run", "mean", "std"]);
}

#[test]
fn missing_inputs_and_bad_flags_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = tmp.path().join("m.json");
    let run = train(&missing, &out, &[]);
    assert_eq!(code(&run), 1);
    assert!(!String::from_utf8_lossy(&run.stderr).is_empty());
    assert!(!out.exists());

    assert_eq!(code(&snds(&["train", "--data"])), 1);
    assert_eq!(code(&snds(&["eval", "--model", s(&out), "--data", s(&missing)])), 1);
    let data = sine_data(tmp.path());
    assert_eq!(code(&train(&data, &out, &["--policy-sizes", "3,8,2"])), 1);
    assert_eq!(code(&snds(&["--help"])), 0);
}

#[test]
fn eval_json_matches_its_schema() {
    let tmp = TempDir::new().unwrap();
    let data = sine_data(tmp.path());
    let model = tmp.path().join("m.json");
    assert_eq!(code(&train(&data, &model, &["--epochs", "2"])), 0);
    let run = snds(&["eval", "--model", s(&model), "--data", s(&data), "--json"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let doc: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_valid("eval.schema.json", &doc);
    let per_demo = doc["per_demo"].as_array().unwrap();
    assert_eq!(per_demo.len(), 2);
    assert!(per_demo.iter().all(|d| d["mse"].is_number() && d.get("dtw").is_some()));

    let mse_only = snds(&["eval", "--model", s(&model), "--data", s(&data), "--json", "--metric", "mse"]);
    let doc: Value = serde_json::from_slice(&mse_only.stdout).unwrap();
    assert_valid("eval.schema.json", &doc);
    assert!(doc["per_demo"][0].get("dtw").is_none());
}

#[test]
fn dtw_against_the_models_own_rollout_is_zero() {
    let tmp = TempDir::new().unwrap();
    let ds = generate_synthetic(snds_core::dataio::SyntheticShape::Line, 1, 60, 0.0, 0).unwrap();
    let mut model = ModelConfig { policy_sizes: vec![2, 16, 16, 2], icnn_sizes: vec![2, 16, 16, 1], ..Default::default() }
        .build(&ds.target, 0)
        .unwrap();
    model.bounds = Some(ds.bounds());
    let model_path = tmp.path().join("m.json");
    save_model(&model, &model_path).unwrap();

    let cfg = RolloutConfig { dt: 0.01, max_steps: 400, conv_radius: 0.05, ..RolloutConfig::for_dataset(&ds) };
    let traj = rollout(&model, &ds.demos[0].state(0), &cfg).unwrap();
    let n = traj.states.len();
    let mut states = Matrix::zeros((n, 2));
    let mut velocities = Matrix::zeros((n, 2));
    for k in 0..n {
        states.row_mut(k).assign(&ndarray::ArrayView1::from(&traj.states[k]));
        if let Some(a) = traj.actions.get(k) {
            velocities.row_mut(k).assign(&ndarray::ArrayView1::from(a));
        }
    }
    let reference = Dataset::new(vec![Demonstration::new(states, velocities, 0.01).unwrap()]).unwrap();
    let data = tmp.path().join("ref");
    save_dataset(&reference, &data).unwrap();

    let run = snds(&[
        "eval", "--model", s(&model_path), "--data", s(&data), "--metric", "dtw", "--json",
        "--dt", "0.01", "--max-steps", "400", "--radius", "0.05",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let doc: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(doc["per_demo"][0]["dtw"], 0.0);
}

#[test]
fn rollout_and_field_export_write_csv() {
    let tmp = TempDir::new().unwrap();
    let data = sine_data(tmp.path());
    let model = tmp.path().join("m.json");
    assert_eq!(code(&train(&data, &model, &["--epochs", "1"])), 0);

    let traj = tmp.path().join("traj.csv");
    let run = snds(&[
        "rollout", "--model", s(&model), "--data", s(&data), "--out", s(&traj),
        "--max-steps", "50", "--perturb", "10:-0.5,0.25",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&traj).unwrap();
    assert_eq!(text.lines().next(), Some("k,x1,x2,a1,a2"));
    assert!(text.lines().count() > 2);
    assert_eq!(code(&snds(&["rollout", "--model", s(&model), "--out", s(&traj), "--perturb", "oops"])), 1);

    let field = tmp.path().join("field.csv");
    let run = snds(&["export-field", "--model", s(&model), "--out", s(&field), "--resolution", "4,3"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&field).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);
    assert_eq!(text.lines().next(), Some("x1,x2,a1,a2,v,vdot"));
}

#[test]
fn certify_separates_stable_from_unconstrained_models() {
    let tmp = TempDir::new().unwrap();
    let data = sine_data(tmp.path());
    let stable = tmp.path().join("stable.json");
    let free = tmp.path().join("free.json");
    assert_eq!(code(&train(&data, &stable, &["--epochs", "5"])), 0);
    assert_eq!(code(&train(&data, &free, &["--epochs", "5", "--mode", "unconstrained"])), 0);

    let certify = |model: &Path| {
        snds(&["certify", "--model", s(model), "--samples", "500", "--triples", "200", "--rollouts", "10", "--json"])
    };
    let ok = certify(&stable);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let doc: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_valid("certify.schema.json", &doc);
    assert_eq!(doc["ok"], true);

    let bad = certify(&free);
    assert_eq!(code(&bad), 2);
    let doc: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_valid("certify.schema.json", &doc);
    assert_eq!(doc["ok"], false);
}

#[test]
fn generated_line_data_trains_and_certifies() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("line");
    let gen = snds(&["gen-data", "--shape", "line", "--samples", "100", "--out", s(&data)]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let model = tmp.path().join("line.json");
    let run = train(&data, &model, &["--epochs", "40"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let cert = snds(&["certify", "--model", s(&model), "--samples", "1000", "--rollouts", "20"]);
    assert_eq!(code(&cert), 0, "{}", String::from_utf8_lossy(&cert.stdout));
}
