use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use opsd_core::lawfit::{read_fit_report, read_law_csv, FitReport};
use opsd_core::trainer::{read_run_log, RunEvent};
use opsd_harness::pipeline::{read_gap_artifact, Lab};
use opsd_harness::ExperimentConfig;
use serde_json::Value;

/// Small enough that a full screen takes seconds.
const TINY: &str = r#"
seeds = [1, 2, 3]

[model]
size = "XS"

[env]
n_train = 16
n_val = 2

[pretrain]
n_transcripts = 32
epochs = 1
context_phase_transcripts = 16
context_phase_epochs = 1
warmup_steps = 1

[train]
steps = 1
prompts_per_step = 2
rollouts_per_prompt = 2
max_new_tokens = 6
eval_every = 1

[eval]
gap_samples = 2

[sweep]
sizes = ["XS"]
"#;

fn lab_cmd(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opsd-lab"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Vec<Value> {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_csv(path: &Path, slope: f64, intercept: f64) {
    let mut text = String::from("context,model,seed,initial_gap,improvement\n# config_hash=fixture\n");
    for (i, x) in [0.0, 0.03, 0.05, 0.08, 0.12, 0.2].iter().enumerate() {
        text += &format!("ctx{i},S,1,{x},{}\n", slope * x + intercept);
    }
    fs::write(path, text).unwrap();
}

#[test]
fn fit_law_and_predict_on_reported_constants() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("fixture.csv");
    write_csv(&csv, 1.492, -0.003);
    let out = dir.path().join("lab");
    let fit = stdout_json(&lab_cmd(&out, &["fit-law", "--csv", csv.to_str().unwrap()]));
    assert!((fit[0]["r_squared"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((fit[0]["slope"].as_f64().unwrap() - 1.492).abs() < 1e-9);
    let report: FitReport = read_fit_report(&out.join("fit_report.json")).unwrap();
    assert_eq!(report.points.len(), 6);
    assert_eq!(report.config_hash, ExperimentConfig::default().hash());
    let plot = fs::read_to_string(out.join("plot_data.csv")).unwrap();
    assert_eq!(plot.lines().count(), 7);

    let pred = stdout_json(&lab_cmd(&out, &["predict", "--gap", "0.1"]));
    assert!((pred[0]["predicted_improvement"].as_f64().unwrap() - 0.1462).abs() < 1e-9);
}

#[test]
fn failures_print_a_parseable_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab_cmd(dir.path(), &["predict", "--gap", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8(o.stderr).unwrap();
    let line = stderr.lines().find(|l| l.starts_with("error: ")).unwrap();
    assert!(line.starts_with("error: kind=io msg=\""), "{line}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let o = lab_cmd(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("error: kind=format"));

    let o = lab_cmd(dir.path(), &["train"]);
    assert!(String::from_utf8(o.stderr).unwrap().contains("error: kind=contract"));
}

#[test]
fn locked_directories_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let lab = Lab::open(dir.path(), ExperimentConfig::default()).unwrap();
    assert!(Lab::open(dir.path(), ExperimentConfig::default()).is_err());
    let o = lab_cmd(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("locked"));
    drop(lab);
    assert!(dir.path().read_dir().unwrap().all(|e| e.unwrap().file_name() != ".opsd-lab.lock"));
    assert!(lab_cmd(dir.path(), &["gen-data"]).status.success());
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_opsd-lab"))
        .arg("gen-data")
        .env("OPSD_LAB_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("data/val_public.jsonl").exists());
    let public = fs::read_to_string(dir.path().join("data/val_public.jsonl")).unwrap();
    assert!(!public.contains("hidden_answer"));
}

#[test]
fn screen_writes_one_row_per_context_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("lab");
    let cfg = cfg_path.to_str().unwrap();
    let records = stdout_json(&lab_cmd(&out, &["--config", cfg, "screen"]));
    assert_eq!(records.len(), 18);
    let rows = read_law_csv(&out.join("law.csv")).unwrap();
    assert_eq!(rows.len(), 18);
    let hash = ExperimentConfig::from_toml(TINY).unwrap().hash();
    let csv = fs::read_to_string(out.join("law.csv")).unwrap();
    assert_eq!(csv.matches(&format!("# config_hash={hash}")).count(), 18);

    // every artifact embeds its resolved config
    let gap = read_gap_artifact(&out.join("gaps/peer_solution_feedback_xs_seed2.json")).unwrap();
    assert_eq!(gap.record.decoding.temperature, 1.0);
    assert_eq!(gap.improvement_decoding.unwrap().temperature, 0.6);
    let events = read_run_log(&out.join("runs/peer_solution_feedback_xs_seed2.jsonl")).unwrap();
    match &events[0] {
        RunEvent::Config { config_hash, config } => {
            assert_eq!(config_hash, &gap.config_hash);
            assert_eq!(config["experiment"]["train"]["steps"], 1);
        }
        other => panic!("first record is {other:?}"),
    }
    assert!(out.join("checkpoints/warm_xs.ckpt").exists());
    assert!(opsd_harness::pipeline::partial_files(&out).is_empty());

    let single = stdout_json(&lab_cmd(&out, &["--config", cfg, "--seed", "9", "--context", "feedback", "measure-gap"]));
    assert_eq!(single[0]["context"], "feedback");
    assert_eq!(single[0]["seed"], 9);
    let sweep = stdout_json(&lab_cmd(&out, &["--config", cfg, "--seed", "4", "sweep-sizes"]));
    assert_eq!(sweep.len(), 1);
    let ckpt = out.join("checkpoints/peer_solution_feedback_xs_seed4.ckpt");
    let eval = stdout_json(&lab_cmd(&out, &["--config", cfg, "eval", "--checkpoint", ckpt.to_str().unwrap()]));
    let acc = eval[0]["mean_at_4"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn pretraining_is_cached_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let first = {
        let lab = Lab::open(dir.path(), cfg.clone()).unwrap();
        lab.pretrain(cfg.model.size).unwrap()
    };
    let lab = Lab::open(dir.path(), cfg.clone()).unwrap();
    assert_eq!(lab.pretrain(cfg.model.size).unwrap(), first);
    drop(lab);
    let mut other = cfg.clone();
    other.pretrain.epochs = 2;
    let lab = Lab::open(dir.path(), other).unwrap();
    assert!(lab.pretrain(cfg.model.size).is_err());
}
