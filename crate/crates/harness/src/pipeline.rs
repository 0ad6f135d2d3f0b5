//! Experiment pipelines over one output directory.
//!
//! Layout under the root:
//!
//! ```text
//! data/          train.jsonl, val.jsonl (private), val_public.jsonl, meta.json
//! checkpoints/   warm_<size>.ckpt + .json, <context>_<size>_seed<n>.ckpt
//! gaps/          <context>_<size>_seed<n>.json
//! runs/          <context>_<size>_seed<n>.jsonl
//! law.csv, fit_report.json, plot_data.csv
//! ```
//!
//! Files are written under a `.partial` suffix and renamed once complete.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use opsd_core::context::ContextKind;
use opsd_core::env::{self, TaskInstance, Visibility};
use opsd_core::evalproto::{self, GapRecord};
use opsd_core::lawfit::{self, FitReport, PointSet};
use opsd_core::model::{self, DecodingParams, ModelSize, Parameters};
use opsd_core::seed::derive_seed;
use opsd_core::trainer::{self, PretrainReport, RunEvent, RunLog, StepMetrics, ValidationPoint};
use opsd_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::info;

use crate::config::{hash_json, ExperimentConfig};

pub const OUT_ENV: &str = "OPSD_LAB_OUT";
pub const DEFAULT_OUT: &str = "opsd-out";
const LOCK_FILE: &str = ".opsd-lab.lock";

/// Resolves `--out`, then the environment variable, then the default.
pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn finish(path: &Path) -> Result<()> {
    fs::rename(partial(path), path).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    let tmp = partial(path);
    fs::write(&tmp, text + "\n").map_err(io_err(&tmp))?;
    finish(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "{} is locked by another run (remove {} if it is stale)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn run_stem(context: ContextKind, size: ModelSize, seed: u64) -> String {
    format!("{context}_{}_seed{seed}", size.label().to_ascii_lowercase())
}

/// Gap measurement artifact; `improvement_decoding` is set once training
/// has finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapArtifact {
    pub config_hash: String,
    pub config: Value,
    pub record: GapRecord,
    pub improvement_decoding: Option<DecodingParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WarmMeta {
    config_hash: String,
    config: Value,
    report: PretrainReport,
    context_phase: Option<PretrainReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: GapRecord,
    pub steps: Vec<StepMetrics>,
    pub validations: Vec<ValidationPoint>,
    pub run_record: PathBuf,
}

pub struct Lab {
    root: PathBuf,
    cfg: ExperimentConfig,
    hash: String,
    _lock: DirLock,
}

impl Lab {
    pub fn open(root: &Path, cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        for sub in ["", "data", "checkpoints", "gaps", "runs"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let lock = DirLock::acquire(root)?;
        Ok(Lab {
            root: root.to_path_buf(),
            hash: cfg.hash(),
            cfg,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn law_csv(&self) -> PathBuf {
        self.root.join("law.csv")
    }

    pub fn fit_report_path(&self) -> PathBuf {
        self.root.join("fit_report.json")
    }

    pub fn plot_data_path(&self) -> PathBuf {
        self.root.join("plot_data.csv")
    }

    pub fn gap_path(&self, context: ContextKind, size: ModelSize, seed: u64) -> PathBuf {
        self.root.join("gaps").join(format!("{}.json", run_stem(context, size, seed)))
    }

    pub fn run_path(&self, context: ContextKind, size: ModelSize, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("{}.jsonl", run_stem(context, size, seed)))
    }

    pub fn warm_path(&self, size: ModelSize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("warm_{}.ckpt", size.label().to_ascii_lowercase()))
    }

    fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    /// Writes the train and validation splits; the validation split is also
    /// written without answers.
    pub fn gen_data(&self) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
        let e = &self.cfg.env;
        let (train, val) = env::gen_dataset(e.kind, e.n_train, e.n_val, e.data_seed)?;
        let dir = self.data_dir();
        for (name, tasks, vis) in [
            ("train.jsonl", &train, Visibility::Private),
            ("val.jsonl", &val, Visibility::Private),
            ("val_public.jsonl", &val, Visibility::Public),
        ] {
            let path = dir.join(name);
            env::write_tasks(&partial(&path), tasks, vis)?;
            finish(&path)?;
        }
        let env_json = serde_json::to_value(e).expect("serializes");
        write_json(
            &dir.join("meta.json"),
            &json!({ "config_hash": hash_json(&env_json), "env": env_json }),
        )?;
        info!(train = train.len(), val = val.len(), "datasets written");
        Ok((train, val))
    }

    /// Loads the splits, generating them first if absent.
    pub fn datasets(&self) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
        let dir = self.data_dir();
        let meta = dir.join("meta.json");
        if !meta.exists() {
            return self.gen_data();
        }
        let meta: Value = read_json(&meta)?;
        let want = hash_json(&serde_json::to_value(&self.cfg.env).expect("serializes"));
        if meta["config_hash"] != want {
            return Err(Error::Contract(format!(
                "{} holds data generated from different env settings",
                dir.display()
            )));
        }
        Ok((
            env::read_private_tasks(&dir.join("train.jsonl"))?,
            env::read_private_tasks(&dir.join("val.jsonl"))?,
        ))
    }

    fn warm_config(&self, size: ModelSize) -> Value {
        json!({
            "env": self.cfg.env,
            "pretrain": self.cfg.pretrain,
            "size": size,
            "init_seed": self.cfg.model.init_seed,
            "max_new_tokens": self.cfg.train.max_new_tokens,
        })
    }

    /// The warm-start checkpoint for `size`, trained on first use.
    pub fn pretrain(&self, size: ModelSize) -> Result<Parameters> {
        let ckpt = self.warm_path(size);
        let meta_path = ckpt.with_extension("json");
        let config = self.warm_config(size);
        let hash = hash_json(&config);
        if ckpt.exists() && meta_path.exists() {
            let meta: WarmMeta = read_json(&meta_path)?;
            if meta.config_hash == hash {
                return model::load_checkpoint(&ckpt);
            }
            return Err(Error::Contract(format!(
                "{} was pretrained with different settings",
                ckpt.display()
            )));
        }
        let (_, val) = self.datasets()?;
        let exclude: HashSet<String> = val.iter().map(|t| t.prompt_text.clone()).collect();
        let model_cfg = size.config();
        let budget = evalproto::teacher_prompt_budget(&model_cfg, self.cfg.train.max_new_tokens)?;
        let corpus = trainer::build_corpus(&self.cfg.corpus_config(), &exclude, budget, self.cfg.pretrain.seed)?;
        let mut params = model::init_params(&model_cfg, self.cfg.model.init_seed)?;
        info!(size = %size, transcripts = corpus.len(), "pretraining");
        let report = trainer::pretrain(&mut params, &corpus, &self.cfg.pretrain_config())?;
        let context_phase = match self.cfg.context_phase() {
            Some((corpus_cfg, train_cfg)) => {
                let seed = derive_seed(self.cfg.pretrain.seed, "context_phase", &[]);
                let corpus = trainer::build_corpus(&corpus_cfg, &exclude, budget, seed)?;
                info!(size = %size, transcripts = corpus.len(), "context phase");
                Some(trainer::pretrain(&mut params, &corpus, &train_cfg)?)
            }
            None => None,
        };
        model::save_checkpoint(&params, &partial(&ckpt))?;
        finish(&ckpt)?;
        write_json(
            &meta_path,
            &WarmMeta {
                config_hash: hash,
                config,
                report,
                context_phase,
            },
        )?;
        Ok(params)
    }

    pub fn gap_decoding(&self) -> DecodingParams {
        DecodingParams::train(self.cfg.train.max_new_tokens, self.cfg.eval.gap_samples)
    }

    pub fn validation_decoding(&self) -> DecodingParams {
        DecodingParams::validation(self.cfg.train.max_new_tokens)
    }

    fn run_config(&self, context: ContextKind, size: ModelSize, seed: u64) -> Value {
        json!({
            "experiment": self.cfg,
            "run": { "context": context, "model": size, "seed": seed },
            "train": self.cfg.train_config(size, context, seed),
            "gap_decoding": self.gap_decoding(),
            "validation_decoding": self.validation_decoding(),
        })
    }

    fn gap_with(&self, warm: &Parameters, val: &[TaskInstance], context: ContextKind, size: ModelSize, seed: u64) -> Result<GapArtifact> {
        let record = evalproto::measure_gap(
            warm,
            context,
            val,
            &self.gap_decoding(),
            derive_seed(seed, "gap", &[0]),
            size.label(),
            seed,
        )?;
        info!(context = %context, size = %size, seed, gap = record.initial_gap, "gap measured");
        let config = self.run_config(context, size, seed);
        let artifact = GapArtifact {
            config_hash: hash_json(&config),
            config,
            record,
            improvement_decoding: None,
        };
        write_json(&self.gap_path(context, size, seed), &artifact)?;
        Ok(artifact)
    }

    pub fn measure_gap(&self, context: ContextKind, size: ModelSize, seed: u64) -> Result<GapRecord> {
        let warm = self.pretrain(size)?;
        let (_, val) = self.datasets()?;
        Ok(self.gap_with(&warm, &val, context, size, seed)?.record)
    }

    /// Gap, OPSD run, improvement, and one appended law CSV row.
    pub fn train(&self, context: ContextKind, size: ModelSize, seed: u64) -> Result<TrainOutcome> {
        let warm = self.pretrain(size)?;
        let (train, val) = self.datasets()?;
        let mut artifact = self.gap_with(&warm, &val, context, size, seed)?;
        let cfg = self.cfg.train_config(size, context, seed);

        let run_path = self.run_path(context, size, seed);
        let mut log = RunLog::create(&partial(&run_path))?;
        log.write(&RunEvent::Config {
            config_hash: artifact.config_hash.clone(),
            config: artifact.config.clone(),
        })?;
        let outcome = trainer::run_training(&cfg, &train, &val, &warm, &mut |ev| log.write(ev))?;
        drop(log);
        finish(&run_path)?;

        let ckpt = self.root.join("checkpoints").join(format!("{}.ckpt", run_stem(context, size, seed)));
        model::save_checkpoint(&outcome.final_student, &partial(&ckpt))?;
        finish(&ckpt)?;

        let val_dec = self.validation_decoding();
        let improvement = evalproto::improvement(
            &warm,
            &outcome.final_student,
            &val,
            &val_dec,
            trainer::validation_seed(seed),
        )?;
        artifact.record.improvement = Some(improvement);
        artifact.improvement_decoding = Some(val_dec);
        write_json(&self.gap_path(context, size, seed), &artifact)?;
        lawfit::append_law_csv(&self.law_csv(), &[artifact.record.law_row()?], &self.hash)?;
        info!(context = %context, size = %size, seed, improvement, "run finished");

        Ok(TrainOutcome {
            record: artifact.record,
            steps: outcome.steps,
            validations: outcome.validations,
            run_record: run_path,
        })
    }

    /// Every configured context at the configured size, for every seed.
    pub fn screen(&self) -> Result<Vec<TrainOutcome>> {
        let mut out = Vec::new();
        for &context in &self.cfg.screen.contexts {
            for &seed in &self.cfg.seeds {
                out.push(self.train(context, self.cfg.model.size, seed)?);
            }
        }
        Ok(out)
    }

    /// Peer solution + feedback at every configured size, for every seed.
    pub fn sweep_sizes(&self) -> Result<Vec<TrainOutcome>> {
        let mut out = Vec::new();
        for &size in &self.cfg.sweep.sizes {
            for &seed in &self.cfg.seeds {
                out.push(self.train(ContextKind::PeerSolutionFeedback, size, seed)?);
            }
        }
        Ok(out)
    }

    /// Fits per-label means of the law CSV and writes the report and plot data.
    pub fn fit_law(&self, csv: Option<&Path>) -> Result<FitReport> {
        let default_csv = self.law_csv();
        let rows = lawfit::read_law_csv(csv.unwrap_or(&default_csv))?;
        let points = PointSet::from_rows_auto(&rows);
        let fit = lawfit::fit_law(&points)?;
        let report = FitReport {
            config_hash: self.hash.clone(),
            fit,
            points,
        };
        let path = self.fit_report_path();
        lawfit::write_fit_report(&partial(&path), &report)?;
        finish(&path)?;
        let plot = self.plot_data_path();
        lawfit::write_plot_data(&partial(&plot), &report.fit, &report.points)?;
        finish(&plot)?;
        Ok(report)
    }

    pub fn predict(&self, gap: f64, report: Option<&Path>) -> Result<f64> {
        let default_report = self.fit_report_path();
        let report = lawfit::read_fit_report(report.unwrap_or(&default_report))?;
        Ok(lawfit::predict(&report.fit, gap))
    }

    /// Validation mean@4 of a checkpoint.
    pub fn eval(&self, checkpoint: &Path, seed: u64) -> Result<f64> {
        let params = model::load_checkpoint(checkpoint)?;
        let (_, val) = self.datasets()?;
        evalproto::mean_at_n(&params, &val, &self.validation_decoding(), trainer::validation_seed(seed))
    }
}

pub fn read_gap_artifact(path: &Path) -> Result<GapArtifact> {
    read_json(path)
}

/// `.partial` files left behind by an interrupted run.
pub fn partial_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "partial") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
