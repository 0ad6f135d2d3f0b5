//! The OPSD training loop and the supervised warm start that precedes it.
//!
//! One step samples `rollouts_per_prompt` student completions for each of
//! `prompts_per_step` tasks, renders a privileged teacher prompt for every
//! rollout, scores the rollout tokens under both prompts, and takes one
//! clipped AdamW step on the mean per-rollout loss followed by an EMA update
//! of the teacher.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::context::{self, ContextInputs, ContextKind};
use crate::distill::{self, clip_then_adamw, ema_update, DistillConfig, OptimState};
use crate::env::{self, TaskInstance, TaskKind, Verdict};
use crate::evalproto::{self, Rollout};
use crate::model::{self, tokenizer, DecodingParams, ModelConfig, ParamHandles, Parameters, Token};
use crate::numcore::{Gradients, Tape};
use crate::seed::{derive_seed, derived_rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub context: ContextKind,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub rollouts_per_prompt: usize,
    pub max_new_tokens: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: 50 steps of 8 prompts with 4 rollouts each.
    pub fn desk(model: ModelConfig, context: ContextKind, seed: u64) -> Self {
        TrainConfig {
            model,
            distill: DistillConfig::default(),
            context,
            steps: 50,
            prompts_per_step: 8,
            rollouts_per_prompt: 4,
            max_new_tokens: 16,
            eval_every: 10,
            seed,
        }
    }

    pub fn train_decoding(&self) -> DecodingParams {
        DecodingParams::train(self.max_new_tokens, self.rollouts_per_prompt)
    }

    pub fn validation_decoding(&self) -> DecodingParams {
        DecodingParams::validation(self.max_new_tokens)
    }

    /// `steps == 0` is accepted and yields an empty loop.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate(self.model.vocab_size)?;
        if self.prompts_per_step == 0 || self.rollouts_per_prompt == 0 || self.max_new_tokens == 0 {
            return Err(Error::Contract(
                "prompts_per_step, rollouts_per_prompt and max_new_tokens must be positive".into(),
            ));
        }
        if self.context.uses_peers() && self.rollouts_per_prompt < 2 {
            return Err(Error::Contract(format!(
                "context {} needs at least 2 rollouts per prompt",
                self.context
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Contract("eval_every must be positive".into()));
        }
        evalproto::teacher_prompt_budget(&self.model, self.max_new_tokens)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_loss: f64,
    pub rollout_pass_rate: f64,
    pub teacher_pass_rate: f64,
    pub tokens_processed: usize,
    pub skipped: bool,
    pub grad_norm: f64,
    pub context_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: Parameters,
    pub teacher: Parameters,
    pub optim: OptimState,
}

impl TrainState {
    /// Student and teacher both start at `init`.
    pub fn new(init: &Parameters) -> Self {
        TrainState {
            student: init.clone(),
            teacher: init.clone(),
            optim: OptimState::new(init),
        }
    }
}

/// Loss and student gradients for one rollout. Teacher parameters enter the
/// tape as constants.
pub fn rollout_loss(
    student: &Parameters,
    teacher: &Parameters,
    student_prompt: &[Token],
    teacher_prompt: &[Token],
    response: &[Token],
    top_k: usize,
) -> Result<(f64, Gradients)> {
    if response.is_empty() {
        return Err(Error::Contract("empty rollout".into()));
    }
    let s_seq: Vec<Token> = student_prompt.iter().chain(response).copied().collect();
    let t_seq: Vec<Token> = teacher_prompt.iter().chain(response).copied().collect();
    if s_seq[student_prompt.len()..] != t_seq[teacher_prompt.len()..] {
        return Err(Error::Contract("teacher and student scored different rollout tokens".into()));
    }
    let mut tape = Tape::new();
    let s_handles = ParamHandles::register(&mut tape, student, true, "")?;
    let t_handles = ParamHandles::register(&mut tape, teacher, false, "")?;
    let s_rows = model::sequence_logprobs(&mut tape, &s_handles, &s_seq, student_prompt.len())?;
    let t_rows = model::sequence_logprobs(&mut tape, &t_handles, &t_seq, teacher_prompt.len())?;
    let loss = distill::opsd_loss(&mut tape, s_rows, t_rows, response.len(), top_k)?;
    let value = tape.value(loss)?.item()?;
    Ok((value, tape.backward(loss)?))
}

/// One OPSD step on `batch`; `step` selects the rollout seeds.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[TaskInstance], step: usize) -> Result<StepMetrics> {
    let dec = cfg.train_decoding();
    let budget = evalproto::teacher_prompt_budget(&cfg.model, cfg.max_new_tokens)?;
    let step_seed = derive_seed(cfg.seed, "rollout", &[step as u64]);

    let mut grads = Gradients::new();
    let mut loss_sum = 0.0;
    let mut n_rollouts = 0usize;
    let mut passed = 0usize;
    let mut teacher_passed = 0usize;
    let mut tokens = 0usize;
    let mut fallbacks = 0usize;

    for (p, task) in batch.iter().enumerate() {
        let group: Vec<Rollout> = evalproto::rollout_group(&state.student, task, p, &dec, step_seed)?;
        let texts: Vec<String> = group.iter().map(|r| r.text.clone()).collect();
        let verdicts: Vec<Verdict> = group.iter().map(|r| r.verdict.clone()).collect();
        let student_prompt = tokenizer::encode_prompt(&task.prompt_text);
        for (j, rollout) in group.iter().enumerate() {
            let inputs = context::group_inputs(&task.prompt_text, &texts, &verdicts, j);
            let rendering = context::render_with_budget(cfg.context, &inputs, budget)?;
            if rendering.fallback {
                fallbacks += 1;
            }
            let teacher_prompt = tokenizer::encode_prompt(&rendering.text);
            let (loss, g) = rollout_loss(
                &state.student,
                &state.teacher,
                &student_prompt,
                &teacher_prompt,
                &rollout.tokens,
                cfg.distill.top_k,
            )?;
            grads.accumulate(&g)?;
            loss_sum += loss;
            n_rollouts += 1;
            tokens += rollout.tokens.len();
            passed += rollout.verdict.passed as usize;

            let t_tokens = model::sample(
                &state.teacher,
                &teacher_prompt,
                &dec,
                evalproto::sample_seed(step_seed, p, j),
            )?;
            teacher_passed += env::verify(task, &tokenizer::decode_response(&t_tokens)).passed as usize;
        }
    }
    if n_rollouts == 0 {
        return Err(Error::Contract("empty training batch".into()));
    }
    grads.scale(1.0 / n_rollouts as f64);
    if fallbacks > 0 {
        debug!(step, fallbacks, "teacher prompts fell back to the plain prompt");
    }

    let grad_norm = grads.global_norm();
    let skipped = match clip_then_adamw(&mut state.student, &grads, &mut state.optim, &cfg.distill) {
        Ok(_) => {
            state.teacher = ema_update(&state.teacher, &state.student, cfg.distill.ema_rate)?;
            false
        }
        Err(Error::AbortStep(msg)) => {
            warn!(step, %msg, "step skipped");
            true
        }
        Err(e) => return Err(e),
    };

    Ok(StepMetrics {
        step,
        mean_loss: loss_sum / n_rollouts as f64,
        rollout_pass_rate: passed as f64 / n_rollouts as f64,
        teacher_pass_rate: teacher_passed as f64 / n_rollouts as f64,
        tokens_processed: tokens,
        skipped,
        grad_norm,
        context_fallbacks: fallbacks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub student_mean_at_4: f64,
    pub teacher_mean_at_4: f64,
}

/// A line of the run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RunEvent {
    Config {
        config_hash: String,
        config: serde_json::Value,
    },
    Step(StepMetrics),
    Validation(ValidationPoint),
}

pub struct RunOutcome {
    pub steps: Vec<StepMetrics>,
    pub validations: Vec<ValidationPoint>,
    pub initial: Parameters,
    pub final_student: Parameters,
    pub final_teacher: Parameters,
}

/// Seed shared by every validation point of a run, so the points are paired.
pub fn validation_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, "eval", &[0])
}

fn validate_point(state: &TrainState, cfg: &TrainConfig, val: &[TaskInstance], step: usize) -> Result<ValidationPoint> {
    let acc = evalproto::paired_accuracy(
        &state.student,
        &state.teacher,
        cfg.context,
        val,
        &cfg.validation_decoding(),
        validation_seed(cfg.seed),
    )?;
    Ok(ValidationPoint {
        step,
        student_mean_at_4: acc.student.rate(),
        teacher_mean_at_4: acc.teacher.rate(),
    })
}

/// Runs `cfg.steps` steps from `init`, validating before the first step,
/// every `eval_every` steps and after the last. Every event is passed to
/// `sink` as soon as it exists.
pub fn run_training(
    cfg: &TrainConfig,
    train: &[TaskInstance],
    val: &[TaskInstance],
    init: &Parameters,
    sink: &mut dyn FnMut(&RunEvent) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if *init.config() != cfg.model {
        return Err(Error::Contract("initial checkpoint does not match the model config".into()));
    }
    if train.len() < cfg.prompts_per_step {
        return Err(Error::Contract(format!(
            "{} training tasks for {} prompts per step",
            train.len(),
            cfg.prompts_per_step
        )));
    }
    let mut state = TrainState::new(init);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let mut validate = |state: &TrainState, step: usize, sink: &mut dyn FnMut(&RunEvent) -> Result<()>| {
        let v = validate_point(state, cfg, val, step)?;
        info!(step, student = v.student_mean_at_4, teacher = v.teacher_mean_at_4, "validation");
        sink(&RunEvent::Validation(v))?;
        validations.push(v);
        Result::Ok(())
    };
    validate(&state, 0, sink)?;

    for step in 0..cfg.steps {
        let mut rng = derived_rng(cfg.seed, "batch", &[step as u64]);
        let batch: Vec<TaskInstance> = index::sample(&mut rng, train.len(), cfg.prompts_per_step)
            .iter()
            .map(|i| train[i].clone())
            .collect();
        let m = train_step(&mut state, cfg, &batch, step)?;
        debug!(step, loss = m.mean_loss, pass = m.rollout_pass_rate, "step");
        sink(&RunEvent::Step(m.clone()))?;
        steps.push(m);
        // the point taken after step `s` is labelled `s + 1`
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            validate(&state, done, sink)?;
        }
    }

    Ok(RunOutcome {
        steps,
        validations,
        initial: init.clone(),
        final_student: state.student,
        final_teacher: state.teacher,
    })
}

/// Line-oriented run record; each line is flushed as it is written, so a
/// partial file is valid up to its last line.
pub struct RunLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, event: &RunEvent) -> Result<()> {
        let line = serde_json::to_string(event).map_err(|e| Error::Format(e.to_string()))?;
        let io = |e| Error::io(&self.path, e);
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(io)
    }
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// A supervised transcript: the model learns to emit `response` then EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt: String,
    pub response: String,
}

fn wrong_answer<R: Rng + ?Sized>(task: &TaskInstance, rng: &mut R) -> String {
    match task.kind {
        TaskKind::Arithmetic => {
            let a: i64 = task.hidden_answer.parse().expect("integer answer");
            match rng.random_range(0..4) {
                0 => format!("{a}x"),
                _ => {
                    let spread = (a.abs() / 4).max(10);
                    let mut d = rng.random_range(1..=spread);
                    if rng.random_bool(0.5) {
                        d = -d;
                    }
                    (a + d).to_string()
                }
            }
        }
        TaskKind::StringTransform => {
            let mut chars: Vec<char> = task.hidden_answer.chars().collect();
            match rng.random_range(0..4) {
                0 => task.prompt_text.trim_start_matches("REV: ").to_string(),
                1 => {
                    chars.pop();
                    chars.into_iter().collect()
                }
                2 => {
                    chars.push(char::from(b'a' + rng.random_range(0..26u8)));
                    chars.into_iter().collect()
                }
                _ => {
                    let i = rng.random_range(0..chars.len());
                    chars[i] = char::from(b'a' + rng.random_range(0..26u8));
                    chars.into_iter().collect()
                }
            }
        }
    }
}

fn failed_attempt<R: Rng + ?Sized>(task: &TaskInstance, rng: &mut R) -> Option<(String, Verdict)> {
    for _ in 0..8 {
        let attempt = wrong_answer(task, rng);
        let verdict = env::verify(task, &attempt);
        if !verdict.passed {
            return Some((attempt, verdict));
        }
    }
    None
}

/// Privileged inputs for a warm-start transcript: a failed or correct own
/// attempt and, sometimes, a correct peer.
fn synthetic_inputs<R: Rng + ?Sized>(task: &TaskInstance, kind: ContextKind, rng: &mut R) -> ContextInputs {
    let mut inputs = ContextInputs::plain(task.prompt_text.clone());
    let own_correct = match kind {
        ContextKind::OwnSolutionFeedback => rng.random_bool(0.3),
        ContextKind::PeerSolutionFeedback => rng.random_bool(0.5),
        _ => false,
    };
    if own_correct {
        inputs.own_response = Some(task.hidden_answer.clone());
        inputs.own_verdict = Some(env::verify(task, &task.hidden_answer));
    } else if let Some((attempt, verdict)) = failed_attempt(task, rng) {
        inputs.own_response = Some(attempt);
        inputs.own_verdict = Some(verdict);
    }
    let peer = match kind {
        ContextKind::PeerHints => true,
        ContextKind::PeerSolutionFeedback => rng.random_bool(0.7),
        _ => false,
    };
    if peer {
        inputs.peer_correct_response = Some(task.hidden_answer.clone());
    }
    inputs
}

const AUX_CONTEXTS: [ContextKind; 4] = [
    ContextKind::Feedback,
    ContextKind::PeerHints,
    ContextKind::OwnSolutionFeedback,
    ContextKind::PeerSolutionFeedback,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_transcripts: usize,
    /// Share of transcripts whose prompt carries privileged context.
    pub context_fraction: f64,
    pub kinds: Vec<TaskKind>,
}

/// Solved transcripts over fresh tasks, skipping every prompt in `exclude`.
pub fn build_corpus(cfg: &CorpusConfig, exclude: &HashSet<String>, prompt_budget: usize, seed: u64) -> Result<Vec<Transcript>> {
    if cfg.kinds.is_empty() || !(0.0..=1.0).contains(&cfg.context_fraction) {
        return Err(Error::Contract("corpus needs task kinds and a context fraction in [0, 1]".into()));
    }
    let mut rng = derived_rng(seed, "corpus", &[]);
    let mut out = Vec::with_capacity(cfg.n_transcripts);
    let mut attempts = 0usize;
    while out.len() < cfg.n_transcripts {
        attempts += 1;
        if attempts > cfg.n_transcripts * 20 + 1000 {
            return Err(Error::Contract("could not draw enough unseen tasks for the corpus".into()));
        }
        let kind = cfg.kinds[out.len() % cfg.kinds.len()];
        let (prompt_text, hidden_answer) = env::sample_task(kind, &mut rng);
        if exclude.contains(&prompt_text) {
            continue;
        }
        let task = TaskInstance {
            task_id: String::new(),
            kind,
            prompt_text,
            hidden_answer,
        };
        let prompt = if rng.random_bool(cfg.context_fraction) {
            let ctx = AUX_CONTEXTS[rng.random_range(0..AUX_CONTEXTS.len())];
            let inputs = synthetic_inputs(&task, ctx, &mut rng);
            context::render_with_budget(ctx, &inputs, prompt_budget)?.text
        } else {
            task.prompt_text.clone()
        };
        out.push(Transcript {
            prompt,
            response: task.hidden_answer,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            learning_rate: 3e-3,
            batch_size: 16,
            warmup_steps: 50,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Mean next-token cross-entropy over the response tokens and EOS.
pub fn transcript_loss(params: &Parameters, t: &Transcript) -> Result<(f64, Gradients)> {
    let prompt = tokenizer::encode_prompt(&t.prompt);
    let response = tokenizer::encode_response(&t.response);
    let full: Vec<Token> = prompt.iter().chain(&response).copied().collect();
    let mut tape = Tape::new();
    let handles = ParamHandles::register(&mut tape, params, true, "")?;
    let rows = model::sequence_logprobs(&mut tape, &handles, &full, prompt.len())?;
    let picked = tape.gather(rows, response.clone(), 1)?;
    let mean = tape.mean(picked)?;
    let loss = tape.scale(mean, -1.0)?;
    Ok((tape.value(loss)?.item()?, tape.backward(loss)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub updates: usize,
    pub epoch_losses: Vec<f64>,
}

/// Supervised warm start: shuffled mini-batches, linear warmup then cosine
/// decay to a tenth of the peak rate, clipped AdamW.
pub fn pretrain(params: &mut Parameters, corpus: &[Transcript], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if corpus.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Contract("pretraining needs a corpus, epochs and a batch size".into()));
    }
    let per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut optim = OptimState::new(params);
    let mut update = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, "shuffle", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new();
            for &i in chunk {
                let (loss, g) = transcript_loss(params, &corpus[i])?;
                epoch_loss += loss;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / chunk.len() as f64);
            let lr = if update < cfg.warmup_steps {
                cfg.learning_rate * (update + 1) as f64 / cfg.warmup_steps as f64
            } else {
                let progress = (update - cfg.warmup_steps) as f64 / (total - cfg.warmup_steps).max(1) as f64;
                cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            };
            let dcfg = DistillConfig {
                learning_rate: lr,
                weight_decay: cfg.weight_decay,
                ..DistillConfig::default()
            };
            match clip_then_adamw(params, &grads, &mut optim, &dcfg) {
                Ok(_) | Err(Error::AbortStep(_)) => {}
                Err(e) => return Err(e),
            }
            update += 1;
        }
        let mean = epoch_loss / corpus.len() as f64;
        info!(epoch, loss = mean, "pretraining epoch");
        epoch_losses.push(mean);
    }
    Ok(PretrainReport {
        updates: update,
        epoch_losses,
    })
}
