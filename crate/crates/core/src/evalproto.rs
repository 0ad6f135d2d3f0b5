//! Evaluation protocol: mean@n accuracy, the initial teacher-student gap and
//! post-training improvement.
//!
//! The gap is measured on student rollouts drawn with training decoding
//! (temperature 1.0, top-p 1.0). Improvement compares validation accuracy
//! (temperature 0.6, top-p 0.95) before and after training. Each entry point
//! refuses the other protocol's decoding.
//!
//! Sample `j` of task `i` always uses the seed `derive(seed, "sample", [i, j])`,
//! and the teacher completion for a rollout reuses the rollout's seed, so
//! paired measurements share their random numbers.

use serde::{Deserialize, Serialize};

use crate::context::{self, ContextKind};
use crate::env::{self, TaskInstance, Verdict};
use crate::lawfit::LawRow;
use crate::model::{self, tokenizer, DecodingParams, Parameters, Token};
use crate::seed::derive_seed;
use crate::{Error, Result};

const GAP_DECODING: (f64, f64) = (1.0, 1.0);
const VALIDATION_DECODING: (f64, f64) = (0.6, 0.95);

fn require_decoding(dec: &DecodingParams, want: (f64, f64), what: &str) -> Result<()> {
    dec.validate()?;
    if (dec.temperature, dec.top_p) != want {
        return Err(Error::Contract(format!(
            "{what} requires temperature {} and top-p {}, got {} and {}",
            want.0, want.1, dec.temperature, dec.top_p
        )));
    }
    if dec.n_samples == 0 || dec.max_new_tokens == 0 {
        return Err(Error::Contract("n_samples and max_new_tokens must be positive".into()));
    }
    Ok(())
}

/// Largest teacher prompt (in tokens) that still leaves room for a full
/// response inside the context window.
pub fn teacher_prompt_budget(config: &model::ModelConfig, max_new_tokens: usize) -> Result<usize> {
    config
        .max_seq_len
        .checked_sub(max_new_tokens)
        .filter(|b| *b >= env::MAX_PROMPT_TOKENS)
        .ok_or_else(|| {
            Error::Contract(format!(
                "max_new_tokens {max_new_tokens} leaves no room for prompts in a {}-token window",
                config.max_seq_len
            ))
        })
}

/// One sampled response and its verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    pub text: String,
    pub verdict: Verdict,
}

pub fn sample_seed(seed: u64, task_index: usize, sample_index: usize) -> u64 {
    derive_seed(seed, "sample", &[task_index as u64, sample_index as u64])
}

fn complete(params: &Parameters, task: &TaskInstance, prompt: &str, dec: &DecodingParams, s: u64) -> Result<Rollout> {
    let tokens = model::sample(params, &tokenizer::encode_prompt(prompt), dec, s)?;
    let text = tokenizer::decode_response(&tokens);
    let verdict = env::verify(task, &text);
    Ok(Rollout { tokens, text, verdict })
}

/// `dec.n_samples` rollouts for task number `task_index`.
pub fn rollout_group(
    params: &Parameters,
    task: &TaskInstance,
    task_index: usize,
    dec: &DecodingParams,
    seed: u64,
) -> Result<Vec<Rollout>> {
    (0..dec.n_samples)
        .map(|j| complete(params, task, &task.prompt_text, dec, sample_seed(seed, task_index, j)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub passed: usize,
    pub trials: usize,
}

impl PassCounts {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.passed as f64 / self.trials as f64
        }
    }

    fn add(&mut self, passed: bool) {
        self.trials += 1;
        self.passed += passed as usize;
    }
}

fn check_tasks(tasks: &[TaskInstance]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Contract("evaluation needs at least one task".into()));
    }
    Ok(())
}

/// Fraction of passing samples over `dec.n_samples` draws per task, using
/// whatever decoding is given.
pub fn mean_at_n(params: &Parameters, tasks: &[TaskInstance], dec: &DecodingParams, seed: u64) -> Result<f64> {
    check_tasks(tasks)?;
    if dec.n_samples == 0 {
        return Err(Error::Contract("n_samples must be positive".into()));
    }
    let mut counts = PassCounts::default();
    for (i, task) in tasks.iter().enumerate() {
        for r in rollout_group(params, task, i, dec, seed)? {
            counts.add(r.verdict.passed);
        }
    }
    Ok(counts.rate())
}

/// Paired student and teacher pass counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedAccuracy {
    pub student: PassCounts,
    pub teacher: PassCounts,
    /// Teacher prompts that reduced to the plain prompt.
    pub fallbacks: usize,
}

/// Student rollouts, then one teacher completion of each rollout's
/// privileged prompt (same seed as the rollout).
pub fn paired_accuracy(
    student: &Parameters,
    teacher: &Parameters,
    kind: ContextKind,
    tasks: &[TaskInstance],
    dec: &DecodingParams,
    seed: u64,
) -> Result<PairedAccuracy> {
    check_tasks(tasks)?;
    student.check_compatible(teacher)?;
    let budget = teacher_prompt_budget(student.config(), dec.max_new_tokens)?;
    let mut out = PairedAccuracy::default();
    for (i, task) in tasks.iter().enumerate() {
        let group = rollout_group(student, task, i, dec, seed)?;
        let texts: Vec<String> = group.iter().map(|r| r.text.clone()).collect();
        let verdicts: Vec<Verdict> = group.iter().map(|r| r.verdict.clone()).collect();
        for (j, r) in group.iter().enumerate() {
            out.student.add(r.verdict.passed);
            let inputs = context::group_inputs(&task.prompt_text, &texts, &verdicts, j);
            let rendering = context::render_with_budget(kind, &inputs, budget)?;
            out.fallbacks += rendering.fallback as usize;
            let t = complete(teacher, task, &rendering.text, dec, sample_seed(seed, i, j))?;
            out.teacher.add(t.verdict.passed);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub context: ContextKind,
    pub model: String,
    pub seed: u64,
    pub student_accuracy: f64,
    pub teacher_accuracy: f64,
    pub initial_gap: f64,
    pub improvement: Option<f64>,
    pub decoding: DecodingParams,
    pub trials: usize,
}

impl GapRecord {
    /// The law-fitting CSV row, once improvement is known.
    pub fn law_row(&self) -> Result<LawRow> {
        let improvement = self
            .improvement
            .ok_or_else(|| Error::Contract("gap record has no improvement yet".into()))?;
        Ok(LawRow {
            context: self.context.label().to_string(),
            model: self.model.clone(),
            seed: self.seed,
            initial_gap: self.initial_gap,
            improvement,
        })
    }
}

/// Initial gap at θ̄ = θ: teacher accuracy with privileged prompts minus
/// student accuracy, both under training decoding.
pub fn measure_gap(
    params: &Parameters,
    kind: ContextKind,
    tasks: &[TaskInstance],
    dec: &DecodingParams,
    seed: u64,
    model_label: &str,
    run_seed: u64,
) -> Result<GapRecord> {
    require_decoding(dec, GAP_DECODING, "gap measurement")?;
    let acc = paired_accuracy(params, params, kind, tasks, dec, seed)?;
    let (s, t) = (acc.student.rate(), acc.teacher.rate());
    Ok(GapRecord {
        context: kind,
        model: model_label.to_string(),
        seed: run_seed,
        student_accuracy: s,
        teacher_accuracy: t,
        initial_gap: t - s,
        improvement: None,
        decoding: *dec,
        trials: acc.student.trials,
    })
}

/// Validation mean@n of the final checkpoint minus that of the initial one,
/// on the same tasks with the same sample seeds.
pub fn improvement(
    initial: &Parameters,
    final_params: &Parameters,
    tasks: &[TaskInstance],
    dec: &DecodingParams,
    seed: u64,
) -> Result<f64> {
    require_decoding(dec, VALIDATION_DECODING, "improvement")?;
    initial.check_compatible(final_params)?;
    let before = mean_at_n(initial, tasks, dec, seed)?;
    let after = mean_at_n(final_params, tasks, dec, seed)?;
    Ok(after - before)
}
