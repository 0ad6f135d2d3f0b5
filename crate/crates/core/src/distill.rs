//! The OPSD objective and the update rules around it.
//!
//! The per-token loss is a reverse KL from the student to the stop-gradient
//! self-teacher. Both distributions are restricted to the teacher's top-k
//! tokens at that position and renormalized, so the truncated loss is still
//! a proper KL divergence: non-negative and zero exactly when the two
//! truncated distributions coincide.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::model::Parameters;
use crate::numcore::{Gradients, NodeId, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub ema_rate: f64,
    pub top_k: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for DistillConfig {
    /// Desk-scale defaults; the learning rate is raised from the 1e-6 used for
    /// billion-parameter models.
    fn default() -> Self {
        DistillConfig {
            ema_rate: 0.01,
            top_k: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::Contract(format!("ema_rate {} outside [0, 1]", self.ema_rate)));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::Contract(format!("top_k {} outside 1..={vocab_size}", self.top_k)));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Contract("learning_rate and grad_clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Contract("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Teacher top-k support at one position, in ascending token order.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub support: Vec<usize>,
    pub logprobs: Vec<f64>,
}

fn top_k_ids(logprobs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logprobs.len()).collect();
    order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    let mut support = order[..k].to_vec();
    support.sort_unstable();
    support
}

/// Keeps the `k` most probable teacher tokens (ties to the lowest id) and
/// renormalizes their log-probabilities.
pub fn topk_truncate(teacher_logprobs: &[f64], k: usize) -> Result<TopK> {
    if k == 0 || k > teacher_logprobs.len() {
        return Err(Error::Contract(format!(
            "top-k {k} outside 1..={}",
            teacher_logprobs.len()
        )));
    }
    let support = top_k_ids(teacher_logprobs, k);
    let picked: Vec<f64> = support.iter().map(|&i| teacher_logprobs[i]).collect();
    let max = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + picked.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(TopK {
        support,
        logprobs: picked.iter().map(|v| v - lse).collect(),
    })
}

/// Mean over rollout positions of KL(student || teacher), both truncated to
/// the teacher's top-k support. `teacher_rows` is wrapped in a stop-gradient
/// here, so only the student branch receives gradient.
pub fn opsd_loss(
    tape: &mut Tape,
    student_rows: NodeId,
    teacher_rows: NodeId,
    response_len: usize,
    k: usize,
) -> Result<NodeId> {
    let (s_shape, t_shape) = (tape.value(student_rows)?.shape().to_vec(), tape.value(teacher_rows)?.shape().to_vec());
    if s_shape.len() != 2 || s_shape != t_shape {
        return Err(Error::Contract(format!(
            "student rows {s_shape:?} and teacher rows {t_shape:?} are not aligned"
        )));
    }
    if s_shape[0] != response_len || response_len == 0 {
        return Err(Error::Contract(format!(
            "{} rows for a response of {response_len} tokens",
            s_shape[0]
        )));
    }
    let vocab = s_shape[1];
    if k == 0 || k > vocab {
        return Err(Error::Contract(format!("top-k {k} outside 1..={vocab}")));
    }

    let teacher = tape.stop_gradient(teacher_rows)?;
    let teacher_vals = tape.value(teacher)?;
    let mut index = Vec::with_capacity(response_len * k);
    for t in 0..response_len {
        index.extend(top_k_ids(teacher_vals.row(t), k));
    }

    let s = tape.gather(student_rows, index.clone(), k)?;
    let s_log = tape.log_softmax(s)?;
    let s_prob = tape.exp(s_log)?;
    let t = tape.gather(teacher, index, k)?;
    let t_log = tape.log_softmax(t)?;
    let neg_t = tape.scale(t_log, -1.0)?;
    let log_ratio = tape.add(s_log, neg_t)?;
    let terms = tape.mul(s_prob, log_ratio)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / response_len as f64)
}

/// `(1 - rate) * teacher + rate * student`, elementwise.
pub fn ema_update(teacher: &Parameters, student: &Parameters, rate: f64) -> Result<Parameters> {
    teacher.check_compatible(student)?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Contract(format!("ema rate {rate} outside [0, 1]")));
    }
    if rate == 0.0 {
        return Ok(teacher.clone());
    }
    if rate == 1.0 {
        return Ok(student.clone());
    }
    let mut out = teacher.clone();
    for (name, t) in out.iter_mut() {
        let s = student.get(name).expect("compatible parameter sets");
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (1.0 - rate) * *tv + rate * sv;
        }
    }
    Ok(out)
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl OptimState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect();
        OptimState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    pub pre_clip_norm: f64,
    pub clipped: bool,
}

/// Scales gradients to `grad_clip_norm` when their global L2 norm exceeds it,
/// then applies one bias-corrected AdamW step with decoupled weight decay.
///
/// Non-finite gradients abort the step and leave `params` and `state` as
/// they were.
pub fn clip_then_adamw(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut OptimState,
    cfg: &DistillConfig,
) -> Result<UpdateReport> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (name, t) in params.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            _ => return Err(Error::Shape(format!("gradient for {name} missing or mis-shaped"))),
        }
    }
    if !grads.is_finite() {
        warn!(step = state.step + 1, "non-finite gradient; skipping update");
        return Err(Error::AbortStep("non-finite gradient".into()));
    }

    let norm = grads.global_norm();
    let clipped = norm > cfg.grad_clip_norm;
    let factor = if clipped { cfg.grad_clip_norm / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.first.get_mut(name).expect("state mirrors params");
        let v = state.second.get_mut(name).expect("state mirrors params");
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] * factor;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w = *w * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(UpdateReport {
        pre_clip_norm: norm,
        clipped,
    })
}

/// Convenience for tests and diagnostics: the loss value for fixed rows.
pub fn opsd_loss_value(student_rows: &Tensor, teacher_rows: &Tensor, k: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student_rows.clone());
    let t = tape.constant(teacher_rows.clone());
    let loss = opsd_loss(&mut tape, s, t, student_rows.rows(), k)?;
    tape.value(loss)?.item()
}
