//! Self-teacher prompt construction.
//!
//! Each [`ContextKind`] renders the teacher's privileged prompt from the
//! student prompt plus whatever the current sample provides (its own
//! response and verdict, a correct peer response). Sections whose input is
//! missing are dropped; when nothing privileged remains the rendering is
//! the plain prompt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::env::Verdict;
use crate::model::tokenizer;
use crate::{Error, Result};

pub const EXPERT_PREAMBLE_VERSION: u32 = 1;

/// Versioned task-strategy checklist for the expert-preamble teacher.
pub const EXPERT_PREAMBLE: &str = "\
Checklist v1:
1. EVAL is arithmetic; REV is reversal.
2. EVAL: do * before + and -.
3. EVAL: then + and - left to right.
4. EVAL: keep the sign; digits only.
5. REV: count the n input letters.
6. REV: the answer has n letters.
7. REV: out[i] = in[n-1-i].
8. REV: start with the last letter.
9. Check once, then answer.";

const FEEDBACK_INTRO: &str = "The following is feedback from your unsuccessful earlier attempt:";
const CLOSING: &str = "Correctly solve the original question.";
const STEP_BY_STEP: &str = "Think step by step first, then write the solution.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    None,
    ExpertPreamble,
    Feedback,
    PeerHints,
    OwnSolutionFeedback,
    PeerSolutionFeedback,
}

impl ContextKind {
    pub const ALL: [ContextKind; 6] = [
        ContextKind::None,
        ContextKind::ExpertPreamble,
        ContextKind::Feedback,
        ContextKind::PeerHints,
        ContextKind::OwnSolutionFeedback,
        ContextKind::PeerSolutionFeedback,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ContextKind::None => "none",
            ContextKind::ExpertPreamble => "expert_preamble",
            ContextKind::Feedback => "feedback",
            ContextKind::PeerHints => "peer_hints",
            ContextKind::OwnSolutionFeedback => "own_solution_feedback",
            ContextKind::PeerSolutionFeedback => "peer_solution_feedback",
        }
    }

    /// Whether the construction draws on other rollouts of the same prompt.
    pub fn uses_peers(self) -> bool {
        matches!(self, ContextKind::PeerHints | ContextKind::PeerSolutionFeedback)
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        ContextKind::ALL
            .into_iter()
            .find(|k| k.label().replace('_', "") == norm)
            .ok_or_else(|| Error::Contract(format!("unknown context kind {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContextInputs {
    pub prompt_text: String,
    pub own_response: Option<String>,
    pub own_verdict: Option<Verdict>,
    pub peer_correct_response: Option<String>,
}

impl ContextInputs {
    pub fn plain(prompt_text: impl Into<String>) -> Self {
        ContextInputs {
            prompt_text: prompt_text.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.own_response.is_some() != self.own_verdict.is_some() {
            return Err(Error::Contract("own_verdict must accompany own_response".into()));
        }
        Ok(())
    }

    /// Feedback of a failed own attempt, if there is one.
    fn failure_feedback(&self) -> Option<&str> {
        match &self.own_verdict {
            Some(v) if !v.passed && !v.feedback_text.is_empty() => Some(v.feedback_text.as_str()),
            _ => None,
        }
    }

    fn own_correct(&self) -> Option<&str> {
        match (&self.own_response, &self.own_verdict) {
            (Some(r), Some(v)) if v.passed => Some(r.as_str()),
            _ => None,
        }
    }
}

/// Peer hint: the solution with every second character masked by `_`.
pub fn hint(solution: &str) -> String {
    solution
        .chars()
        .enumerate()
        .map(|(i, c)| if i % 2 == 1 { '_' } else { c })
        .collect()
}

/// Inputs for sample `i` of a rollout group; its peer is the lowest-index
/// *other* sample that passed.
pub fn group_inputs(prompt_text: &str, responses: &[String], verdicts: &[Verdict], i: usize) -> ContextInputs {
    let peer = (0..responses.len())
        .find(|&j| j != i && verdicts[j].passed)
        .map(|j| responses[j].clone());
    ContextInputs {
        prompt_text: prompt_text.to_string(),
        own_response: Some(responses[i].clone()),
        own_verdict: Some(verdicts[i].clone()),
        peer_correct_response: peer,
    }
}

/// Renders the teacher prompt. Total: missing inputs fall back as documented.
pub fn build_teacher_prompt(kind: ContextKind, inputs: &ContextInputs) -> String {
    render(kind, inputs).text
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendering {
    pub text: String,
    /// The construction had no usable inputs and reduced to the plain prompt.
    pub fallback: bool,
    /// Feedback was cut to respect the token budget.
    pub truncated: bool,
}

fn render(kind: ContextKind, inputs: &ContextInputs) -> Rendering {
    render_with_feedback(kind, inputs, inputs.failure_feedback())
}

fn render_with_feedback(kind: ContextKind, inputs: &ContextInputs, fb: Option<&str>) -> Rendering {
    let prompt = inputs.prompt_text.as_str();
    let plain = |fallback| Rendering {
        text: prompt.to_string(),
        fallback,
        truncated: false,
    };
    let done = |text: String| Rendering {
        text,
        fallback: false,
        truncated: false,
    };
    match kind {
        ContextKind::None => plain(false),
        ContextKind::ExpertPreamble => done(format!("{EXPERT_PREAMBLE}\n---\n{prompt}\n{STEP_BY_STEP}")),
        ContextKind::Feedback => match fb {
            Some(fb) => done(format!("{prompt}\n{FEEDBACK_INTRO}\n{fb}\n{CLOSING}")),
            None => plain(true),
        },
        ContextKind::PeerHints => match &inputs.peer_correct_response {
            Some(sol) => done(format!("{prompt}\nCorrect solution:\n{}\n{CLOSING}", hint(sol))),
            None => plain(true),
        },
        ContextKind::OwnSolutionFeedback => {
            if let Some(sol) = inputs.own_correct() {
                done(format!("{prompt}\nCorrect solution: {sol}\n{CLOSING}"))
            } else if let Some(fb) = fb {
                done(format!("{prompt}\nFeedback: {fb}\n{CLOSING}"))
            } else {
                plain(true)
            }
        }
        ContextKind::PeerSolutionFeedback => {
            let mut text = prompt.to_string();
            if let Some(sol) = &inputs.peer_correct_response {
                text.push_str("\nCorrect solution:\n");
                text.push_str(sol);
            }
            if let Some(fb) = fb {
                text.push('\n');
                text.push_str(FEEDBACK_INTRO);
                text.push('\n');
                text.push_str(fb);
            }
            if text.len() == prompt.len() {
                plain(true)
            } else {
                text.push('\n');
                text.push_str(CLOSING);
                done(text)
            }
        }
    }
}

/// Renders under a token budget (the `BOS`/`SEP` framing included). Feedback
/// is cut from its tail until the prompt fits; if it still does not fit the
/// plain prompt is used.
pub fn render_with_budget(kind: ContextKind, inputs: &ContextInputs, max_tokens: usize) -> Result<Rendering> {
    inputs.validate()?;
    let fits = |r: &Rendering| tokenizer::prompt_token_len(&r.text) <= max_tokens;
    if tokenizer::prompt_token_len(&inputs.prompt_text) > max_tokens {
        return Err(Error::Contract(format!(
            "plain prompt alone exceeds the {max_tokens}-token budget"
        )));
    }
    let full = render(kind, inputs);
    if fits(&full) {
        return Ok(full);
    }
    if let Some(fb) = inputs.failure_feedback() {
        let chars: Vec<char> = fb.chars().collect();
        for keep in (1..chars.len()).rev() {
            let cut: String = chars[..keep].iter().collect();
            let mut r = render_with_feedback(kind, inputs, Some(&cut));
            if fits(&r) {
                debug!(kind = %kind, dropped = chars.len() - keep, "truncated teacher feedback");
                r.truncated = true;
                return Ok(r);
            }
        }
    }
    debug!(kind = %kind, "teacher prompt over budget; using plain prompt");
    Ok(Rendering {
        text: inputs.prompt_text.clone(),
        fallback: true,
        truncated: true,
    })
}
