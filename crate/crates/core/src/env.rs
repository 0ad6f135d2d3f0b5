//! Verifiable toy tasks with rich textual feedback.
//!
//! Two task kinds: three-operand integer arithmetic with standard
//! precedence and string reversal. Verdicts are exact-match; failures carry
//! a feedback string from a fixed grammar that points toward the answer
//! without revealing it.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

pub const MAX_PROMPT_TOKENS: usize = 128;
pub const MIN_REV_LEN: usize = 3;
pub const MAX_REV_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Arithmetic,
    StringTransform,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Arithmetic => "arithmetic",
            TaskKind::StringTransform => "string_transform",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" | "Arithmetic" => Ok(TaskKind::Arithmetic),
            "string_transform" | "StringTransform" | "rev" => Ok(TaskKind::StringTransform),
            _ => Err(Error::Contract(format!("unknown task kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub kind: TaskKind,
    pub prompt_text: String,
    pub hidden_answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub feedback_text: String,
}

impl Verdict {
    fn pass() -> Self {
        Verdict {
            passed: true,
            feedback_text: String::new(),
        }
    }

    fn fail(feedback_text: String) -> Self {
        Verdict {
            passed: false,
            feedback_text,
        }
    }
}

const OPS: [char; 3] = ['+', '-', '*'];

fn apply(a: i64, op: char, b: i64) -> i64 {
    match op {
        '+' => a + b,
        '-' => a - b,
        '*' => a * b,
        _ => unreachable!("operator {op}"),
    }
}

/// `a op1 b op2 c` with `*` binding tighter than `+`/`-`, left-associative.
fn eval_three(a: i64, op1: char, b: i64, op2: char, c: i64) -> i64 {
    if op2 == '*' && op1 != '*' {
        apply(a, op1, b * c)
    } else {
        apply(apply(a, op1, b), op2, c)
    }
}

/// Draws one (prompt, answer) pair.
pub fn sample_task<R: Rng + ?Sized>(kind: TaskKind, rng: &mut R) -> (String, String) {
    match kind {
        TaskKind::Arithmetic => {
            let a = rng.random_range(0..=99i64);
            let b = rng.random_range(0..=99i64);
            let c = rng.random_range(0..=99i64);
            let op1 = OPS[rng.random_range(0..OPS.len())];
            let op2 = OPS[rng.random_range(0..OPS.len())];
            let prompt = format!("EVAL {a} {op1} {b} {op2} {c} =");
            (prompt, eval_three(a, op1, b, op2, c).to_string())
        }
        TaskKind::StringTransform => {
            let len = rng.random_range(MIN_REV_LEN..=MAX_REV_LEN);
            let s: String = (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect();
            let answer: String = s.chars().rev().collect();
            (format!("REV: {s}"), answer)
        }
    }
}

/// Deterministic train/validation split with disjoint prompts.
pub fn gen_dataset(
    kind: TaskKind,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Contract("dataset splits need at least one task each".into()));
    }
    let kind_tag = match kind {
        TaskKind::Arithmetic => 0,
        TaskKind::StringTransform => 1,
    };
    let mut rng = seed::derived_rng(seed, "dataset", &[kind_tag]);
    let mut seen = HashSet::new();
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    while train.len() + val.len() < n_train + n_val {
        let (prompt_text, hidden_answer) = sample_task(kind, &mut rng);
        if !seen.insert(prompt_text.clone()) {
            continue;
        }
        let (split, list) = if train.len() < n_train {
            ("train", &mut train)
        } else {
            ("val", &mut val)
        };
        list.push(TaskInstance {
            task_id: format!("{}-{split}-{:05}", kind.label(), list.len()),
            kind,
            prompt_text,
            hidden_answer,
        });
    }
    Ok((train, val))
}

/// Canonical decimal integer: optional '-', no leading zeros, no "-0".
fn parse_canonical_int(s: &str) -> Option<i64> {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    if s.starts_with('-') && digits == "0" {
        return None;
    }
    s.parse().ok()
}

pub fn verify(task: &TaskInstance, response: &str) -> Verdict {
    let response = response.trim();
    if response == task.hidden_answer {
        return Verdict::pass();
    }
    match task.kind {
        TaskKind::Arithmetic => {
            let answer: i64 = task
                .hidden_answer
                .parse()
                .expect("arithmetic answers are integers");
            let digits = answer.unsigned_abs().to_string().len();
            match parse_canonical_int(response) {
                None => Verdict::fail("feedback: your answer is not a valid integer".to_string()),
                Some(a) => {
                    let dir = if a < answer { "low" } else { "high" };
                    Verdict::fail(format!(
                        "feedback: your answer {a} is too {dir}; the correct answer has {digits} digits"
                    ))
                }
            }
        }
        TaskKind::StringTransform => {
            let expected: Vec<char> = task.hidden_answer.chars().collect();
            let got: Vec<char> = response.chars().collect();
            if expected.len() != got.len() {
                return Verdict::fail(format!(
                    "feedback: expected length {}, got {}",
                    expected.len(),
                    got.len()
                ));
            }
            let i = expected
                .iter()
                .zip(&got)
                .position(|(e, g)| e != g)
                .expect("unequal strings of equal length differ somewhere");
            Verdict::fail(format!(
                "feedback: first mismatch at index {i}: expected character '{}'",
                expected[i]
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Public,
    Private,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    visibility: Visibility,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicTask {
    pub task_id: String,
    pub kind: TaskKind,
    pub prompt_text: String,
}

const TASK_FORMAT: &str = "opsd-tasks";

/// JSON lines: one header record, then one task per line. Public files omit
/// `hidden_answer`.
pub fn write_tasks(path: &Path, tasks: &[TaskInstance], visibility: Visibility) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = FileHeader {
        format: TASK_FORMAT.into(),
        version: 1,
        visibility,
    };
    let mut lines = vec![serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?];
    for t in tasks {
        let line = match visibility {
            Visibility::Private => serde_json::to_string(t),
            Visibility::Public => serde_json::to_string(&PublicTask {
                task_id: t.task_id.clone(),
                kind: t.kind,
                prompt_text: t.prompt_text.clone(),
            }),
        }
        .map_err(|e| Error::Format(e.to_string()))?;
        lines.push(line);
    }
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<(Visibility, Vec<String>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: FileHeader = serde_json::from_str(&first).map_err(|e| Error::Format(e.to_string()))?;
    if header.format != TASK_FORMAT || header.version != 1 {
        return Err(Error::Format(format!("{} is not a v1 task file", path.display())));
    }
    let body = lines
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    Ok((header.visibility, body))
}

pub fn read_private_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let (vis, lines) = read_lines(path)?;
    if vis != Visibility::Private {
        return Err(Error::Format(format!("{} is public and carries no answers", path.display())));
    }
    lines
        .iter()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

pub fn read_public_tasks(path: &Path) -> Result<Vec<PublicTask>> {
    let (_, lines) = read_lines(path)?;
    lines
        .iter()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind, prompt: &str, answer: &str) -> TaskInstance {
        TaskInstance {
            task_id: "t".into(),
            kind,
            prompt_text: prompt.into(),
            hidden_answer: answer.into(),
        }
    }

    #[test]
    fn arithmetic_verdicts() {
        let t = task(TaskKind::Arithmetic, "EVAL 2 + 3 + 0 =", "5");
        assert_eq!(verify(&t, "5"), Verdict::pass());
        assert_eq!(verify(&t, "  5\n"), Verdict::pass());
        assert_eq!(
            verify(&t, "4").feedback_text,
            "feedback: your answer 4 is too low; the correct answer has 1 digits"
        );
        assert_eq!(
            verify(&t, "-12").feedback_text,
            "feedback: your answer -12 is too low; the correct answer has 1 digits"
        );
        assert_eq!(
            verify(&t, "70").feedback_text,
            "feedback: your answer 70 is too high; the correct answer has 1 digits"
        );
        for junk in ["", "five", "05", "+5", "-0", "5.0", "99999999999999999999"] {
            let v = verify(&t, junk);
            assert!(!v.passed);
            assert_eq!(v.feedback_text, "feedback: your answer is not a valid integer", "{junk:?}");
        }
    }

    #[test]
    fn negative_answer_digit_count_ignores_sign() {
        let t = task(TaskKind::Arithmetic, "EVAL 0 - 99 * 99 =", "-9801");
        assert_eq!(
            verify(&t, "0").feedback_text,
            "feedback: your answer 0 is too high; the correct answer has 4 digits"
        );
    }

    #[test]
    fn reversal_verdicts() {
        let t = task(TaskKind::StringTransform, "REV: abcd", "dcba");
        assert!(verify(&t, "dcba").passed);
        assert_eq!(
            verify(&t, "dcbx").feedback_text,
            "feedback: first mismatch at index 3: expected character 'a'"
        );
        assert_eq!(verify(&t, "dcb").feedback_text, "feedback: expected length 4, got 3");
        assert_eq!(verify(&t, "").feedback_text, "feedback: expected length 4, got 0");
    }

    #[test]
    fn reversal_answer_is_reversed_prompt() {
        let t = gen_dataset(TaskKind::StringTransform, 50, 10, 3).unwrap();
        for task in t.0.iter().chain(&t.1) {
            let s = task.prompt_text.strip_prefix("REV: ").unwrap();
            assert!((MIN_REV_LEN..=MAX_REV_LEN).contains(&s.len()));
            assert_eq!(task.hidden_answer, s.chars().rev().collect::<String>());
        }
        let abc = task(TaskKind::StringTransform, "REV: abc", "cba");
        assert!(verify(&abc, "cba").passed);
    }

    #[test]
    fn precedence_of_generator() {
        assert_eq!(eval_three(12, '+', 7, '*', 3), 33);
        assert_eq!(eval_three(12, '*', 7, '-', 3), 81);
        assert_eq!(eval_three(12, '-', 7, '-', 3), 2);
        assert_eq!(eval_three(2, '*', 3, '*', 4), 24);
    }

    #[test]
    fn datasets_are_deterministic_and_disjoint() {
        for kind in [TaskKind::Arithmetic, TaskKind::StringTransform] {
            let a = gen_dataset(kind, 200, 50, 9).unwrap();
            let b = gen_dataset(kind, 200, 50, 9).unwrap();
            assert_eq!(a, b);
            let train: HashSet<_> = a.0.iter().map(|t| &t.prompt_text).collect();
            assert!(a.1.iter().all(|t| !train.contains(&t.prompt_text)));
            assert_eq!(a.0.len(), 200);
            assert_eq!(a.1.len(), 50);
            let c = gen_dataset(kind, 200, 50, 10).unwrap();
            assert_ne!(a, c);
        }
        assert!(gen_dataset(TaskKind::Arithmetic, 0, 1, 0).is_err());
    }

    #[test]
    fn task_files_round_trip_and_hide_answers() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = gen_dataset(TaskKind::StringTransform, 5, 1, 1).unwrap();
        let private = dir.path().join("train.private.jsonl");
        let public = dir.path().join("train.public.jsonl");
        write_tasks(&private, &train, Visibility::Private).unwrap();
        write_tasks(&public, &train, Visibility::Public).unwrap();
        assert_eq!(read_private_tasks(&private).unwrap(), train);
        assert!(read_private_tasks(&public).is_err());
        let text = std::fs::read_to_string(&public).unwrap();
        assert!(!text.contains("hidden_answer"));
        assert_eq!(read_public_tasks(&public).unwrap().len(), 5);
    }
}
