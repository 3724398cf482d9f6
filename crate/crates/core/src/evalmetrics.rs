//! Answer scoring: exact-match accuracy and macro-F1 for categorical tasks,
//! relative accuracy for numeric ones.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::assembly::{AblationTag, Madi, PreparedSample};
use crate::datagen::{Label, QaSample, TaskKind};
use crate::error::{MadiError, Result};

/// `max(0, 1 − |pred − label| / |label|)`; a zero label scores 1 only for
/// a (numerically) zero prediction.
pub fn relative_accuracy(pred: f64, label: f64) -> f64 {
    if !pred.is_finite() {
        return 0.0;
    }
    if label == 0.0 {
        return if pred.abs() <= 1e-9 { 1.0 } else { 0.0 };
    }
    (1.0 - ((pred - label) / label).abs()).max(0.0)
}

/// First decimal number in `answer`.
pub fn extract_numeric(answer: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("valid regex"));
    re.find(answer).and_then(|m| m.as_str().parse().ok())
}

/// Lowercased, trimmed, single-spaced.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// 0/1 exact match for categorical labels, relative accuracy otherwise.
pub fn score_answer(sample: &QaSample, answer: &str) -> f64 {
    match &sample.label {
        Label::Categorical(c) => (normalize_answer(answer) == normalize_answer(c)) as u8 as f64,
        Label::Numeric(v) => extract_numeric(answer).map_or(0.0, |p| relative_accuracy(p, *v)),
    }
}

/// Mean per-class F1 over the classes that occur in `gold`.
pub fn macro_f1(gold: &[String], pred: &[String]) -> f64 {
    let classes: std::collections::BTreeSet<&String> = gold.iter().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (g, p) in gold.iter().zip(pred) {
            match (g == *c, p == *c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fneg);
        }
    }
    total / classes.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskKind,
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub relative_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: AblationTag,
    pub samples: usize,
    /// Exact-match accuracy over every categorical sample.
    pub categorical_accuracy: Option<f64>,
    /// Mean relative accuracy over every numeric sample.
    pub numeric_relative_accuracy: Option<f64>,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, task: TaskKind) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `answers[i]` against `samples[i]`.
pub fn score_predictions(samples: &[QaSample], answers: &[String], tag: AblationTag) -> Result<EvalReport> {
    if samples.len() != answers.len() {
        return Err(MadiError::contract(format!(
            "{} samples but {} answers",
            samples.len(),
            answers.len()
        )));
    }
    let mut by_task: BTreeMap<TaskKind, Vec<(&QaSample, &String)>> = BTreeMap::new();
    for (s, a) in samples.iter().zip(answers) {
        by_task.entry(s.task).or_default().push((s, a));
    }
    let (mut cat_all, mut num_all) = (Vec::new(), Vec::new());
    let mut tasks = Vec::new();
    for (task, items) in by_task {
        let scores: Vec<f64> = items.iter().map(|(s, a)| score_answer(s, a)).collect();
        let mut rep = TaskReport {
            task,
            samples: items.len(),
            accuracy: None,
            macro_f1: None,
            relative_accuracy: None,
        };
        if task.is_categorical() {
            let gold: Vec<String> = items
                .iter()
                .map(|(s, _)| match &s.label {
                    Label::Categorical(c) => normalize_answer(c),
                    Label::Numeric(v) => v.to_string(),
                })
                .collect();
            let pred: Vec<String> = items.iter().map(|(_, a)| normalize_answer(a)).collect();
            rep.accuracy = mean(&scores);
            rep.macro_f1 = Some(macro_f1(&gold, &pred));
            cat_all.extend(scores);
        } else {
            rep.relative_accuracy = mean(&scores);
            num_all.extend(scores);
        }
        tasks.push(rep);
    }
    Ok(EvalReport {
        ablation: tag,
        samples: samples.len(),
        categorical_accuracy: mean(&cat_all),
        numeric_relative_accuracy: mean(&num_all),
        tasks,
    })
}

/// Generates an answer for every sample with the tagged modules disabled and
/// scores them. Returns the report and the raw answers.
pub fn run_eval(
    model: &Madi,
    samples: &[QaSample],
    prepared: &[PreparedSample],
    tag: AblationTag,
    max_answer: usize,
) -> Result<(EvalReport, Vec<String>)> {
    if samples.len() != prepared.len() {
        return Err(MadiError::contract("samples and prepared inputs differ in length"));
    }
    let tog = tag.toggles();
    if tog.uses_codebooks() && !model.codebooks.initialized {
        return Err(MadiError::Validation(format!(
            "checkpoint has no initialised codebooks, required by ablation {tag}"
        )));
    }
    let answers = prepared
        .iter()
        .map(|p| model.answer(p, tog, max_answer))
        .collect::<Result<Vec<_>>>()?;
    Ok((score_predictions(samples, &answers, tag)?, answers))
}
