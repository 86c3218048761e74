//! Evaluation of a global model (top-1, per-class accuracy, mean softmax
//! mass per class), a forgetting measure over round histories, and CSV/JSON
//! emission of per-round metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{argmax_row, softmax_rows, ModelParams, NnError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("forgetting needs at least 2 rounds, history has {0}")]
    TooFewRounds(usize),
    #[error("no class is present in every round of the history")]
    NoPresentClasses,
    #[error("model evaluation failed: {0}")]
    Model(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("{path}: {detail}")]
    Json { path: String, detail: String },
}

/// One full pass of a model over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub top1: Scalar,
    /// Accuracy restricted to samples of each class; None when the class has
    /// no test samples.
    pub per_class: Vec<Option<Scalar>>,
    /// Mean predicted probability assigned to each class over all samples.
    pub mean_softmax: Vec<Scalar>,
    pub class_counts: Vec<usize>,
}

/// Runs `model` over `test` in batches of `batch_size`, in dataset order.
pub fn evaluate(
    model: &ModelParams,
    test: &Dataset,
    batch_size: usize,
) -> Result<Evaluation, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    assert!(batch_size > 0, "batch_size must be positive");
    let c = test.num_classes();
    let mut correct_total = 0usize;
    let mut correct = vec![0usize; c];
    let mut counts = vec![0usize; c];
    let mut softmax_sum = vec![0.0 as Scalar; c];

    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (batch, labels) = test.make_batch(chunk, model.input_shape());
        let (_, logits) = model.forward(&batch)?;
        let probs = softmax_rows(&logits, 1.0)?;
        let rows = probs.data().chunks(c);
        for (row, &label) in rows.zip(&labels) {
            counts[label] += 1;
            if argmax_row(row) == label {
                correct[label] += 1;
                correct_total += 1;
            }
            for (s, &p) in softmax_sum.iter_mut().zip(row) {
                *s += p;
            }
        }
    }

    let n = test.len() as Scalar;
    Ok(Evaluation {
        top1: correct_total as Scalar / n,
        per_class: correct
            .iter()
            .zip(&counts)
            .map(|(&k, &cnt)| (cnt > 0).then(|| k as Scalar / cnt as Scalar))
            .collect(),
        mean_softmax: softmax_sum.into_iter().map(|s| s / n).collect(),
        class_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub top1: Scalar,
    pub per_class: Vec<Option<Scalar>>,
    pub mean_softmax: Vec<Scalar>,
}

/// Per-round metrics of one experiment, in strictly increasing round order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundHistory {
    num_classes: usize,
    records: Vec<RoundRecord>,
}

impl RoundHistory {
    pub fn new(num_classes: usize) -> Self {
        assert!(num_classes > 0, "need at least one class");
        RoundHistory { num_classes, records: Vec::new() }
    }

    pub fn push(&mut self, record: RoundRecord) {
        assert_eq!(record.per_class.len(), self.num_classes, "per-class vector length");
        assert_eq!(record.mean_softmax.len(), self.num_classes, "softmax vector length");
        if let Some(last) = self.records.last() {
            assert!(record.round > last.round, "rounds must strictly increase");
        }
        self.records.push(record);
    }

    pub fn push_evaluation(&mut self, round: usize, eval: &Evaluation) {
        self.push(RoundRecord {
            round,
            top1: eval.top1,
            per_class: eval.per_class.clone(),
            mean_softmax: eval.mean_softmax.clone(),
        });
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_top1(&self) -> Option<Scalar> {
        self.records.last().map(|r| r.top1)
    }
}

/// Mean over classes of (best accuracy in rounds 1..T-1 minus accuracy at
/// round T). Positive values mean knowledge was lost. Classes absent from
/// any round are excluded from the mean.
pub fn forgetting(history: &RoundHistory) -> Result<Scalar, MetricsError> {
    forgetting_of(history.records(), history.num_classes)
}

fn forgetting_of(records: &[RoundRecord], num_classes: usize) -> Result<Scalar, MetricsError> {
    if records.len() < 2 {
        return Err(MetricsError::TooFewRounds(records.len()));
    }
    let (last, earlier) = records.split_last().expect("len checked");
    let mut sum = 0.0 as Scalar;
    let mut included = 0usize;
    for c in 0..num_classes {
        let final_acc = match last.per_class[c] {
            Some(a) => a,
            None => continue,
        };
        let mut best = None::<Scalar>;
        let mut present_throughout = true;
        for rec in earlier {
            match rec.per_class[c] {
                Some(a) => best = Some(best.map_or(a, |b: Scalar| b.max(a))),
                None => {
                    present_throughout = false;
                    break;
                }
            }
        }
        if let (Some(best), true) = (best, present_throughout) {
            sum += best - final_acc;
            included += 1;
        }
    }
    if included == 0 {
        return Err(MetricsError::NoPresentClasses);
    }
    Ok(sum / included as Scalar)
}

/// Smallest round whose top-1 accuracy reaches `target`, or None if no
/// round does.
pub fn rounds_to_reach(history: &RoundHistory, target: Scalar) -> Option<usize> {
    history.records().iter().find(|r| r.top1 >= target).map(|r| r.round)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
}

const ABSENT: &str = "absent";

fn csv_header(num_classes: usize) -> String {
    let mut h = String::from("round,top1,F_running");
    for c in 0..num_classes {
        write!(h, ",acc_class_{c}").unwrap();
    }
    for c in 0..num_classes {
        write!(h, ",softmax_class_{c}").unwrap();
    }
    h
}

/// Renders the history as CSV. F_running at each row is the forgetting
/// measure over the history up to that round; the first row has no value.
pub fn to_csv(history: &RoundHistory) -> String {
    let mut out = csv_header(history.num_classes);
    out.push('\n');
    for (i, rec) in history.records().iter().enumerate() {
        write!(out, "{},{}", rec.round, rec.top1).unwrap();
        match forgetting_of(&history.records()[..=i], history.num_classes) {
            Ok(f) => write!(out, ",{f}").unwrap(),
            Err(_) => out.push(','),
        }
        for acc in &rec.per_class {
            match acc {
                Some(a) => write!(out, ",{a}").unwrap(),
                None => write!(out, ",{ABSENT}").unwrap(),
            }
        }
        for s in &rec.mean_softmax {
            write!(out, ",{s}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Serialized mirror of a history; `f_running` entries are derived.
#[derive(Debug, Serialize, Deserialize)]
struct HistoryFile {
    num_classes: usize,
    f_running: Vec<Option<Scalar>>,
    rounds: Vec<RoundRecord>,
}

pub fn to_json(history: &RoundHistory) -> String {
    let f_running = (0..history.len())
        .map(|i| forgetting_of(&history.records()[..=i], history.num_classes).ok())
        .collect();
    let file = HistoryFile {
        num_classes: history.num_classes,
        f_running,
        rounds: history.records().to_vec(),
    };
    serde_json::to_string_pretty(&file).expect("history serializes")
}

pub fn emit(history: &RoundHistory, path: &Path, format: EmitFormat) -> Result<(), MetricsError> {
    let body = match format {
        EmitFormat::Csv => to_csv(history),
        EmitFormat::Json => to_json(history),
    };
    fs::write(path, body)
        .map_err(|source| MetricsError::Io { path: path.display().to_string(), source })
}

pub fn parse_csv_str(text: &str, path: &str) -> Result<RoundHistory, MetricsError> {
    let err = |line: usize, detail: String| MetricsError::Parse {
        path: path.to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols = header.split(',').count();
    if cols < 5 || (cols - 3) % 2 != 0 {
        return Err(err(1, format!("unrecognized header with {cols} columns")));
    }
    let num_classes = (cols - 3) / 2;
    if header != csv_header(num_classes) {
        return Err(err(1, "header does not match the metrics schema".into()));
    }
    let mut history = RoundHistory::new(num_classes);
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(err(i + 1, format!("expected {cols} cells, found {}", cells.len())));
        }
        let number = |cell: &str, what: &str| {
            Scalar::from_str(cell).map_err(|e| err(i + 1, format!("bad {what} `{cell}`: {e}")))
        };
        let round = cells[0]
            .parse::<usize>()
            .map_err(|e| err(i + 1, format!("bad round `{}`: {e}", cells[0])))?;
        let top1 = number(cells[1], "top1")?;
        // cells[2] is F_running, derived data.
        let mut per_class = Vec::with_capacity(num_classes);
        for cell in &cells[3..3 + num_classes] {
            per_class.push(if *cell == ABSENT { None } else { Some(number(cell, "accuracy")?) });
        }
        let mut mean_softmax = Vec::with_capacity(num_classes);
        for cell in &cells[3 + num_classes..] {
            mean_softmax.push(number(cell, "softmax mass")?);
        }
        history.push(RoundRecord { round, top1, per_class, mean_softmax });
    }
    Ok(history)
}

pub fn parse_csv(path: &Path) -> Result<RoundHistory, MetricsError> {
    let text = fs::read_to_string(path)
        .map_err(|source| MetricsError::Io { path: path.display().to_string(), source })?;
    parse_csv_str(&text, &path.display().to_string())
}

pub fn parse_json(path: &Path) -> Result<RoundHistory, MetricsError> {
    let text = fs::read_to_string(path)
        .map_err(|source| MetricsError::Io { path: path.display().to_string(), source })?;
    let file: HistoryFile = serde_json::from_str(&text)
        .map_err(|e| MetricsError::Json { path: path.display().to_string(), detail: e.to_string() })?;
    let mut history = RoundHistory::new(file.num_classes);
    for rec in file.rounds {
        history.push(rec);
    }
    Ok(history)
}
