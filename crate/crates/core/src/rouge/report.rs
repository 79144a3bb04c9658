//! Benchmark scoring, aggregation and report formatting.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::MetricScores;
use crate::domain::BenchItem;
use crate::parallel::{map_ordered_coarse, ExecMode};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("item {0} has an empty question or reference answer")]
    InvalidItem(String),
    #[error("duplicate item id {0}")]
    DuplicateItem(String),
    #[error("duplicate answer for item {0}")]
    DuplicateAnswer(String),
}

/// One line of an answers file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRecord {
    pub item_id: String,
    pub candidate: String,
}

/// Per-item line of the scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub item_id: String,
    #[serde(flatten)]
    pub scores: MetricScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    /// Scored items in dataset order.
    pub items: Vec<ItemScores>,
    /// Items without a candidate answer, in dataset order.
    pub missing: Vec<String>,
    /// Mean over scored items; `None` if nothing was scored.
    pub aggregate: Option<MetricScores>,
}

impl BenchOutcome {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, BenchError> {
    let io_err = |source| BenchError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(fs::File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| BenchError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads and validates a dataset file (one [`BenchItem`] per line).
pub fn load_dataset(path: &Path) -> Result<Vec<BenchItem>, BenchError> {
    let items: Vec<BenchItem> = read_jsonl(path)?;
    validate_dataset(&items)?;
    Ok(items)
}

fn validate_dataset(items: &[BenchItem]) -> Result<(), BenchError> {
    if items.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    let mut seen = HashSet::new();
    for item in items {
        if !item.is_valid() {
            return Err(BenchError::InvalidItem(item.item_id.clone()));
        }
        if !seen.insert(item.item_id.as_str()) {
            return Err(BenchError::DuplicateItem(item.item_id.clone()));
        }
    }
    Ok(())
}

/// Reads an answers file into `item_id -> candidate`.
pub fn load_answers(path: &Path) -> Result<HashMap<String, String>, BenchError> {
    let records: Vec<AnswerRecord> = read_jsonl(path)?;
    let mut out = HashMap::with_capacity(records.len());
    for r in records {
        if out.insert(r.item_id.clone(), r.candidate).is_some() {
            return Err(BenchError::DuplicateAnswer(r.item_id));
        }
    }
    Ok(out)
}

/// Order-independent mean: values are sorted, then summed with Neumaier
/// compensation, so any permutation of the input gives identical bits.
pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in sorted {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    (sum + comp) / values.len() as f64
}

/// Mean of each of the nine numbers.
pub fn aggregate(items: &[MetricScores]) -> Option<MetricScores> {
    if items.is_empty() {
        return None;
    }
    let columns: Vec<[f64; 9]> = items.iter().map(MetricScores::as_array).collect();
    let mut out = [0.0; 9];
    for (k, slot) in out.iter_mut().enumerate() {
        let col: Vec<f64> = columns.iter().map(|c| c[k]).collect();
        *slot = stable_mean(&col);
    }
    Some(MetricScores::from_array(out))
}

/// Scores every item that has a candidate in `answers`.
pub fn run_benchmark(
    dataset: &[BenchItem],
    answers: &HashMap<String, String>,
    mode: ExecMode,
) -> Result<BenchOutcome, BenchError> {
    validate_dataset(dataset)?;
    let scored = map_ordered_coarse(dataset, mode, |item| {
        answers.get(&item.item_id).map(|candidate| ItemScores {
            item_id: item.item_id.clone(),
            scores: MetricScores::score(candidate, &item.reference_answer),
        })
    });
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for (item, s) in dataset.iter().zip(scored) {
        match s {
            Some(s) => items.push(s),
            None => missing.push(item.item_id.clone()),
        }
    }
    for id in &missing {
        tracing::warn!(item_id = %id, "no candidate answer; excluded from means");
    }
    let aggregate = aggregate(&items.iter().map(|i| i.scores).collect::<Vec<_>>());
    Ok(BenchOutcome { items, missing, aggregate })
}

/// Writes one JSON object per scored item.
pub fn write_item_scores(path: &Path, items: &[ItemScores]) -> io::Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

const NUM_WIDTH: usize = 8;

/// Plain-text table, one row per `(label, scores)`, four decimals.
///
/// ```text
/// Model        ROUGE-1                 ROUGE-2                 ROUGE-L
///              P       R       F1      P       R       F1      P       R       F1
/// User-LLM R1  0.4294  0.5167  0.4531  0.1424  0.1677  0.1485  0.2376  0.2799  0.2478
/// ```
pub fn format_table(rows: &[(String, MetricScores)]) -> String {
    let label_width = rows.iter().map(|(l, _)| l.chars().count()).chain(std::iter::once(5)).max().unwrap_or(5) + 2;
    let mut out = String::new();
    let mut line = format!("{:<label_width$}", "Model");
    for metric in ["ROUGE-1", "ROUGE-2", "ROUGE-L"] {
        let _ = write!(line, "{:<width$}", metric, width = NUM_WIDTH * 3);
    }
    out.push_str(line.trim_end());
    out.push('\n');
    let mut line = " ".repeat(label_width);
    for _ in 0..3 {
        for h in ["P", "R", "F1"] {
            let _ = write!(line, "{h:<NUM_WIDTH$}");
        }
    }
    out.push_str(line.trim_end());
    out.push('\n');
    for (label, scores) in rows {
        let mut line = format!("{label:<label_width$}");
        for v in scores.as_array() {
            let _ = write!(line, "{:<NUM_WIDTH$}", format!("{v:.4}"));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
