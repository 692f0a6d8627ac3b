//! Scoring engine: value normalization, cell/row/candidate matching, the F1
//! family, success rate, Num@k, Avg@k/Max@k aggregation, Pass@N and
//! five-tier difficulty bucketing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::table_store::{CellValue, ColumnKind, TableState};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("column mismatch: {0}")]
    ColumnMismatch(String),
    #[error("empty trial set")]
    EmptyTrialSet,
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed ground-truth file: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// Reference table a prediction is scored against. `columns` includes the key
/// columns; every row covers every column (the literal "NA" is allowed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthTable {
    pub key_columns: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<BTreeMap<String, String>>,
    /// Expected deep-search answer, when the task has one. Used by Pass@N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl GroundTruthTable {
    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let bytes = std::fs::read(path)?;
        let table: GroundTruthTable = serde_json::from_slice(&bytes)?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.key_columns.is_empty() {
            return Err(MetricsError::InvalidGroundTruth("no key columns".into()));
        }
        for key in &self.key_columns {
            if !self.columns.contains(key) {
                return Err(MetricsError::InvalidGroundTruth(format!(
                    "key column {key:?} missing from columns"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for row in &self.rows {
            for col in &self.columns {
                if !row.contains_key(col) {
                    return Err(MetricsError::InvalidGroundTruth(format!(
                        "row missing column {col:?}"
                    )));
                }
            }
            if !seen.insert(self.key_tuple(row)) {
                return Err(MetricsError::InvalidGroundTruth("duplicate key tuple".into()));
            }
        }
        Ok(())
    }

    pub fn non_key_columns(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| !self.key_columns.contains(c))
            .map(String::as_str)
            .collect()
    }

    fn key_tuple(&self, row: &BTreeMap<String, String>) -> String {
        key_tuple_of(&self.key_columns, |col| row.get(col).map(String::as_str))
    }
}

/// Answer-equivalence hook signature for Pass@N judging.
pub type JudgeFn = Arc<dyn Fn(&str, &str) -> bool + Send + Sync>;

/// Matching tolerances. The judge hook is an optional answer-equivalence
/// predicate for Pass@N; offline scoring never needs it.
#[derive(Clone, Default)]
pub struct MatchConfig {
    pub numeric_tolerance: f64,
    pub judge: Option<JudgeFn>,
}

impl fmt::Debug for MatchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchConfig")
            .field("numeric_tolerance", &self.numeric_tolerance)
            .field("judge", &self.judge.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl MatchConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            numeric_tolerance: tolerance,
            judge: None,
        }
    }
}

/// Scores for one predicted table, or a field-wise aggregate over trials.
///
/// `success_rate` is 1.0/0.0 on a single-table report and the trial mean under
/// `Avg` aggregation (the bool stays exact-match only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub col_p: f64,
    pub col_r: f64,
    pub col_f1: f64,
    pub row_p: f64,
    pub row_r: f64,
    pub row_f1: f64,
    pub item_p: f64,
    pub item_r: f64,
    pub item_f1: f64,
    pub success: bool,
    pub success_rate: f64,
    pub correct_cells: u64,
    pub total_pred_cells: u64,
}

/// Canonical form used everywhere a tolerant string comparison happens:
/// NFC, lowercase, whitespace collapsed, edge punctuation stripped.
/// Idempotent: `normalize(normalize(x)) == normalize(x)`.
pub fn normalize(value: &str) -> String {
    const STRIP: &[char] = &[
        '.', ',', ';', ':', '"', '\'', '(', ')', '\u{2018}', '\u{2019}', '\u{201C}', '\u{201D}',
    ];
    let nfc: String = value.nfc().collect();
    let lower = nfc.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_whitespace() || STRIP.contains(&c))
        .to_string()
}

/// Attempts to read a normalized string as a decimal number. Thousands
/// separators are dropped; non-finite results are rejected so strings like
/// "nan" fall back to literal comparison.
fn parse_decimal(s: &str) -> Option<f64> {
    let cleaned = s.replace(',', "");
    if cleaned.is_empty() {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Whether a predicted cell agrees with a ground-truth value. Pending never
/// matches; NA matches the ground-truth spellings "na"/"n/a"; otherwise
/// normalized equality with a numeric-tolerance escape hatch.
pub fn match_cell(pred: &CellValue, gt: &str, config: &MatchConfig) -> bool {
    match pred {
        CellValue::Pending => false,
        CellValue::NotApplicable => {
            let g = normalize(gt);
            g == "na" || g == "n/a"
        }
        CellValue::Filled { value, .. } => {
            let a = normalize(value);
            let b = normalize(gt);
            if let (Some(x), Some(y)) = (parse_decimal(&a), parse_decimal(&b)) {
                (x - y).abs() <= config.numeric_tolerance
            } else {
                a == b
            }
        }
    }
}

fn ratio(numerator: u64, denominator: u64) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

/// Harmonic mean with the 0/0 convention pinned to 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn key_tuple_of<'a>(
    key_columns: &[String],
    mut get: impl FnMut(&str) -> Option<&'a str>,
) -> String {
    let parts: Vec<String> = key_columns
        .iter()
        .map(|col| normalize(get(col).unwrap_or("")))
        .collect();
    parts.join("\u{1F}")
}

/// Scores a predicted table against ground truth.
///
/// Candidates match on normalized key tuples; items are counted over non-key
/// columns, with cells of unmatched predicted rows counted as wrong; a row is
/// fully correct when matched and every non-key cell matches. Divisions by
/// zero yield 0 and success requires `row_f1 == 1` exactly.
pub fn score_table(
    pred: &TableState,
    gt: &GroundTruthTable,
    config: &MatchConfig,
) -> Result<MetricsReport, MetricsError> {
    let pred_cols: BTreeSet<&str> = pred.schema.columns.iter().map(|c| c.name.as_str()).collect();
    let gt_cols: BTreeSet<&str> = gt.columns.iter().map(String::as_str).collect();
    if pred_cols != gt_cols {
        return Err(MetricsError::ColumnMismatch(format!(
            "predicted columns {pred_cols:?} != ground-truth columns {gt_cols:?}"
        )));
    }
    let pred_keys: BTreeSet<&str> = pred
        .schema
        .columns
        .iter()
        .filter(|c| c.kind == ColumnKind::Key)
        .map(|c| c.name.as_str())
        .collect();
    let gt_keys: BTreeSet<&str> = gt.key_columns.iter().map(String::as_str).collect();
    if pred_keys != gt_keys {
        return Err(MetricsError::ColumnMismatch(format!(
            "predicted key columns {pred_keys:?} != ground-truth key columns {gt_keys:?}"
        )));
    }

    let non_key = gt.non_key_columns();
    let gt_by_key: BTreeMap<String, &BTreeMap<String, String>> = gt
        .rows
        .iter()
        .map(|row| (gt.key_tuple(row), row))
        .collect();

    let pred_rows = pred.records.len() as u64;
    let gt_rows = gt.rows.len() as u64;

    let mut matched = 0u64;
    let mut correct_cells = 0u64;
    let mut fully_correct = 0u64;
    for record in &pred.records {
        let tuple = key_tuple_of(&gt.key_columns, |col| {
            record.key.get(col).map(String::as_str)
        });
        let Some(gt_row) = gt_by_key.get(&tuple) else {
            continue;
        };
        matched += 1;
        let mut row_ok = true;
        for col in &non_key {
            let cell = record.cells.get(*col).unwrap_or(&CellValue::Pending);
            let expected = gt_row.get(*col).map(String::as_str).unwrap_or("");
            if match_cell(cell, expected, config) {
                correct_cells += 1;
            } else {
                row_ok = false;
            }
        }
        if row_ok {
            fully_correct += 1;
        }
    }

    let col_p = ratio(matched, pred_rows);
    let col_r = ratio(matched, gt_rows);
    let row_p = ratio(fully_correct, pred_rows);
    let row_r = ratio(fully_correct, gt_rows);
    let total_pred_cells = pred_rows * non_key.len() as u64;
    let item_p = ratio(correct_cells, total_pred_cells);
    let item_r = ratio(correct_cells, gt_rows * non_key.len() as u64);
    let row_f1 = f1(row_p, row_r);
    let success = row_f1 == 1.0;
    Ok(MetricsReport {
        col_p,
        col_r,
        col_f1: f1(col_p, col_r),
        row_p,
        row_r,
        row_f1,
        item_p,
        item_r,
        item_f1: f1(item_p, item_r),
        success,
        success_rate: if success { 1.0 } else { 0.0 },
        correct_cells,
        total_pred_cells,
    })
}

/// Maximum count of valid cells achieved across trials
/// (`total_pred_cells x item_p`, i.e. `correct_cells`, maximized over k).
pub fn num_at_k(reports: &[MetricsReport]) -> Result<u64, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyTrialSet);
    }
    Ok(reports.iter().map(|r| r.correct_cells).max().unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    Avg,
    Max,
}

/// Field-wise mean or max across trial reports. Under `Avg`, `success_rate`
/// is the trial mean and `success` stays true only when every trial
/// succeeded; under `Max`, `success` is true when any trial succeeded.
pub fn aggregate(
    reports: &[MetricsReport],
    mode: AggregateMode,
) -> Result<MetricsReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyTrialSet);
    }
    let n = reports.len() as f64;
    let fold = |get: fn(&MetricsReport) -> f64| -> f64 {
        match mode {
            AggregateMode::Avg => reports.iter().map(get).sum::<f64>() / n,
            AggregateMode::Max => reports.iter().map(get).fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let success_rate = fold(|r| r.success_rate);
    let success = match mode {
        AggregateMode::Avg => success_rate == 1.0,
        AggregateMode::Max => reports.iter().any(|r| r.success),
    };
    let fold_count = |get: fn(&MetricsReport) -> u64| -> u64 {
        match mode {
            AggregateMode::Avg => {
                (reports.iter().map(|r| get(r) as f64).sum::<f64>() / n).round() as u64
            }
            AggregateMode::Max => reports.iter().map(get).max().unwrap_or(0),
        }
    };
    Ok(MetricsReport {
        col_p: fold(|r| r.col_p),
        col_r: fold(|r| r.col_r),
        col_f1: fold(|r| r.col_f1),
        row_p: fold(|r| r.row_p),
        row_r: fold(|r| r.row_r),
        row_f1: fold(|r| r.row_f1),
        item_p: fold(|r| r.item_p),
        item_r: fold(|r| r.item_r),
        item_f1: fold(|r| r.item_f1),
        success,
        success_rate,
        correct_cells: fold_count(|r| r.correct_cells),
        total_pred_cells: fold_count(|r| r.total_pred_cells),
    })
}

/// Whether any of N independent deep-search answers matches the expected
/// answer — by the judge hook when configured, else normalized equality.
pub fn pass_at_n(
    answers: &[&str],
    gt_answer: &str,
    config: &MatchConfig,
) -> Result<bool, MetricsError> {
    if answers.is_empty() {
        return Err(MetricsError::EmptyTrialSet);
    }
    Ok(answers.iter().any(|a| match &config.judge {
        Some(judge) => judge(a, gt_answer),
        None => normalize(a) == normalize(gt_answer),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyTier {
    Easy,
    MedEasy,
    Medium,
    MedHard,
    Hard,
}

impl fmt::Display for DifficultyTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self {
            DifficultyTier::Easy => "easy",
            DifficultyTier::MedEasy => "med_easy",
            DifficultyTier::Medium => "medium",
            DifficultyTier::MedHard => "med_hard",
            DifficultyTier::Hard => "hard",
        };
        f.write_str(label)
    }
}

/// Assigns each complexity value to one of five tiers using nearest-rank
/// percentile cut-points at 20/40/60/80. Ties share the lower tier.
pub fn bucket_difficulty(values: &[f64]) -> Vec<DifficultyTier> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cut = |p: f64| -> f64 {
        // nearest-rank: value at ceil(p * n) in 1-based sorted order
        let rank = (p * n as f64).ceil() as usize;
        sorted[rank.clamp(1, n) - 1]
    };
    let cuts = [cut(0.2), cut(0.4), cut(0.6), cut(0.8)];
    values
        .iter()
        .map(|v| {
            if *v <= cuts[0] {
                DifficultyTier::Easy
            } else if *v <= cuts[1] {
                DifficultyTier::MedEasy
            } else if *v <= cuts[2] {
                DifficultyTier::Medium
            } else if *v <= cuts[3] {
                DifficultyTier::MedHard
            } else {
                DifficultyTier::Hard
            }
        })
        .collect()
}
