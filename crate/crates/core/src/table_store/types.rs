//! Domain types for the document table: schemas, cells, records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::metrics::normalize;

/// Separator used when joining normalized key values into a dedup key.
pub const DEDUP_SEPARATOR: char = '\u{1F}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    /// Identifies a candidate; key columns are immutable after insert.
    Key,
    /// A condition the candidate must satisfy.
    Constraint,
    /// Information to collect for the candidate.
    Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueHint {
    Text,
    Number,
    Url,
    Email,
    Date,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_hint: Option<ValueHint>,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            description: description.into(),
            value_hint: None,
        }
    }
}

/// The three search paradigms a schema can serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Deep,
    Wide,
    DeepWide,
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskMode::Deep => write!(f, "deep"),
            TaskMode::Wide => write!(f, "wide"),
            TaskMode::DeepWide => write!(f, "deep_wide"),
        }
    }
}

/// The structured search contract: key, constraint and info columns plus an
/// optional requested candidate count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_count: Option<u64>,
    pub task_mode: TaskMode,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>, task_mode: TaskMode) -> Self {
        Self {
            columns,
            target_count: None,
            task_mode,
        }
    }

    pub fn with_target_count(mut self, target: u64) -> Self {
        self.target_count = Some(target);
        self
    }

    /// Checks column-name uniqueness (case-insensitive), key presence and the
    /// per-mode constraint/info requirements.
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.columns.is_empty() {
            return Err(StoreError::InvalidSchema("schema has no columns".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for col in &self.columns {
            if col.name.trim().is_empty() {
                return Err(StoreError::InvalidSchema("empty column name".into()));
            }
            if !seen.insert(col.name.to_lowercase()) {
                return Err(StoreError::DuplicateColumn(col.name.clone()));
            }
        }
        if self.key_columns().next().is_none() {
            return Err(StoreError::InvalidSchema(
                "schema requires at least one key column".into(),
            ));
        }
        let has_constraint = self.constraint_columns().next().is_some();
        let has_info = self.info_columns().next().is_some();
        match self.task_mode {
            TaskMode::Deep if !has_constraint => Err(StoreError::InvalidSchema(
                "deep mode requires at least one constraint column".into(),
            )),
            TaskMode::Wide if !has_info => Err(StoreError::InvalidSchema(
                "wide mode requires at least one info column".into(),
            )),
            TaskMode::DeepWide if !(has_constraint && has_info) => {
                Err(StoreError::InvalidSchema(
                    "deep_wide mode requires constraint and info columns".into(),
                ))
            }
            _ => Ok(()),
        }
        .and_then(|()| {
            if self.target_count == Some(0) {
                Err(StoreError::InvalidSchema("target_count must be positive".into()))
            } else {
                Ok(())
            }
        })
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn key_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Key)
    }

    pub fn constraint_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Constraint)
    }

    pub fn info_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Info)
    }

    pub fn non_key_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.kind != ColumnKind::Key)
    }
}

/// One cell of a record: pending, not applicable, or a filled value with
/// optional provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CellValue {
    Pending,
    NotApplicable,
    Filled {
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_url: Option<String>,
        #[serde(default)]
        filled_at_step: u64,
    },
}

impl CellValue {
    pub fn filled(value: impl Into<String>) -> Self {
        CellValue::Filled {
            value: value.into(),
            source_url: None,
            filled_at_step: 0,
        }
    }

    pub fn is_pending(&self) -> bool {
        matches!(self, CellValue::Pending)
    }

    /// Rendering used by `show_table` and table exports: pending is empty,
    /// not-applicable is the literal `NA`.
    pub fn render(&self) -> &str {
        match self {
            CellValue::Pending => "",
            CellValue::NotApplicable => "NA",
            CellValue::Filled { value, .. } => value,
        }
    }

    /// Equality for change detection. `filled_at_step` is bookkeeping, not
    /// content, so it does not participate.
    pub fn same_content(&self, other: &CellValue) -> bool {
        match (self, other) {
            (CellValue::Pending, CellValue::Pending) => true,
            (CellValue::NotApplicable, CellValue::NotApplicable) => true,
            (
                CellValue::Filled {
                    value: a,
                    source_url: ua,
                    ..
                },
                CellValue::Filled {
                    value: b,
                    source_url: ub,
                    ..
                },
            ) => a == b && ua == ub,
            _ => false,
        }
    }
}

/// One candidate row. `key` holds exactly the key columns, `cells` exactly the
/// non-key columns of the schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub record_id: String,
    pub key: BTreeMap<String, String>,
    pub cells: BTreeMap<String, CellValue>,
    pub dedup_key: String,
}

impl Record {
    /// Cell or key lookup by column name. Key values behave like filled cells.
    pub fn field(&self, name: &str) -> Option<FieldRef<'_>> {
        if let Some(v) = self.key.get(name) {
            return Some(FieldRef::Key(v));
        }
        self.cells.get(name).map(FieldRef::Cell)
    }

    /// Number of pending cells.
    pub fn pending_count(&self) -> usize {
        self.cells.values().filter(|c| c.is_pending()).count()
    }

    /// Names of pending cells in schema column order.
    pub fn pending_columns(&self, schema: &Schema) -> Vec<String> {
        schema
            .non_key_columns()
            .filter(|c| self.cells.get(&c.name).is_some_and(CellValue::is_pending))
            .map(|c| c.name.clone())
            .collect()
    }
}

/// A resolved field of a record: either an immutable key value or a cell.
#[derive(Debug, Clone, Copy)]
pub enum FieldRef<'a> {
    Key(&'a str),
    Cell(&'a CellValue),
}

/// Canonical candidate identity: normalized key values in schema key-column
/// order, joined with the unit separator.
pub fn dedup_key(schema: &Schema, key: &BTreeMap<String, String>) -> String {
    let mut parts = Vec::new();
    for col in schema.key_columns() {
        parts.push(normalize(key.get(&col.name).map(String::as_str).unwrap_or("")));
    }
    parts.join(&DEDUP_SEPARATOR.to_string())
}

/// Full state of one table at some revision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableState {
    pub table_id: String,
    pub schema: Schema,
    pub records: Vec<Record>,
    pub revision: u64,
}

impl TableState {
    pub fn pending_cell_count(&self) -> usize {
        self.records.iter().map(Record::pending_count).sum()
    }

    /// Snapshot equality ignoring the engine-assigned table id.
    pub fn content_eq(&self, other: &TableState) -> bool {
        self.schema == other.schema
            && self.records == other.records
            && self.revision == other.revision
    }
}
