//! Embedded, persistent document table.
//!
//! Implements six atomic primitives — create, add, update, filter, count,
//! show — plus snapshot/load persistence. Mutations are serialized per table
//! with record-granular atomicity; reads observe a consistent snapshot at
//! some revision, so a table handle can be shared across concurrently
//! running sub-agents.

mod filter;
mod snapshot;
mod types;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use filter::{eval_filter, parse_cell_literal, FilterQuery, UpdateSpec};
pub use types::{
    dedup_key, CellValue, ColumnKind, ColumnSpec, FieldRef, Record, Schema, TableState, TaskMode,
    ValueHint, DEDUP_SEPARATOR,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("duplicate column: {0}")]
    DuplicateColumn(String),
    #[error("unknown column: {0}")]
    UnknownColumn(String),
    #[error("missing key column: {0}")]
    MissingKey(String),
    #[error("table not found: {0}")]
    TableNotFound(String),
    #[error("key columns are immutable: {0}")]
    KeyColumnUpdate(String),
    #[error("malformed operator: {0}")]
    MalformedOperator(String),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddResult {
    pub inserted: u64,
    pub deduplicated: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateResult {
    pub matched: u64,
    pub modified: u64,
}

/// Registry of tables. Cheap to clone handles out of; all operations take
/// `&self` and are safe for concurrent use.
pub struct TableStore {
    tables: RwLock<BTreeMap<String, Arc<RwLock<TableState>>>>,
    next_table: AtomicU64,
}

impl Default for TableStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TableStore {
    pub fn new() -> Self {
        Self {
            tables: RwLock::new(BTreeMap::new()),
            next_table: AtomicU64::new(1),
        }
    }

    fn table(&self, table_id: &str) -> Result<Arc<RwLock<TableState>>, StoreError> {
        self.tables
            .read()
            .expect("table registry lock")
            .get(table_id)
            .cloned()
            .ok_or_else(|| StoreError::TableNotFound(table_id.to_string()))
    }

    fn register(&self, schema: Schema, records: Vec<Record>, revision: u64) -> String {
        let id = format!("tbl{}", self.next_table.fetch_add(1, Ordering::Relaxed));
        let state = TableState {
            table_id: id.clone(),
            schema,
            records,
            revision,
        };
        self.tables
            .write()
            .expect("table registry lock")
            .insert(id.clone(), Arc::new(RwLock::new(state)));
        id
    }

    /// Registers an empty table for a validated schema. Revision starts at 0.
    pub fn create_table(&self, schema: Schema) -> Result<String, StoreError> {
        schema.validate()?;
        Ok(self.register(schema, Vec::new(), 0))
    }

    /// Clone of the full table state at its current revision.
    pub fn table_state(&self, table_id: &str) -> Result<TableState, StoreError> {
        Ok(self.table(table_id)?.read().expect("table lock").clone())
    }

    /// Inserts candidate rows given as wire record literals (one JSON object
    /// per row mapping column names to cell literals; key columns are
    /// required, missing non-key cells default to Pending). Duplicates —
    /// against the table or earlier entries in the batch — are counted, not
    /// inserted. The whole batch is validated before anything is applied.
    pub fn add_records(&self, table_id: &str, candidates: &[Value]) -> Result<AddResult, StoreError> {
        let table = self.table(table_id)?;
        let mut state = table.write().expect("table lock");
        let drafts: Vec<RecordDraft> = candidates
            .iter()
            .map(|literal| parse_record_literal(&state.schema, literal))
            .collect::<Result<_, _>>()?;

        let mut seen: std::collections::BTreeSet<String> =
            state.records.iter().map(|r| r.dedup_key.clone()).collect();
        let mut inserted = 0u64;
        let mut deduplicated = 0u64;
        for (key, cells) in drafts {
            let dk = dedup_key(&state.schema, &key);
            if !seen.insert(dk.clone()) {
                deduplicated += 1;
                continue;
            }
            let record_id = format!("r{}", state.records.len() + 1);
            state.records.push(Record {
                record_id,
                key,
                cells,
                dedup_key: dk,
            });
            inserted += 1;
        }
        if inserted > 0 {
            state.revision += 1;
        }
        Ok(AddResult {
            inserted,
            deduplicated,
        })
    }

    /// Applies a `$set` update to every record matching the filter. Each
    /// record's assignments land atomically; `modified` counts records whose
    /// stored content actually changed.
    pub fn update_records(
        &self,
        table_id: &str,
        filter: &FilterQuery,
        update: &UpdateSpec,
    ) -> Result<UpdateResult, StoreError> {
        let table = self.table(table_id)?;
        let mut state = table.write().expect("table lock");
        filter.validate_against(&state.schema)?;
        update.validate_against(&state.schema)?;

        let mut matched = 0u64;
        let mut modified = 0u64;
        for record in &mut state.records {
            if !eval_filter(filter, record)? {
                continue;
            }
            matched += 1;
            let mut changed = false;
            for (column, new_cell) in &update.set {
                let slot = record
                    .cells
                    .get_mut(column)
                    .expect("validated non-key column");
                if !slot.same_content(new_cell) {
                    *slot = new_cell.clone();
                    changed = true;
                }
            }
            if changed {
                modified += 1;
            }
        }
        if modified > 0 {
            state.revision += 1;
        }
        Ok(UpdateResult { matched, modified })
    }

    /// Records matching the filter, in stored order. The result is a snapshot:
    /// later mutations do not alter it.
    pub fn filter_records(
        &self,
        table_id: &str,
        query: &FilterQuery,
    ) -> Result<Vec<Record>, StoreError> {
        let table = self.table(table_id)?;
        let state = table.read().expect("table lock");
        query.validate_against(&state.schema)?;
        let mut out = Vec::new();
        for record in &state.records {
            if eval_filter(query, record)? {
                out.push(record.clone());
            }
        }
        Ok(out)
    }

    pub fn count_table(&self, table_id: &str, query: &FilterQuery) -> Result<u64, StoreError> {
        let table = self.table(table_id)?;
        let state = table.read().expect("table lock");
        query.validate_against(&state.schema)?;
        let mut count = 0u64;
        for record in &state.records {
            if eval_filter(query, record)? {
                count += 1;
            }
        }
        Ok(count)
    }

    /// Markdown rendering of the table for planner inspection.
    pub fn show_table(&self, table_id: &str, limit: usize) -> Result<String, StoreError> {
        let table = self.table(table_id)?;
        let state = table.read().expect("table lock");
        Ok(render_markdown(&state, limit))
    }

    /// Writes the table to a checksummed snapshot file.
    pub fn snapshot(&self, table_id: &str, path: &Path) -> Result<(), StoreError> {
        let table = self.table(table_id)?;
        let state = table.read().expect("table lock");
        snapshot::write_snapshot(&state, path)
    }

    /// Loads a snapshot file as a new table and returns its id. The loaded
    /// table matches the snapshotted one in schema, record order, cell states
    /// and revision.
    pub fn load(&self, path: &Path) -> Result<String, StoreError> {
        let (schema, records, revision) = snapshot::read_snapshot(path)?;
        Ok(self.register(schema, records, revision))
    }
}

/// Writes a detached `TableState` to a snapshot file.
pub fn save_snapshot_state(state: &TableState, path: &Path) -> Result<(), StoreError> {
    snapshot::write_snapshot(state, path)
}

/// Reads a snapshot file into a detached `TableState` (no registry entry).
pub fn load_snapshot_state(path: &Path) -> Result<TableState, StoreError> {
    let (schema, records, revision) = snapshot::read_snapshot(path)?;
    Ok(TableState {
        table_id: String::new(),
        schema,
        records,
        revision,
    })
}

type RecordDraft = (BTreeMap<String, String>, BTreeMap<String, CellValue>);

fn parse_record_literal(schema: &Schema, literal: &Value) -> Result<RecordDraft, StoreError> {
    let Value::Object(map) = literal else {
        return Err(StoreError::MalformedOperator(
            "record literal must be a JSON object".into(),
        ));
    };
    for column in map.keys() {
        if schema.column(column).is_none() {
            return Err(StoreError::UnknownColumn(column.clone()));
        }
    }
    let mut key = BTreeMap::new();
    for col in schema.key_columns() {
        let value = match map.get(&col.name) {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(_) => {
                return Err(StoreError::MalformedOperator(format!(
                    "key column {:?} expects a non-empty string",
                    col.name
                )))
            }
            None => return Err(StoreError::MissingKey(col.name.clone())),
        };
        key.insert(col.name.clone(), value);
    }
    let mut cells = BTreeMap::new();
    for col in schema.non_key_columns() {
        let cell = match map.get(&col.name) {
            Some(literal) => parse_cell_literal(literal)?,
            None => CellValue::Pending,
        };
        cells.insert(col.name.clone(), cell);
    }
    Ok((key, cells))
}

fn escape_markdown(value: &str) -> String {
    value.replace('|', "\\|").replace(['\n', '\r'], " ")
}

/// Pipe-delimited table: header in schema column order, then up to `limit`
/// rows in stored order. Pending renders empty, NotApplicable as "NA". A
/// trailing `(showing X of Y rows)` line marks truncation.
pub fn render_markdown(state: &TableState, limit: usize) -> String {
    let mut out = String::new();
    let names: Vec<&str> = state.schema.columns.iter().map(|c| c.name.as_str()).collect();
    out.push_str("| ");
    out.push_str(&names.join(" | "));
    out.push_str(" |\n|");
    for _ in &names {
        out.push_str(" --- |");
    }
    out.push('\n');
    let shown = state.records.len().min(limit);
    for record in state.records.iter().take(shown) {
        let cells: Vec<String> = state
            .schema
            .columns
            .iter()
            .map(|col| match record.field(&col.name) {
                Some(FieldRef::Key(v)) => escape_markdown(v),
                Some(FieldRef::Cell(cell)) => escape_markdown(cell.render()),
                None => String::new(),
            })
            .collect();
        out.push_str("| ");
        out.push_str(&cells.join(" | "));
        out.push_str(" |\n");
    }
    if shown < state.records.len() {
        out.push_str(&format!("(showing {} of {} rows)\n", shown, state.records.len()));
    }
    out
}
