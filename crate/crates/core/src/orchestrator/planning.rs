//! Deterministic planning rules: strategy selection, expansion-query
//! diversification, row queries and saturation detection.

use std::sync::OnceLock;

use regex::Regex;

use super::{Budget, Plan, PlannerState, PopulateTarget, TaskSpec};
use crate::agents::constraint_satisfied;
use crate::table_store::{CellValue, Record, Schema, TableState, TaskMode};

/// A record is fully verified when every constraint cell is filled with a
/// value satisfying its column description.
pub fn record_verified(record: &Record, schema: &Schema) -> bool {
    schema.constraint_columns().all(|col| {
        match record.cells.get(&col.name) {
            Some(CellValue::Filled { value, .. }) => constraint_satisfied(value, &col.description),
            _ => false,
        }
    })
}

fn candidate_shortfall(table: &TableState, spec: &TaskSpec) -> bool {
    let rows = table.records.len() as u64;
    if rows == 0 {
        return true;
    }
    if table.schema.target_count.is_some_and(|t| rows < t) {
        return true;
    }
    spec.mode == TaskMode::Deep
        && !table
            .records
            .iter()
            .any(|r| record_verified(r, &table.schema))
}

/// Rule-first strategy selection: expand while candidates fall short and
/// expansion is still productive, then populate pending cells, then stop.
/// A model refiner may adjust the result but never emit an illegal plan.
pub fn formulate_strategy(
    table: &TableState,
    spec: &TaskSpec,
    state: &PlannerState,
    budget: &Budget,
    seed: u64,
) -> Plan {
    if candidate_shortfall(table, spec)
        && state.consecutive_stale_expansions < budget.stale_rounds_limit
    {
        return Plan::ExpandRows {
            queries: make_expansion_queries(
                spec,
                &table.schema,
                table.revision,
                budget.max_parallel,
                seed,
            ),
        };
    }
    let targets: Vec<PopulateTarget> = table
        .records
        .iter()
        .filter_map(|record| {
            let columns = record.pending_columns(&table.schema);
            (!columns.is_empty()).then(|| PopulateTarget {
                record_id: record.record_id.clone(),
                columns,
            })
        })
        .collect();
    if !targets.is_empty() {
        return Plan::PopulateCells { targets };
    }
    Plan::Done
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Saturation {
    Pending,
    Done,
}

/// Saturated when nothing is pending and either the requested candidate count
/// is met, expansion has gone stale for `stale_rounds_limit` consecutive
/// rounds, or (deep mode) a fully verified candidate exists.
pub fn check_saturation(
    table: &TableState,
    spec: &TaskSpec,
    state: &PlannerState,
    budget: &Budget,
) -> Saturation {
    if table.pending_cell_count() > 0 {
        return Saturation::Pending;
    }
    let target_met = table
        .schema
        .target_count
        .is_some_and(|t| table.records.len() as u64 >= t);
    let exhausted = state.consecutive_stale_expansions >= budget.stale_rounds_limit;
    let deep_verified = spec.mode == TaskMode::Deep
        && table
            .records
            .iter()
            .any(|r| record_verified(r, &table.schema));
    if target_met || exhausted || deep_verified {
        Saturation::Done
    } else {
        Saturation::Pending
    }
}

fn range_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(\d{4})\s*(?:-|–|—|to|through|until)\s*(\d{4})\b")
            .expect("valid range pattern")
    })
}

const SUFFIX_BANK: &[&str] = &[
    "official list",
    "directory",
    "complete list",
    "catalog",
    "profiles",
    "index",
    "roster",
];

/// Base search text for expansion: the task query plus any constraint-column
/// descriptions it does not already mention.
fn expansion_base(spec: &TaskSpec, schema: &Schema) -> String {
    let mut base = spec.query.trim().to_string();
    let lower = base.to_lowercase();
    for col in schema.constraint_columns() {
        let desc = col.description.trim();
        if !desc.is_empty() && !lower.contains(&desc.to_lowercase()) {
            base.push(' ');
            base.push_str(desc);
        }
    }
    base
}

/// Derives `n` distinct expansion queries. Year ranges in the base text are
/// split into contiguous sub-ranges (one per query); otherwise deterministic
/// suffixes diversify the base. Stable for a fixed (schema, revision, n, seed).
pub fn make_expansion_queries(
    spec: &TaskSpec,
    schema: &Schema,
    revision: u64,
    n: usize,
    seed: u64,
) -> Vec<String> {
    let n = n.max(1);
    let base = expansion_base(spec, schema);
    let mut queries = Vec::with_capacity(n);

    if let Some(caps) = range_pattern().captures(&base) {
        let whole = caps.get(0).expect("match");
        let start: i64 = caps[1].parse().unwrap_or(0);
        let end: i64 = caps[2].parse().unwrap_or(0);
        if start < end {
            let span = end - start + 1;
            let chunks = (n as i64).min(span);
            for i in 0..chunks {
                // Ceiling split so early chunks absorb the remainder.
                let lo = start + (i * span + chunks - 1) / chunks;
                let hi = start + ((i + 1) * span + chunks - 1) / chunks - 1;
                let replacement = if lo == hi {
                    lo.to_string()
                } else {
                    format!("{lo}-{hi}")
                };
                let mut query = base.clone();
                query.replace_range(whole.range(), &replacement);
                queries.push(query);
            }
        }
    }

    let offset = ((seed.wrapping_add(revision)) % SUFFIX_BANK.len() as u64) as usize;
    let mut extra = 0usize;
    while queries.len() < n {
        let query = if queries.is_empty() && extra == 0 {
            base.clone()
        } else if extra <= SUFFIX_BANK.len() {
            format!("{} {}", base, SUFFIX_BANK[(offset + extra - 1) % SUFFIX_BANK.len()])
        } else {
            format!("{} segment {}", base, extra)
        };
        if !queries.contains(&query) {
            queries.push(query);
        }
        extra += 1;
    }
    queries
}

/// Query for one record's empty columns: key values in schema key order, then
/// the column names.
pub fn make_row_query(schema: &Schema, record: &Record, empty_columns: &[String]) -> String {
    debug_assert!(!empty_columns.is_empty(), "caller passes pending columns");
    let mut parts: Vec<&str> = schema
        .key_columns()
        .filter_map(|col| record.key.get(&col.name).map(String::as_str))
        .collect();
    parts.extend(empty_columns.iter().map(String::as_str));
    parts.join(" ")
}
