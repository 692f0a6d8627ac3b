//! Snapshot persistence: one JSON document with a CRC32 checksum over the
//! canonicalized body, so any corrupted byte is caught at load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{Record, Schema, TableState};
use super::StoreError;

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

/// The checksummed portion of the snapshot. Field order is the canonical
/// serialization order; re-serializing a parsed body reproduces the writer's
/// bytes exactly.
#[derive(Serialize, Deserialize)]
struct SnapshotBody<'a> {
    format_version: u32,
    schema: std::borrow::Cow<'a, Schema>,
    records: std::borrow::Cow<'a, [Record]>,
    revision: u64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format_version: u32,
    schema: Schema,
    records: Vec<Record>,
    revision: u64,
    checksum: String,
}

fn body_checksum(body: &SnapshotBody<'_>) -> Result<String, StoreError> {
    let canonical = serde_json::to_string(body)
        .map_err(|e| StoreError::CorruptSnapshot(format!("serialize: {e}")))?;
    Ok(format!("{:08x}", crc32fast::hash(canonical.as_bytes())))
}

pub fn write_snapshot(state: &TableState, path: &Path) -> Result<(), StoreError> {
    let body = SnapshotBody {
        format_version: SNAPSHOT_FORMAT_VERSION,
        schema: std::borrow::Cow::Borrowed(&state.schema),
        records: std::borrow::Cow::Borrowed(&state.records),
        revision: state.revision,
    };
    let checksum = body_checksum(&body)?;
    let file = SnapshotFile {
        format_version: SNAPSHOT_FORMAT_VERSION,
        schema: state.schema.clone(),
        records: state.records.clone(),
        revision: state.revision,
        checksum,
    };
    let bytes = serde_json::to_vec(&file)
        .map_err(|e| StoreError::CorruptSnapshot(format!("serialize: {e}")))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads and verifies a snapshot. Parse failures, checksum mismatches,
/// non-canonical encodings and invariant violations all surface as
/// `CorruptSnapshot`; only OS-level read failures are `IoFailure`.
pub fn read_snapshot(path: &Path) -> Result<(Schema, Vec<Record>, u64), StoreError> {
    let bytes = std::fs::read(path)?;
    let file: SnapshotFile = serde_json::from_slice(&bytes)
        .map_err(|e| StoreError::CorruptSnapshot(format!("parse: {e}")))?;
    // Tolerant JSON parsing can absorb a corrupted byte (a typo'd key falls
    // back to a field default). Snapshots are machine-written in exactly one
    // canonical encoding, so any deviation between the raw bytes and the
    // re-rendering of what was parsed is corruption.
    let rendered = serde_json::to_vec(&file)
        .map_err(|e| StoreError::CorruptSnapshot(format!("serialize: {e}")))?;
    if rendered != bytes {
        return Err(StoreError::CorruptSnapshot(
            "non-canonical snapshot encoding".into(),
        ));
    }
    if file.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(StoreError::CorruptSnapshot(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    let body = SnapshotBody {
        format_version: file.format_version,
        schema: std::borrow::Cow::Borrowed(&file.schema),
        records: std::borrow::Cow::Borrowed(&file.records),
        revision: file.revision,
    };
    let expected = body_checksum(&body)?;
    if expected != file.checksum {
        return Err(StoreError::CorruptSnapshot(format!(
            "checksum mismatch: stored {}, computed {}",
            file.checksum, expected
        )));
    }
    validate_contents(&file.schema, &file.records)?;
    Ok((file.schema, file.records, file.revision))
}

fn validate_contents(schema: &Schema, records: &[Record]) -> Result<(), StoreError> {
    schema
        .validate()
        .map_err(|e| StoreError::CorruptSnapshot(format!("invalid schema: {e}")))?;
    let mut seen = std::collections::BTreeSet::new();
    for record in records {
        if !seen.insert(record.dedup_key.as_str()) {
            return Err(StoreError::CorruptSnapshot(format!(
                "duplicate dedup key {:?}",
                record.dedup_key
            )));
        }
        for col in schema.key_columns() {
            if !record.key.contains_key(&col.name) {
                return Err(StoreError::CorruptSnapshot(format!(
                    "record {} missing key column {:?}",
                    record.record_id, col.name
                )));
            }
        }
        let non_key: std::collections::BTreeSet<&str> =
            schema.non_key_columns().map(|c| c.name.as_str()).collect();
        let cells: std::collections::BTreeSet<&str> =
            record.cells.keys().map(String::as_str).collect();
        if non_key != cells {
            return Err(StoreError::CorruptSnapshot(format!(
                "record {} cells do not cover the non-key columns",
                record.record_id
            )));
        }
    }
    Ok(())
}
