//! The filter/update wire mini-language.
//!
//! Filters are JSON documents combining field-equality pairs with the
//! operators `$exists`, `$ne`, `$and` and `$or`. Updates are `$set` documents.
//! Anything outside that grammar is a `MalformedOperator` — never silently
//! ignored.

use std::collections::BTreeMap;

use serde_json::Value;

use super::types::{CellValue, FieldRef, Record, Schema};
use super::StoreError;

#[derive(Debug, Clone, PartialEq)]
pub enum FilterQuery {
    /// Conjunction; the empty conjunction is the vacuous `{}` filter.
    And(Vec<FilterQuery>),
    /// Disjunction; empty disjunction matches nothing.
    Or(Vec<FilterQuery>),
    Eq(String, String),
    Ne(String, String),
    Exists(String, bool),
}

impl FilterQuery {
    /// Matches every record.
    pub fn all() -> Self {
        FilterQuery::And(Vec::new())
    }

    /// Parses a filter document. A document with several entries is their
    /// conjunction.
    pub fn parse(doc: &Value) -> Result<Self, StoreError> {
        let Value::Object(map) = doc else {
            return Err(StoreError::MalformedOperator(
                "filter must be a JSON object".into(),
            ));
        };
        let mut clauses = Vec::new();
        for (key, value) in map {
            if let Some(op) = key.strip_prefix('$') {
                let parts = match op {
                    "and" | "or" => parse_clause_list(key, value)?,
                    _ => {
                        return Err(StoreError::MalformedOperator(format!(
                            "unknown operator {key:?}"
                        )))
                    }
                };
                clauses.push(if op == "and" {
                    FilterQuery::And(parts)
                } else {
                    FilterQuery::Or(parts)
                });
                continue;
            }
            clauses.push(parse_field_condition(key, value)?);
        }
        Ok(if clauses.len() == 1 {
            clauses.pop().expect("one clause")
        } else {
            FilterQuery::And(clauses)
        })
    }

    /// All field names referenced by the filter, for upfront schema checks.
    pub fn fields(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            FilterQuery::And(qs) | FilterQuery::Or(qs) => {
                for q in qs {
                    q.collect_fields(out);
                }
            }
            FilterQuery::Eq(f, _) | FilterQuery::Ne(f, _) | FilterQuery::Exists(f, _) => {
                out.push(f)
            }
        }
    }

    pub fn validate_against(&self, schema: &Schema) -> Result<(), StoreError> {
        for field in self.fields() {
            if schema.column(field).is_none() {
                return Err(StoreError::UnknownColumn(field.to_string()));
            }
        }
        Ok(())
    }
}

fn parse_clause_list(key: &str, value: &Value) -> Result<Vec<FilterQuery>, StoreError> {
    let Value::Array(items) = value else {
        return Err(StoreError::MalformedOperator(format!(
            "{key:?} expects an array of filter documents"
        )));
    };
    items.iter().map(FilterQuery::parse).collect()
}

fn parse_field_condition(field: &str, value: &Value) -> Result<FilterQuery, StoreError> {
    match value {
        Value::String(s) => Ok(FilterQuery::Eq(field.to_string(), s.clone())),
        Value::Object(ops) => {
            if ops.is_empty() {
                return Err(StoreError::MalformedOperator(format!(
                    "empty operator document for field {field:?}"
                )));
            }
            let mut clauses = Vec::new();
            for (op, operand) in ops {
                match (op.as_str(), operand) {
                    ("$ne", Value::String(s)) => {
                        clauses.push(FilterQuery::Ne(field.to_string(), s.clone()))
                    }
                    ("$ne", _) => {
                        return Err(StoreError::MalformedOperator(
                            "\"$ne\" expects a string operand".into(),
                        ))
                    }
                    ("$exists", Value::Bool(b)) => {
                        clauses.push(FilterQuery::Exists(field.to_string(), *b))
                    }
                    ("$exists", _) => {
                        return Err(StoreError::MalformedOperator(
                            "\"$exists\" expects a boolean operand".into(),
                        ))
                    }
                    _ => {
                        return Err(StoreError::MalformedOperator(format!(
                            "unknown operator {op:?}"
                        )))
                    }
                }
            }
            Ok(if clauses.len() == 1 {
                clauses.pop().expect("one clause")
            } else {
                FilterQuery::And(clauses)
            })
        }
        _ => Err(StoreError::MalformedOperator(format!(
            "equality for field {field:?} expects a string value"
        ))),
    }
}

/// Evaluates a filter against one record.
///
/// Equality compares the raw stored string (no normalization). Pending cells
/// fail both equality and `$ne`; `{"$exists": false}` is true exactly for
/// Pending cells; NotApplicable compares equal to the literal "NA". A field
/// absent from the record's schema is an `UnknownColumn` error, even when it
/// sits in a branch that boolean short-circuiting would skip.
pub fn eval_filter(query: &FilterQuery, record: &Record) -> Result<bool, StoreError> {
    for field in query.fields() {
        if record.field(field).is_none() {
            return Err(StoreError::UnknownColumn(field.to_string()));
        }
    }
    eval_validated(query, record)
}

fn eval_validated(query: &FilterQuery, record: &Record) -> Result<bool, StoreError> {
    match query {
        FilterQuery::And(qs) => {
            for q in qs {
                if !eval_validated(q, record)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        FilterQuery::Or(qs) => {
            for q in qs {
                if eval_validated(q, record)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        FilterQuery::Eq(field, value) => Ok(match lookup(record, field)? {
            FieldRef::Key(k) => k == value,
            FieldRef::Cell(CellValue::Pending) => false,
            FieldRef::Cell(CellValue::NotApplicable) => value == "NA",
            FieldRef::Cell(CellValue::Filled { value: v, .. }) => v == value,
        }),
        FilterQuery::Ne(field, value) => Ok(match lookup(record, field)? {
            FieldRef::Key(k) => k != value,
            FieldRef::Cell(CellValue::Pending) => false,
            FieldRef::Cell(CellValue::NotApplicable) => value != "NA",
            FieldRef::Cell(CellValue::Filled { value: v, .. }) => v != value,
        }),
        FilterQuery::Exists(field, want) => {
            let exists = match lookup(record, field)? {
                FieldRef::Key(_) => true,
                FieldRef::Cell(cell) => !cell.is_pending(),
            };
            Ok(exists == *want)
        }
    }
}

fn lookup<'a>(record: &'a Record, field: &str) -> Result<FieldRef<'a>, StoreError> {
    record
        .field(field)
        .ok_or_else(|| StoreError::UnknownColumn(field.to_string()))
}

/// Parsed `$set` update. Cells can be set to a filled value or to NA, never
/// back to pending.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSpec {
    pub set: BTreeMap<String, CellValue>,
}

impl UpdateSpec {
    pub fn parse(doc: &Value) -> Result<Self, StoreError> {
        let Value::Object(map) = doc else {
            return Err(StoreError::MalformedOperator(
                "update must be a JSON object".into(),
            ));
        };
        let mut set = BTreeMap::new();
        for (key, value) in map {
            if key != "$set" {
                return Err(StoreError::MalformedOperator(format!(
                    "unknown update operator {key:?}"
                )));
            }
            let Value::Object(assignments) = value else {
                return Err(StoreError::MalformedOperator(
                    "\"$set\" expects an object of column assignments".into(),
                ));
            };
            for (column, literal) in assignments {
                set.insert(column.clone(), parse_cell_literal(literal)?);
            }
        }
        if set.is_empty() {
            return Err(StoreError::MalformedOperator(
                "update contains no \"$set\" assignments".into(),
            ));
        }
        Ok(UpdateSpec { set })
    }

    pub fn validate_against(&self, schema: &Schema) -> Result<(), StoreError> {
        for column in self.set.keys() {
            let Some(spec) = schema.column(column) else {
                return Err(StoreError::UnknownColumn(column.clone()));
            };
            if spec.kind == super::types::ColumnKind::Key {
                return Err(StoreError::KeyColumnUpdate(column.clone()));
            }
        }
        Ok(())
    }
}

/// Parses one cell literal of the wire grammar: the string "NA" means
/// NotApplicable, any other string a filled value, and the object form
/// `{value, source_url?, filled_at_step?}` a filled value with provenance.
pub fn parse_cell_literal(literal: &Value) -> Result<CellValue, StoreError> {
    match literal {
        Value::String(s) => build_filled(s, None, 0),
        Value::Object(map) => {
            let Some(Value::String(value)) = map.get("value") else {
                return Err(StoreError::MalformedOperator(
                    "cell literal object requires a string \"value\"".into(),
                ));
            };
            let source_url = match map.get("source_url") {
                None | Some(Value::Null) => None,
                Some(Value::String(u)) => Some(u.clone()),
                Some(_) => {
                    return Err(StoreError::MalformedOperator(
                        "\"source_url\" must be a string".into(),
                    ))
                }
            };
            let filled_at_step = match map.get("filled_at_step") {
                None | Some(Value::Null) => 0,
                Some(Value::Number(n)) => n.as_u64().ok_or_else(|| {
                    StoreError::MalformedOperator(
                        "\"filled_at_step\" must be a non-negative integer".into(),
                    )
                })?,
                Some(_) => {
                    return Err(StoreError::MalformedOperator(
                        "\"filled_at_step\" must be a non-negative integer".into(),
                    ))
                }
            };
            for key in map.keys() {
                if !matches!(key.as_str(), "value" | "source_url" | "filled_at_step") {
                    return Err(StoreError::MalformedOperator(format!(
                        "unknown cell literal field {key:?}"
                    )));
                }
            }
            build_filled(value, source_url, filled_at_step)
        }
        _ => Err(StoreError::MalformedOperator(
            "cell literal must be a string or an object".into(),
        )),
    }
}

fn build_filled(
    value: &str,
    source_url: Option<String>,
    filled_at_step: u64,
) -> Result<CellValue, StoreError> {
    if value == "NA" {
        return Ok(CellValue::NotApplicable);
    }
    if value.trim().is_empty() {
        return Err(StoreError::MalformedOperator(
            "cell value must be non-empty".into(),
        ));
    }
    Ok(CellValue::Filled {
        value: value.to_string(),
        source_url,
        filled_at_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::BTreeMap;

    fn record() -> Record {
        let mut key = BTreeMap::new();
        key.insert("Year".to_string(), "2006".to_string());
        let mut cells = BTreeMap::new();
        cells.insert("City".to_string(), CellValue::filled("Monterey"));
        cells.insert("Title".to_string(), CellValue::Pending);
        cells.insert("Notes".to_string(), CellValue::NotApplicable);
        Record {
            record_id: "r1".into(),
            key,
            cells,
            dedup_key: "2006".into(),
        }
    }

    #[test]
    fn equality_is_raw_and_case_sensitive() {
        let r = record();
        let q = FilterQuery::parse(&json!({"City": "Monterey"})).unwrap();
        assert!(eval_filter(&q, &r).unwrap());
        let q = FilterQuery::parse(&json!({"City": "monterey"})).unwrap();
        assert!(!eval_filter(&q, &r).unwrap());
    }

    #[test]
    fn exists_false_means_pending() {
        let r = record();
        let q = FilterQuery::parse(&json!({"Title": {"$exists": false}})).unwrap();
        assert!(eval_filter(&q, &r).unwrap());
        let q = FilterQuery::parse(&json!({"City": {"$exists": false}})).unwrap();
        assert!(!eval_filter(&q, &r).unwrap());
        let q = FilterQuery::parse(&json!({"Notes": {"$exists": true}})).unwrap();
        assert!(eval_filter(&q, &r).unwrap());
        let q = FilterQuery::parse(&json!({"Year": {"$exists": true}})).unwrap();
        assert!(eval_filter(&q, &r).unwrap());
    }

    #[test]
    fn or_over_key_values() {
        let r = record();
        let q = FilterQuery::parse(&json!({"$or": [{"Year": "2005"}, {"Year": "2006"}]})).unwrap();
        assert!(eval_filter(&q, &r).unwrap());
    }

    #[test]
    fn pending_fails_both_eq_and_ne() {
        let r = record();
        let q = FilterQuery::parse(&json!({"Title": "x"})).unwrap();
        assert!(!eval_filter(&q, &r).unwrap());
        let q = FilterQuery::parse(&json!({"Title": {"$ne": "x"}})).unwrap();
        assert!(!eval_filter(&q, &r).unwrap());
    }

    #[test]
    fn not_applicable_equals_the_na_literal() {
        let r = record();
        let q = FilterQuery::parse(&json!({"Notes": "NA"})).unwrap();
        assert!(eval_filter(&q, &r).unwrap());
        let q = FilterQuery::parse(&json!({"Notes": {"$ne": "NA"}})).unwrap();
        assert!(!eval_filter(&q, &r).unwrap());
    }

    #[test]
    fn unknown_operator_is_loud() {
        assert!(matches!(
            FilterQuery::parse(&json!({"Year": {"$gt": "2000"}})),
            Err(StoreError::MalformedOperator(_))
        ));
        assert!(matches!(
            FilterQuery::parse(&json!({"$nor": []})),
            Err(StoreError::MalformedOperator(_))
        ));
    }

    #[test]
    fn unknown_field_is_an_error_not_false() {
        let r = record();
        let q = FilterQuery::parse(&json!({"Nope": "x"})).unwrap();
        assert!(matches!(
            eval_filter(&q, &r),
            Err(StoreError::UnknownColumn(_))
        ));
    }

    #[test]
    fn update_spec_grammar() {
        let u = UpdateSpec::parse(&json!({"$set": {"City": "Long Beach"}})).unwrap();
        assert_eq!(u.set["City"], CellValue::filled("Long Beach"));
        let u = UpdateSpec::parse(&json!({"$set": {"City": "NA"}})).unwrap();
        assert_eq!(u.set["City"], CellValue::NotApplicable);
        assert!(matches!(
            UpdateSpec::parse(&json!({"$unset": {"City": ""}})),
            Err(StoreError::MalformedOperator(_))
        ));
        assert!(matches!(
            UpdateSpec::parse(&json!({"$set": {"City": "  "}})),
            Err(StoreError::MalformedOperator(_))
        ));
    }

    #[test]
    fn cell_literal_object_form() {
        let cell = parse_cell_literal(&json!({
            "value": "Long Beach",
            "source_url": "https://example.org/ted-2009",
            "filled_at_step": 3
        }))
        .unwrap();
        assert_eq!(
            cell,
            CellValue::Filled {
                value: "Long Beach".into(),
                source_url: Some("https://example.org/ted-2009".into()),
                filled_at_step: 3
            }
        );
        assert!(parse_cell_literal(&json!(42)).is_err());
        assert!(parse_cell_literal(&json!({"value": "x", "extra": 1})).is_err());
    }
}
