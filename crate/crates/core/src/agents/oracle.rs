//! Deterministic oracle policy over a fixture corpus.
//!
//! Extraction reads the structured `fields` of fixture documents instead of
//! parsing page text, so offline runs are hallucination-free and
//! byte-reproducible.

use std::sync::Arc;

use serde_json::{json, Value};

use super::{
    record_literal_from_fields, AgentError, AgentPolicy, PolicyDecision, SubAgentMode,
    SubAgentTask, TableView, ToolAction, Trajectory,
};
use crate::metrics::normalize;
use crate::table_store::{CellValue, Record, Schema};
use crate::web_env::{search, Corpus};

/// Constraint check used at candidate intake and at answer synthesis:
/// normalized substring containment between a field value and the constraint
/// column's description. An empty description constrains nothing.
pub fn constraint_satisfied(field_value: &str, description: &str) -> bool {
    let d = normalize(description);
    if d.is_empty() {
        return true;
    }
    let v = normalize(field_value);
    if v.is_empty() {
        return false;
    }
    v.contains(&d) || d.contains(&v)
}

pub struct OraclePolicy {
    corpus: Arc<Corpus>,
    top_k: usize,
}

impl OraclePolicy {
    pub fn new(corpus: Arc<Corpus>) -> Self {
        Self { corpus, top_k: 32 }
    }

    pub fn with_top_k(mut self, top_k: usize) -> Self {
        self.top_k = top_k;
        self
    }

    /// A document yields a candidate when its fields cover every key column
    /// and no constraint field contradicts its column description. A missing
    /// constraint field gets the benefit of the doubt — the cell stays
    /// pending and verification happens at population time.
    fn eligible_candidate(&self, schema: &Schema, url: &str) -> Option<Value> {
        let doc = self.corpus.document(url)?;
        if doc.fields.is_empty() {
            return None;
        }
        for col in schema.constraint_columns() {
            if let Some(value) = doc.fields.get(&col.name) {
                if !constraint_satisfied(value, &col.description) {
                    return None;
                }
            }
        }
        record_literal_from_fields(schema, &doc.fields)
    }

    fn decide_expand(&self, task: &SubAgentTask, trajectory: &Trajectory, view: &TableView) -> PolicyDecision {
        if let Some(target) = view.schema.target_count {
            if view.records.len() as u64 >= target {
                return PolicyDecision::Finish;
            }
        }
        let last_tool = trajectory.steps.last().map(|s| s.action.tool.as_str());
        match last_tool {
            None => PolicyDecision::Act {
                thought: "search for candidates matching the instruction".into(),
                action: ToolAction {
                    tool: "search".into(),
                    arguments: json!({"query": task.instruction, "top_k": self.top_k}),
                },
            },
            Some("search") => {
                let results = search(&self.corpus, &task.instruction, self.top_k);
                let records: Vec<Value> = results
                    .iter()
                    .filter_map(|r| self.eligible_candidate(&view.schema, &r.url))
                    .collect();
                if records.is_empty() {
                    return PolicyDecision::Finish;
                }
                PolicyDecision::Act {
                    thought: format!("add {} eligible candidates", records.len()),
                    action: ToolAction {
                        tool: "add_candidates".into(),
                        arguments: json!({ "records": records }),
                    },
                }
            }
            _ => PolicyDecision::Finish,
        }
    }

    fn decide_populate(&self, task: &SubAgentTask, trajectory: &Trajectory, view: &TableView) -> PolicyDecision {
        let Some(record) = view.records.first() else {
            return PolicyDecision::Finish;
        };
        let pending: Vec<&String> = task
            .target_columns
            .iter()
            .filter(|col| record.cells.get(*col).is_some_and(CellValue::is_pending))
            .collect();
        let Some(column) = pending.first() else {
            return PolicyDecision::Finish;
        };
        let query = column_query(&view.schema, record, column);
        let last = trajectory.steps.last();
        match last.map(|s| s.action.tool.as_str()) {
            None | Some("fill_cells") => PolicyDecision::Act {
                thought: format!("search for the {column} of this candidate"),
                action: ToolAction {
                    tool: "search".into(),
                    arguments: json!({"query": query, "top_k": self.top_k}),
                },
            },
            Some("search") => {
                let results = search(&self.corpus, &query, self.top_k);
                match results.first() {
                    None => PolicyDecision::Act {
                        thought: format!("nothing found for {column}; mark it not applicable"),
                        action: ToolAction {
                            tool: "fill_cells".into(),
                            arguments: json!({"values": {column.as_str(): "NA"}}),
                        },
                    },
                    Some(top) => PolicyDecision::Act {
                        thought: format!("visit the top result for {column}"),
                        action: ToolAction {
                            tool: "visit".into(),
                            arguments: json!({"url": top.url}),
                        },
                    },
                }
            }
            Some("visit") => {
                let url = last
                    .and_then(|s| s.action.arguments.get("url"))
                    .and_then(Value::as_str)
                    .unwrap_or_default();
                let value = self
                    .corpus
                    .document(url)
                    .and_then(|doc| doc.fields.get(column.as_str()))
                    .filter(|v| !v.trim().is_empty())
                    .cloned()
                    .unwrap_or_else(|| "NA".to_string());
                PolicyDecision::Act {
                    thought: format!("fill {column} from the visited page"),
                    action: ToolAction {
                        tool: "fill_cells".into(),
                        arguments: json!({
                            "values": {column.as_str(): value},
                            "source_url": url,
                        }),
                    },
                }
            }
            _ => PolicyDecision::Finish,
        }
    }
}

/// Per-column population query: the record's key values in schema key order,
/// then the column name.
fn column_query(schema: &Schema, record: &Record, column: &str) -> String {
    let mut parts: Vec<&str> = schema
        .key_columns()
        .filter_map(|col| record.key.get(&col.name).map(String::as_str))
        .collect();
    parts.push(column);
    parts.join(" ")
}

impl AgentPolicy for OraclePolicy {
    fn decide(
        &self,
        task: &SubAgentTask,
        trajectory: &Trajectory,
        view: &TableView,
    ) -> Result<PolicyDecision, AgentError> {
        Ok(match task.mode {
            SubAgentMode::ExpandRows => self.decide_expand(task, trajectory, view),
            SubAgentMode::PopulateCells => self.decide_populate(task, trajectory, view),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{run_sub_agent, SubBudget, Terminated};
    use crate::table_store::{ColumnKind, ColumnSpec, TableStore, TaskMode};
    use crate::web_env::{Document, FixtureEnv};
    use std::collections::BTreeMap;

    #[test]
    fn constraint_containment_examples() {
        assert!(constraint_satisfied("US", "US-based"));
        assert!(!constraint_satisfied("IL", "US-based"));
        assert!(constraint_satisfied("anything", ""));
        assert!(constraint_satisfied("lighting", "lighting"));
        assert!(!constraint_satisfied("", "lighting"));
    }

    fn doc(url: &str, title: &str, text: &str, fields: &[(&str, &str)]) -> Document {
        Document {
            url: url.into(),
            title: title.into(),
            text: text.into(),
            fields: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn merchant_corpus() -> Arc<Corpus> {
        Arc::new(
            Corpus::from_documents(
                10_000,
                vec![
                    doc(
                        "https://shops.example/meyda",
                        "Meyda lighting merchant",
                        "Meyda is a lighting merchant in the US. Country: US. Email: sales@meyda.example.",
                        &[("Merchant", "Meyda"), ("Country", "US"), ("Email", "sales@meyda.example")],
                    ),
                    doc(
                        "https://shops.example/avita",
                        "Avita lighting merchant",
                        "Avita is a lighting merchant. Country: IL.",
                        &[("Merchant", "Avita"), ("Country", "IL")],
                    ),
                    doc(
                        "https://shops.example/blog",
                        "Lighting trends",
                        "A blog about lighting merchant trends.",
                        &[],
                    ),
                ],
            )
            .unwrap(),
        )
    }

    fn merchant_schema() -> crate::table_store::Schema {
        crate::table_store::Schema::new(
            vec![
                ColumnSpec::new("Merchant", ColumnKind::Key, "merchant name"),
                ColumnSpec::new("Country", ColumnKind::Constraint, "US"),
                ColumnSpec::new("Email", ColumnKind::Info, "contact email"),
            ],
            TaskMode::DeepWide,
        )
    }

    #[test]
    fn expansion_filters_constraint_violations() {
        let corpus = merchant_corpus();
        let store = TableStore::new();
        let table_id = store.create_table(merchant_schema()).unwrap();
        let env = FixtureEnv::new(corpus.clone());
        let policy = OraclePolicy::new(corpus);
        let task = SubAgentTask {
            mode: SubAgentMode::ExpandRows,
            instruction: "lighting merchant".into(),
            table_id: table_id.clone(),
            target_record_id: None,
            target_columns: vec![],
            budget: SubBudget::default(),
        };
        let report = run_sub_agent(&task, &policy, &env, &store, None).unwrap();
        assert_eq!(report.terminated, Terminated::Completed);
        assert_eq!(report.rows_added, 1);
        let state = store.table_state(&table_id).unwrap();
        assert_eq!(state.records.len(), 1);
        assert_eq!(state.records[0].key["Merchant"], "Meyda");
    }

    #[test]
    fn population_fills_from_fields_with_source() {
        let corpus = merchant_corpus();
        let store = TableStore::new();
        let table_id = store.create_table(merchant_schema()).unwrap();
        store
            .add_records(&table_id, &[serde_json::json!({"Merchant": "Meyda"})])
            .unwrap();
        let env = FixtureEnv::new(corpus.clone());
        let policy = OraclePolicy::new(corpus);
        let task = SubAgentTask {
            mode: SubAgentMode::PopulateCells,
            instruction: "Meyda Country Email".into(),
            table_id: table_id.clone(),
            target_record_id: Some("r1".into()),
            target_columns: vec!["Country".into(), "Email".into()],
            budget: SubBudget::default(),
        };
        let report = run_sub_agent(&task, &policy, &env, &store, None).unwrap();
        assert_eq!(report.terminated, Terminated::Completed);
        assert_eq!(report.cells_filled, 2);
        let state = store.table_state(&table_id).unwrap();
        match &state.records[0].cells["Email"] {
            CellValue::Filled { value, source_url, .. } => {
                assert_eq!(value, "sales@meyda.example");
                assert_eq!(source_url.as_deref(), Some("https://shops.example/meyda"));
            }
            other => panic!("expected filled email, got {other:?}"),
        }
    }

    #[test]
    fn absent_field_becomes_not_applicable() {
        let corpus = merchant_corpus();
        let store = TableStore::new();
        let table_id = store.create_table(merchant_schema()).unwrap();
        store
            .add_records(&table_id, &[serde_json::json!({"Merchant": "Avita"})])
            .unwrap();
        let env = FixtureEnv::new(corpus.clone());
        let policy = OraclePolicy::new(corpus);
        let task = SubAgentTask {
            mode: SubAgentMode::PopulateCells,
            instruction: "Avita Email".into(),
            table_id: table_id.clone(),
            target_record_id: Some("r1".into()),
            target_columns: vec!["Email".into()],
            budget: SubBudget::default(),
        };
        let report = run_sub_agent(&task, &policy, &env, &store, None).unwrap();
        assert_eq!(report.cells_filled, 1);
        let state = store.table_state(&table_id).unwrap();
        assert_eq!(state.records[0].cells["Email"], CellValue::NotApplicable);
    }

    #[test]
    fn populate_with_nothing_pending_finishes_at_step_zero() {
        let corpus = merchant_corpus();
        let store = TableStore::new();
        let table_id = store.create_table(merchant_schema()).unwrap();
        store
            .add_records(
                &table_id,
                &[serde_json::json!({
                    "Merchant": "Meyda",
                    "Country": "US",
                    "Email": "sales@meyda.example"
                })],
            )
            .unwrap();
        let env = FixtureEnv::new(corpus.clone());
        let policy = OraclePolicy::new(corpus);
        let task = SubAgentTask {
            mode: SubAgentMode::PopulateCells,
            instruction: "Meyda".into(),
            table_id,
            target_record_id: Some("r1".into()),
            target_columns: vec!["Country".into(), "Email".into()],
            budget: SubBudget::default(),
        };
        let report = run_sub_agent(&task, &policy, &env, &store, None).unwrap();
        assert_eq!(report.steps_used, 0);
        assert_eq!(report.cells_filled, 0);
        assert_eq!(report.terminated, Terminated::Completed);
    }

    #[test]
    fn oracle_runs_are_reproducible() {
        let run = || {
            let corpus = merchant_corpus();
            let store = TableStore::new();
            let table_id = store.create_table(merchant_schema()).unwrap();
            let env = FixtureEnv::new(corpus.clone());
            let policy = OraclePolicy::new(corpus);
            let task = SubAgentTask {
                mode: SubAgentMode::ExpandRows,
                instruction: "lighting merchant".into(),
                table_id: table_id.clone(),
                target_record_id: None,
                target_columns: vec![],
                budget: SubBudget::default(),
            };
            let report = run_sub_agent(&task, &policy, &env, &store, None).unwrap();
            let mut state = store.table_state(&table_id).unwrap();
            state.table_id = String::new();
            serde_json::to_string(&(report, state)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn expansion_stops_at_target_count() {
        let corpus = merchant_corpus();
        let store = TableStore::new();
        let schema = merchant_schema().with_target_count(1);
        let table_id = store.create_table(schema).unwrap();
        store
            .add_records(&table_id, &[serde_json::json!({"Merchant": "Existing"})])
            .unwrap();
        let env = FixtureEnv::new(corpus.clone());
        let policy = OraclePolicy::new(corpus);
        let task = SubAgentTask {
            mode: SubAgentMode::ExpandRows,
            instruction: "lighting merchant".into(),
            table_id,
            target_record_id: None,
            target_columns: vec![],
            budget: SubBudget::default(),
        };
        let report = run_sub_agent(&task, &policy, &env, &store, None).unwrap();
        assert_eq!(report.steps_used, 0);
        assert_eq!(report.rows_added, 0);
    }

    #[test]
    fn candidate_literal_requires_all_keys() {
        let schema = merchant_schema();
        let mut fields = BTreeMap::new();
        fields.insert("Country".to_string(), "US".to_string());
        assert!(record_literal_from_fields(&schema, &fields).is_none());
    }
}
