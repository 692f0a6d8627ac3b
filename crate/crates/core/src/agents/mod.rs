//! Sub-agent execution layer: a bounded ReAct loop over tools, running in
//! row-expansion or cell-population mode.
//!
//! Tool errors become observations rather than loop aborts, so a 404 mid-run
//! never kills a long-horizon search. Policies decide one action per step.

mod model;
mod oracle;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm_provider::{count_tokens_approx, Message, ToolDef};
use crate::table_store::{
    CellValue, FilterQuery, Record, Schema, StoreError, TableStore, UpdateSpec,
};
use crate::web_env::SearchEnv;

pub use model::ModelPolicy;
pub use oracle::{constraint_satisfied, OraclePolicy};

pub const ELIDED_OBSERVATION: &str = "[observation elided]";

/// Page budget for webpage visits inside the loop.
pub const VISIT_MAX_CHARS: usize = 4000;

const DEFAULT_SEARCH_TOP_K: usize = 8;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("table not found: {0}")]
    TableNotFound(String),
    #[error("record not found: {0}")]
    RecordNotFound(String),
    #[error("policy failure: {0}")]
    PolicyFailure(String),
    #[error("trajectory skeleton needs {needed} tokens, budget is {max_tokens}")]
    BudgetImpossible { needed: u64, max_tokens: u64 },
    #[error("invalid task: {0}")]
    InvalidTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubAgentMode {
    ExpandRows,
    PopulateCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubBudget {
    pub max_steps: u64,
    pub max_tool_calls: u64,
}

impl Default for SubBudget {
    fn default() -> Self {
        Self {
            max_steps: 16,
            max_tool_calls: 16,
        }
    }
}

/// A delegated search job: expand the table with new candidates, or populate
/// pending cells of one owned record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubAgentTask {
    pub mode: SubAgentMode,
    pub instruction: String,
    pub table_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_columns: Vec<String>,
    pub budget: SubBudget,
}

impl SubAgentTask {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.budget.max_steps == 0 || self.budget.max_tool_calls == 0 {
            return Err(AgentError::InvalidTask("budget must be positive".into()));
        }
        if self.mode == SubAgentMode::PopulateCells {
            if self.target_record_id.is_none() {
                return Err(AgentError::InvalidTask(
                    "populate_cells requires target_record_id".into(),
                ));
            }
            if self.target_columns.is_empty() {
                return Err(AgentError::InvalidTask(
                    "populate_cells requires target_columns".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolAction {
    pub tool: String,
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub thought: String,
    pub action: ToolAction,
    pub observation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminated {
    Completed,
    BudgetExhausted,
    Error(String),
}

/// Accounted result of one sub-agent run. Totals equal the actual table
/// deltas this agent performed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubAgentReport {
    pub mode: SubAgentMode,
    pub rows_added: u64,
    pub cells_filled: u64,
    pub evidence_urls: Vec<String>,
    pub steps_used: u64,
    pub terminated: Terminated,
}

/// What a sub-agent can see of the shared table. Row-expansion agents see the
/// full table; cell-population agents see only their target row plus schema.
#[derive(Debug, Clone)]
pub struct TableView {
    pub schema: Schema,
    pub records: Vec<Record>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyDecision {
    Act { thought: String, action: ToolAction },
    Finish,
}

/// A decision procedure: given the task, the trajectory so far and the
/// visible table snapshot, produce the next action or finish.
pub trait AgentPolicy: Send + Sync {
    fn decide(
        &self,
        task: &SubAgentTask,
        trajectory: &Trajectory,
        view: &TableView,
    ) -> Result<PolicyDecision, AgentError>;
}

/// Tools advertised to a sub-agent in the given mode.
pub fn tool_defs(mode: SubAgentMode) -> Vec<ToolDef> {
    let mut tools = vec![
        ToolDef {
            name: "search".into(),
            description: "Keyword search over the web environment.".into(),
            params_schema: json!({
                "type": "object",
                "properties": {
                    "query": {"type": "string"},
                    "top_k": {"type": "integer"}
                },
                "required": ["query"]
            }),
        },
        ToolDef {
            name: "visit".into(),
            description: "Fetch the text of a webpage by url.".into(),
            params_schema: json!({
                "type": "object",
                "properties": {
                    "url": {"type": "string"},
                    "max_chars": {"type": "integer"}
                },
                "required": ["url"]
            }),
        },
    ];
    match mode {
        SubAgentMode::ExpandRows => tools.push(ToolDef {
            name: "add_candidates".into(),
            description: "Insert discovered candidate rows into the shared table.".into(),
            params_schema: json!({
                "type": "object",
                "properties": {"records": {"type": "array"}},
                "required": ["records"]
            }),
        }),
        SubAgentMode::PopulateCells => tools.push(ToolDef {
            name: "fill_cells".into(),
            description: "Fill pending cells of the owned record with found values.".into(),
            params_schema: json!({
                "type": "object",
                "properties": {
                    "values": {"type": "object"},
                    "source_url": {"type": "string"}
                },
                "required": ["values"]
            }),
        }),
    }
    tools
}

/// Executes tool actions and accounts for their table effects.
pub struct ToolRuntime<'a> {
    task: &'a SubAgentTask,
    env: &'a dyn SearchEnv,
    store: &'a TableStore,
    pub rows_added: u64,
    pub cells_filled: u64,
    pub evidence_urls: Vec<String>,
    step_index: u64,
}

impl<'a> ToolRuntime<'a> {
    pub fn new(task: &'a SubAgentTask, env: &'a dyn SearchEnv, store: &'a TableStore) -> Self {
        Self {
            task,
            env,
            store,
            rows_added: 0,
            cells_filled: 0,
            evidence_urls: Vec::new(),
            step_index: 0,
        }
    }

    fn note_evidence(&mut self, url: &str) {
        if !self.evidence_urls.iter().any(|u| u == url) {
            self.evidence_urls.push(url.to_string());
        }
    }

    /// Runs one tool action. Failures are rendered as `ERROR: …` observations.
    pub fn execute(&mut self, action: &ToolAction) -> String {
        let observation = match action.tool.as_str() {
            "search" => self.run_search(&action.arguments),
            "visit" => self.run_visit(&action.arguments),
            "add_candidates" if self.task.mode == SubAgentMode::ExpandRows => {
                self.run_add(&action.arguments)
            }
            "fill_cells" if self.task.mode == SubAgentMode::PopulateCells => {
                self.run_fill(&action.arguments)
            }
            other => Err(format!("unknown tool {other:?} in this mode")),
        };
        self.step_index += 1;
        observation.unwrap_or_else(|e| format!("ERROR: {e}"))
    }

    fn run_search(&mut self, args: &Value) -> Result<String, String> {
        let query = args
            .get("query")
            .and_then(Value::as_str)
            .ok_or("search requires a string \"query\"")?;
        let top_k = args
            .get("top_k")
            .and_then(Value::as_u64)
            .unwrap_or(DEFAULT_SEARCH_TOP_K as u64) as usize;
        let results = self.env.search(query, top_k);
        if results.is_empty() {
            return Ok("(no results)".into());
        }
        let mut out = String::new();
        for (i, r) in results.iter().enumerate() {
            out.push_str(&format!("{}. {} — {}\n   {}\n", i + 1, r.title, r.url, r.snippet));
        }
        Ok(out)
    }

    fn run_visit(&mut self, args: &Value) -> Result<String, String> {
        let url = args
            .get("url")
            .and_then(Value::as_str)
            .ok_or("visit requires a string \"url\"")?;
        let max_chars = args
            .get("max_chars")
            .and_then(Value::as_u64)
            .unwrap_or(VISIT_MAX_CHARS as u64) as usize;
        let text = self.env.visit(url, max_chars).map_err(|e| e.to_string())?;
        self.note_evidence(url);
        Ok(text)
    }

    fn run_add(&mut self, args: &Value) -> Result<String, String> {
        let records = args
            .get("records")
            .and_then(Value::as_array)
            .ok_or("add_candidates requires a \"records\" array")?;
        let result = self
            .store
            .add_records(&self.task.table_id, records)
            .map_err(|e| e.to_string())?;
        self.rows_added += result.inserted;
        Ok(format!(
            "inserted {}, deduplicated {}",
            result.inserted, result.deduplicated
        ))
    }

    fn run_fill(&mut self, args: &Value) -> Result<String, String> {
        let values = args
            .get("values")
            .and_then(Value::as_object)
            .ok_or("fill_cells requires a \"values\" object")?;
        let source_url = args.get("source_url").and_then(Value::as_str);
        let record_id = self
            .task
            .target_record_id
            .as_deref()
            .ok_or("populate task without a target record")?;
        let state = self
            .store
            .table_state(&self.task.table_id)
            .map_err(|e| e.to_string())?;
        let record = state
            .records
            .iter()
            .find(|r| r.record_id == record_id)
            .ok_or_else(|| format!("record {record_id:?} not found"))?;

        // Only pending cells among the assigned target columns are writable.
        let mut set = serde_json::Map::new();
        let mut written = Vec::new();
        for (column, value) in values {
            let Some(Value::String(text)) = Some(value) else {
                return Err(format!("value for {column:?} must be a string"));
            };
            if !self.task.target_columns.iter().any(|c| c == column) {
                continue;
            }
            if !record.cells.get(column).is_some_and(CellValue::is_pending) {
                continue;
            }
            let literal = if text == "NA" || text.trim().is_empty() {
                json!("NA")
            } else {
                json!({
                    "value": text,
                    "source_url": source_url,
                    "filled_at_step": self.step_index,
                })
            };
            set.insert(column.clone(), literal);
            written.push(column.clone());
        }
        if set.is_empty() {
            return Ok("no pending target cells to fill".into());
        }
        let filter = key_filter(record);
        let update = UpdateSpec::parse(&json!({ "$set": Value::Object(set) }))
            .map_err(|e| e.to_string())?;
        self.store
            .update_records(&self.task.table_id, &filter, &update)
            .map_err(|e| e.to_string())?;
        self.cells_filled += written.len() as u64;
        if let Some(url) = source_url {
            self.note_evidence(url);
        }
        Ok(format!("filled {} cells: {}", written.len(), written.join(", ")))
    }
}

/// Raw-equality filter selecting exactly one record by its key values.
fn key_filter(record: &Record) -> FilterQuery {
    FilterQuery::And(
        record
            .key
            .iter()
            .map(|(col, value)| FilterQuery::Eq(col.clone(), value.clone()))
            .collect(),
    )
}

pub enum StepOutcome {
    Stepped,
    Finished,
}

/// One ReAct step: exactly one policy decision, and on an action exactly one
/// tool invocation whose outcome is appended as the observation.
pub fn react_step(
    policy: &dyn AgentPolicy,
    task: &SubAgentTask,
    trajectory: &mut Trajectory,
    view: &TableView,
    runtime: &mut ToolRuntime<'_>,
) -> Result<StepOutcome, AgentError> {
    match policy.decide(task, trajectory, view)? {
        PolicyDecision::Finish => Ok(StepOutcome::Finished),
        PolicyDecision::Act { thought, action } => {
            let observation = runtime.execute(&action);
            trajectory.steps.push(TrajectoryStep {
                thought,
                action,
                observation,
            });
            Ok(StepOutcome::Stepped)
        }
    }
}

fn visible_view(store: &TableStore, task: &SubAgentTask) -> Result<TableView, AgentError> {
    let state = store.table_state(&task.table_id).map_err(|e| match e {
        StoreError::TableNotFound(id) => AgentError::TableNotFound(id),
        other => AgentError::PolicyFailure(other.to_string()),
    })?;
    let records = match task.mode {
        SubAgentMode::ExpandRows => state.records,
        SubAgentMode::PopulateCells => {
            let id = task.target_record_id.as_deref().unwrap_or_default();
            let record = state
                .records
                .into_iter()
                .find(|r| r.record_id == id)
                .ok_or_else(|| AgentError::RecordNotFound(id.to_string()))?;
            vec![record]
        }
    };
    Ok(TableView {
        schema: state.schema,
        records,
        revision: state.revision,
    })
}

/// Runs the ReAct loop until the policy finishes or a budget trips. The
/// returned report's totals equal the table deltas performed by this agent.
pub fn run_sub_agent(
    task: &SubAgentTask,
    policy: &dyn AgentPolicy,
    env: &dyn SearchEnv,
    store: &TableStore,
    deadline: Option<Instant>,
) -> Result<SubAgentReport, AgentError> {
    task.validate()?;
    // Fail fast on a bad table or record before burning budget.
    visible_view(store, task)?;

    let mut trajectory = Trajectory::default();
    let mut runtime = ToolRuntime::new(task, env, store);
    let terminated = loop {
        let steps = trajectory.steps.len() as u64;
        if steps >= task.budget.max_steps || steps >= task.budget.max_tool_calls {
            break Terminated::BudgetExhausted;
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break Terminated::BudgetExhausted;
        }
        let view = visible_view(store, task)?;
        match react_step(policy, task, &mut trajectory, &view, &mut runtime)? {
            StepOutcome::Finished => break Terminated::Completed,
            StepOutcome::Stepped => {}
        }
    };
    Ok(SubAgentReport {
        mode: task.mode,
        rows_added: runtime.rows_added,
        cells_filled: runtime.cells_filled,
        evidence_urls: runtime.evidence_urls,
        steps_used: trajectory.steps.len() as u64,
        terminated,
    })
}

/// Message rendering used for trajectory token accounting and for model
/// conversations; compaction and counting must agree on it.
pub fn trajectory_messages(trajectory: &Trajectory) -> Vec<Message> {
    let mut messages = Vec::new();
    for (i, step) in trajectory.steps.iter().enumerate() {
        messages.push(Message::assistant(format!(
            "{}\nACTION {} {}",
            step.thought, step.action.tool, step.action.arguments
        )));
        messages.push(Message::tool(step.observation.clone(), format!("t{i}")));
    }
    messages
}

fn trajectory_tokens(trajectory: &Trajectory) -> u64 {
    count_tokens_approx(&trajectory_messages(trajectory))
}

/// Shrinks a trajectory under a token budget by replacing the oldest
/// observations with a placeholder. Thoughts and actions are never elided.
pub fn compact_trajectory(trajectory: &Trajectory, max_tokens: u64) -> Result<Trajectory, AgentError> {
    if max_tokens == 0 {
        return Err(AgentError::BudgetImpossible {
            needed: trajectory_tokens(trajectory),
            max_tokens,
        });
    }
    let mut out = trajectory.clone();
    if trajectory_tokens(&out) <= max_tokens {
        return Ok(out);
    }
    for idx in 0..out.steps.len() {
        if out.steps[idx].observation != ELIDED_OBSERVATION {
            out.steps[idx].observation = ELIDED_OBSERVATION.to_string();
            if trajectory_tokens(&out) <= max_tokens {
                return Ok(out);
            }
        }
    }
    Err(AgentError::BudgetImpossible {
        needed: trajectory_tokens(&out),
        max_tokens,
    })
}

/// Record literals the oracle builds from structured document fields.
pub(crate) fn record_literal_from_fields(
    schema: &Schema,
    fields: &BTreeMap<String, String>,
) -> Option<Value> {
    let mut literal = serde_json::Map::new();
    for col in schema.key_columns() {
        let value = fields.get(&col.name)?;
        if value.trim().is_empty() {
            return None;
        }
        literal.insert(col.name.clone(), json!(value));
    }
    Some(Value::Object(literal))
}
