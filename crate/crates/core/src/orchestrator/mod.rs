//! The planner main-agent: schema construction, the expand/populate/done
//! strategy loop under step and wall-clock budgets, parallel sub-agent
//! dispatch with barrier joins, saturation detection and answer synthesis.
//!
//! Synthesis runs unconditionally — a timed-out run still yields an answer
//! from whatever table exists at stop time.

mod planning;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    run_sub_agent, AgentPolicy, SubAgentMode, SubAgentReport, SubAgentTask, SubBudget, Terminated,
};
use crate::llm_provider::{AssistantTurn, ChatProvider, Message};
use crate::table_store::{
    render_markdown, CellValue, FieldRef, Record, Schema, StoreError, TableState, TableStore,
    TaskMode,
};
use crate::web_env::SearchEnv;

pub use planning::{
    check_saturation, formulate_strategy, make_expansion_queries, make_row_query, record_verified,
    Saturation,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("schema construction failed: {0}")]
    SchemaConstruction(String),
    #[error("store failure: {0}")]
    Store(#[from] StoreError),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("task spec parse: {0}")]
    SpecParse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Budget {
    #[serde(default = "default_max_planner_steps")]
    pub max_planner_steps: u64,
    #[serde(default = "default_wall_timeout_s")]
    pub wall_timeout_s: f64,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub sub_budget: SubBudget,
    #[serde(default = "default_stale_rounds_limit")]
    pub stale_rounds_limit: u64,
}

fn default_max_planner_steps() -> u64 {
    12
}

fn default_wall_timeout_s() -> f64 {
    120.0
}

fn default_max_parallel() -> usize {
    4
}

fn default_stale_rounds_limit() -> u64 {
    2
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_planner_steps: default_max_planner_steps(),
            wall_timeout_s: default_wall_timeout_s(),
            max_parallel: default_max_parallel(),
            sub_budget: SubBudget::default(),
            stale_rounds_limit: default_stale_rounds_limit(),
        }
    }
}

/// One task to run: the query, its search paradigm, an optional explicit
/// schema (bypasses model-based construction) and budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub query: String,
    pub mode: TaskMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_hint: Option<Schema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default)]
    pub budget: Budget,
}

impl TaskSpec {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let bytes = std::fs::read(path)?;
        let spec: TaskSpec = serde_json::from_slice(&bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.query.trim().is_empty() {
            return Err(RunError::InvalidSpec("query is empty".into()));
        }
        if self.budget.max_planner_steps == 0
            || self.budget.max_parallel == 0
            || self.budget.wall_timeout_s <= 0.0
            || self.budget.stale_rounds_limit == 0
            || self.budget.sub_budget.max_steps == 0
            || self.budget.sub_budget.max_tool_calls == 0
        {
            return Err(RunError::InvalidSpec("budget fields must be positive".into()));
        }
        if let Some(hint) = &self.schema_hint {
            hint.validate()
                .map_err(|e| RunError::InvalidSpec(format!("schema hint: {e}")))?;
            if hint.task_mode != self.mode {
                return Err(RunError::InvalidSpec(format!(
                    "schema hint mode {:?} conflicts with task mode {:?}",
                    hint.task_mode, self.mode
                )));
            }
        }
        Ok(())
    }
}

/// The planner's next move.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Plan {
    ExpandRows { queries: Vec<String> },
    PopulateCells { targets: Vec<PopulateTarget> },
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulateTarget {
    pub record_id: String,
    pub columns: Vec<String>,
}

impl Plan {
    pub fn summary(&self) -> String {
        match self {
            Plan::ExpandRows { queries } => format!("expand_rows x{}", queries.len()),
            Plan::PopulateCells { targets } => format!("populate_cells x{}", targets.len()),
            Plan::Done => "done".into(),
        }
    }

    /// Legality of a plan against the current table: expansion query lists are
    /// non-empty and within the parallel width; populate targets reference
    /// existing records that still have pending cells.
    pub fn validate(&self, table: &TableState, budget: &Budget) -> Result<(), RunError> {
        match self {
            Plan::Done => Ok(()),
            Plan::ExpandRows { queries } => {
                if queries.is_empty() {
                    return Err(RunError::InvalidSpec("expand plan with no queries".into()));
                }
                if queries.len() > budget.max_parallel {
                    return Err(RunError::InvalidSpec(format!(
                        "expand plan width {} exceeds max_parallel {}",
                        queries.len(),
                        budget.max_parallel
                    )));
                }
                Ok(())
            }
            Plan::PopulateCells { targets } => {
                if targets.is_empty() {
                    return Err(RunError::InvalidSpec("populate plan with no targets".into()));
                }
                for target in targets {
                    let Some(record) = table
                        .records
                        .iter()
                        .find(|r| r.record_id == target.record_id)
                    else {
                        return Err(RunError::InvalidSpec(format!(
                            "populate target {} does not exist",
                            target.record_id
                        )));
                    };
                    if target.columns.is_empty() || record.pending_count() == 0 {
                        return Err(RunError::InvalidSpec(format!(
                            "populate target {} has nothing pending",
                            target.record_id
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Optional model-side refinement of a rule-produced plan. Refined plans are
/// validated; an illegal refinement is discarded in favor of the rule plan.
pub trait PlanRefiner: Send + Sync {
    fn refine(&self, plan: &Plan, table: &TableState, spec: &TaskSpec) -> Plan;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    #[default]
    Init,
    Expanding,
    Populating,
    Synthesizing,
    Finished,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub plan_summary: String,
    pub table_revision_after: u64,
    pub new_rows: u64,
    pub new_fills: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PlannerState {
    pub history: Vec<HistoryEntry>,
    pub phase: RunPhase,
    pub consecutive_stale_expansions: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepAnswer {
    /// Key values of the selected candidate; `None` means unknown.
    pub entity: Option<BTreeMap<String, String>>,
    pub evidence_urls: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableAnswer {
    pub markdown: String,
    pub rows: Vec<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Answer {
    Deep(DeepAnswer),
    Table(TableAnswer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Saturated,
    StepLimit,
    Timeout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub planner: PlannerState,
    pub reports: Vec<SubAgentReport>,
    pub stop: StopReason,
    /// Set when deep-mode synthesis could not isolate a unique fully verified
    /// candidate and fell back to the best-covered row.
    pub low_confidence: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Usage {
    pub planner_steps: u64,
    pub sub_agent_runs: u64,
    pub tool_calls: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub answer: Answer,
    pub table_id: String,
    pub trace: RunTrace,
    pub usage: Usage,
}

/// Wiring for a run: the shared store, the tool environment, the sub-agent
/// policy, and (optionally) a provider for schema construction and deep-mode
/// judging plus a plan refiner.
pub struct RunDeps {
    pub store: Arc<TableStore>,
    pub env: Arc<dyn SearchEnv>,
    pub policy: Arc<dyn AgentPolicy>,
    pub provider: Option<Arc<dyn ChatProvider>>,
    pub refiner: Option<Arc<dyn PlanRefiner>>,
    pub seed: u64,
}

const SCHEMA_PROMPT: &str = "Derive a table schema for the search task. Reply with \
JSON only: {\"columns\": [{\"name\": str, \"kind\": \"key\"|\"constraint\"|\"info\", \
\"description\": str}], \"task_mode\": \"deep\"|\"wide\"|\"deep_wide\", \
\"target_count\": int|null}. Key columns identify a candidate; constraint columns \
carry conditions to verify; info columns carry attributes to collect.";

fn parse_schema_response(text: &str) -> Result<Schema, String> {
    let trimmed = text.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|rest| rest.strip_suffix("```"))
        .unwrap_or(trimmed);
    let schema: Schema = serde_json::from_str(body.trim()).map_err(|e| e.to_string())?;
    schema.validate().map_err(|e| e.to_string())?;
    Ok(schema)
}

/// Maps the query to a schema: verbatim from the hint when present, otherwise
/// one structured-output provider call with a single retry that feeds the
/// parse error back.
pub fn construct_schema(
    spec: &TaskSpec,
    provider: Option<&dyn ChatProvider>,
) -> Result<Schema, RunError> {
    if let Some(hint) = &spec.schema_hint {
        return Ok(hint.clone());
    }
    let provider = provider.ok_or_else(|| {
        RunError::SchemaConstruction("no schema hint and no provider configured".into())
    })?;
    let mut messages = vec![
        Message::system(SCHEMA_PROMPT),
        Message::user(format!("Task mode: {}\nQuery: {}", spec.mode, spec.query)),
    ];
    let mut last_error = String::new();
    for _attempt in 0..2 {
        let turn = provider
            .complete(&messages, &[])
            .map_err(|e| RunError::SchemaConstruction(e.to_string()))?;
        let text = match turn {
            AssistantTurn::Text(text) => text,
            AssistantTurn::ToolCalls(_) => {
                last_error = "expected a JSON schema, got tool calls".to_string();
                messages.push(Message::user(format!(
                    "Invalid response ({last_error}). Reply with the schema JSON only."
                )));
                continue;
            }
        };
        match parse_schema_response(&text) {
            Ok(mut schema) => {
                schema.task_mode = spec.mode;
                return Ok(schema);
            }
            Err(e) => {
                last_error = e;
                messages.push(Message::assistant(text));
                messages.push(Message::user(format!(
                    "That schema did not parse ({last_error}). Reply with corrected JSON only."
                )));
            }
        }
    }
    Err(RunError::SchemaConstruction(format!(
        "unparseable schema after retry: {last_error}"
    )))
}

fn error_report(mode: SubAgentMode, message: String) -> SubAgentReport {
    SubAgentReport {
        mode,
        rows_added: 0,
        cells_filled: 0,
        evidence_urls: Vec::new(),
        steps_used: 0,
        terminated: Terminated::Error(message),
    }
}

/// Runs sub-agent tasks in waves of at most `max_parallel`, joining each wave
/// before the next starts. Sub-agent failures degrade to error reports.
fn dispatch(
    tasks: Vec<SubAgentTask>,
    deps: &RunDeps,
    max_parallel: usize,
    deadline: Instant,
) -> Vec<SubAgentReport> {
    let mut reports = Vec::with_capacity(tasks.len());
    for wave in tasks.chunks(max_parallel.max(1)) {
        if Instant::now() >= deadline {
            break;
        }
        let wave_reports: Vec<SubAgentReport> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|task| {
                    scope.spawn(move || {
                        run_sub_agent(
                            task,
                            deps.policy.as_ref(),
                            deps.env.as_ref(),
                            deps.store.as_ref(),
                            Some(deadline),
                        )
                        .unwrap_or_else(|e| error_report(task.mode, e.to_string()))
                    })
                })
                .collect();
            handles
                .into_iter()
                .zip(wave)
                .map(|(handle, task)| {
                    handle
                        .join()
                        .unwrap_or_else(|_| error_report(task.mode, "sub-agent panicked".into()))
                })
                .collect()
        });
        reports.extend(wave_reports);
    }
    reports
}

fn expansion_tasks(queries: &[String], table_id: &str, budget: &Budget) -> Vec<SubAgentTask> {
    queries
        .iter()
        .map(|query| SubAgentTask {
            mode: SubAgentMode::ExpandRows,
            instruction: query.clone(),
            table_id: table_id.to_string(),
            target_record_id: None,
            target_columns: Vec::new(),
            budget: budget.sub_budget,
        })
        .collect()
}

fn populate_tasks(
    targets: &[PopulateTarget],
    table: &TableState,
    budget: &Budget,
) -> Vec<SubAgentTask> {
    targets
        .iter()
        .filter_map(|target| {
            let record = table
                .records
                .iter()
                .find(|r| r.record_id == target.record_id)?;
            Some(SubAgentTask {
                mode: SubAgentMode::PopulateCells,
                instruction: make_row_query(&table.schema, record, &target.columns),
                table_id: table.table_id.clone(),
                target_record_id: Some(target.record_id.clone()),
                target_columns: target.columns.clone(),
                budget: budget.sub_budget,
            })
        })
        .collect()
}

/// Executes a task end to end. The loop stops on saturation, the planner-step
/// limit or the wall timeout, whichever first; synthesis always runs.
pub fn run_task(spec: &TaskSpec, deps: &RunDeps) -> Result<RunResult, RunError> {
    spec.validate()?;
    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64(spec.budget.wall_timeout_s);

    let schema = construct_schema(spec, deps.provider.as_deref())?;
    let table_id = deps.store.create_table(schema)?;

    let mut planner = PlannerState::default();
    let mut reports: Vec<SubAgentReport> = Vec::new();
    let mut steps = 0u64;
    let stop = loop {
        if steps >= spec.budget.max_planner_steps {
            break StopReason::StepLimit;
        }
        if Instant::now() >= deadline {
            break StopReason::Timeout;
        }
        steps += 1;

        let table = deps.store.table_state(&table_id)?;
        let mut plan = formulate_strategy(&table, spec, &planner, &spec.budget, deps.seed);
        if let Some(refiner) = &deps.refiner {
            let refined = refiner.refine(&plan, &table, spec);
            if refined.validate(&table, &spec.budget).is_ok() {
                plan = refined;
            }
        }

        let summary = plan.summary();
        let (new_rows, new_fills) = match &plan {
            Plan::Done => {
                planner.history.push(HistoryEntry {
                    step: steps,
                    plan_summary: summary,
                    table_revision_after: table.revision,
                    new_rows: 0,
                    new_fills: 0,
                });
                break StopReason::Saturated;
            }
            Plan::ExpandRows { queries } => {
                planner.phase = RunPhase::Expanding;
                let tasks = expansion_tasks(queries, &table_id, &spec.budget);
                let wave = dispatch(tasks, deps, spec.budget.max_parallel, deadline);
                let new_rows: u64 = wave.iter().map(|r| r.rows_added).sum();
                reports.extend(wave);
                if new_rows == 0 {
                    planner.consecutive_stale_expansions += 1;
                } else {
                    planner.consecutive_stale_expansions = 0;
                }
                (new_rows, 0)
            }
            Plan::PopulateCells { targets } => {
                planner.phase = RunPhase::Populating;
                let tasks = populate_tasks(targets, &table, &spec.budget);
                let wave = dispatch(tasks, deps, spec.budget.max_parallel, deadline);
                let new_fills: u64 = wave.iter().map(|r| r.cells_filled).sum();
                reports.extend(wave);
                (0, new_fills)
            }
        };

        let after = deps.store.table_state(&table_id)?;
        planner.history.push(HistoryEntry {
            step: steps,
            plan_summary: summary,
            table_revision_after: after.revision,
            new_rows,
            new_fills,
        });
        if check_saturation(&after, spec, &planner, &spec.budget) == Saturation::Done {
            break StopReason::Saturated;
        }
    };

    planner.phase = RunPhase::Synthesizing;
    let table = deps.store.table_state(&table_id)?;
    let (answer, low_confidence) = synthesize(&table, spec, deps.provider.as_deref());
    planner.phase = RunPhase::Finished;

    let usage = Usage {
        planner_steps: steps,
        sub_agent_runs: reports.len() as u64,
        tool_calls: reports.iter().map(|r| r.steps_used).sum(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunResult {
        answer,
        table_id,
        trace: RunTrace {
            planner,
            reports,
            stop,
            low_confidence,
        },
        usage,
    })
}

fn evidence_of(record: &Record) -> Vec<String> {
    let mut urls = Vec::new();
    for cell in record.cells.values() {
        if let CellValue::Filled {
            source_url: Some(url),
            ..
        } = cell
        {
            if !urls.iter().any(|u| u == url) {
                urls.push(url.clone());
            }
        }
    }
    urls
}

fn deep_answer_for(record: &Record) -> Answer {
    Answer::Deep(DeepAnswer {
        entity: Some(record.key.clone()),
        evidence_urls: evidence_of(record),
    })
}

/// One judging call per surviving row; any provider failure keeps the row.
fn judge_survivors<'a>(
    survivors: Vec<&'a Record>,
    table: &TableState,
    spec: &TaskSpec,
    provider: &dyn ChatProvider,
) -> Vec<&'a Record> {
    let mut kept = Vec::new();
    for record in survivors {
        let row = TableState {
            table_id: table.table_id.clone(),
            schema: table.schema.clone(),
            records: vec![record.clone()],
            revision: table.revision,
        };
        let messages = vec![
            Message::system(
                "Judge whether the candidate row satisfies every constraint of the query. \
                 Reply \"yes\" or \"no\".",
            ),
            Message::user(format!(
                "Query: {}\nCandidate:\n{}",
                spec.query,
                render_markdown(&row, 1)
            )),
        ];
        match provider.complete(&messages, &[]) {
            Ok(AssistantTurn::Text(text)) => {
                if text.trim().to_lowercase().starts_with("yes") {
                    kept.push(record);
                }
            }
            _ => kept.push(record),
        }
    }
    kept
}

fn export_rows(table: &TableState) -> Vec<BTreeMap<String, String>> {
    table
        .records
        .iter()
        .map(|record| {
            table
                .schema
                .columns
                .iter()
                .map(|col| {
                    let value = match record.field(&col.name) {
                        Some(FieldRef::Key(v)) => v.to_string(),
                        Some(FieldRef::Cell(cell)) => cell.render().to_string(),
                        None => String::new(),
                    };
                    (col.name.clone(), value)
                })
                .collect()
        })
        .collect()
}

/// Synthesizes the final answer from whatever table exists.
///
/// Deep mode filters rows whose every constraint cell is filled and
/// satisfying: a unique survivor is the answer; several or none fall back to
/// the best-covered row with the low-confidence flag; an empty table answers
/// unknown. Wide and deep-wide export the whole table.
pub fn synthesize(
    table: &TableState,
    spec: &TaskSpec,
    provider: Option<&dyn ChatProvider>,
) -> (Answer, bool) {
    match spec.mode {
        TaskMode::Wide | TaskMode::DeepWide => (
            Answer::Table(TableAnswer {
                markdown: render_markdown(table, table.records.len().max(1)),
                rows: export_rows(table),
            }),
            false,
        ),
        TaskMode::Deep => {
            if table.records.is_empty() {
                return (
                    Answer::Deep(DeepAnswer {
                        entity: None,
                        evidence_urls: Vec::new(),
                    }),
                    false,
                );
            }
            let mut survivors: Vec<&Record> = table
                .records
                .iter()
                .filter(|r| record_verified(r, &table.schema))
                .collect();
            if let Some(provider) = provider {
                survivors = judge_survivors(survivors, table, spec, provider);
            }
            if survivors.len() == 1 {
                return (deep_answer_for(survivors[0]), false);
            }
            // Ambiguous: answer with the best-covered row (earliest on ties)
            // rather than refuse.
            let coverage = |record: &Record| {
                table
                    .schema
                    .constraint_columns()
                    .filter(|col| match record.cells.get(&col.name) {
                        Some(CellValue::Filled { value, .. }) => {
                            crate::agents::constraint_satisfied(value, &col.description)
                        }
                        _ => false,
                    })
                    .count()
            };
            let best = table
                .records
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| coverage(a).cmp(&coverage(b)).then(ib.cmp(ia)))
                .map(|(_, record)| record)
                .expect("non-empty table");
            (deep_answer_for(best), true)
        }
    }
}
