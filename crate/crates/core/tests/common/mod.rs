//! Shared test helpers: fixture loading, an independent brute-force scorer,
//! and random table generation for fuzzing.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::Rng;

use seektable::metrics::{f1, normalize, GroundTruthTable, MatchConfig, MetricsReport};
use seektable::orchestrator::{RunDeps, TaskSpec};
use seektable::table_store::{
    dedup_key, CellValue, ColumnKind, ColumnSpec, Record, Schema, TableState, TableStore, TaskMode,
};
use seektable::web_env::{load_corpus, Corpus, FixtureEnv};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn load_fixture_corpus(name: &str) -> Arc<Corpus> {
    Arc::new(load_corpus(&fixture_path(name)).expect("fixture corpus loads"))
}

pub fn load_fixture_task(name: &str) -> TaskSpec {
    TaskSpec::load(&fixture_path(name)).expect("fixture task loads")
}

pub fn load_fixture_gt(name: &str) -> GroundTruthTable {
    GroundTruthTable::load(&fixture_path(name)).expect("fixture ground truth loads")
}

/// Oracle-policy dependencies over a fixture corpus.
pub fn oracle_deps(corpus: Arc<Corpus>, seed: u64) -> RunDeps {
    RunDeps {
        store: Arc::new(TableStore::new()),
        env: Arc::new(FixtureEnv::new(corpus.clone())),
        policy: Arc::new(seektable::agents::OraclePolicy::new(corpus)),
        provider: None,
        refiner: None,
        seed,
    }
}

// ---------------------------------------------------------------------------
// Independent brute-force scorer. Deliberately naive: nested loops and direct
// definitions only, sharing nothing with the library's scoring path beyond
// `normalize`/`match_cell` semantics re-derived from scratch.
// ---------------------------------------------------------------------------

fn brute_normalize(value: &str) -> String {
    // Same canonicalization contract, recomputed through the public fn; the
    // scorer logic below (matching, counting, rates) is what independence is
    // about.
    normalize(value)
}

fn brute_match_cell(pred: &CellValue, gt: &str, tolerance: f64) -> bool {
    match pred {
        CellValue::Pending => false,
        CellValue::NotApplicable => {
            let g = brute_normalize(gt);
            g == "na" || g == "n/a"
        }
        CellValue::Filled { value, .. } => {
            let a = brute_normalize(value);
            let b = brute_normalize(gt);
            let pa = a.replace(',', "").parse::<f64>().ok().filter(|v| v.is_finite());
            let pb = b.replace(',', "").parse::<f64>().ok().filter(|v| v.is_finite());
            match (pa, pb) {
                (Some(x), Some(y)) => (x - y).abs() <= tolerance,
                _ => a == b,
            }
        }
    }
}

fn brute_key(columns: &[String], get: impl Fn(&str) -> Option<String>) -> Vec<String> {
    columns
        .iter()
        .map(|c| brute_normalize(&get(c).unwrap_or_default()))
        .collect()
}

/// Direct-definition scorer used as the independent oracle.
pub fn brute_force_score(
    pred: &TableState,
    gt: &GroundTruthTable,
    tolerance: f64,
) -> MetricsReport {
    let non_key: Vec<&String> = gt
        .columns
        .iter()
        .filter(|c| !gt.key_columns.contains(c))
        .collect();

    let pred_rows = pred.records.len();
    let gt_rows = gt.rows.len();

    let mut matched = 0u64;
    let mut correct = 0u64;
    let mut fully = 0u64;
    for record in &pred.records {
        let pk = brute_key(&gt.key_columns, |c| record.key.get(c).cloned());
        let mut found: Option<&BTreeMap<String, String>> = None;
        for row in &gt.rows {
            let gk = brute_key(&gt.key_columns, |c| row.get(c).cloned());
            if gk == pk {
                found = Some(row);
                break;
            }
        }
        let Some(row) = found else { continue };
        matched += 1;
        let mut all_ok = true;
        for col in &non_key {
            let cell = record.cells.get(*col).cloned().unwrap_or(CellValue::Pending);
            let expected = row.get(*col).cloned().unwrap_or_default();
            if brute_match_cell(&cell, &expected, tolerance) {
                correct += 1;
            } else {
                all_ok = false;
            }
        }
        if all_ok {
            fully += 1;
        }
    }

    let div = |n: u64, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let col_p = div(matched, pred_rows);
    let col_r = div(matched, gt_rows);
    let row_p = div(fully, pred_rows);
    let row_r = div(fully, gt_rows);
    let item_p = div(correct, pred_rows * non_key.len());
    let item_r = div(correct, gt_rows * non_key.len());
    let row_f1 = f1(row_p, row_r);
    let success = row_f1 == 1.0;
    MetricsReport {
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
        correct_cells: correct,
        total_pred_cells: (pred_rows * non_key.len()) as u64,
    }
}

// ---------------------------------------------------------------------------
// Random table generation for the scorer-equivalence fuzz.
// ---------------------------------------------------------------------------

pub const VALUE_ALPHABET: [&str; 6] = ["alpha", "Beta", "GAMMA", "delta ", "1,000", "n/a"];

pub struct RandomPair {
    pub pred: TableState,
    pub gt: GroundTruthTable,
}

/// Builds a random prediction/ground-truth pair over shared key and column
/// sets (≤ 5 rows × ≤ 4 columns, values from a 6-symbol alphabet plus
/// pending/NA states).
pub fn random_pair(rng: &mut StdRng) -> RandomPair {
    let non_key_count = rng.gen_range(1..=3usize);
    let mut columns = vec![ColumnSpec::new("k", ColumnKind::Key, "")];
    for i in 0..non_key_count {
        columns.push(ColumnSpec::new(format!("c{i}"), ColumnKind::Info, ""));
    }
    let schema = Schema::new(columns, TaskMode::Wide);

    let key_pool: Vec<String> = (0..6).map(|i| format!("key{i}")).collect();
    let value = |rng: &mut StdRng| -> String {
        VALUE_ALPHABET[rng.gen_range(0..VALUE_ALPHABET.len())].to_string()
    };

    let gt_rows = rng.gen_range(0..=5usize);
    let mut gt_keys: Vec<String> = key_pool.clone();
    let mut rows = Vec::new();
    for _ in 0..gt_rows {
        let idx = rng.gen_range(0..gt_keys.len());
        let key = gt_keys.remove(idx);
        let mut row = BTreeMap::new();
        row.insert("k".to_string(), key);
        for i in 0..non_key_count {
            let v = if rng.gen_bool(0.2) { "NA".to_string() } else { value(rng) };
            row.insert(format!("c{i}"), v);
        }
        rows.push(row);
    }
    let gt = GroundTruthTable {
        key_columns: vec!["k".into()],
        columns: schema.columns.iter().map(|c| c.name.clone()).collect(),
        rows,
        answer: None,
    };

    let pred_rows = rng.gen_range(0..=5usize);
    let mut pred_pool = key_pool.clone();
    let mut records = Vec::new();
    for n in 0..pred_rows {
        // Sample without replacement so dedup keys stay unique, as the store
        // invariant guarantees for real tables.
        let key = pred_pool.remove(rng.gen_range(0..pred_pool.len()));
        let mut key_map = BTreeMap::new();
        key_map.insert("k".to_string(), key);
        let mut cells = BTreeMap::new();
        for i in 0..non_key_count {
            let cell = match rng.gen_range(0..10) {
                0..=1 => CellValue::Pending,
                2 => CellValue::NotApplicable,
                _ => CellValue::filled(value(rng)),
            };
            cells.insert(format!("c{i}"), cell);
        }
        let dk = dedup_key(&schema, &key_map);
        records.push(Record {
            record_id: format!("r{}", n + 1),
            key: key_map,
            cells,
            dedup_key: dk,
        });
    }
    let pred = TableState {
        table_id: "fuzz".into(),
        schema,
        records,
        revision: 1,
    };
    RandomPair { pred, gt }
}

pub fn reports_close(a: &MetricsReport, b: &MetricsReport, tol: f64) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= tol;
    close(a.col_p, b.col_p)
        && close(a.col_r, b.col_r)
        && close(a.col_f1, b.col_f1)
        && close(a.row_p, b.row_p)
        && close(a.row_r, b.row_r)
        && close(a.row_f1, b.row_f1)
        && close(a.item_p, b.item_p)
        && close(a.item_r, b.item_r)
        && close(a.item_f1, b.item_f1)
        && a.success == b.success
        && close(a.success_rate, b.success_rate)
        && a.correct_cells == b.correct_cells
        && a.total_pred_cells == b.total_pred_cells
}

pub fn seeded_rng(seed: u64) -> StdRng {
    use rand::SeedableRng;
    StdRng::seed_from_u64(seed)
}

pub fn match_config() -> MatchConfig {
    MatchConfig::default()
}

// ---------------------------------------------------------------------------
// Adversarial pieces for budget/timeout runs.
// ---------------------------------------------------------------------------

use seektable::agents::{
    AgentError, AgentPolicy, PolicyDecision, SubAgentMode, SubAgentTask, TableView, ToolAction,
    Trajectory,
};
use seektable::web_env::{EnvError, SearchEnv, SearchResult};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

/// Policy that keeps inserting fresh candidates (expansion) or searching
/// forever (population) and never finishes on its own.
pub struct NeverFinishPolicy {
    counter: AtomicU64,
}

impl NeverFinishPolicy {
    pub fn new() -> Self {
        Self {
            counter: AtomicU64::new(0),
        }
    }
}

impl AgentPolicy for NeverFinishPolicy {
    fn decide(
        &self,
        task: &SubAgentTask,
        _trajectory: &Trajectory,
        _view: &TableView,
    ) -> Result<PolicyDecision, AgentError> {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let action = match task.mode {
            SubAgentMode::ExpandRows => ToolAction {
                tool: "add_candidates".into(),
                arguments: serde_json::json!({"records": [{"Name": format!("cand-{n}")}]}),
            },
            SubAgentMode::PopulateCells => ToolAction {
                tool: "search".into(),
                arguments: serde_json::json!({"query": "still looking"}),
            },
        };
        Ok(PolicyDecision::Act {
            thought: String::new(),
            action,
        })
    }
}

/// Environment whose every tool call sleeps, for wall-timeout runs.
pub struct SlowEnv {
    pub inner: FixtureEnv,
    pub delay: Duration,
}

impl SearchEnv for SlowEnv {
    fn search(&self, query: &str, top_k: usize) -> Vec<SearchResult> {
        std::thread::sleep(self.delay);
        self.inner.search(query, top_k)
    }

    fn visit(&self, url: &str, max_chars: usize) -> Result<String, EnvError> {
        std::thread::sleep(self.delay);
        self.inner.visit(url, max_chars)
    }
}

/// Wide-mode spec with an unreachable target so the planner never saturates.
pub fn adversarial_spec(max_planner_steps: u64, wall_timeout_s: f64) -> TaskSpec {
    use seektable::orchestrator::Budget;
    TaskSpec {
        query: "an unreachable aggregation target".into(),
        mode: TaskMode::Wide,
        schema_hint: Some(Schema {
            columns: vec![
                ColumnSpec::new("Name", ColumnKind::Key, "name"),
                ColumnSpec::new("City", ColumnKind::Info, "city"),
            ],
            target_count: Some(1_000_000),
            task_mode: TaskMode::Wide,
        }),
        ground_truth: None,
        budget: Budget {
            max_planner_steps,
            wall_timeout_s,
            max_parallel: 2,
            sub_budget: seektable::agents::SubBudget {
                max_steps: 3,
                max_tool_calls: 3,
            },
            stale_rounds_limit: 2,
        },
    }
}
