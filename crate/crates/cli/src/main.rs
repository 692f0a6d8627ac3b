//! Operator surface: run a task against a corpus, score predictions against
//! ground truth, render table snapshots, validate corpora.
//!
//! Exit codes: 0 when an answer/score/rendering was produced (even partial),
//! 2 on hard errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use seektable::agents::{AgentPolicy, ModelPolicy, OraclePolicy};
use seektable::llm_provider::{provider_from_config, ChatProvider, ProviderConfig};
use seektable::metrics::{
    aggregate, num_at_k, pass_at_n, score_table, AggregateMode, GroundTruthTable, MatchConfig,
    MetricsReport,
};
use seektable::orchestrator::{run_task, Answer, RunDeps, RunResult, TaskSpec};
use seektable::table_store::{
    eval_filter, load_snapshot_state, render_markdown, FilterQuery, TableStore,
};
use seektable::web_env::{load_corpus, FixtureEnv};

#[derive(Parser)]
#[command(
    name = "seektable",
    about = "Table-structured planning engine for long-horizon information seeking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a task spec and emit the run artifacts.
    Run(RunArgs),
    /// Score a predicted table snapshot against a ground-truth table.
    Score(ScoreArgs),
    /// Render a table snapshot as markdown.
    Show(ShowArgs),
    /// Check that a corpus file loads and satisfies its invariants.
    CorpusValidate(CorpusArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Oracle,
    Model,
}

#[derive(Args)]
struct RunArgs {
    /// Task spec file (JSON).
    taskspec: PathBuf,
    /// Fixture corpus file backing the search/visit tools.
    #[arg(long)]
    corpus: PathBuf,
    /// Provider config file (required for --policy model or model-based
    /// schema construction).
    #[arg(long)]
    provider: Option<PathBuf>,
    /// Sub-agent decision policy.
    #[arg(long, value_enum, default_value = "oracle")]
    policy: PolicyKind,
    /// Directory receiving answer.json, table.snapshot, trace.json, usage.json.
    #[arg(long, short, default_value = "out")]
    output: PathBuf,
    /// Seed for query diversification.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the task's max_planner_steps budget.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Print planner progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Predicted table snapshot, or (with --trials) ignored.
    pred: PathBuf,
    /// Ground-truth table file (JSON).
    gt: PathBuf,
    /// Directory of trial subdirectories (each with a table.snapshot);
    /// computes Avg@k, Max@k, Num@k and Pass@N across them.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Numeric comparison tolerance.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    /// Write the JSON report to this file (otherwise it is printed).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ShowArgs {
    /// Table snapshot file.
    snapshot: PathBuf,
    /// Maximum number of rows to render.
    #[arg(long, default_value_t = 50)]
    limit: usize,
    /// Show only rows with at least one pending non-key cell.
    #[arg(long)]
    pending_only: bool,
}

#[derive(Args)]
struct CorpusArgs {
    corpus: PathBuf,
}

fn load_provider(path: &Path) -> Result<Arc<dyn ChatProvider>> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read provider config {}", path.display()))?;
    let mut config: ProviderConfig = serde_json::from_slice(&bytes)
        .with_context(|| format!("cannot parse provider config {}", path.display()))?;
    // Relative transcript paths resolve against the config file's directory.
    if let Some(transcript) = &config.transcript_path {
        if transcript.is_relative() {
            if let Some(parent) = path.parent() {
                config.transcript_path = Some(parent.join(transcript));
            }
        }
    }
    provider_from_config(&config)
        .with_context(|| format!("cannot build provider from {}", path.display()))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut spec = TaskSpec::load(&args.taskspec)
        .with_context(|| format!("cannot load task spec {}", args.taskspec.display()))?;
    if let Some(max_steps) = args.max_steps {
        spec.budget.max_planner_steps = max_steps;
    }
    let corpus = Arc::new(
        load_corpus(&args.corpus)
            .with_context(|| format!("cannot load corpus {}", args.corpus.display()))?,
    );
    let provider = match &args.provider {
        Some(path) => Some(load_provider(path)?),
        None => None,
    };
    let policy: Arc<dyn AgentPolicy> = match args.policy {
        PolicyKind::Oracle => Arc::new(OraclePolicy::new(corpus.clone())),
        PolicyKind::Model => {
            let provider = provider
                .clone()
                .context("--policy model requires --provider")?;
            Arc::new(ModelPolicy::new(provider))
        }
    };
    let deps = RunDeps {
        store: Arc::new(TableStore::new()),
        env: Arc::new(FixtureEnv::new(corpus)),
        policy,
        provider,
        refiner: None,
        seed: args.seed,
    };

    let result = run_task(&spec, &deps).context("run failed")?;
    if args.verbose {
        for entry in &result.trace.planner.history {
            eprintln!(
                "step {}: {} (rows +{}, fills +{}, revision {})",
                entry.step,
                entry.plan_summary,
                entry.new_rows,
                entry.new_fills,
                entry.table_revision_after
            );
        }
        eprintln!("stop: {:?}", result.trace.stop);
    }
    write_run_artifacts(&args.output, &deps, &result)?;
    println!(
        "answer written to {} (planner steps {}, sub-agents {}, tool calls {}, stop {:?})",
        args.output.display(),
        result.usage.planner_steps,
        result.usage.sub_agent_runs,
        result.usage.tool_calls,
        result.trace.stop,
    );
    Ok(())
}

fn write_run_artifacts(output: &Path, deps: &RunDeps, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(output)
        .with_context(|| format!("cannot create output dir {}", output.display()))?;
    let snapshot_path = output.join("table.snapshot");
    deps.store
        .snapshot(&result.table_id, &snapshot_path)
        .context("cannot write table snapshot")?;
    let write_json = |name: &str, value: serde_json::Value| -> Result<()> {
        let path = output.join(name);
        std::fs::write(&path, serde_json::to_vec_pretty(&value)?)
            .with_context(|| format!("cannot write {}", path.display()))
    };
    write_json("answer.json", serde_json::to_value(&result.answer)?)?;
    write_json("trace.json", serde_json::to_value(&result.trace)?)?;
    let mut usage = serde_json::to_value(result.usage)?;
    usage["table_snapshot_path"] = serde_json::Value::String(snapshot_path.display().to_string());
    write_json("usage.json", usage)?;
    Ok(())
}

fn print_report(label: &str, report: &MetricsReport) {
    println!("{label}");
    println!(
        "  column   P {:>8.4}  R {:>8.4}  F1 {:>8.4}",
        report.col_p, report.col_r, report.col_f1
    );
    println!(
        "  row      P {:>8.4}  R {:>8.4}  F1 {:>8.4}",
        report.row_p, report.row_r, report.row_f1
    );
    println!(
        "  item     P {:>8.4}  R {:>8.4}  F1 {:>8.4}",
        report.item_p, report.item_r, report.item_f1
    );
    println!(
        "  success  {}  (rate {:.4})",
        report.success, report.success_rate
    );
    println!(
        "  correct cells {} / {}",
        report.correct_cells, report.total_pred_cells
    );
}

fn trial_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("cannot read trials dir {}", root.display()))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|path| path.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no trial subdirectories under {}", root.display());
    }
    Ok(dirs)
}

fn deep_answer_text(dir: &Path) -> Option<String> {
    let bytes = std::fs::read(dir.join("answer.json")).ok()?;
    let answer: Answer = serde_json::from_slice(&bytes).ok()?;
    match answer {
        Answer::Deep(deep) => {
            let entity = deep.entity?;
            Some(entity.values().cloned().collect::<Vec<_>>().join(" "))
        }
        Answer::Table(_) => None,
    }
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    if args.tolerance < 0.0 {
        bail!("--tolerance must be non-negative");
    }
    let gt = GroundTruthTable::load(&args.gt)
        .with_context(|| format!("cannot load ground truth {}", args.gt.display()))?;
    let config = MatchConfig::with_tolerance(args.tolerance);

    let report_json = if let Some(trials_root) = &args.trials {
        let dirs = trial_dirs(trials_root)?;
        let mut reports = Vec::new();
        let mut answers = Vec::new();
        for dir in &dirs {
            let snapshot = dir.join("table.snapshot");
            let pred = load_snapshot_state(&snapshot)
                .with_context(|| format!("cannot load snapshot {}", snapshot.display()))?;
            let report = score_table(&pred, &gt, &config)?;
            print_report(&format!("trial {}", dir.display()), &report);
            reports.push(report);
            if let Some(answer) = deep_answer_text(dir) {
                answers.push(answer);
            }
        }
        let avg = aggregate(&reports, AggregateMode::Avg)?;
        let max = aggregate(&reports, AggregateMode::Max)?;
        let num = num_at_k(&reports)?;
        print_report(&format!("Avg@{}", reports.len()), &avg);
        print_report(&format!("Max@{}", reports.len()), &max);
        println!("Num@{} {}", reports.len(), num);
        let pass = match (&gt.answer, answers.is_empty()) {
            (Some(expected), false) => {
                let refs: Vec<&str> = answers.iter().map(String::as_str).collect();
                let pass = pass_at_n(&refs, expected, &config)?;
                println!("Pass@{} {}", answers.len(), pass);
                Some(pass)
            }
            _ => None,
        };
        serde_json::json!({
            "trials": reports,
            "avg": avg,
            "max": max,
            "num_at_k": num,
            "pass_at_n": pass,
        })
    } else {
        let pred = load_snapshot_state(&args.pred)
            .with_context(|| format!("cannot load snapshot {}", args.pred.display()))?;
        let report = score_table(&pred, &gt, &config)?;
        print_report("score", &report);
        serde_json::to_value(&report)?
    };

    match &args.output {
        Some(path) => {
            std::fs::write(path, serde_json::to_vec_pretty(&report_json)?)
                .with_context(|| format!("cannot write report {}", path.display()))?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report_json)?),
    }
    Ok(())
}

fn cmd_show(args: &ShowArgs) -> Result<()> {
    let mut state = load_snapshot_state(&args.snapshot)
        .with_context(|| format!("cannot load snapshot {}", args.snapshot.display()))?;
    if args.pending_only {
        let clauses: Vec<serde_json::Value> = state
            .schema
            .non_key_columns()
            .map(|col| serde_json::json!({ col.name.clone(): {"$exists": false} }))
            .collect();
        let filter = FilterQuery::parse(&serde_json::json!({ "$or": clauses }))?;
        state
            .records
            .retain(|record| eval_filter(&filter, record).unwrap_or(false));
    }
    print!("{}", render_markdown(&state, args.limit));
    Ok(())
}

fn cmd_corpus_validate(args: &CorpusArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)
        .with_context(|| format!("invalid corpus {}", args.corpus.display()))?;
    println!(
        "ok: {} documents, max_doc_chars {}",
        corpus.len(),
        corpus.max_doc_chars
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Score(args) => cmd_score(args),
        Command::Show(args) => cmd_show(args),
        Command::CorpusValidate(args) => cmd_corpus_validate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(2)
        }
    }
}
