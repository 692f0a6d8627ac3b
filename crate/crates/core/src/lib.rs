//! Long-horizon information seeking as table completion.
//!
//! A planner agent maintains a schema'd table in an embedded document store,
//! dispatches parallel sub-agents to expand rows (candidate discovery) and
//! populate cells (attribute collection), then synthesizes an answer from the
//! filled table. Everything runs offline against deterministic fixture
//! backends; remote adapters slot in behind the same interfaces.
//!
//! Module map:
//! - [`table_store`]: embedded document table with a mongo-style filter/update
//!   mini-language, six atomic primitives, snapshot persistence.
//! - [`llm_provider`]: chat-completion interface with tool calling, backed by a
//!   remote endpoint or a deterministic scripted transcript.
//! - [`web_env`]: the two standard tools (search + webpage visit) over a fixture
//!   corpus, plus a remote adapter slot.
//! - [`agents`]: bounded ReAct sub-agent loop in row-expansion or
//!   cell-population mode, with a deterministic oracle policy for offline runs.
//! - [`orchestrator`]: the planner loop — schema construction, strategy
//!   formulation, parallel dispatch, saturation detection, answer synthesis.
//! - [`metrics`]: scoring (column/row/item F1, success rate, Num@k, Avg/Max@k,
//!   Pass@N, difficulty bucketing).

pub mod agents;
pub mod llm_provider;
pub mod metrics;
pub mod orchestrator;
pub mod table_store;
pub mod web_env;
