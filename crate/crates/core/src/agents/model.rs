//! Model-backed policy: renders the task, table view and trajectory into a
//! conversation, asks the provider for one turn, and maps it to a decision.

use std::sync::Arc;

use super::{
    compact_trajectory, tool_defs, AgentError, AgentPolicy, PolicyDecision, SubAgentMode,
    SubAgentTask, TableView, ToolAction, Trajectory,
};
use crate::llm_provider::{
    count_tokens_approx, AssistantTurn, ChatProvider, Message, ProviderError,
};
use crate::table_store::{render_markdown, TableState};

const EXPAND_PROMPT: &str = "You are a search sub-agent in row-expansion mode. \
Discover candidate entities that satisfy the instruction, verify them against \
the schema's constraint columns, then insert them with the add_candidates tool. \
Reply with plain text when you are done.";

const POPULATE_PROMPT: &str = "You are a search sub-agent in cell-population mode. \
Find the missing attributes of the single record you own and write them with the \
fill_cells tool, citing a source_url. Use \"NA\" for values that cannot exist. \
Reply with plain text when you are done.";

pub struct ModelPolicy {
    provider: Arc<dyn ChatProvider>,
}

impl ModelPolicy {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Self { provider }
    }

    fn render(&self, task: &SubAgentTask, trajectory: &Trajectory, view: &TableView) -> Vec<Message> {
        let system = match task.mode {
            SubAgentMode::ExpandRows => EXPAND_PROMPT,
            SubAgentMode::PopulateCells => POPULATE_PROMPT,
        };
        let table = TableState {
            table_id: task.table_id.clone(),
            schema: view.schema.clone(),
            records: view.records.clone(),
            revision: view.revision,
        };
        let mut user = format!(
            "Instruction: {}\n\nVisible table (revision {}):\n{}",
            task.instruction,
            view.revision,
            render_markdown(&table, 50)
        );
        if !task.target_columns.is_empty() {
            user.push_str(&format!("\nTarget columns: {}", task.target_columns.join(", ")));
        }
        let mut messages = vec![Message::system(system), Message::user(user)];
        messages.extend(super::trajectory_messages(trajectory));
        messages
    }

    fn one_turn(
        &self,
        messages: &[Message],
        task: &SubAgentTask,
    ) -> Result<AssistantTurn, ProviderError> {
        self.provider.complete(messages, &tool_defs(task.mode))
    }
}

impl AgentPolicy for ModelPolicy {
    fn decide(
        &self,
        task: &SubAgentTask,
        trajectory: &Trajectory,
        view: &TableView,
    ) -> Result<PolicyDecision, AgentError> {
        let max = self.provider.max_context_tokens();
        let mut messages = self.render(task, trajectory, view);
        if count_tokens_approx(&messages) > max {
            // Keep the newest observations; elide history until it fits.
            let compacted = compact_trajectory(trajectory, max.saturating_mul(3) / 4)?;
            messages = self.render(task, &compacted, view);
        }

        let turn = match self.one_turn(&messages, task) {
            Ok(turn) => turn,
            Err(ProviderError::MalformedToolCall(reason)) => {
                // One repair attempt, then the failure is the caller's problem.
                let mut repaired = messages.clone();
                repaired.push(Message::user(format!(
                    "The previous tool call was invalid ({reason}). \
                     Reply with exactly one valid tool call, or plain text to finish."
                )));
                self.one_turn(&repaired, task).map_err(|e| {
                    AgentError::PolicyFailure(format!("malformed tool call after repair: {e}"))
                })?
            }
            Err(other) => return Err(AgentError::PolicyFailure(other.to_string())),
        };

        match turn {
            AssistantTurn::Text(_) => Ok(PolicyDecision::Finish),
            AssistantTurn::ToolCalls(calls) => {
                let call = calls.into_iter().next().expect("validated non-empty");
                Ok(PolicyDecision::Act {
                    thought: String::new(),
                    action: ToolAction {
                        tool: call.name,
                        arguments: call.arguments,
                    },
                })
            }
        }
    }
}
