//! Deterministic scripted provider: replays a transcript of assistant turns
//! keyed by (conversation hash, step index).

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    check_context, check_tools, conversation_hash, validate_turn, AssistantTurn, ChatProvider,
    Message, ProviderError, ToolDef,
};

/// Transcript entries may use this in place of a concrete conversation hash
/// to match any conversation at their step. Hand-authored fixtures use it;
/// drift-sensitive tests pin the exact hash via [`conversation_hash`].
pub const WILDCARD_CONV_HASH: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptKey {
    pub conv_hash: String,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: TranscriptKey,
    pub turn: AssistantTurn,
}

struct ScriptState {
    consumed: Vec<bool>,
    step: u64,
}

/// Replays transcript turns in order. `complete` calls are serialized
/// internally so concurrent callers still consume entries exactly once.
pub struct ScriptedProvider {
    entries: Vec<TranscriptEntry>,
    state: Mutex<ScriptState>,
    max_context_tokens: u64,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<TranscriptEntry>, max_context_tokens: u64) -> Self {
        let consumed = vec![false; entries.len()];
        Self {
            entries,
            state: Mutex::new(ScriptState { consumed, step: 0 }),
            max_context_tokens,
        }
    }

    /// Loads a transcript file: a JSON list of `{key: {conv_hash, step}, turn}`.
    pub fn from_file(path: &Path, max_context_tokens: u64) -> Result<Self, ProviderError> {
        let bytes = std::fs::read(path)?;
        let entries: Vec<TranscriptEntry> = serde_json::from_slice(&bytes)
            .map_err(|e| ProviderError::Config(format!("transcript parse: {e}")))?;
        Ok(Self::new(entries, max_context_tokens))
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().expect("script lock");
        state.consumed.iter().filter(|c| !**c).count()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(
        &self,
        messages: &[Message],
        tools: &[ToolDef],
    ) -> Result<AssistantTurn, ProviderError> {
        check_context(messages, self.max_context_tokens)?;
        check_tools(tools)?;
        let hash = conversation_hash(messages);
        let mut state = self.state.lock().expect("script lock");
        let step = state.step;

        let mut step_seen = false;
        let mut found = None;
        for (idx, entry) in self.entries.iter().enumerate() {
            if state.consumed[idx] || entry.key.step != step {
                continue;
            }
            step_seen = true;
            if entry.key.conv_hash == WILDCARD_CONV_HASH || entry.key.conv_hash == hash {
                found = Some(idx);
                break;
            }
        }
        let Some(idx) = found else {
            return Err(if step_seen {
                ProviderError::TranscriptKeyMismatch { step, conv_hash: hash }
            } else {
                ProviderError::TranscriptExhausted { step }
            });
        };
        state.consumed[idx] = true;
        state.step += 1;
        drop(state);

        let turn = self.entries[idx].turn.clone();
        validate_turn(&turn, tools)?;
        Ok(turn)
    }

    fn max_context_tokens(&self) -> u64 {
        self.max_context_tokens
    }
}
