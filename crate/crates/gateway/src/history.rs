//! Conversation history truncation.

use verde_core::chat::{Message, Role};
use verde_core::metering::count_tokens;

pub const DEFAULT_HISTORY_BUDGET: u64 = 3072;

/// Keeps the newest whole non-system turns whose cumulative token count fits
/// `token_budget`, plus every system message. The newest turn is always kept.
/// Original order is preserved.
pub fn truncate_history(turns: &[Message], token_budget: u64) -> Vec<Message> {
    let mut keep = vec![false; turns.len()];
    let mut used: u64 = 0;
    let mut first = true;
    for (i, turn) in turns.iter().enumerate().rev() {
        if turn.role == Role::System {
            continue;
        }
        let cost = count_tokens(&turn.content);
        if first || used.saturating_add(cost) <= token_budget {
            used = used.saturating_add(cost);
            keep[i] = true;
            first = false;
        } else {
            break;
        }
    }
    for (i, turn) in turns.iter().enumerate() {
        if turn.role == Role::System {
            keep[i] = true;
        }
    }
    turns.iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t.clone()).collect()
}
