use super::{Message, Role};

/// Maps text to an estimated token count. Must be deterministic.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`: a tokenizer-free approximation.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTokens;

impl TokenEstimator for HeuristicTokens {
    fn estimate(&self, text: &str) -> usize {
        estimate_tokens(text)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub fn conversation_tokens(messages: &[Message], tokens: &dyn TokenEstimator) -> usize {
    messages.iter().map(|m| tokens.estimate(&m.content)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truncated {
    pub messages: Vec<Message>,
    /// The mandatory head alone is over budget.
    pub overflow: bool,
    pub dropped: usize,
}

/// Length of the mandatory head: leading system messages plus the first
/// user (task) message.
fn head_len(messages: &[Message]) -> usize {
    let mut i = 0;
    while i < messages.len() && messages[i].role == Role::System {
        i += 1;
    }
    if i < messages.len() && messages[i].role == Role::User {
        i += 1;
    }
    i
}

/// Keeps the head and then the longest suffix of whole messages that fits
/// in `budget` estimated tokens.
pub fn truncate_to_budget(
    messages: &[Message],
    budget: usize,
    tokens: &dyn TokenEstimator,
) -> Truncated {
    let head = head_len(messages);
    let head_cost = conversation_tokens(&messages[..head], tokens);
    if head_cost > budget {
        return Truncated {
            messages: messages[..head].to_vec(),
            overflow: true,
            dropped: messages.len() - head,
        };
    }

    let mut remaining = budget - head_cost;
    let mut start = messages.len();
    while start > head {
        let cost = tokens.estimate(&messages[start - 1].content);
        if cost > remaining {
            break;
        }
        remaining -= cost;
        start -= 1;
    }

    let mut kept = messages[..head].to_vec();
    kept.extend_from_slice(&messages[start..]);
    Truncated { messages: kept, overflow: false, dropped: start - head }
}
