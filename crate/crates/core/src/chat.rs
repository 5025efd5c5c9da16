//! Chat rendering with per-token loss flags.
//!
//! Layout: `BOS`, then for every message `[role marker, content bytes, END]`,
//! then a final `EOS`. Only assistant content, the `END` closing each
//! assistant turn, and the final `EOS` carry loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{encode, TokenId, Vocab};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChatError {
    #[error("conversation has no assistant turn")]
    NoAssistantTurn,
    #[error("message {index} ({role:?}) has empty content")]
    EmptyContent { index: usize, role: Role },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn marker(self) -> TokenId {
        match self {
            Role::System => Vocab::SYS,
            Role::User => Vocab::USER,
            Role::Assistant => Vocab::ASST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// Ordered role-tagged messages. Roles need not alternate.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conversation {
    pub messages: Vec<Message>,
}

impl Conversation {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages }
    }

    /// Checks the training-data invariants: at least one assistant turn, and
    /// only system messages may be empty.
    pub fn validate(&self) -> Result<(), ChatError> {
        if let Some((index, m)) =
            self.messages.iter().enumerate().find(|(_, m)| m.content.is_empty() && m.role != Role::System)
        {
            return Err(ChatError::EmptyContent { index, role: m.role });
        }
        if !self.messages.iter().any(|m| m.role == Role::Assistant) {
            return Err(ChatError::NoAssistantTurn);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSample {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl RenderedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }
}

fn push_turn(ids: &mut Vec<TokenId>, mask: &mut Vec<bool>, message: &Message) {
    let trained = message.role == Role::Assistant;
    ids.push(message.role.marker());
    mask.push(false);
    let content = encode(message.content.as_bytes());
    mask.extend(std::iter::repeat_n(trained, content.len()));
    ids.extend(content);
    ids.push(Vocab::END);
    mask.push(trained);
}

pub fn render(conv: &Conversation) -> Result<RenderedSample, ChatError> {
    if !conv.messages.iter().any(|m| m.role == Role::Assistant) {
        return Err(ChatError::NoAssistantTurn);
    }
    let mut ids = vec![Vocab::BOS];
    let mut loss_mask = vec![false];
    for message in &conv.messages {
        push_turn(&mut ids, &mut loss_mask, message);
    }
    ids.push(Vocab::EOS);
    loss_mask.push(true);
    Ok(RenderedSample { ids, loss_mask })
}

/// Renders a conversation prefix and opens an assistant turn: the output ends
/// with the `ASST` marker and carries no `EOS`.
pub fn render_prompt(prefix: &[Message]) -> Vec<TokenId> {
    let mut ids = vec![Vocab::BOS];
    let mut scratch = Vec::new();
    for message in prefix {
        push_turn(&mut ids, &mut scratch, message);
    }
    ids.push(Vocab::ASST);
    ids
}

/// Target tokens that close an assistant reply: `encode(reply) ++ [END, EOS]`.
pub fn reply_target(reply: &[u8]) -> Vec<TokenId> {
    let mut ids = encode(reply);
    ids.push(Vocab::END);
    ids.push(Vocab::EOS);
    ids
}
