//! Teaching-assistant prompt assembly for retrieval-augmented chat.

use super::index::RetrievalResult;
use crate::chat::Message;

/// Instruction text of the teaching-assistant prompt, up to and including the
/// `Reference text:` label. The reference block is appended after it.
pub const TEACHING_ASSISTANT_TEMPLATE: &str = include_str!("ta_template.txt");

pub const REFERENCE_OPEN: &str = "<Reference>";
pub const REFERENCE_CLOSE: &str = "</Reference>";
pub const CHUNK_SEPARATOR: &str = "\n---\n";

const ESCAPED_CLOSE: &str = "<\u{2044}Reference>";
const ESCAPED_OPEN: &str = "\u{FF1C}Reference>";

/// Neutralizes reference delimiters inside retrieved text so the block that
/// wraps it stays unambiguous.
pub fn escape_reference(text: &str) -> String {
    text.replace(REFERENCE_CLOSE, ESCAPED_CLOSE)
        .replace(REFERENCE_OPEN, ESCAPED_OPEN)
}

/// `<Reference>` + escaped chunk texts joined by `\n---\n` + `</Reference>`.
pub fn reference_block<'a>(texts: impl IntoIterator<Item = &'a str>) -> String {
    let body = texts
        .into_iter()
        .map(escape_reference)
        .collect::<Vec<_>>()
        .join(CHUNK_SEPARATOR);
    format!("{REFERENCE_OPEN}{body}{REFERENCE_CLOSE}")
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    instructions: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { instructions: TEACHING_ASSISTANT_TEMPLATE.to_string() }
    }
}

impl PromptTemplate {
    /// A course-specific instruction text. The reference block is still
    /// appended after it.
    pub fn with_instructions(instructions: impl Into<String>) -> Self {
        Self { instructions: instructions.into() }
    }

    pub fn instructions(&self) -> &str {
        &self.instructions
    }

    pub fn system_message(&self, results: &[RetrievalResult]) -> String {
        let block = reference_block(results.iter().map(|r| r.chunk.text.as_str()));
        format!("{}{block}", self.instructions)
    }

    /// System prompt with the reference block, then `history` in order, then
    /// `question` as the final user message.
    pub fn assemble(&self, results: &[RetrievalResult], question: &str, history: &[Message]) -> Vec<Message> {
        let mut messages = Vec::with_capacity(history.len() + 2);
        messages.push(Message::system(self.system_message(results)));
        messages.extend(history.iter().cloned());
        messages.push(Message::user(question));
        messages
    }
}

pub fn assemble_prompt(results: &[RetrievalResult], question: &str, history: &[Message]) -> Vec<Message> {
    PromptTemplate::default().assemble(results, question, history)
}
