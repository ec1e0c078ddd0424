//! ReAct protocol: task prompt rendering, conversation assembly along a tree
//! path, and parsing of model turns and `@name[value]` answer labels.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::gateway::Message;
use crate::search::{NodeId, SearchError, SearchNode, SearchTree};

pub const ANSWER_MARKER: &str = "Formatted answer:";
const FENCE: &str = "```";

/// A data-analysis task with its optional ground-truth label string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub question: String,
    #[serde(default)]
    pub constraints: String,
    #[serde(default, alias = "format")]
    pub output_format: String,
    #[serde(default)]
    pub file_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            question: question.into(),
            constraints: String::new(),
            output_format: String::new(),
            file_names: Vec::new(),
            label: None,
            data_dir: None,
        }
    }

    /// Parsed ground truth, if any.
    pub fn expected_labels(&self) -> Option<AnswerLabels> {
        self.label.as_deref().map(AnswerLabels::parse)
    }
}

/// Versioned task-prompt template with `{raw_question}`, `{constraints}`,
/// `{output_format}` and `{file_name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: "react-v1".to_string(),
            text: include_str!("../resources/react_prompt_v1.txt").to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn from_file(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(Self { version, text })
    }

    /// Single-pass substitution, so placeholder-like text inside task fields
    /// is never expanded.
    pub fn render(&self, task: &TaskSpec) -> String {
        let files = if task.file_names.is_empty() {
            "(none)".to_string()
        } else {
            task.file_names.join(", ")
        };
        let mut out = String::with_capacity(self.text.len() + task.question.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            let value = [
                ("{raw_question}", task.question.as_str()),
                ("{constraints}", task.constraints.as_str()),
                ("{output_format}", task.output_format.as_str()),
                ("{file_name}", files.as_str()),
            ]
            .into_iter()
            .find(|(key, _)| tail.starts_with(key));
            match value {
                Some((key, v)) => {
                    out.push_str(v);
                    rest = &tail[key.len()..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        out
    }
}

pub fn render_task_prompt(task: &TaskSpec, template: &PromptTemplate) -> Vec<Message> {
    vec![Message::user(template.render(task))]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnKind {
    Code,
    Answer,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnParse {
    pub kind: TurnKind,
    pub thought: String,
    pub code: Option<String>,
    pub answer_text: Option<String>,
}

impl TurnParse {
    pub fn code(thought: impl Into<String>, code: impl Into<String>) -> Self {
        Self {
            kind: TurnKind::Code,
            thought: thought.into(),
            code: Some(code.into()),
            answer_text: None,
        }
    }

    pub fn answer(thought: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            kind: TurnKind::Answer,
            thought: thought.into(),
            code: None,
            answer_text: Some(answer.into()),
        }
    }

    pub fn malformed(raw: impl Into<String>) -> Self {
        Self { kind: TurnKind::Malformed, thought: raw.into(), code: None, answer_text: None }
    }

    /// Canonical assistant text for this turn.
    pub fn render(&self) -> String {
        match self.kind {
            TurnKind::Code => render_code_turn(&self.thought, self.code.as_deref().unwrap_or("")),
            TurnKind::Answer => {
                render_answer_turn(&self.thought, self.answer_text.as_deref().unwrap_or(""))
            }
            TurnKind::Malformed => self.thought.clone(),
        }
    }
}

pub fn render_code_turn(thought: &str, code: &str) -> String {
    format!("Thought: {thought}\nAction: ```python\n{code}\n```")
}

pub fn render_answer_turn(thought: &str, answer: &str) -> String {
    format!("Thought: {thought}\n{ANSWER_MARKER} {answer}")
}

fn clean_thought(text: &str) -> String {
    let t = text.trim();
    let t = t.strip_prefix("Thought:").unwrap_or(t).trim();
    t.strip_suffix("Action:").unwrap_or(t).trim().to_string()
}

/// Byte offset of the first line whose trimmed start begins with `marker`,
/// plus the offset just past the marker.
fn find_line_marker(text: &str, marker: &str) -> Option<(usize, usize)> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if trimmed.starts_with(marker) {
            let start = offset + (line.len() - trimmed.len());
            return Some((offset, start + marker.len()));
        }
        offset += line.len();
    }
    None
}

/// Parses one model completion.
///
/// A line starting with `Formatted answer:` makes an answer turn and takes
/// precedence over code. Otherwise the first fenced block (any language tag)
/// is the code cell. Anything else, including empty or unclosed blocks, is
/// malformed.
pub fn parse_turn(text: &str) -> TurnParse {
    if let Some((line_start, after)) = find_line_marker(text, ANSWER_MARKER) {
        let answer = text[after..].trim();
        if answer.is_empty() {
            return TurnParse::malformed(text.trim());
        }
        return TurnParse::answer(clean_thought(&text[..line_start]), answer);
    }

    let Some(open) = text.find(FENCE) else {
        return TurnParse::malformed(text.trim());
    };
    let after_open = &text[open + FENCE.len()..];
    let body = match after_open.find('\n') {
        // inline block: ```code```
        Some(nl) if after_open[..nl].contains(FENCE) => {
            let close = after_open.find(FENCE).unwrap_or(0);
            Some(&after_open[..close])
        }
        Some(nl) => {
            let inner = &after_open[nl + 1..];
            inner.find(FENCE).map(|close| &inner[..close])
        }
        None => after_open.find(FENCE).map(|close| &after_open[..close]),
    };
    let code = body.map(|b| b.trim_start_matches(['\n', '\r']).trim_end());
    match code {
        Some(code) if !code.is_empty() => {
            let before = &text[..open];
            let thought_end = before.rfind("Action:").unwrap_or(before.len());
            TurnParse::code(clean_thought(&before[..thought_end]), code)
        }
        _ => TurnParse::malformed(text.trim()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerLabel {
    pub name: String,
    pub raw: String,
}

/// Ordered `name -> raw value` map parsed from `@name[value]` tags.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerLabels {
    entries: Vec<AnswerLabel>,
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == ' ' || c == '_'
}

impl AnswerLabels {
    /// Scans `text` for `@name[value]` tags. Values are delimited by
    /// bracket-depth counting so nested lists survive. A repeated name keeps
    /// its first position and takes the last value. Never fails.
    pub fn parse(text: &str) -> Self {
        let mut labels = Self::default();
        let mut rest = text;
        while let Some(at) = rest.find('@') {
            let after = &rest[at + 1..];
            let name_len: usize = after
                .chars()
                .take_while(|&c| is_name_char(c))
                .map(char::len_utf8)
                .sum();
            let name = after[..name_len].trim();
            let tail = &after[name_len..];
            if name.is_empty() || !tail.starts_with('[') {
                rest = after;
                continue;
            }
            match matching_bracket(tail) {
                Some(close) => {
                    labels.insert(name, &tail[1..close]);
                    rest = &tail[close + 1..];
                }
                None => rest = after,
            }
        }
        labels
    }

    pub fn insert(&mut self, name: &str, raw: &str) {
        let name = name.trim();
        if name.is_empty() {
            return;
        }
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => e.raw = raw.to_string(),
            None => self.entries.push(AnswerLabel { name: name.to_string(), raw: raw.to_string() }),
        }
    }

    /// Union with `other`, whose values win on duplicate names.
    pub fn merge(&mut self, other: &AnswerLabels) {
        for e in &other.entries {
            self.insert(&e.name, &e.raw);
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.raw.as_str())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AnswerLabel> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `@name[raw] @name[raw] ...`
    pub fn to_label_string(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("@{}[{}]", e.name, e.raw))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Index of the `]` closing the `[` at position 0.
fn matching_bracket(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_answer_labels(text: &str) -> AnswerLabels {
    AnswerLabels::parse(text)
}

/// A node's own messages: its assistant turn, followed by the observation
/// when the turn was executed.
pub fn node_messages(node: &SearchNode) -> Vec<Message> {
    let mut msgs = Vec::with_capacity(2);
    let turn = node.turn();
    let mut text = turn.render();
    if text.is_empty() {
        text = "(empty response)".to_string();
    }
    msgs.push(Message::assistant(text));
    if let Some(obs) = &node.observation {
        msgs.push(Message::user(format!("Observation: {obs}")));
    }
    msgs
}

/// Root prompt followed by each step's messages along the root-to-node path.
pub fn assemble_conversation(tree: &SearchTree, node_id: NodeId) -> Result<Vec<Message>, SearchError> {
    let path = tree.path_to(node_id)?;
    let mut msgs = tree.prompt.clone();
    for id in path.into_iter().skip(1) {
        msgs.extend(node_messages(tree.node(id)?));
    }
    Ok(msgs)
}

/// Conversation a freshly parsed candidate would have if attached under
/// `parent_conversation`.
pub fn extend_conversation(
    parent_conversation: &[Message],
    turn: &TurnParse,
    observation: Option<&str>,
) -> Vec<Message> {
    let mut msgs = parent_conversation.to_vec();
    let mut text = turn.render();
    if text.is_empty() {
        text = "(empty response)".to_string();
    }
    msgs.push(Message::assistant(text));
    if let Some(obs) = observation {
        msgs.push(Message::user(format!("Observation: {obs}")));
    }
    msgs
}
