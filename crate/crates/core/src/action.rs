//! The `<name(argument)>` action grammar exchanged between the coordinator and the executor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Point,
    Give,
    #[serde(rename = "move_to_box_1")]
    MoveToBox1,
    #[serde(rename = "move_to_box_2")]
    MoveToBox2,
    PutOnTower,
    PlaceInBowl,
    RetrieveWorkingMemory,
    RetrieveDeclarativeMemory,
}

impl ActionKind {
    pub const ALL: [ActionKind; 8] = [
        ActionKind::Point,
        ActionKind::Give,
        ActionKind::MoveToBox1,
        ActionKind::MoveToBox2,
        ActionKind::PutOnTower,
        ActionKind::PlaceInBowl,
        ActionKind::RetrieveWorkingMemory,
        ActionKind::RetrieveDeclarativeMemory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Point => "point",
            ActionKind::Give => "give",
            ActionKind::MoveToBox1 => "move_to_box_1",
            ActionKind::MoveToBox2 => "move_to_box_2",
            ActionKind::PutOnTower => "put_on_tower",
            ActionKind::PlaceInBowl => "place_in_bowl",
            ActionKind::RetrieveWorkingMemory => "retrieve_working_memory",
            ActionKind::RetrieveDeclarativeMemory => "retrieve_declarative_memory",
        }
    }

    /// Manipulation actions take an object label; memory calls take a task name.
    pub fn is_manipulation(self) -> bool {
        !self.is_memory()
    }

    pub fn is_memory(self) -> bool {
        matches!(
            self,
            ActionKind::RetrieveWorkingMemory | ActionKind::RetrieveDeclarativeMemory
        )
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        ActionKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| GrammarError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("action argument is empty")]
    EmptyArgument,
    #[error("action argument `{0}` contains parentheses or angle brackets")]
    InvalidArgument(String),
    #[error("unknown action `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionCommand {
    pub kind: ActionKind,
    pub argument: String,
}

impl ActionCommand {
    pub fn new(kind: ActionKind, argument: impl Into<String>) -> Self {
        Self {
            kind,
            argument: argument.into(),
        }
    }

    /// Canonical text, exactly `<kind(argument)>`.
    pub fn render(&self) -> Result<String, GrammarError> {
        render(self)
    }
}

impl fmt::Display for ActionCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}({})>", self.kind.name(), self.argument)
    }
}

pub fn render(command: &ActionCommand) -> Result<String, GrammarError> {
    if command.argument.trim().is_empty() {
        return Err(GrammarError::EmptyArgument);
    }
    if command.argument.contains(['(', ')', '<', '>']) {
        return Err(GrammarError::InvalidArgument(command.argument.clone()));
    }
    Ok(command.to_string())
}

/// An angle-bracket fragment that looked like a command but did not parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedCommand {
    pub fragment: String,
    /// Byte offset of the opening `<`.
    pub offset: usize,
    pub reason: String,
}

impl fmt::Display for MalformedCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "malformed command `{}` at byte {}: {}",
            self.fragment, self.offset, self.reason
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReply {
    pub commands: Vec<ActionCommand>,
    /// Reply text with the recognized commands cut out.
    pub prose: String,
    pub errors: Vec<MalformedCommand>,
}

impl ParsedReply {
    pub fn manipulations(&self) -> impl Iterator<Item = &ActionCommand> {
        self.commands.iter().filter(|c| c.kind.is_manipulation())
    }

    pub fn memory_calls(&self) -> impl Iterator<Item = &ActionCommand> {
        self.commands.iter().filter(|c| c.kind.is_memory())
    }
}

/// Extracts every `<name(arg)>` command from free-form model output.
///
/// A fragment is a `<` immediately followed by an identifier character and
/// closed by the next `>` with no other `<` in between. Fragments that do
/// not form a known command are reported in `errors` and left in the prose.
pub fn parse_reply(text: &str) -> ParsedReply {
    let mut reply = ParsedReply::default();
    let mut cursor = 0;
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find('<') {
        let open = search_from + rel;
        let body_start = open + 1;
        let starts_ident = text[body_start..]
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
        if !starts_ident {
            search_from = body_start;
            continue;
        }
        let rest = &text[body_start..];
        let close = match rest.find(['<', '>']) {
            Some(i) if rest.as_bytes()[i] == b'>' => body_start + i,
            Some(i) => {
                // another `<` before any `>`: this one is unterminated
                let fragment = &text[open..body_start + i];
                if looks_like_command(fragment) {
                    reply.errors.push(MalformedCommand {
                        fragment: fragment.to_string(),
                        offset: open,
                        reason: "missing closing `>`".into(),
                    });
                }
                search_from = body_start + i;
                continue;
            }
            None => {
                let fragment = &text[open..];
                if looks_like_command(fragment) {
                    reply.errors.push(MalformedCommand {
                        fragment: fragment.to_string(),
                        offset: open,
                        reason: "missing closing `>`".into(),
                    });
                }
                break;
            }
        };
        let fragment = &text[open..=close];
        match parse_fragment(&text[body_start..close]) {
            Ok(command) => {
                reply.prose.push_str(&text[cursor..open]);
                reply.commands.push(command);
                cursor = close + 1;
            }
            Err(reason) => reply.errors.push(MalformedCommand {
                fragment: fragment.to_string(),
                offset: open,
                reason,
            }),
        }
        search_from = close + 1;
    }
    reply.prose.push_str(&text[cursor..]);
    reply
}

fn looks_like_command(fragment: &str) -> bool {
    fragment.contains('(')
}

fn parse_fragment(body: &str) -> Result<ActionCommand, String> {
    let Some(open) = body.find('(') else {
        return Err("missing parenthesis".into());
    };
    let name = body[..open].trim();
    let tail = body[open + 1..].trim_end();
    let Some(argument) = tail.strip_suffix(')') else {
        return Err("missing closing parenthesis".into());
    };
    let kind: ActionKind = name
        .parse()
        .map_err(|_| format!("unknown action `{name}`"))?;
    let argument = argument.trim();
    if argument.is_empty() {
        return Err("empty argument".into());
    }
    if argument.contains(['(', ')']) {
        return Err("nested parentheses in argument".into());
    }
    Ok(ActionCommand::new(kind, argument))
}
