//! Declarative memory (per-task action logs) and working-memory prompts for the worker model.
//!
//! A log entry records the executed action, the full contents of the
//! container that action touched, and what is left on the table:
//!
//! ```text
//! Log Entry:
//! Action: <move_to_box_1(pear)>
//! Box 1: 1. pear
//! Remaining Objects: 1. apple 2. banana 3. cup 4. bowl 5. baseball
//! ```
//!
//! The rendered log is used verbatim both as the on-disk file and as the
//! payload of declarative-memory prompts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_reply, ActionCommand};
use crate::tasks::{TaskId, TaskSpec};
use crate::world::{Container, WorldState};

pub const OBJECT_LIST_FORMAT: &str =
    "Output a list of object names separated by a comma and without any extra text.";
pub const ORDER_RULE: &str =
    "If order is important to the task then output the object names in the correct order.";
pub const SELECTIVE_INSTRUCTION: &str =
    "Name the objects that are relevant to the given task from the following:";
pub const REMINDER_INSTRUCTION: &str =
    "Summarize the actions and the goal of the given task as a short reminder.";
pub const STATE_INSTRUCTION: &str =
    "Describe the current state of the objects relevant to the given task from the following:";
pub const SENTENCE_FORMAT: &str = "Output a single sentence without any extra text.";
pub const DECLARATIVE_INSTRUCTION_PREFIX: &str =
    "Given the sequence of log entries, extract the final list of ";
pub const DECLARATIVE_INSTRUCTION_SUFFIX: &str = " from the last log entry.";
pub const REMAINING_PHRASE: &str = "remaining objects on the table";
pub const EMPTY_TASK_STATE: &str = "No objects have been handled yet.";

const ENTRY_HEADER: &str = "Log Entry:";
const ACTION_PREFIX: &str = "Action: ";
const REMAINING_HEADING: &str = "Remaining Objects";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("no visible objects to build working memory from")]
    EmptyWorld,
    #[error("worker reply contained no object labels")]
    EmptyReply,
    #[error("declarative log is empty")]
    EmptyLog,
    #[error("malformed log at line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error("log I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `1. pear 2. apple`
pub fn numbered(labels: &[String]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, label)| format!("{}. {label}", i + 1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Inverse of [`numbered`]. Labels may contain spaces (`cube 1`).
pub fn parse_numbered(text: &str) -> Option<Vec<String>> {
    let text = text.trim();
    if text.is_empty() {
        return Some(Vec::new());
    }
    let mut rest = text.strip_prefix("1.")?.trim_start();
    let mut labels = Vec::new();
    let mut next = 2;
    loop {
        let marker = format!(" {next}. ");
        match rest.find(&marker) {
            Some(at) => {
                labels.push(rest[..at].trim().to_string());
                rest = &rest[at + marker.len()..];
                next += 1;
            }
            None => {
                let tail = rest.trim();
                let marker = format!(" {next}.");
                let tail = tail.strip_suffix(&marker).unwrap_or(tail);
                labels.push(tail.trim().to_string());
                break;
            }
        }
    }
    if labels.iter().any(String::is_empty) {
        return None;
    }
    Some(labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub action: ActionCommand,
    /// Contents of the container the action touched, after the action.
    pub state_lines: Vec<(Container, Vec<String>)>,
    pub remaining: Vec<String>,
}

impl LogEntry {
    pub fn render(&self) -> String {
        let mut lines = vec![ENTRY_HEADER.to_string(), format!("{ACTION_PREFIX}{}", self.action)];
        for (container, labels) in &self.state_lines {
            lines.push(heading_line(container.name(), labels));
        }
        lines.push(heading_line(REMAINING_HEADING, &self.remaining));
        lines.join("\n")
    }
}

fn heading_line(heading: &str, labels: &[String]) -> String {
    if labels.is_empty() {
        format!("{heading}:")
    } else {
        format!("{heading}: {}", numbered(labels))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: TaskId,
    pub entries: Vec<LogEntry>,
}

impl TaskLog {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Records a successfully applied manipulation against the state it produced.
    pub fn append(&mut self, action: &ActionCommand, post_state: &WorldState) {
        let state_lines = Container::for_action(action.kind)
            .map(|c| vec![(c, post_state.contents(c))])
            .unwrap_or_default();
        let argument = post_state
            .find(&action.argument)
            .map(|o| o.label.clone())
            .unwrap_or_else(|| action.argument.trim().to_string());
        self.entries.push(LogEntry {
            action: ActionCommand::new(action.kind, argument),
            state_lines,
            remaining: post_state.visible_objects(),
        });
    }

    /// Entries separated by newlines, without a trailing newline.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(LogEntry::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn parse(task: TaskId, text: &str) -> Result<Self, MemoryError> {
        let mut log = TaskLog::new(task);
        let mut current: Option<(Option<ActionCommand>, Vec<(Container, Vec<String>)>)> = None;
        let malformed = |line: usize, reason: &str| MemoryError::MalformedLog {
            line,
            reason: reason.to_string(),
        };
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == ENTRY_HEADER {
                if current.is_some() {
                    return Err(malformed(lineno, "entry without `Remaining Objects:` line"));
                }
                current = Some((None, Vec::new()));
                continue;
            }
            let Some((action, lines)) = current.as_mut() else {
                return Err(malformed(lineno, "content before `Log Entry:`"));
            };
            if let Some(rest) = line.strip_prefix(ACTION_PREFIX.trim_end()) {
                let parsed = parse_reply(rest.trim());
                match parsed.commands.as_slice() {
                    [command] if command.kind.is_manipulation() => *action = Some(command.clone()),
                    _ => return Err(malformed(lineno, "expected exactly one manipulation action")),
                }
                continue;
            }
            let Some((heading, list)) = line.split_once(':') else {
                return Err(malformed(lineno, "expected `Heading: 1. item ...`"));
            };
            let labels = parse_numbered(list).ok_or_else(|| malformed(lineno, "bad numbered list"))?;
            if heading.trim() == REMAINING_HEADING {
                let action = action
                    .take()
                    .ok_or_else(|| malformed(lineno, "entry without `Action:` line"))?;
                let state_lines = std::mem::take(lines);
                log.entries.push(LogEntry {
                    action,
                    state_lines,
                    remaining: labels,
                });
                current = None;
            } else {
                let container = Container::from_name(heading)
                    .ok_or_else(|| malformed(lineno, "unknown container heading"))?;
                lines.push((container, labels));
            }
        }
        if current.is_some() {
            return Err(malformed(text.lines().count(), "truncated entry"));
        }
        Ok(log)
    }

    pub fn path_in(run_dir: &Path, task: TaskId) -> PathBuf {
        run_dir.join("logs").join(format!("{task}.log"))
    }

    /// Writes `<run_dir>/logs/<task>.log`.
    pub fn write_to(&self, run_dir: &Path) -> Result<PathBuf, MemoryError> {
        let path = Self::path_in(run_dir, self.task);
        let io = |source| MemoryError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(path.parent().expect("log path has a parent")).map_err(io)?;
        let mut text = self.render();
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(io)?;
        Ok(path)
    }

    pub fn read_from(path: &Path, task: TaskId) -> Result<Self, MemoryError> {
        let text = std::fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(task, &text)
    }
}

/// Free-function form of [`TaskLog::append`].
pub fn append_entry(mut log: TaskLog, action: &ActionCommand, post_state: &WorldState) -> TaskLog {
    log.append(action, post_state);
    log
}

/// Latest task and environment state recorded in a log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclarativeSnapshot {
    pub container_contents: BTreeMap<Container, Vec<String>>,
    pub remaining: Vec<String>,
}

impl DeclarativeSnapshot {
    pub fn contents(&self, container: Container) -> &[String] {
        self.container_contents
            .get(&container)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The world-side view a correct log must agree with.
    pub fn of_world(world: &WorldState) -> Self {
        Self {
            container_contents: world.projection(),
            remaining: world.visible_objects(),
        }
    }
}

/// Structural read of a log: each container's most recent state line and
/// the last entry's remaining objects. No model involved.
pub fn snapshot_from_log(log: &TaskLog) -> Result<DeclarativeSnapshot, MemoryError> {
    let last = log.entries.last().ok_or(MemoryError::EmptyLog)?;
    let mut container_contents = BTreeMap::new();
    for entry in &log.entries {
        for (container, labels) in &entry.state_lines {
            container_contents.insert(*container, labels.clone());
        }
    }
    container_contents.retain(|_, labels: &mut Vec<String>| !labels.is_empty());
    Ok(DeclarativeSnapshot {
        container_contents,
        remaining: last.remaining.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeclarativeQuery {
    Container(Container),
    Remaining,
}

impl DeclarativeQuery {
    pub fn phrase(self) -> &'static str {
        match self {
            DeclarativeQuery::Container(c) => c.phrase(),
            DeclarativeQuery::Remaining => REMAINING_PHRASE,
        }
    }

    pub fn from_phrase(phrase: &str) -> Option<Self> {
        let phrase = phrase.trim();
        if phrase == REMAINING_PHRASE {
            return Some(DeclarativeQuery::Remaining);
        }
        Container::ALL
            .into_iter()
            .find(|c| c.phrase() == phrase)
            .map(DeclarativeQuery::Container)
    }
}

pub fn declarative_instruction(query: DeclarativeQuery) -> String {
    format!(
        "{DECLARATIVE_INSTRUCTION_PREFIX}{}{DECLARATIVE_INSTRUCTION_SUFFIX}",
        query.phrase()
    )
}

pub fn build_declarative_prompt(log: &TaskLog, query: DeclarativeQuery) -> Result<String, MemoryError> {
    if log.is_empty() {
        return Err(MemoryError::EmptyLog);
    }
    Ok(format!(
        "{}\n{}\n{OBJECT_LIST_FORMAT}",
        log.render(),
        declarative_instruction(query)
    ))
}

/// Selective-attention prompt: task description, instruction, visible labels, output rules.
pub fn build_working_memory_prompt(task: &TaskSpec, visible: &[String]) -> Result<String, MemoryError> {
    if visible.is_empty() {
        return Err(MemoryError::EmptyWorld);
    }
    Ok(format!(
        "{}\n{SELECTIVE_INSTRUCTION}\n{}\n{OBJECT_LIST_FORMAT} {ORDER_RULE}",
        task.description,
        visible.join(", ")
    ))
}

pub fn build_reminder_prompt(task: &TaskSpec) -> String {
    format!("{}\n{REMINDER_INSTRUCTION}\n{SENTENCE_FORMAT}", task.description)
}

/// Task-state prompt over a structural snapshot. `None` when nothing has happened yet.
pub fn build_task_state_prompt(task: &TaskSpec, snapshot: &DeclarativeSnapshot) -> Option<String> {
    let lines: Vec<String> = task
        .id
        .containers()
        .iter()
        .filter(|c| !snapshot.contents(**c).is_empty())
        .map(|c| format!("{}: {}", c.name(), snapshot.contents(*c).join(", ")))
        .collect();
    if lines.is_empty() {
        return None;
    }
    Some(format!(
        "{}\n{STATE_INSTRUCTION}\n{}\n{SENTENCE_FORMAT}",
        task.description,
        lines.join("\n")
    ))
}

/// Splits a comma-separated worker reply into labels.
pub fn parse_object_list_reply(text: &str) -> Result<Vec<String>, MemoryError> {
    let text = text.trim();
    let text = text.strip_suffix('.').unwrap_or(text);
    let labels: Vec<String> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if labels.is_empty() {
        Err(MemoryError::EmptyReply)
    } else {
        Ok(labels)
    }
}

/// Like [`parse_object_list_reply`] but reads `none` as an empty list.
pub fn parse_optional_object_list(text: &str) -> Result<Vec<String>, MemoryError> {
    let trimmed = text.trim().trim_end_matches('.').trim();
    if ["none", "nothing", "empty"]
        .iter()
        .any(|w| trimmed.eq_ignore_ascii_case(w))
    {
        return Ok(Vec::new());
    }
    parse_object_list_reply(text)
}

/// Per-task compact context handed back to the coordinator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingMemory {
    pub task_reminders: String,
    pub task_state: String,
    pub selective_objects: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionKind;
    use crate::tasks::TaskRegistry;
    use proptest::prelude::*;

    fn own(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn separating_log() -> (TaskLog, WorldState) {
        let registry = TaskRegistry::builtin();
        let mut world = registry.load_world(TaskId::Separate);
        let mut log = TaskLog::new(TaskId::Separate);
        for (kind, label) in [
            (ActionKind::MoveToBox1, "pear"),
            (ActionKind::MoveToBox1, "apple"),
            (ActionKind::MoveToBox2, "bowl"),
        ] {
            let action = ActionCommand::new(kind, label);
            world.apply_in_place(&action).unwrap();
            log.append(&action, &world);
        }
        (log, world)
    }

    #[test]
    fn entries_follow_the_logged_layout() {
        let (log, _) = separating_log();
        assert_eq!(
            log.entries[0].render(),
            "Log Entry:\nAction: <move_to_box_1(pear)>\nBox 1: 1. pear\n\
             Remaining Objects: 1. apple 2. banana 3. cup 4. bowl 5. baseball"
        );
        assert_eq!(
            log.entries[1].render(),
            "Log Entry:\nAction: <move_to_box_1(apple)>\nBox 1: 1. pear 2. apple\n\
             Remaining Objects: 1. banana 2. cup 3. bowl 4. baseball"
        );
        assert_eq!(log.entries[1].remaining.len(), 4);
    }

    #[test]
    fn pointing_entry_keeps_remaining() {
        let registry = TaskRegistry::builtin();
        let world = registry.load_world(TaskId::Point);
        let action = ActionCommand::new(ActionKind::Point, "lemon");
        let world = world.apply_action(&action).unwrap();
        let log = append_entry(TaskLog::new(TaskId::Point), &action, &world);
        assert_eq!(
            log.entries[0].state_lines,
            [(Container::Pointed, own(&["lemon"]))]
        );
        assert_eq!(log.entries[0].remaining.len(), 6);
        assert!(log.render().contains("\nPointed: 1. lemon\n"));
    }

    #[test]
    fn snapshot_reads_latest_container_lines() {
        let (log, world) = separating_log();
        let snapshot = snapshot_from_log(&log).unwrap();
        assert_eq!(snapshot.contents(Container::Box1), own(&["pear", "apple"]));
        assert_eq!(snapshot.contents(Container::Box2), own(&["bowl"]));
        assert_eq!(snapshot.remaining, own(&["banana", "cup", "baseball"]));
        assert_eq!(snapshot, DeclarativeSnapshot::of_world(&world));
        assert!(matches!(
            snapshot_from_log(&TaskLog::new(TaskId::Arrange)),
            Err(MemoryError::EmptyLog)
        ));
    }

    #[test]
    fn log_text_round_trips() {
        let (log, _) = separating_log();
        assert_eq!(TaskLog::parse(TaskId::Separate, &log.render()).unwrap(), log);
        let dir = tempfile::tempdir().unwrap();
        let path = log.write_to(dir.path()).unwrap();
        assert!(path.ends_with("logs/separate.log"));
        assert_eq!(TaskLog::read_from(&path, TaskId::Separate).unwrap(), log);
    }

    #[test]
    fn corrupt_logs_are_rejected() {
        for text in [
            "Action: <give(bowl)>\n",
            "Log Entry:\nAction: <give(bowl)>\n",
            "Log Entry:\nAction: hello\nRemaining Objects:\n",
            "Log Entry:\nAction: <give(bowl)>\nCupboard: 1. bowl\nRemaining Objects:\n",
        ] {
            assert!(
                matches!(TaskLog::parse(TaskId::Recipe, text), Err(MemoryError::MalformedLog { .. })),
                "{text:?}"
            );
        }
    }

    #[test]
    fn numbered_lists_with_spaces() {
        let labels = own(&["cube 1", "cube 2", "cube 10"]);
        assert_eq!(numbered(&labels), "1. cube 1 2. cube 2 3. cube 10");
        assert_eq!(parse_numbered(&numbered(&labels)).unwrap(), labels);
        assert_eq!(parse_numbered("").unwrap(), Vec::<String>::new());
        assert!(parse_numbered("pear").is_none());
    }

    #[test]
    fn object_list_replies() {
        assert_eq!(
            parse_object_list_reply("apple, banana, cup, bowl, pear").unwrap().len(),
            5
        );
        assert_eq!(parse_object_list_reply("pear, apple").unwrap(), own(&["pear", "apple"]));
        assert_eq!(parse_object_list_reply("pear, apple.").unwrap(), own(&["pear", "apple"]));
        assert!(matches!(parse_object_list_reply("   "), Err(MemoryError::EmptyReply)));
        assert!(parse_optional_object_list("None.").unwrap().is_empty());
    }

    #[test]
    fn working_memory_prompt_requires_objects() {
        let registry = TaskRegistry::builtin();
        assert!(matches!(
            build_working_memory_prompt(registry.spec(TaskId::Point), &[]),
            Err(MemoryError::EmptyWorld)
        ));
    }

    #[test]
    fn declarative_prompt_variants() {
        let (log, _) = separating_log();
        let remaining = build_declarative_prompt(&log, DeclarativeQuery::Remaining).unwrap();
        assert!(remaining.starts_with(&log.render()));
        assert!(remaining.contains(
            "extract the final list of remaining objects on the table from the last log entry."
        ));
        assert!(matches!(
            build_declarative_prompt(&TaskLog::new(TaskId::Separate), DeclarativeQuery::Remaining),
            Err(MemoryError::EmptyLog)
        ));
        for query in [
            DeclarativeQuery::Remaining,
            DeclarativeQuery::Container(Container::Tower),
        ] {
            assert_eq!(DeclarativeQuery::from_phrase(query.phrase()), Some(query));
        }
    }

    #[test]
    fn task_state_prompt_skips_empty_state() {
        let registry = TaskRegistry::builtin();
        let spec = registry.spec(TaskId::Separate);
        assert!(build_task_state_prompt(spec, &DeclarativeSnapshot::default()).is_none());
        let (log, _) = separating_log();
        let prompt = build_task_state_prompt(spec, &snapshot_from_log(&log).unwrap()).unwrap();
        assert!(prompt.contains("\nBox 1: pear, apple\nBox 2: bowl\n"));
    }

    proptest! {
        #[test]
        fn object_list_join_round_trips(
            labels in proptest::collection::vec("[a-z][a-z0-9 ]{0,10}[a-z0-9]", 1..8)
        ) {
            prop_assert_eq!(parse_object_list_reply(&labels.join(", ")).unwrap(), labels);
        }

        #[test]
        fn prompts_are_deterministic(
            labels in proptest::collection::vec("[a-z]{1,8}", 1..7),
            task in proptest::sample::select(TaskId::ALL.to_vec()),
        ) {
            let registry = TaskRegistry::builtin();
            let spec = registry.spec(task);
            prop_assert_eq!(
                build_working_memory_prompt(spec, &labels).unwrap(),
                build_working_memory_prompt(spec, &labels).unwrap()
            );
        }
    }
}
