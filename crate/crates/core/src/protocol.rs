//! Text messages the orchestrator sends to the coordinator.
//!
//! Every message opens with a bracketed marker line (`[STEP] separating`)
//! so transcripts stay greppable and the scripted mock can read them.

use std::collections::BTreeMap;

use crate::memory::{parse_optional_object_list, DeclarativeSnapshot, WorkingMemory};
use crate::tasks::TaskId;
use crate::world::Container;

pub const OBJECTS_PREFIX: &str = "Objects on the table: ";
pub const REQUEST_WORKING: &str = "Retrieve the working memory for this task before acting.";
pub const REQUEST_BOTH: &str =
    "Retrieve the declarative memory and then the working memory for this task before acting.";
pub const REQUEST_READY: &str = "Reply with OK when you are ready for the first step.";
pub const ACK: &str = "OK";
pub const REMINDERS_PREFIX: &str = "Task Reminders: ";
pub const STATE_PREFIX: &str = "Task State: ";
pub const SELECTIVE_PREFIX: &str = "Selective Objects: ";
pub const REMAINING_PREFIX: &str = "Remaining Objects: ";
pub const NONE: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryKind {
    Working,
    Declarative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    TaskState,
    Environment,
}

/// Parsed form of a coordinator-bound message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoordinatorMessage {
    Task {
        task: TaskId,
        resume: bool,
        objects: Vec<String>,
        wants_declarative: bool,
        wants_working: bool,
    },
    Memory {
        kind: MemoryKind,
        task: TaskId,
        body: Vec<String>,
    },
    Step {
        task: TaskId,
        objects: Vec<String>,
        retry: bool,
    },
    Probe {
        kind: ProbeKind,
        task: TaskId,
    },
}

impl CoordinatorMessage {
    pub fn task(&self) -> TaskId {
        match self {
            CoordinatorMessage::Task { task, .. }
            | CoordinatorMessage::Memory { task, .. }
            | CoordinatorMessage::Step { task, .. }
            | CoordinatorMessage::Probe { task, .. } => *task,
        }
    }
}

fn objects_line(objects: &[String]) -> String {
    if objects.is_empty() {
        format!("{OBJECTS_PREFIX}{NONE}")
    } else {
        format!("{OBJECTS_PREFIX}{}", objects.join(", "))
    }
}

fn list_or_none(labels: &[String]) -> String {
    if labels.is_empty() {
        NONE.to_string()
    } else {
        labels.join(", ")
    }
}

pub fn task_command(task: TaskId, objects: &[String], resume: bool, memory_enabled: bool) -> String {
    let name = task.memory_name();
    let verb = if resume { "Resume" } else { "Start" };
    let request = match (memory_enabled, resume) {
        (false, _) => REQUEST_READY,
        (true, false) => REQUEST_WORKING,
        (true, true) => REQUEST_BOTH,
    };
    format!(
        "[TASK] {name}\n{verb} the {name} task.\n{}\n{request}",
        objects_line(objects)
    )
}

pub fn working_injection(task: TaskId, memory: &WorkingMemory) -> String {
    format!(
        "[MEMORY] working {}\n{REMINDERS_PREFIX}{}\n{STATE_PREFIX}{}\n{SELECTIVE_PREFIX}{}",
        task.memory_name(),
        memory.task_reminders,
        memory.task_state,
        list_or_none(&memory.selective_objects)
    )
}

/// Declarative memory as reported by the worker for each task container.
pub fn declarative_injection(task: TaskId, reported: &DeclarativeSnapshot) -> String {
    let mut lines = vec![format!("[MEMORY] declarative {}", task.memory_name())];
    for container in task.containers() {
        lines.push(format!(
            "{}: {}",
            container.name(),
            list_or_none(reported.contents(*container))
        ));
    }
    lines.push(format!("{REMAINING_PREFIX}{}", list_or_none(&reported.remaining)));
    lines.join("\n")
}

pub fn step_request(task: TaskId, objects: &[String]) -> String {
    let name = task.memory_name();
    format!(
        "[STEP] {name}\n{}\nGenerate the next action for the {name} task. Output exactly one action.",
        objects_line(objects)
    )
}

pub fn retry_request(task: TaskId, objects: &[String], reason: &str) -> String {
    let name = task.memory_name();
    format!(
        "[RETRY] {name}\nYour previous reply could not be executed: {reason}.\n{}\n\
         Re-emit exactly one action for the {name} task.",
        objects_line(objects)
    )
}

pub fn task_state_probe(task: TaskId) -> String {
    let name = task.memory_name();
    let containers: Vec<&str> = task.containers().iter().map(|c| c.name()).collect();
    format!(
        "[PROBE] task-state {name}\nThe {name} task is finished. Report its final task state with \
         one line per container in the form `Name: object, object`, writing `none` for an empty \
         container: {}.",
        containers.join(", ")
    )
}

pub fn environment_probe(task: TaskId) -> String {
    let name = task.memory_name();
    format!(
        "[PROBE] environment {name}\nWhich objects remain on the table for the {name} task? \
         Output a list of object names separated by a comma and without any extra text, or \
         `none` if the table is empty."
    )
}

/// Reads `Name: a, b` lines for the task's containers. A bare list is
/// accepted for single-container tasks. `None` when nothing parses.
pub fn parse_task_state_reply(task: TaskId, text: &str) -> Option<BTreeMap<Container, Vec<String>>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((heading, list)) = line.split_once(':') else {
            continue;
        };
        let Some(container) = Container::from_name(heading) else {
            continue;
        };
        if !task.containers().contains(&container) {
            continue;
        }
        out.insert(container, parse_optional_object_list(list).ok()?);
    }
    if out.is_empty() {
        if let [only] = task.containers() {
            let labels = parse_optional_object_list(text).ok()?;
            if labels.iter().any(|l| l.contains(':')) {
                return None;
            }
            out.insert(*only, labels);
        } else {
            return None;
        }
    }
    Some(out)
}

pub fn parse_environment_reply(text: &str) -> Option<Vec<String>> {
    let text = text.trim();
    let text = text.strip_prefix(REMAINING_PREFIX.trim_end()).unwrap_or(text);
    parse_optional_object_list(text).ok()
}

fn split_list(text: &str) -> Vec<String> {
    parse_optional_object_list(text).unwrap_or_default()
}

/// Recognizes any message built by this module.
pub fn parse_message(text: &str) -> Option<CoordinatorMessage> {
    let mut lines = text.lines();
    let header = lines.next()?.trim();
    let (marker, rest) = header.split_once(' ')?;
    let body: Vec<String> = lines.map(str::to_string).collect();
    let objects = || {
        body.iter()
            .find_map(|l| l.strip_prefix(OBJECTS_PREFIX))
            .map(split_list)
            .unwrap_or_default()
    };
    match marker {
        "[TASK]" => {
            let task = rest.parse().ok()?;
            Some(CoordinatorMessage::Task {
                task,
                resume: body.iter().any(|l| l.starts_with("Resume ")),
                objects: objects(),
                wants_declarative: body.iter().any(|l| l == REQUEST_BOTH),
                wants_working: body.iter().any(|l| l == REQUEST_BOTH || l == REQUEST_WORKING),
            })
        }
        "[MEMORY]" => {
            let (kind, task) = rest.split_once(' ')?;
            let kind = match kind {
                "working" => MemoryKind::Working,
                "declarative" => MemoryKind::Declarative,
                _ => return None,
            };
            Some(CoordinatorMessage::Memory {
                kind,
                task: task.parse().ok()?,
                body,
            })
        }
        "[STEP]" | "[RETRY]" => Some(CoordinatorMessage::Step {
            task: rest.parse().ok()?,
            objects: objects(),
            retry: marker == "[RETRY]",
        }),
        "[PROBE]" => {
            let (kind, task) = rest.split_once(' ')?;
            let kind = match kind {
                "task-state" => ProbeKind::TaskState,
                "environment" => ProbeKind::Environment,
                _ => return None,
            };
            Some(CoordinatorMessage::Probe {
                kind,
                task: task.parse().ok()?,
            })
        }
        _ => None,
    }
}

/// Reads the container and remaining lines of a declarative injection body.
pub fn parse_declarative_body(body: &[String]) -> DeclarativeSnapshot {
    let mut snapshot = DeclarativeSnapshot::default();
    for line in body {
        if let Some(list) = line.strip_prefix(REMAINING_PREFIX) {
            snapshot.remaining = split_list(list);
        } else if let Some((heading, list)) = line.split_once(':') {
            if let Some(container) = Container::from_name(heading) {
                snapshot.container_contents.insert(container, split_list(list));
            }
        }
    }
    snapshot
}

/// Reads a working-memory injection body.
pub fn parse_working_body(body: &[String]) -> WorkingMemory {
    let mut memory = WorkingMemory::default();
    for line in body {
        if let Some(rest) = line.strip_prefix(REMINDERS_PREFIX) {
            memory.task_reminders = rest.to_string();
        } else if let Some(rest) = line.strip_prefix(STATE_PREFIX) {
            memory.task_state = rest.to_string();
        } else if let Some(rest) = line.strip_prefix(SELECTIVE_PREFIX) {
            memory.selective_objects = split_list(rest);
        }
    }
    memory
}

#[cfg(test)]
mod tests {
    use super::*;

    fn own(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn messages_parse_back() {
        let objects = own(&["apple", "cube 1"]);
        assert_eq!(
            parse_message(&task_command(TaskId::Tower, &objects, true, true)),
            Some(CoordinatorMessage::Task {
                task: TaskId::Tower,
                resume: true,
                objects: objects.clone(),
                wants_declarative: true,
                wants_working: true,
            })
        );
        assert_eq!(
            parse_message(&retry_request(TaskId::Point, &objects, "no action found")),
            Some(CoordinatorMessage::Step {
                task: TaskId::Point,
                objects: objects.clone(),
                retry: true
            })
        );
        assert_eq!(
            parse_message(&step_request(TaskId::Point, &[])),
            Some(CoordinatorMessage::Step {
                task: TaskId::Point,
                objects: vec![],
                retry: false
            })
        );
        assert_eq!(
            parse_message(&task_state_probe(TaskId::Separate)),
            Some(CoordinatorMessage::Probe {
                kind: ProbeKind::TaskState,
                task: TaskId::Separate
            })
        );
        assert_eq!(parse_message("hello there"), None);
    }

    #[test]
    fn injections_round_trip() {
        let mut snapshot = DeclarativeSnapshot::default();
        snapshot
            .container_contents
            .insert(Container::Box1, own(&["pear", "apple"]));
        snapshot.remaining = own(&["banana", "cup", "baseball"]);
        let text = declarative_injection(TaskId::Separate, &snapshot);
        assert!(text.contains("\nBox 2: none\n"));
        let Some(CoordinatorMessage::Memory { body, .. }) = parse_message(&text) else {
            panic!("not a memory message");
        };
        let parsed = parse_declarative_body(&body);
        assert_eq!(parsed.contents(Container::Box1), own(&["pear", "apple"]));
        assert!(parsed.contents(Container::Box2).is_empty());
        assert_eq!(parsed.remaining, snapshot.remaining);

        let memory = WorkingMemory {
            task_reminders: "Use <give>.".into(),
            task_state: "Nothing yet.".into(),
            selective_objects: own(&["bowl", "jello"]),
        };
        let Some(CoordinatorMessage::Memory { body, .. }) =
            parse_message(&working_injection(TaskId::Recipe, &memory))
        else {
            panic!("not a memory message");
        };
        assert_eq!(parse_working_body(&body), memory);
    }

    #[test]
    fn task_state_replies() {
        let parsed = parse_task_state_reply(TaskId::Separate, "Box 1: pear, apple\nBox 2: none").unwrap();
        assert_eq!(parsed[&Container::Box1], own(&["pear", "apple"]));
        assert!(parsed[&Container::Box2].is_empty());
        let bare = parse_task_state_reply(TaskId::Arrange, "apple, banana").unwrap();
        assert_eq!(bare[&Container::Bowl], own(&["apple", "banana"]));
        assert!(parse_task_state_reply(TaskId::Separate, "I forgot.").is_none());
        assert!(parse_task_state_reply(TaskId::Separate, "").is_none());
        assert_eq!(parse_environment_reply("none"), Some(vec![]));
        assert_eq!(parse_environment_reply(""), None);
    }
}
