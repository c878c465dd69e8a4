//! Scripted backend for offline runs.
//!
//! The oracle behaviour reads the marker lines that the prompt builders emit
//! and answers from the task-registry policies, so the real prompt
//! construction and reply parsing paths are exercised end to end. It only
//! "knows" a task while that task's base-prompt paragraph or an injected
//! working memory for it is inside the visible context; the forgetful
//! behaviour shrinks that context to a sliding window.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::action::{parse_reply, ActionCommand, ActionKind};
use crate::llm::{GenerationParams, LlmBackend, LlmError, Message, Role};
use crate::memory::{
    self, DeclarativeQuery, TaskLog, WorkingMemory, DECLARATIVE_INSTRUCTION_PREFIX,
    DECLARATIVE_INSTRUCTION_SUFFIX, REMINDER_INSTRUCTION, SELECTIVE_INSTRUCTION, STATE_INSTRUCTION,
};
use crate::protocol::{self, CoordinatorMessage, MemoryKind, ProbeKind};
use crate::tasks::{TaskId, TaskRegistry};
use crate::world::{Container, WorldState};

const UNSURE: &str = "I am not sure which action to take next.";
const NOT_UNDERSTOOD: &str = "I do not understand the request.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockBehavior {
    Oracle,
    /// Sees only the last `window` messages of the conversation.
    Forgetful { window: usize },
    /// Replays fixed replies in order.
    Trace(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    behavior: MockBehavior,
    registry: Arc<TaskRegistry>,
    cursor: usize,
}

impl MockBackend {
    pub fn new(behavior: MockBehavior, registry: Arc<TaskRegistry>) -> Self {
        Self {
            behavior,
            registry,
            cursor: 0,
        }
    }

    pub fn oracle() -> Self {
        Self::new(MockBehavior::Oracle, Arc::new(TaskRegistry::builtin()))
    }

    pub fn forgetful(window: usize) -> Self {
        Self::new(
            MockBehavior::Forgetful { window },
            Arc::new(TaskRegistry::builtin()),
        )
    }

    pub fn trace(replies: Vec<String>) -> Self {
        Self::new(MockBehavior::Trace(replies), Arc::new(TaskRegistry::builtin()))
    }

    pub fn behavior(&self) -> &MockBehavior {
        &self.behavior
    }

    fn next_traced(&mut self) -> Result<String, LlmError> {
        let MockBehavior::Trace(replies) = &self.behavior else {
            unreachable!("only called for traces");
        };
        let reply = replies
            .get(self.cursor)
            .cloned()
            .ok_or(LlmError::TraceExhausted(replies.len()))?;
        self.cursor += 1;
        Ok(reply)
    }

    /// Reply to a conversation as the coordinator would.
    pub fn coordinator_reply(&self, visible: &[Message]) -> String {
        let Some(last) = visible.last() else {
            return NOT_UNDERSTOOD.into();
        };
        let Some(request) = protocol::parse_message(&last.content) else {
            return NOT_UNDERSTOOD.into();
        };
        let view = ContextView::build(&self.registry, visible);
        match request {
            CoordinatorMessage::Task {
                task,
                wants_declarative,
                wants_working,
                ..
            } => {
                if wants_declarative {
                    memory_call(ActionKind::RetrieveDeclarativeMemory, task)
                } else if wants_working {
                    memory_call(ActionKind::RetrieveWorkingMemory, task)
                } else {
                    protocol::ACK.into()
                }
            }
            CoordinatorMessage::Memory {
                kind: MemoryKind::Declarative,
                task,
                ..
            } => memory_call(ActionKind::RetrieveWorkingMemory, task),
            CoordinatorMessage::Memory {
                kind: MemoryKind::Working,
                ..
            } => protocol::ACK.into(),
            CoordinatorMessage::Step { task, objects, .. } => view.next_action(task, &objects),
            CoordinatorMessage::Probe {
                kind: ProbeKind::TaskState,
                task,
            } => view.report_state(task),
            CoordinatorMessage::Probe {
                kind: ProbeKind::Environment,
                task,
            } => view.report_remaining(task),
        }
    }

    /// Reply to a single worker prompt.
    pub fn worker_reply(&self, prompt: &str) -> String {
        let lines: Vec<&str> = prompt.lines().collect();
        let spec_for = |description: &str| {
            self.registry
                .specs()
                .iter()
                .find(|s| s.description == description.trim())
        };
        if let Some(pos) = lines.iter().position(|l| *l == SELECTIVE_INSTRUCTION) {
            let (Some(spec), Some(visible)) = (
                pos.checked_sub(1).and_then(|i| spec_for(lines[i])),
                lines.get(pos + 1),
            ) else {
                return String::new();
            };
            let visible: Vec<String> = visible.split(',').map(|s| s.trim().to_string()).collect();
            return self.registry.relevant_objects(spec.id, &visible).join(", ");
        }
        if let Some(pos) = lines.iter().position(|l| *l == REMINDER_INSTRUCTION) {
            return pos
                .checked_sub(1)
                .and_then(|i| spec_for(lines[i]))
                .map(|s| s.reminder.clone())
                .unwrap_or_default();
        }
        if let Some(pos) = lines.iter().position(|l| *l == STATE_INSTRUCTION) {
            let parts: Vec<String> = lines[pos + 1..]
                .iter()
                .filter_map(|l| l.split_once(':'))
                .filter(|(heading, _)| Container::from_name(heading).is_some())
                .map(|(heading, list)| format!("{} holds {}", heading.trim(), list.trim()))
                .collect();
            return format!("{}.", parts.join("; "));
        }
        if let Some(pos) = lines
            .iter()
            .position(|l| l.starts_with(DECLARATIVE_INSTRUCTION_PREFIX))
        {
            let phrase = lines[pos]
                .strip_prefix(DECLARATIVE_INSTRUCTION_PREFIX)
                .and_then(|rest| rest.strip_suffix(DECLARATIVE_INSTRUCTION_SUFFIX));
            let Some(query) = phrase.and_then(DeclarativeQuery::from_phrase) else {
                return String::new();
            };
            let Ok(log) = TaskLog::parse(TaskId::Separate, &lines[..pos].join("\n")) else {
                return String::new();
            };
            let Ok(snapshot) = memory::snapshot_from_log(&log) else {
                return protocol::NONE.into();
            };
            let labels = match query {
                DeclarativeQuery::Container(c) => snapshot.contents(c).to_vec(),
                DeclarativeQuery::Remaining => snapshot.remaining,
            };
            return if labels.is_empty() {
                protocol::NONE.into()
            } else {
                labels.join(", ")
            };
        }
        String::new()
    }
}

fn memory_call(kind: ActionKind, task: TaskId) -> String {
    ActionCommand::new(kind, task.memory_name()).to_string()
}

impl LlmBackend for MockBackend {
    fn name(&self) -> String {
        match &self.behavior {
            MockBehavior::Oracle => "mock-oracle".into(),
            MockBehavior::Forgetful { window } => format!("mock-forgetful-{window}"),
            MockBehavior::Trace(_) => "mock-trace".into(),
        }
    }

    fn chat(&mut self, messages: &[Message], _params: &GenerationParams) -> Result<String, LlmError> {
        match &self.behavior {
            MockBehavior::Trace(_) => self.next_traced(),
            MockBehavior::Oracle => Ok(self.route(messages)),
            MockBehavior::Forgetful { window } => {
                let start = messages.len().saturating_sub((*window).max(1));
                Ok(self.route(&messages[start..]))
            }
        }
    }

    fn complete(&mut self, prompt: &str, _params: &GenerationParams) -> Result<String, LlmError> {
        match &self.behavior {
            MockBehavior::Trace(_) => self.next_traced(),
            _ => Ok(self.worker_reply(prompt)),
        }
    }
}

impl MockBackend {
    /// Over the wire worker prompts arrive as one-message chats; coordinator
    /// turns always carry a marker line.
    fn route(&self, messages: &[Message]) -> String {
        match messages {
            [only] if only.role == Role::User && protocol::parse_message(&only.content).is_none() => {
                self.worker_reply(&only.content)
            }
            _ => self.coordinator_reply(messages),
        }
    }
}

#[derive(Debug, Default)]
struct TaskView {
    spec_known: bool,
    working: Option<WorkingMemory>,
    containers: BTreeMap<Container, Vec<String>>,
    table: Option<Vec<String>>,
    last_action: Option<ActionCommand>,
}

/// What the mock can reconstruct about each task from the visible messages.
struct ContextView<'a> {
    registry: &'a TaskRegistry,
    tasks: BTreeMap<TaskId, TaskView>,
}

impl<'a> ContextView<'a> {
    fn build(registry: &'a TaskRegistry, visible: &[Message]) -> Self {
        let mut view = Self {
            registry,
            tasks: BTreeMap::new(),
        };
        let mut current: Option<TaskId> = None;
        for message in visible {
            for spec in registry.specs() {
                if message.role != Role::Assistant && message.content.contains(&spec.spec_text) {
                    view.task(spec.id).spec_known = true;
                }
            }
            match message.role {
                Role::System => {}
                Role::User => {
                    if let Some(parsed) = protocol::parse_message(&message.content) {
                        current = Some(parsed.task());
                        view.observe_request(parsed);
                    }
                }
                Role::Assistant => {
                    if let Some(task) = current {
                        let reply = parse_reply(&message.content);
                        for command in reply.manipulations() {
                            view.observe_action(task, command);
                        }
                    }
                }
            }
        }
        view
    }

    fn task(&mut self, task: TaskId) -> &mut TaskView {
        self.tasks.entry(task).or_default()
    }

    fn observe_request(&mut self, request: CoordinatorMessage) {
        let view = self.task(request.task());
        match request {
            CoordinatorMessage::Task { objects, .. } => view.table = Some(objects),
            CoordinatorMessage::Memory {
                kind: MemoryKind::Declarative,
                body,
                ..
            } => {
                let snapshot = protocol::parse_declarative_body(&body);
                view.containers = snapshot.container_contents;
                view.containers.retain(|_, labels| !labels.is_empty());
                view.table = Some(snapshot.remaining);
            }
            CoordinatorMessage::Memory {
                kind: MemoryKind::Working,
                body,
                ..
            } => view.working = Some(protocol::parse_working_body(&body)),
            CoordinatorMessage::Step { objects, retry, .. } => {
                if retry {
                    if let Some(failed) = view.last_action.take() {
                        if let Some(container) = Container::for_action(failed.kind) {
                            let labels = view.containers.entry(container).or_default();
                            if labels.last() == Some(&failed.argument) {
                                labels.pop();
                            }
                        }
                    }
                }
                view.table = Some(objects);
            }
            CoordinatorMessage::Probe { .. } => {}
        }
    }

    fn observe_action(&mut self, task: TaskId, command: &ActionCommand) {
        let view = self.task(task);
        if let Some(container) = Container::for_action(command.kind) {
            view.containers
                .entry(container)
                .or_default()
                .push(command.argument.clone());
        }
        if command.kind != ActionKind::Point {
            if let Some(table) = view.table.as_mut() {
                table.retain(|l| !l.eq_ignore_ascii_case(&command.argument));
            }
        }
        view.last_action = Some(command.clone());
    }

    fn knows(&self, task: TaskId) -> bool {
        let reminder = &self.registry.spec(task).reminder;
        self.tasks.get(&task).is_some_and(|v| {
            v.spec_known
                || v
                    .working
                    .as_ref()
                    .is_some_and(|w| &w.task_reminders == reminder)
        })
    }

    fn next_action(&self, task: TaskId, objects: &[String]) -> String {
        if !self.knows(task) {
            return UNSURE.into();
        }
        let view = &self.tasks[&task];
        let inventory = self.registry.inventories();
        let table: Vec<_> = objects
            .iter()
            .filter_map(|label| inventory.lookup(label).cloned())
            .collect();
        let Ok(mut world) = WorldState::new(table) else {
            return UNSURE.into();
        };
        for label in view.containers.get(&Container::Pointed).into_iter().flatten() {
            let _ = world.apply_in_place(&ActionCommand::new(ActionKind::Point, label.clone()));
        }
        let mut actions = self.registry.oracle_actions(task, &world);
        if let Some(working) = &view.working {
            actions.retain(|a| {
                working
                    .selective_objects
                    .iter()
                    .any(|s| s.eq_ignore_ascii_case(&a.argument))
            });
        }
        match actions.first() {
            Some(action) => action.to_string(),
            None => format!("All objects for the {} task are handled.", task.memory_name()),
        }
    }

    fn report_state(&self, task: TaskId) -> String {
        let empty = BTreeMap::new();
        let containers = self.tasks.get(&task).map(|v| &v.containers).unwrap_or(&empty);
        task.containers()
            .iter()
            .map(|c| {
                let labels = containers.get(c).cloned().unwrap_or_default();
                let list = if labels.is_empty() {
                    protocol::NONE.to_string()
                } else {
                    labels.join(", ")
                };
                format!("{}: {list}", c.name())
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn report_remaining(&self, task: TaskId) -> String {
        match self.tasks.get(&task).and_then(|v| v.table.as_ref()) {
            Some(table) if table.is_empty() => protocol::NONE.into(),
            Some(table) => table.join(", "),
            None => "I do not remember the objects on the table.".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatSession;
    use crate::memory::build_working_memory_prompt;

    fn params() -> GenerationParams {
        GenerationParams::default()
    }

    #[test]
    fn trace_replays_then_exhausts() {
        let mut backend = MockBackend::trace(vec!["<point(lemon)>".into()]);
        assert_eq!(backend.chat(&[Message::user("x")], &params()).unwrap(), "<point(lemon)>");
        assert_eq!(
            backend.chat(&[Message::user("x")], &params()),
            Err(LlmError::TraceExhausted(1))
        );
    }

    #[test]
    fn first_turn_requests_working_memory() {
        let registry = TaskRegistry::builtin();
        let mut backend = MockBackend::oracle();
        let mut session = ChatSession::new(registry.base_prompt(true), params());
        let objects = registry.load_world(TaskId::Separate).visible_objects();
        let reply = session
            .chat(&mut backend, &protocol::task_command(TaskId::Separate, &objects, false, true))
            .unwrap();
        assert_eq!(reply, "<retrieve_working_memory(separating)>");
    }

    #[test]
    fn worker_is_deterministic() {
        let registry = TaskRegistry::builtin();
        let prompt = build_working_memory_prompt(
            registry.spec(TaskId::Tower),
            &registry.load_world(TaskId::Tower).visible_objects(),
        )
        .unwrap();
        let mut a = MockBackend::oracle();
        let mut b = MockBackend::oracle();
        let first = a.complete(&prompt, &params()).unwrap();
        assert_eq!(first, "cube 1, cube 2, cube 3, cube 6");
        assert_eq!(b.complete(&prompt, &params()).unwrap(), first);
        assert_eq!(a.complete(&prompt, &params()).unwrap(), first);
    }

    #[test]
    fn steps_follow_the_oracle_when_the_spec_is_visible() {
        let registry = TaskRegistry::builtin();
        let mut backend = MockBackend::oracle();
        let mut session = ChatSession::new(registry.base_prompt(false), params());
        let mut world = registry.load_world(TaskId::Point);
        session
            .chat(&mut backend, &protocol::task_command(TaskId::Point, &world.visible_objects(), false, false))
            .unwrap();
        let mut pointed = Vec::new();
        for _ in 0..4 {
            let reply = session
                .chat(&mut backend, &protocol::step_request(TaskId::Point, &world.visible_objects()))
                .unwrap();
            let command = parse_reply(&reply).commands.remove(0);
            world.apply_in_place(&command).unwrap();
            pointed.push(command.argument);
        }
        assert_eq!(pointed, ["lemon", "banana", "apple", "can"]);
        assert!(registry.is_complete(TaskId::Point, &world));
    }

    #[test]
    fn forgetful_window_loses_the_specification() {
        let registry = TaskRegistry::builtin();
        let objects = registry.load_world(TaskId::Arrange).visible_objects();
        let history = vec![
            Message::system(registry.base_prompt(false)),
            Message::user(protocol::task_command(TaskId::Arrange, &objects, false, false)),
            Message::assistant("OK"),
            Message::user(protocol::step_request(TaskId::Arrange, &objects)),
        ];
        let mut oracle = MockBackend::oracle();
        let mut forgetful = MockBackend::forgetful(2);
        assert_eq!(
            oracle.chat(&history, &params()).unwrap(),
            "<place_in_bowl(apple)>"
        );
        assert_eq!(forgetful.chat(&history, &params()).unwrap(), UNSURE);
    }

    #[test]
    fn forgetful_probe_uses_only_the_window() {
        // Five turns on the separating task, then the remaining-objects probe.
        let registry = TaskRegistry::builtin();
        let mut world = registry.load_world(TaskId::Separate);
        let mut history = vec![
            Message::system(registry.base_prompt(false)),
            Message::user(protocol::task_command(TaskId::Separate, &world.visible_objects(), false, false)),
            Message::assistant("OK"),
        ];
        let oracle = MockBackend::oracle();
        for _ in 0..4 {
            history.push(Message::user(protocol::step_request(TaskId::Separate, &world.visible_objects())));
            let reply = oracle.coordinator_reply(&history);
            world.apply_in_place(&parse_reply(&reply).commands[0]).unwrap();
            history.push(Message::assistant(reply));
        }
        history.push(Message::user(protocol::environment_probe(TaskId::Separate)));
        let truth = world.visible_objects().join(", ");
        assert_eq!(truth, "baseball, pear");
        assert_eq!(MockBackend::oracle().chat(&history, &params()).unwrap(), truth);
        let forgetful = MockBackend::forgetful(2).chat(&history, &params()).unwrap();
        assert_ne!(forgetful, truth);
        // With a window of 3 the last step request is visible again.
        assert_eq!(MockBackend::forgetful(3).chat(&history, &params()).unwrap(), truth);
    }
}
