//! The coordinator/worker control loop.
//!
//! The coordinator session carries the base prompt and the full dialogue.
//! When a task is commanded it is asked to call the memory functions; each
//! call is served by single-prompt worker completions whose output is
//! injected back as a user message. Steps then ask for exactly one action,
//! which is executed against the task's world and appended to its log.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_reply, ActionCommand, ActionKind, ParsedReply};
use crate::llm::{self, ChatSession, ContextBudget, GenerationParams, LlmBackend, LlmError};
use crate::memory::{
    self, build_declarative_prompt, build_reminder_prompt, build_task_state_prompt,
    build_working_memory_prompt, parse_object_list_reply, parse_optional_object_list,
    DeclarativeQuery, DeclarativeSnapshot, TaskLog, WorkingMemory, EMPTY_TASK_STATE,
};
use crate::protocol;
use crate::tasks::{TaskId, TaskRegistry};
use crate::world::{Container, WorldState};

/// Upper bound on chained memory calls answered for one task command.
const MAX_MEMORY_ROUNDS: usize = 4;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no active task")]
    NoActiveTask,
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Memory(#[from] memory::MemoryError),
}

impl AgentError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        AgentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn transport_or(err: LlmError) -> Result<LlmError, AgentError> {
    match err {
        LlmError::Transport(msg) => Err(AgentError::Transport(msg)),
        other => Ok(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub memory_enabled: bool,
    pub strict_single_action: bool,
    pub params: GenerationParams,
    pub budget: Option<ContextBudget>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            memory_enabled: true,
            strict_single_action: true,
            params: GenerationParams::default(),
            budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Parse,
    InvalidAction,
    BatchViolation,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepOutcome {
    Executed { action: ActionCommand },
    /// The action was executed and the task goal now holds.
    TaskComplete { action: ActionCommand },
    Failure { reason: FailureReason, detail: String },
}

impl StepOutcome {
    fn failure(reason: FailureReason, detail: impl Into<String>) -> Self {
        StepOutcome::Failure {
            reason,
            detail: detail.into(),
        }
    }

    pub fn action(&self) -> Option<&ActionCommand> {
        match self {
            StepOutcome::Executed { action } | StepOutcome::TaskComplete { action } => Some(action),
            StepOutcome::Failure { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    TaskCommand { resume: bool, paused: Option<TaskId> },
    MemoryRetrieved { memory: String, worker_calls: usize },
    MemoryCallMissing,
    DeclarativeMismatch { reported: DeclarativeSnapshot, truth: DeclarativeSnapshot },
    HallucinatedObjects { labels: Vec<String> },
    WorkerError { detail: String },
    Step { retry: bool, #[serde(flatten)] outcome: StepOutcome },
    WorkingMemoryBypass { action: ActionCommand },
    Probe { reported_state: Option<BTreeMap<Container, Vec<String>>>, reported_remaining: Option<Vec<String>> },
    ChatReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    pub task: Option<TaskId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// What a task run produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub executed: Vec<ActionCommand>,
    pub failures: Vec<(FailureReason, String)>,
    pub completed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    /// `None` when the reply could not be parsed.
    pub task_state: Option<BTreeMap<Container, Vec<String>>>,
    pub remaining: Option<Vec<String>>,
}

pub struct AgentContext {
    registry: Arc<TaskRegistry>,
    config: AgentConfig,
    coordinator: ChatSession,
    coordinator_backend: Box<dyn LlmBackend>,
    worker: Box<dyn LlmBackend>,
    worlds: BTreeMap<TaskId, WorldState>,
    logs: BTreeMap<TaskId, TaskLog>,
    working: BTreeMap<TaskId, WorkingMemory>,
    active_task: Option<TaskId>,
    pending_retry: Option<String>,
    archived_transcripts: Vec<String>,
    events: Vec<Event>,
}

impl AgentContext {
    pub fn new(
        registry: Arc<TaskRegistry>,
        config: AgentConfig,
        coordinator_backend: Box<dyn LlmBackend>,
        worker: Box<dyn LlmBackend>,
    ) -> Self {
        let coordinator = Self::fresh_session(&registry, &config);
        Self {
            registry,
            config,
            coordinator,
            coordinator_backend,
            worker,
            worlds: BTreeMap::new(),
            logs: BTreeMap::new(),
            working: BTreeMap::new(),
            active_task: None,
            pending_retry: None,
            archived_transcripts: Vec::new(),
            events: Vec::new(),
        }
    }

    fn fresh_session(registry: &TaskRegistry, config: &AgentConfig) -> ChatSession {
        let session = ChatSession::new(
            registry.base_prompt(config.memory_enabled),
            config.params.clone(),
        );
        match config.budget {
            Some(budget) => session.with_budget(budget),
            None => session,
        }
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn coordinator(&self) -> &ChatSession {
        &self.coordinator
    }

    pub fn active_task(&self) -> Option<TaskId> {
        self.active_task
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn logs(&self) -> &BTreeMap<TaskId, TaskLog> {
        &self.logs
    }

    pub fn log(&self, task: TaskId) -> Option<&TaskLog> {
        self.logs.get(&task)
    }

    pub fn working_memory(&self, task: TaskId) -> Option<&WorkingMemory> {
        self.working.get(&task)
    }

    /// The task's world, created from its inventory on first use.
    pub fn world(&mut self, task: TaskId) -> &WorldState {
        let registry = &self.registry;
        self.worlds
            .entry(task)
            .or_insert_with(|| registry.load_world(task))
    }

    pub fn world_if_started(&self, task: TaskId) -> Option<&WorldState> {
        self.worlds.get(&task)
    }

    fn record(&mut self, task: Option<TaskId>, kind: EventKind) {
        let seq = self.events.len();
        self.events.push(Event { seq, task, kind });
    }

    fn chat(&mut self, text: &str) -> Result<Result<String, LlmError>, AgentError> {
        match self.coordinator.chat(self.coordinator_backend.as_mut(), text) {
            Ok(reply) => Ok(Ok(reply)),
            Err(err) => transport_or(err).map(Err),
        }
    }

    fn complete(&mut self, prompt: &str) -> Result<Result<String, LlmError>, AgentError> {
        match llm::complete(self.worker.as_mut(), prompt, &self.config.params) {
            Ok(reply) => Ok(Ok(reply)),
            Err(err) => transport_or(err).map(Err),
        }
    }

    /// Makes `task` the active task, pausing any other, and runs the memory
    /// retrieval protocol when memory is enabled.
    pub fn command_task(&mut self, task: TaskId) -> Result<(), AgentError> {
        let paused = self.active_task.filter(|t| *t != task);
        self.active_task = Some(task);
        self.pending_retry = None;
        let visible = self.world(task).visible_objects();
        let log_empty = self.logs.entry(task).or_insert_with(|| TaskLog::new(task)).is_empty();
        let resume = !log_empty;
        self.record(Some(task), EventKind::TaskCommand { resume, paused });

        let command = protocol::task_command(task, &visible, resume, self.config.memory_enabled);
        let mut reply = match self.chat(&command)? {
            Ok(reply) => reply,
            Err(err) => {
                self.record(Some(task), EventKind::WorkerError { detail: err.to_string() });
                return Ok(());
            }
        };
        if !self.config.memory_enabled {
            return Ok(());
        }
        let mut served_any = false;
        for _ in 0..MAX_MEMORY_ROUNDS {
            let calls: Vec<ActionCommand> = parse_reply(&reply).memory_calls().cloned().collect();
            if calls.is_empty() {
                break;
            }
            let mut next = None;
            for call in calls {
                let Ok(target) = call.argument.parse::<TaskId>() else {
                    self.record(
                        Some(task),
                        EventKind::WorkerError {
                            detail: format!("memory call for unknown task `{}`", call.argument),
                        },
                    );
                    continue;
                };
                let injection = match call.kind {
                    ActionKind::RetrieveDeclarativeMemory => self.retrieve_declarative(target)?,
                    _ => self.retrieve_working(target)?,
                };
                served_any = true;
                match self.chat(&injection)? {
                    Ok(r) => next = Some(r),
                    Err(err) => {
                        self.record(Some(task), EventKind::WorkerError { detail: err.to_string() });
                        return Ok(());
                    }
                }
            }
            match next {
                Some(r) => reply = r,
                None => break,
            }
        }
        if !served_any {
            self.record(Some(task), EventKind::MemoryCallMissing);
        }
        Ok(())
    }

    fn worker_list(&mut self, task: TaskId, prompt: &str, calls: &mut usize) -> Result<Vec<String>, AgentError> {
        *calls += 1;
        match self.complete(prompt)? {
            Ok(reply) => match parse_optional_object_list(&reply) {
                Ok(labels) => Ok(labels),
                Err(err) => {
                    self.record(Some(task), EventKind::WorkerError { detail: err.to_string() });
                    Ok(Vec::new())
                }
            },
            Err(err) => {
                self.record(Some(task), EventKind::WorkerError { detail: err.to_string() });
                Ok(Vec::new())
            }
        }
    }

    /// Worker extraction of the task's containers (one call each), then the
    /// remaining objects. Checked against the structural snapshot.
    fn retrieve_declarative(&mut self, task: TaskId) -> Result<String, AgentError> {
        let log = self.logs.entry(task).or_insert_with(|| TaskLog::new(task)).clone();
        let mut reported = DeclarativeSnapshot::default();
        let mut calls = 0;
        if !log.is_empty() {
            for container in task.containers() {
                let prompt = build_declarative_prompt(&log, DeclarativeQuery::Container(*container))?;
                let labels = self.worker_list(task, &prompt, &mut calls)?;
                if !labels.is_empty() {
                    reported.container_contents.insert(*container, labels);
                }
            }
            let prompt = build_declarative_prompt(&log, DeclarativeQuery::Remaining)?;
            reported.remaining = self.worker_list(task, &prompt, &mut calls)?;
            let truth = memory::snapshot_from_log(&log)?;
            if reported != truth {
                self.record(
                    Some(task),
                    EventKind::DeclarativeMismatch {
                        reported: reported.clone(),
                        truth,
                    },
                );
            }
        } else {
            reported.remaining = self.world(task).visible_objects();
        }
        self.record(
            Some(task),
            EventKind::MemoryRetrieved {
                memory: "declarative".into(),
                worker_calls: calls,
            },
        );
        Ok(protocol::declarative_injection(task, &reported))
    }

    fn retrieve_working(&mut self, task: TaskId) -> Result<String, AgentError> {
        let spec = self.registry.spec(task).clone();
        let visible = self.world(task).visible_objects();
        let mut calls = 0;

        let mut selective = Vec::new();
        if let Ok(prompt) = build_working_memory_prompt(&spec, &visible) {
            calls += 1;
            let reply = match self.complete(&prompt)? {
                Ok(reply) => parse_object_list_reply(&reply).map_err(|e| e.to_string()),
                Err(err) => Err(err.to_string()),
            };
            match reply {
                Ok(labels) => {
                    let mut hallucinated = Vec::new();
                    for label in labels {
                        match visible.iter().find(|v| v.eq_ignore_ascii_case(&label)) {
                            Some(v) if !selective.contains(v) => selective.push(v.clone()),
                            Some(_) => {}
                            None => hallucinated.push(label),
                        }
                    }
                    if !hallucinated.is_empty() {
                        self.record(Some(task), EventKind::HallucinatedObjects { labels: hallucinated });
                    }
                }
                Err(detail) => self.record(Some(task), EventKind::WorkerError { detail }),
            }
        }

        calls += 1;
        let task_reminders = match self.complete(&build_reminder_prompt(&spec))? {
            Ok(reply) => reply.trim().to_string(),
            Err(err) => {
                self.record(Some(task), EventKind::WorkerError { detail: err.to_string() });
                String::new()
            }
        };

        let snapshot = self
            .logs
            .get(&task)
            .and_then(|log| memory::snapshot_from_log(log).ok())
            .unwrap_or_default();
        let task_state = match build_task_state_prompt(&spec, &snapshot) {
            Some(prompt) => {
                calls += 1;
                match self.complete(&prompt)? {
                    Ok(reply) => reply.trim().to_string(),
                    Err(err) => {
                        self.record(Some(task), EventKind::WorkerError { detail: err.to_string() });
                        String::new()
                    }
                }
            }
            None => EMPTY_TASK_STATE.to_string(),
        };

        let memory = WorkingMemory {
            task_reminders,
            task_state,
            selective_objects: selective,
        };
        let injection = protocol::working_injection(task, &memory);
        self.working.insert(task, memory);
        self.record(
            Some(task),
            EventKind::MemoryRetrieved {
                memory: "working".into(),
                worker_calls: calls,
            },
        );
        Ok(injection)
    }

    /// Asks the coordinator for the next action of the active task and executes it.
    pub fn step(&mut self) -> Result<StepOutcome, AgentError> {
        let task = self.active_task.ok_or(AgentError::NoActiveTask)?;
        let retry = self.pending_retry.is_some();
        let outcome = self.step_inner(task)?;
        self.pending_retry = match &outcome {
            StepOutcome::Failure { detail, .. } => Some(detail.clone()),
            _ => None,
        };
        self.record(
            Some(task),
            EventKind::Step {
                retry,
                outcome: outcome.clone(),
            },
        );
        Ok(outcome)
    }

    fn step_inner(&mut self, task: TaskId) -> Result<StepOutcome, AgentError> {
        let visible = self.world(task).visible_objects();
        let request = match &self.pending_retry {
            Some(reason) => protocol::retry_request(task, &visible, reason),
            None => protocol::step_request(task, &visible),
        };
        let mut reply = match self.chat(&request)? {
            Ok(reply) => parse_reply(&reply),
            Err(err) => return Ok(StepOutcome::failure(FailureReason::Backend, err.to_string())),
        };

        // A coordinator may re-request memory mid-task; serve it once and ask again.
        if self.config.memory_enabled && reply.manipulations().next().is_none() {
            let call = reply.memory_calls().next().cloned();
            if let Some(call) = call {
                let target = call.argument.parse::<TaskId>().unwrap_or(task);
                let injection = match call.kind {
                    ActionKind::RetrieveDeclarativeMemory => self.retrieve_declarative(target)?,
                    _ => self.retrieve_working(target)?,
                };
                reply = match self.chat(&injection)? {
                    Ok(text) => parse_reply(&text),
                    Err(err) => return Ok(StepOutcome::failure(FailureReason::Backend, err.to_string())),
                };
            }
        }
        self.execute_reply(task, &reply)
    }

    fn execute_reply(&mut self, task: TaskId, reply: &ParsedReply) -> Result<StepOutcome, AgentError> {
        let actions: Vec<ActionCommand> = reply.manipulations().cloned().collect();
        if actions.is_empty() {
            let detail = match reply.errors.first() {
                Some(err) => err.to_string(),
                None => "no action found in the reply".to_string(),
            };
            return Ok(StepOutcome::failure(FailureReason::Parse, detail));
        }
        if self.config.strict_single_action {
            if actions.len() > 1 {
                return Ok(StepOutcome::failure(
                    FailureReason::BatchViolation,
                    format!("{} actions in one reply", actions.len()),
                ));
            }
            if let Some(err) = reply.errors.first() {
                return Ok(StepOutcome::failure(FailureReason::Parse, err.to_string()));
            }
        }
        let mut outcome = None;
        for action in actions {
            outcome = Some(self.execute(task, &action));
            if matches!(outcome, Some(StepOutcome::Failure { .. } | StepOutcome::TaskComplete { .. })) {
                break;
            }
        }
        Ok(outcome.expect("at least one action"))
    }

    /// Applies one action to the world and the log together.
    fn execute(&mut self, task: TaskId, action: &ActionCommand) -> StepOutcome {
        self.world(task);
        let world = self.worlds.get_mut(&task).expect("world created above");
        if let Err(err) = world.apply_in_place(action) {
            return StepOutcome::failure(FailureReason::InvalidAction, err.to_string());
        }
        let canonical = ActionCommand::new(
            action.kind,
            world
                .find(&action.argument)
                .map(|o| o.label.clone())
                .unwrap_or_else(|| action.argument.clone()),
        );
        let log = self.logs.entry(task).or_insert_with(|| TaskLog::new(task));
        log.append(&canonical, world);
        let complete = self.registry.is_complete(task, world);

        if self.config.memory_enabled {
            if let Some(memory) = self.working.get(&task) {
                let inside = memory
                    .selective_objects
                    .iter()
                    .any(|s| s.eq_ignore_ascii_case(&canonical.argument));
                if !inside {
                    self.record(
                        Some(task),
                        EventKind::WorkingMemoryBypass {
                            action: canonical.clone(),
                        },
                    );
                }
            }
        }
        if complete {
            StepOutcome::TaskComplete { action: canonical }
        } else {
            StepOutcome::Executed { action: canonical }
        }
    }

    /// Runs up to `slots` action slots on the active task. A failed step is
    /// retried once with a corrective message; a second failure forfeits the slot.
    pub fn run_slots(&mut self, slots: usize) -> Result<TaskRun, AgentError> {
        let task = self.active_task.ok_or(AgentError::NoActiveTask)?;
        let mut run = TaskRun::default();
        let world = self.world(task).clone();
        if self.registry.is_complete(task, &world) {
            run.completed = true;
            return Ok(run);
        }
        'slots: for _ in 0..slots {
            for _attempt in 0..2 {
                match self.step()? {
                    StepOutcome::Executed { action } => {
                        run.executed.push(action);
                        continue 'slots;
                    }
                    StepOutcome::TaskComplete { action } => {
                        run.executed.push(action);
                        run.completed = true;
                        break 'slots;
                    }
                    StepOutcome::Failure { reason, detail } => run.failures.push((reason, detail)),
                }
            }
        }
        self.pending_retry = None;
        Ok(run)
    }

    /// Runs the active task for as many slots as it still has required actions.
    pub fn run_to_completion(&mut self) -> Result<TaskRun, AgentError> {
        let task = self.active_task.ok_or(AgentError::NoActiveTask)?;
        let world = self.world(task).clone();
        let remaining = self.registry.oracle_actions(task, &world).len();
        self.run_slots(remaining)
    }

    /// Asks the coordinator for the task state and the remaining objects.
    pub fn probe_retention(&mut self, task: TaskId) -> Result<RetentionReport, AgentError> {
        let mut report = RetentionReport::default();
        if let Ok(reply) = self.chat(&protocol::task_state_probe(task))? {
            report.task_state = protocol::parse_task_state_reply(task, &reply);
        }
        if let Ok(reply) = self.chat(&protocol::environment_probe(task))? {
            report.remaining = protocol::parse_environment_reply(&reply);
        }
        self.record(
            Some(task),
            EventKind::Probe {
                reported_state: report.task_state.clone(),
                reported_remaining: report.remaining.clone(),
            },
        );
        Ok(report)
    }

    /// Simulator ground truth for a task: its containers and what is left on the table.
    pub fn ground_truth(&mut self, task: TaskId) -> (BTreeMap<Container, Vec<String>>, Vec<String>) {
        let world = self.world(task);
        let containers = task
            .containers()
            .iter()
            .map(|c| (*c, world.contents(*c)))
            .collect();
        (containers, world.visible_objects())
    }

    /// Starts a new coordinator conversation; worlds and logs are kept.
    pub fn reset_chat(&mut self) {
        let old = std::mem::replace(
            &mut self.coordinator,
            Self::fresh_session(&self.registry, &self.config),
        );
        self.archived_transcripts.push(old.transcript());
        self.working.clear();
        self.active_task = None;
        self.pending_retry = None;
        self.record(None, EventKind::ChatReset);
    }

    /// Every coordinator conversation so far, oldest first.
    pub fn transcript(&self) -> String {
        let mut out = self.archived_transcripts.concat();
        out.push_str(&self.coordinator.transcript());
        out
    }

    pub fn events_ndjson(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }

    /// Writes `logs/<task>.log`, `transcript.txt` and `events.ndjson` under `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir).map_err(|e| AgentError::io(dir, e))?;
        for log in self.logs.values() {
            log.write_to(dir)?;
        }
        let transcript = dir.join("transcript.txt");
        std::fs::write(&transcript, self.transcript()).map_err(|e| AgentError::io(&transcript, e))?;
        let events = dir.join("events.ndjson");
        std::fs::write(&events, self.events_ndjson()).map_err(|e| AgentError::io(&events, e))?;
        Ok(())
    }
}
