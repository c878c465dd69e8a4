//! Python bindings: worlds, the action grammar, task logs and prompts, the
//! agent loop and whole experiments.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tabletop_agent::action::{parse_reply as parse_reply_text, ActionCommand};
use tabletop_agent::agent::{AgentConfig, AgentContext, StepOutcome};
use tabletop_agent::config::{BackendFactory, BackendSpec, ExperimentConfig, Mode, Scoring, SpecFactory};
use tabletop_agent::harness::{self, score_probe};
use tabletop_agent::memory::{self, DeclarativeQuery};
use tabletop_agent::tasks::{TaskId, TaskRegistry};
use tabletop_agent::world::{Container, WorldState};

fn value_error(err: impl ToString) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn runtime_error(err: impl ToString) -> PyErr {
    PyRuntimeError::new_err(err.to_string())
}

fn task_id(name: &str) -> PyResult<TaskId> {
    name.parse().map_err(value_error)
}

fn container(name: &str) -> PyResult<Container> {
    Container::from_name(name).ok_or_else(|| value_error(format!("unknown container `{name}`")))
}

/// Exactly one `<kind(argument)>` command.
fn single_command(text: &str) -> PyResult<ActionCommand> {
    let parsed = parse_reply_text(text);
    if let Some(err) = parsed.errors.first() {
        return Err(value_error(err));
    }
    match parsed.commands.as_slice() {
        [command] => Ok(command.clone()),
        [] => Err(value_error(format!("no command in `{text}`"))),
        _ => Err(value_error(format!("more than one command in `{text}`"))),
    }
}

fn named(map: BTreeMap<Container, Vec<String>>) -> BTreeMap<String, Vec<String>> {
    map.into_iter().map(|(c, labels)| (c.name().to_string(), labels)).collect()
}

fn registry() -> Arc<TaskRegistry> {
    Arc::new(TaskRegistry::builtin())
}

/// The table and containers of one task.
#[pyclass(name = "World", skip_from_py_object)]
#[derive(Clone)]
struct PyWorld {
    task: TaskId,
    inner: WorldState,
}

#[pymethods]
impl PyWorld {
    #[new]
    fn new(task: &str) -> PyResult<Self> {
        let task = task_id(task)?;
        Ok(Self {
            task,
            inner: TaskRegistry::builtin().load_world(task),
        })
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.task.as_str()
    }

    fn visible_objects(&self) -> Vec<String> {
        self.inner.visible_objects()
    }

    fn pointed(&self) -> Vec<String> {
        self.inner.pointed().to_vec()
    }

    /// Executes one action such as `<move_to_box_1(apple)>`; raises ValueError if it cannot.
    fn apply(&mut self, action: &str) -> PyResult<()> {
        let command = single_command(action)?;
        self.inner.apply_in_place(&command).map_err(value_error)
    }

    fn contents(&self, container_name: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.contents(container(container_name)?))
    }

    fn projection(&self) -> BTreeMap<String, Vec<String>> {
        named(self.inner.projection())
    }

    fn is_complete(&self) -> bool {
        TaskRegistry::builtin().is_complete(self.task, &self.inner)
    }

    fn oracle_actions(&self) -> Vec<String> {
        TaskRegistry::builtin()
            .oracle_actions(self.task, &self.inner)
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("World(task={:?}, table={:?})", self.task.as_str(), self.inner.visible_objects())
    }
}

/// A task's action log in the declarative-memory format.
#[pyclass(name = "TaskLog", skip_from_py_object)]
#[derive(Clone)]
struct PyTaskLog {
    inner: memory::TaskLog,
}

#[pymethods]
impl PyTaskLog {
    #[new]
    fn new(task: &str) -> PyResult<Self> {
        Ok(Self {
            inner: memory::TaskLog::new(task_id(task)?),
        })
    }

    #[staticmethod]
    fn parse(task: &str, text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: memory::TaskLog::parse(task_id(task)?, text).map_err(value_error)?,
        })
    }

    /// Records `action` with the state of `world` after it was executed.
    fn append(&mut self, action: &str, world: &PyWorld) -> PyResult<()> {
        let command = single_command(action)?;
        self.inner.append(&command, &world.inner);
        Ok(())
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn actions(&self) -> Vec<String> {
        self.inner.entries.iter().map(|e| e.action.to_string()).collect()
    }

    /// Latest contents of each container and the remaining objects.
    fn snapshot(&self) -> PyResult<(BTreeMap<String, Vec<String>>, Vec<String>)> {
        let snapshot = memory::snapshot_from_log(&self.inner).map_err(value_error)?;
        Ok((named(snapshot.container_contents), snapshot.remaining))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Coordinator/worker agent over a mock or remote backend.
#[pyclass(name = "Agent", unsendable)]
struct PyAgent {
    inner: AgentContext,
    scoring: Scoring,
}

fn outcome_dict<'py>(py: Python<'py>, outcome: &StepOutcome) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    match outcome {
        StepOutcome::Executed { action } => {
            dict.set_item("outcome", "executed")?;
            dict.set_item("action", action.to_string())?;
        }
        StepOutcome::TaskComplete { action } => {
            dict.set_item("outcome", "task_complete")?;
            dict.set_item("action", action.to_string())?;
        }
        StepOutcome::Failure { reason, detail } => {
            dict.set_item("outcome", "failure")?;
            dict.set_item("reason", format!("{reason:?}").to_lowercase())?;
            dict.set_item("detail", detail)?;
        }
    }
    Ok(dict)
}

#[pymethods]
impl PyAgent {
    #[new]
    #[pyo3(signature = (backend = "mock", memory = true, strict = true))]
    fn new(backend: &str, memory: bool, strict: bool) -> PyResult<Self> {
        let config = ExperimentConfig {
            backend: backend.parse::<BackendSpec>().map_err(value_error)?,
            memory,
            strict_single_action: strict,
            ..ExperimentConfig::default()
        };
        let registry = registry();
        let factory = SpecFactory::new(&config, registry.clone()).map_err(value_error)?;
        let inner = AgentContext::new(
            registry,
            AgentConfig {
                memory_enabled: memory,
                strict_single_action: strict,
                ..AgentConfig::default()
            },
            factory.coordinator(0),
            factory.worker(0),
        );
        Ok(Self {
            inner,
            scoring: config.retention_scoring,
        })
    }

    /// Starts, switches to or resumes a task.
    fn command(&mut self, task: &str) -> PyResult<()> {
        self.inner.command_task(task_id(task)?).map_err(runtime_error)
    }

    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let outcome = self.inner.step().map_err(runtime_error)?;
        outcome_dict(py, &outcome)
    }

    /// Steps the active task for as many slots as it has required actions left.
    /// Returns (executed actions, failure reasons, completed).
    fn run_to_completion(&mut self) -> PyResult<(Vec<String>, Vec<String>, bool)> {
        let run = self.inner.run_to_completion().map_err(runtime_error)?;
        Ok((
            run.executed.iter().map(ToString::to_string).collect(),
            run.failures.iter().map(|(r, _)| format!("{r:?}").to_lowercase()).collect(),
            run.completed,
        ))
    }

    /// Asks for the task state and remaining objects; returns (task retention, environment retention).
    fn probe(&mut self, task: &str) -> PyResult<(f64, f64)> {
        let task = task_id(task)?;
        let report = self.inner.probe_retention(task).map_err(runtime_error)?;
        let truth = self.inner.ground_truth(task);
        Ok(score_probe(&report, &truth, self.scoring))
    }

    fn world(&mut self, task: &str) -> PyResult<PyWorld> {
        let task = task_id(task)?;
        Ok(PyWorld {
            task,
            inner: self.inner.world(task).clone(),
        })
    }

    fn log(&self, task: &str) -> PyResult<Option<PyTaskLog>> {
        Ok(self
            .inner
            .log(task_id(task)?)
            .map(|log| PyTaskLog { inner: log.clone() }))
    }

    fn transcript(&self) -> String {
        self.inner.transcript()
    }

    fn events(&self) -> String {
        self.inner.events_ndjson()
    }
}

/// Splits a reply into commands `(kind, argument)`, leftover prose and parse errors.
#[pyfunction]
fn parse_reply(text: &str) -> (Vec<(String, String)>, String, Vec<String>) {
    let parsed = parse_reply_text(text);
    (
        parsed
            .commands
            .iter()
            .map(|c| (c.kind.name().to_string(), c.argument.clone()))
            .collect(),
        parsed.prose,
        parsed.errors.iter().map(ToString::to_string).collect(),
    )
}

#[pyfunction]
#[pyo3(signature = (memory = true))]
fn base_prompt(memory: bool) -> String {
    TaskRegistry::builtin().base_prompt(memory)
}

#[pyfunction]
fn working_memory_prompt(task: &str, objects: Vec<String>) -> PyResult<String> {
    let registry = TaskRegistry::builtin();
    memory::build_working_memory_prompt(registry.spec(task_id(task)?), &objects).map_err(value_error)
}

/// `target` is a container name such as "Box 1", or "remaining".
#[pyfunction]
fn declarative_prompt(log: &PyTaskLog, target: &str) -> PyResult<String> {
    let query = if target.eq_ignore_ascii_case("remaining") {
        DeclarativeQuery::Remaining
    } else {
        DeclarativeQuery::Container(container(target)?)
    };
    memory::build_declarative_prompt(&log.inner, query).map_err(value_error)
}

#[pyfunction]
fn jaccard(reported: Vec<String>, truth: Vec<String>) -> f64 {
    harness::jaccard(&reported, &truth)
}

/// Runs an experiment and returns one dict per task with the aggregated metrics.
#[pyfunction]
#[pyo3(signature = (mode = "standalone", trials = 50, memory = true, backend = "mock", seed = 0, output = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    mode: &str,
    trials: usize,
    memory: bool,
    backend: &str,
    seed: u64,
    output: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config = ExperimentConfig {
        mode: mode.parse::<Mode>().map_err(value_error)?,
        trials,
        memory,
        backend: backend.parse::<BackendSpec>().map_err(value_error)?,
        seed,
        parallelism: 0,
        ..ExperimentConfig::default()
    };
    config.validate().map_err(value_error)?;
    let registry = registry();
    let factory = SpecFactory::new(&config, registry.clone()).map_err(value_error)?;
    let result = py
        .detach(|| harness::run_experiment(&config, registry, &factory, output.as_deref()))
        .map_err(runtime_error)?;
    result
        .table
        .rows
        .iter()
        .map(|row| {
            let dict = PyDict::new(py);
            dict.set_item("task", &row.task)?;
            dict.set_item("model", &row.model)?;
            dict.set_item("mode", &row.mode)?;
            dict.set_item("memory", row.memory)?;
            dict.set_item("success", row.success)?;
            dict.set_item("task_retention", row.task_retention)?;
            dict.set_item("env_retention", row.env_retention)?;
            Ok(dict)
        })
        .collect()
}

#[pymodule]
pub fn tabletop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorld>()?;
    m.add_class::<PyTaskLog>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(parse_reply, m)?)?;
    m.add_function(wrap_pyfunction!(base_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(working_memory_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(declarative_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("TASKS", TaskId::ALL.map(TaskId::as_str).to_vec())?;
    Ok(())
}
