//! Trial execution for the three evaluation modes and retention scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentContext, AgentError, FailureReason, RetentionReport, TaskRun};
use crate::config::{BackendFactory, ExperimentConfig, Mode, Scoring};
use crate::memory::TaskLog;
use crate::report::{MetricsRow, MetricsTable, ReportError};
use crate::tasks::{TaskId, TaskRegistry};
use crate::world::Container;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no valid trials to aggregate")]
    NoValidTrials,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot build the trial thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: TaskId,
    pub success: bool,
    pub task_retention: f64,
    pub env_retention: f64,
    pub actions: usize,
    pub failure_reasons: Vec<FailureReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    /// Set when a transport failure aborted the trial.
    pub invalid_reason: Option<String>,
    pub tasks: Vec<TaskOutcome>,
    pub transcript: Option<PathBuf>,
}

impl TrialResult {
    pub fn is_valid(&self) -> bool {
        self.invalid_reason.is_none()
    }

    pub fn outcome(&self, task: TaskId) -> Option<&TaskOutcome> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: String,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialResult>,
    pub table: MetricsTable,
}

impl ExperimentResult {
    pub fn invalid_trials(&self) -> usize {
        self.trials.iter().filter(|t| !t.is_valid()).count()
    }
}

fn normalized(labels: &[String]) -> BTreeSet<String> {
    labels.iter().map(|l| l.trim().to_ascii_lowercase()).collect()
}

/// |a ∩ b| / |a ∪ b|, with two empty sets scoring 1.
pub fn jaccard(reported: &[String], truth: &[String]) -> f64 {
    let a = normalized(reported);
    let b = normalized(truth);
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Mean score over probe sets; an unparseable report (`None`) scores 0.
pub fn score_retention(probes: &[(Option<&[String]>, &[String])], scoring: Scoring) -> f64 {
    if probes.is_empty() {
        return 1.0;
    }
    let total: f64 = probes
        .iter()
        .map(|(reported, truth)| match reported {
            None => 0.0,
            Some(reported) => match scoring {
                Scoring::Jaccard => jaccard(reported, truth),
                Scoring::Exact => f64::from(u8::from(normalized(reported) == normalized(truth))),
            },
        })
        .sum();
    total / probes.len() as f64
}

/// Task and environment retention of one probe against simulator ground truth.
pub fn score_probe(
    report: &RetentionReport,
    truth: &(BTreeMap<Container, Vec<String>>, Vec<String>),
    scoring: Scoring,
) -> (f64, f64) {
    let (containers, remaining) = truth;
    let empty = Vec::new();
    let probes: Vec<(Option<&[String]>, &[String])> = containers
        .iter()
        .map(|(container, truth)| {
            let reported = report
                .task_state
                .as_ref()
                .map(|state| state.get(container).unwrap_or(&empty).as_slice());
            (reported, truth.as_slice())
        })
        .collect();
    let task = score_retention(&probes, scoring);
    let env = score_retention(&[(report.remaining.as_deref(), remaining.as_slice())], scoring);
    (task, env)
}

struct TaskProgress {
    actions: usize,
    failures: Vec<FailureReason>,
    completed: bool,
    retention: (f64, f64),
}

impl TaskProgress {
    fn new() -> Self {
        Self {
            actions: 0,
            failures: Vec::new(),
            completed: false,
            retention: (0.0, 0.0),
        }
    }

    fn absorb(&mut self, run: TaskRun) {
        self.actions += run.executed.len();
        self.failures.extend(run.failures.into_iter().map(|(reason, _)| reason));
        self.completed = run.completed;
    }
}

/// Artifacts gathered from the one or more contexts a trial used.
#[derive(Default)]
struct Artifacts {
    logs: Vec<TaskLog>,
    transcript: String,
    events: String,
}

impl Artifacts {
    fn collect(&mut self, agent: &AgentContext) {
        self.logs.extend(agent.logs().values().cloned());
        self.transcript.push_str(&agent.transcript());
        self.events.push_str(&agent.events_ndjson());
    }

    fn write(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let io = |path: &Path, source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for log in &self.logs {
            log.write_to(dir).map_err(|e| HarnessError::Io {
                path: TaskLog::path_in(dir, log.task),
                source: std::io::Error::other(e.to_string()),
            })?;
        }
        let transcript = dir.join("transcript.txt");
        std::fs::write(&transcript, &self.transcript).map_err(|e| io(&transcript, e))?;
        let events = dir.join("events.ndjson");
        std::fs::write(&events, &self.events).map_err(|e| io(&events, e))?;
        Ok(transcript)
    }
}

pub struct TrialRunner<'a> {
    pub config: &'a ExperimentConfig,
    pub registry: Arc<TaskRegistry>,
    pub factory: &'a dyn BackendFactory,
}

impl<'a> TrialRunner<'a> {
    pub fn new(config: &'a ExperimentConfig, registry: Arc<TaskRegistry>, factory: &'a dyn BackendFactory) -> Self {
        Self {
            config,
            registry,
            factory,
        }
    }

    fn agent(&self, trial: usize) -> AgentContext {
        let mut params = self.config.params.clone();
        if params.seed.is_none() {
            params.seed = Some(self.config.seed.wrapping_add(trial as u64));
        }
        AgentContext::new(
            self.registry.clone(),
            AgentConfig {
                memory_enabled: self.config.memory,
                strict_single_action: self.config.strict_single_action,
                params,
                budget: self.config.budget(),
            },
            self.factory.coordinator(trial),
            self.factory.worker(trial),
        )
    }

    fn finish_task(&self, agent: &mut AgentContext, task: TaskId, progress: &mut TaskProgress) -> Result<(), AgentError> {
        let report = agent.probe_retention(task)?;
        let truth = agent.ground_truth(task);
        progress.retention = score_probe(&report, &truth, self.config.retention_scoring);
        Ok(())
    }

    fn run_mode(
        &self,
        trial: usize,
        progress: &mut BTreeMap<TaskId, TaskProgress>,
        artifacts: &mut Artifacts,
    ) -> Result<(), AgentError> {
        match self.config.mode {
            Mode::Standalone => {
                for task in TaskId::ALL {
                    let mut agent = self.agent(trial);
                    let result = self.run_whole_task(&mut agent, task, progress);
                    artifacts.collect(&agent);
                    result?;
                }
            }
            Mode::Consecutive => {
                let mut agent = self.agent(trial);
                let result = TaskId::ALL
                    .into_iter()
                    .try_for_each(|task| self.run_whole_task(&mut agent, task, progress));
                artifacts.collect(&agent);
                result?;
            }
            Mode::Intervened => {
                let mut agent = self.agent(trial);
                let result = self.run_intervened(&mut agent, progress);
                artifacts.collect(&agent);
                result?;
            }
        }
        Ok(())
    }

    fn run_whole_task(
        &self,
        agent: &mut AgentContext,
        task: TaskId,
        progress: &mut BTreeMap<TaskId, TaskProgress>,
    ) -> Result<(), AgentError> {
        let entry = progress.get_mut(&task).expect("every task tracked");
        agent.command_task(task)?;
        entry.absorb(agent.run_to_completion()?);
        self.finish_task(agent, task, entry)
    }

    fn run_intervened(
        &self,
        agent: &mut AgentContext,
        progress: &mut BTreeMap<TaskId, TaskProgress>,
    ) -> Result<(), AgentError> {
        for task in TaskId::ALL {
            agent.command_task(task)?;
            let slots = self.registry.intervention_index(task);
            progress.get_mut(&task).expect("tracked").absorb(agent.run_slots(slots)?);
        }
        for task in TaskId::ALL {
            let entry = progress.get_mut(&task).expect("tracked");
            agent.command_task(task)?;
            entry.absorb(agent.run_to_completion()?);
            self.finish_task(agent, task, entry)?;
        }
        agent.reset_chat();
        Ok(())
    }

    /// Runs one trial; artifacts go to `dir` when given.
    pub fn run_trial(&self, trial: usize, dir: Option<&Path>) -> Result<TrialResult, HarnessError> {
        let mut progress: BTreeMap<TaskId, TaskProgress> =
            TaskId::ALL.into_iter().map(|t| (t, TaskProgress::new())).collect();
        let mut artifacts = Artifacts::default();
        let invalid_reason = match self.run_mode(trial, &mut progress, &mut artifacts) {
            Ok(()) => None,
            Err(err) => {
                tracing::warn!(trial, error = %err, "trial aborted");
                Some(err.to_string())
            }
        };
        let transcript = match dir {
            Some(dir) => Some(artifacts.write(dir)?),
            None => None,
        };
        let tasks = TaskId::ALL
            .into_iter()
            .map(|task| {
                let p = &progress[&task];
                let required = self.registry.required_actions(task);
                TaskOutcome {
                    task,
                    success: p.completed && p.failures.is_empty() && p.actions == required,
                    task_retention: p.retention.0,
                    env_retention: p.retention.1,
                    actions: p.actions,
                    failure_reasons: p.failures.clone(),
                }
            })
            .collect();
        Ok(TrialResult {
            trial,
            invalid_reason,
            tasks,
            transcript,
        })
    }
}

pub fn trial_dir(run_dir: &Path, trial: usize) -> PathBuf {
    run_dir.join(format!("trial-{trial:03}"))
}

/// Per-task means over valid trials.
pub fn aggregate(
    results: &[TrialResult],
    model: &str,
    mode: Mode,
    memory: bool,
) -> Result<MetricsTable, HarnessError> {
    let valid: Vec<&TrialResult> = results.iter().filter(|r| r.is_valid()).collect();
    if valid.is_empty() {
        return Err(HarnessError::NoValidTrials);
    }
    let n = valid.len() as f64;
    let rows = TaskId::ALL
        .into_iter()
        .map(|task| {
            let outcomes: Vec<&TaskOutcome> = valid.iter().filter_map(|r| r.outcome(task)).collect();
            let successes = outcomes.iter().filter(|o| o.success).count();
            MetricsRow {
                task: task.as_str().to_string(),
                model: model.to_string(),
                mode: mode.as_str().to_string(),
                memory,
                success: successes as f64 / n,
                task_retention: outcomes.iter().map(|o| o.task_retention).sum::<f64>() / n,
                env_retention: outcomes.iter().map(|o| o.env_retention).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(MetricsTable {
        rows,
        valid_trials: valid.len(),
        invalid_trials: results.len() - valid.len(),
    })
}

/// Runs all configured trials, writing the run directory when `run_dir` is given.
pub fn run_experiment(
    config: &ExperimentConfig,
    registry: Arc<TaskRegistry>,
    factory: &dyn BackendFactory,
    run_dir: Option<&Path>,
) -> Result<ExperimentResult, HarnessError> {
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let snapshot = dir.join("config.snapshot");
        std::fs::write(&snapshot, config.snapshot()).map_err(|source| HarnessError::Io {
            path: snapshot,
            source,
        })?;
    }
    let runner = TrialRunner::new(config, registry, factory);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    let trials: Vec<TrialResult> = pool.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                let dir = run_dir.map(|d| trial_dir(d, trial));
                runner.run_trial(trial, dir.as_deref())
            })
            .collect::<Result<_, _>>()
    })?;
    let model = factory.model_name();
    let table = aggregate(&trials, &model, config.mode, config.memory)?;
    if let Some(dir) = run_dir {
        table.write_to(dir)?;
    }
    Ok(ExperimentResult {
        model,
        config: config.clone(),
        trials,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SpecFactory;

    fn labels(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&labels(&["pear", "apple"]), &labels(&["apple", "pear"])), 1.0);
        assert_eq!(jaccard(&labels(&["pear"]), &labels(&["pear", "apple"])), 0.5);
        assert_eq!(jaccard(&[], &[]), 1.0);
        assert_eq!(jaccard(&labels(&["cup"]), &[]), 0.0);
    }

    #[test]
    fn probe_sets_average_equally() {
        let box1 = labels(&["pear", "apple"]);
        let box2 = labels(&["cup"]);
        let reported1 = labels(&["pear"]);
        let score = score_retention(
            &[(Some(&reported1), &box1), (Some(&box2), &box2)],
            Scoring::Jaccard,
        );
        assert_eq!(score, 0.75);
        assert_eq!(score_retention(&[(None, &box1)], Scoring::Jaccard), 0.0);
        assert_eq!(
            score_retention(&[(Some(&reported1), &box1)], Scoring::Exact),
            0.0
        );
    }

    #[test]
    fn oracle_trial_succeeds_in_every_mode() {
        let registry = Arc::new(TaskRegistry::builtin());
        for mode in Mode::ALL {
            let config = ExperimentConfig {
                mode,
                trials: 1,
                ..ExperimentConfig::default()
            };
            let factory = SpecFactory::new(&config, registry.clone()).unwrap();
            let runner = TrialRunner::new(&config, registry.clone(), &factory);
            let result = runner.run_trial(0, None).unwrap();
            assert!(result.is_valid());
            for outcome in &result.tasks {
                assert!(outcome.success, "{mode} {:?}", outcome);
                assert_eq!(outcome.task_retention, 1.0);
                assert_eq!(outcome.env_retention, 1.0);
            }
        }
    }

    #[test]
    fn aggregate_requires_a_valid_trial() {
        let invalid = TrialResult {
            trial: 0,
            invalid_reason: Some("down".into()),
            tasks: Vec::new(),
            transcript: None,
        };
        assert!(matches!(
            aggregate(&[invalid], "m", Mode::Standalone, true),
            Err(HarnessError::NoValidTrials)
        ));
    }
}
