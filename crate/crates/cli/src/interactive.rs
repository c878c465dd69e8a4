//! Line-oriented session: task commands in, step outcomes and world diffs out.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use tabletop_agent::agent::{AgentConfig, AgentContext, AgentError, StepOutcome};
use tabletop_agent::config::{BackendFactory, ExperimentConfig, SpecFactory};
use tabletop_agent::harness::score_probe;
use tabletop_agent::tasks::TaskId;
use tabletop_agent::world::WorldState;

use crate::CliError;

const HELP: &str = "\
commands:
  start <task>     begin a task (separate, arrange, point, recipe, tower)
  switch <task>    pause the active task and move to another
  resume <task>    return to a paused task
  step [n]         ask for the next n actions (default 1)
  run              step the active task until it is finished
  probe [task]     ask for the task state and score it against the table
  state [task]     show the table and the containers
  log [task]       print the task log
  reset            start a new conversation, keeping the table
  help             show this text
  quit             save the session and leave";

pub fn cmd_interactive(config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    let registry = Arc::new(config.registry()?);
    let factory = SpecFactory::new(config, registry.clone())?;
    let agent = AgentContext::new(
        registry,
        AgentConfig {
            memory_enabled: config.memory,
            strict_single_action: config.strict_single_action,
            params: config.params.clone(),
            budget: config.budget(),
        },
        factory.coordinator(0),
        factory.worker(0),
    );
    let stdin = io::stdin();
    let mut session = Session {
        agent,
        scoring: config.retention_scoring,
        out: io::stdout(),
    };
    session.run(stdin.lock()).map_err(|e| CliError::Internal(e.to_string()))?;
    session
        .agent
        .write_artifacts(output)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    println!("session saved to {}", output.join("transcript.txt").display());
    Ok(())
}

struct Session<W: Write> {
    agent: AgentContext,
    scoring: tabletop_agent::config::Scoring,
    out: W,
}

impl<W: Write> Session<W> {
    fn run(&mut self, input: impl BufRead) -> io::Result<()> {
        writeln!(self.out, "type `help` for commands")?;
        for line in input.lines() {
            let line = line?;
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                [] => {}
                ["quit" | "exit"] => break,
                ["help"] => writeln!(self.out, "{HELP}")?,
                ["start" | "switch" | "resume", task] => self.command(task)?,
                ["step"] => self.steps(1)?,
                ["step", n] => match n.parse() {
                    Ok(n) => self.steps(n)?,
                    Err(_) => writeln!(self.out, "step takes a number\n{HELP}")?,
                },
                ["run"] => self.run_active()?,
                ["probe"] => self.with_task(None, Self::probe)?,
                ["probe", task] => self.with_task(Some(task), Self::probe)?,
                ["state"] => self.with_task(None, Self::state)?,
                ["state", task] => self.with_task(Some(task), Self::state)?,
                ["log"] => self.with_task(None, Self::log)?,
                ["log", task] => self.with_task(Some(task), Self::log)?,
                ["reset"] => {
                    self.agent.reset_chat();
                    writeln!(self.out, "conversation reset")?;
                }
                _ => writeln!(self.out, "unknown command `{line}`\n{HELP}")?,
            }
        }
        Ok(())
    }

    fn report_error(&mut self, err: AgentError) -> io::Result<()> {
        writeln!(self.out, "error: {err}")
    }

    fn with_task(
        &mut self,
        name: Option<&str>,
        action: fn(&mut Self, TaskId) -> io::Result<()>,
    ) -> io::Result<()> {
        let task = match name {
            Some(name) => name.parse::<TaskId>().ok(),
            None => self.agent.active_task(),
        };
        match task {
            Some(task) => action(self, task),
            None => writeln!(self.out, "no such task; start one first\n{HELP}"),
        }
    }

    fn command(&mut self, name: &str) -> io::Result<()> {
        let Ok(task) = name.parse::<TaskId>() else {
            return writeln!(self.out, "unknown task `{name}`\n{HELP}");
        };
        let resumed = self.agent.log(task).is_some_and(|l| !l.is_empty());
        match self.agent.command_task(task) {
            Ok(()) => writeln!(
                self.out,
                "active task: {task}{}",
                if resumed { " (resumed)" } else { "" }
            ),
            Err(err) => self.report_error(err),
        }
    }

    fn steps(&mut self, n: usize) -> io::Result<()> {
        let Some(task) = self.agent.active_task() else {
            return writeln!(self.out, "no active task; use `start <task>`");
        };
        for _ in 0..n {
            let before = self.agent.world(task).clone();
            match self.agent.step() {
                Ok(outcome) => {
                    let done = matches!(outcome, StepOutcome::TaskComplete { .. });
                    self.echo(task, &before, &outcome)?;
                    if done {
                        break;
                    }
                }
                Err(err) => return self.report_error(err),
            }
        }
        Ok(())
    }

    fn run_active(&mut self) -> io::Result<()> {
        let Some(task) = self.agent.active_task() else {
            return writeln!(self.out, "no active task; use `start <task>`");
        };
        let remaining = {
            let world = self.agent.world(task).clone();
            self.agent.registry().oracle_actions(task, &world).len()
        };
        // Room for one retry per action.
        self.steps(remaining * 2)
    }

    fn echo(&mut self, task: TaskId, before: &WorldState, outcome: &StepOutcome) -> io::Result<()> {
        let action = match outcome {
            StepOutcome::Failure { reason, detail } => {
                let reason = format!("{reason:?}").to_lowercase();
                return writeln!(self.out, "failed ({reason}): {detail}");
            }
            StepOutcome::Executed { action } | StepOutcome::TaskComplete { action } => action,
        };
        writeln!(self.out, "action: {action}")?;
        let after = self.agent.world(task).clone();
        for (old, new) in before.objects().iter().zip(after.objects()) {
            if old.location != new.location {
                writeln!(self.out, "  {}: {} -> {}", new.label, old.location, new.location)?;
            }
        }
        if after.pointed().len() > before.pointed().len() {
            writeln!(self.out, "  pointed at {}", after.pointed().join(", "))?;
        }
        let entries = self.agent.log(task).map_or(0, |l| l.len());
        writeln!(self.out, "  log: entry {entries} appended to logs/{task}.log")?;
        if matches!(outcome, StepOutcome::TaskComplete { .. }) {
            writeln!(self.out, "{task} task complete")?;
        }
        Ok(())
    }

    fn probe(&mut self, task: TaskId) -> io::Result<()> {
        let report = match self.agent.probe_retention(task) {
            Ok(report) => report,
            Err(err) => return self.report_error(err),
        };
        let truth = self.agent.ground_truth(task);
        let (task_score, env_score) = score_probe(&report, &truth, self.scoring);
        writeln!(self.out, "task retention: {task_score:.2}  environment retention: {env_score:.2}")
    }

    fn state(&mut self, task: TaskId) -> io::Result<()> {
        let world = self.agent.world(task).clone();
        writeln!(self.out, "{task} table: {}", world.visible_objects().join(", "))?;
        for container in task.containers() {
            writeln!(self.out, "  {}: {}", container.name(), world.contents(*container).join(", "))?;
        }
        Ok(())
    }

    fn log(&mut self, task: TaskId) -> io::Result<()> {
        match self.agent.log(task).filter(|l| !l.is_empty()) {
            Some(log) => writeln!(self.out, "{}", log.render()),
            None => writeln!(self.out, "the {task} log is empty"),
        }
    }
}
