//! Acceptance criteria, one line of output each. Runs without the libtest
//! harness so that the report reads top to bottom.

use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabletop_agent::action::{parse_reply, ActionCommand, ActionKind};
use tabletop_agent::agent::{AgentConfig, AgentContext, FailureReason, StepOutcome};
use tabletop_agent::config::{BackendFactory, BackendSpec, ExperimentConfig, Mode, SpecFactory};
use tabletop_agent::harness::{jaccard, run_experiment, trial_dir};
use tabletop_agent::llm::{GenerationParams, LlmBackend, LlmError, Message, MockBackend};
use tabletop_agent::memory::{
    build_declarative_prompt, build_working_memory_prompt, parse_object_list_reply,
    snapshot_from_log, DeclarativeQuery, DeclarativeSnapshot, TaskLog,
};
use tabletop_agent::report::{MetricsTable, REPORT_CSV};
use tabletop_agent::tasks::{TaskId, TaskRegistry};
use tabletop_agent::world::{Category, Color, Container, ObjectInstance, WorldState};

const WORKING_GOLDEN: &str = include_str!("golden/working_memory_separate.txt");
const DECLARATIVE_GOLDEN: &str = include_str!("golden/declarative_box1.txt");

fn registry() -> Arc<TaskRegistry> {
    Arc::new(TaskRegistry::builtin())
}

fn labels(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn cmd(kind: ActionKind, arg: &str) -> ActionCommand {
    ActionCommand::new(kind, arg)
}

/// The three-entry log of the worked declarative example.
fn example_log(registry: &TaskRegistry) -> TaskLog {
    let mut world = registry.load_world(TaskId::Separate);
    let mut log = TaskLog::new(TaskId::Separate);
    for action in [
        cmd(ActionKind::MoveToBox1, "pear"),
        cmd(ActionKind::MoveToBox1, "apple"),
        cmd(ActionKind::MoveToBox2, "bowl"),
    ] {
        world.apply_in_place(&action).unwrap();
        log.append(&action, &world);
    }
    log
}

fn criterion_1() -> Result<String, String> {
    let start = Instant::now();
    let registry = registry();
    let world = registry.load_world(TaskId::Separate);
    let working = build_working_memory_prompt(registry.spec(TaskId::Separate), &world.visible_objects())
        .map_err(|e| e.to_string())?;
    if working != WORKING_GOLDEN {
        return Err(format!("working-memory prompt differs:\n{working}"));
    }
    let declarative = build_declarative_prompt(
        &example_log(&registry),
        DeclarativeQuery::Container(Container::Box1),
    )
    .map_err(|e| e.to_string())?;
    if declarative != DECLARATIVE_GOLDEN {
        return Err(format!("declarative prompt differs:\n{declarative}"));
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(1) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("both prompts byte-identical in {elapsed:?}"))
}

fn criterion_2() -> Result<String, String> {
    let mut worker = MockBackend::oracle();
    let params = GenerationParams::default();
    let working = worker.complete(WORKING_GOLDEN, &params).map_err(|e| e.to_string())?;
    if working != "apple, banana, cup, bowl, pear" {
        return Err(format!("working reply `{working}`"));
    }
    let parsed = parse_object_list_reply(&working).map_err(|e| e.to_string())?;
    if parsed != labels(&["apple", "banana", "cup", "bowl", "pear"]) {
        return Err(format!("parsed {parsed:?}"));
    }
    let declarative = worker.complete(DECLARATIVE_GOLDEN, &params).map_err(|e| e.to_string())?;
    if declarative != "pear, apple" {
        return Err(format!("declarative reply `{declarative}`"));
    }
    let parsed = parse_object_list_reply(&declarative).map_err(|e| e.to_string())?;
    if parsed != labels(&["pear", "apple"]) {
        return Err(format!("parsed {parsed:?}"));
    }
    Ok("worker replies and parsed lists exact".into())
}

fn criterion_3() -> Result<String, String> {
    let start = Instant::now();
    let registry = registry();
    for mode in Mode::ALL {
        let config = ExperimentConfig {
            mode,
            trials: 50,
            memory: true,
            parallelism: 0,
            ..ExperimentConfig::default()
        };
        let factory = SpecFactory::new(&config, registry.clone()).map_err(|e| e.to_string())?;
        let result = run_experiment(&config, registry.clone(), &factory, None).map_err(|e| e.to_string())?;
        if result.table.valid_trials != 50 {
            return Err(format!("{mode}: {} valid trials", result.table.valid_trials));
        }
        for row in &result.table.rows {
            if (row.success, row.task_retention, row.env_retention) != (1.0, 1.0, 1.0) {
                return Err(format!("{mode}: {row:?}"));
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(60) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("15 cells x 3 metrics at 1.00 in {:.1}s", elapsed.as_secs_f64()))
}

fn criterion_4() -> Result<String, String> {
    let registry = registry();
    let mut agent = AgentContext::new(
        registry.clone(),
        AgentConfig::default(),
        Box::new(MockBackend::oracle()),
        Box::new(MockBackend::oracle()),
    );
    let expected = [
        (TaskId::Separate, 3),
        (TaskId::Arrange, 3),
        (TaskId::Point, 2),
        (TaskId::Recipe, 2),
        (TaskId::Tower, 2),
    ];
    for (task, _) in expected {
        agent.command_task(task).map_err(|e| e.to_string())?;
        agent
            .run_slots(registry.intervention_index(task))
            .map_err(|e| e.to_string())?;
    }
    for (task, n) in expected {
        let len = agent.log(task).map_or(0, TaskLog::len);
        if len != n || registry.intervention_index(task) != n {
            return Err(format!("{task}: {len} entries after round 1, expected {n}"));
        }
    }
    for (task, _) in expected {
        agent.command_task(task).map_err(|e| e.to_string())?;
        let run = agent.run_to_completion().map_err(|e| e.to_string())?;
        if !run.completed || !run.failures.is_empty() {
            return Err(format!("{task}: round 2 {run:?}"));
        }
    }
    for (task, _) in expected {
        let world = agent.world_if_started(task).ok_or("world missing")?.clone();
        if !registry.is_complete(task, &world) {
            return Err(format!("{task}: goal does not hold"));
        }
        let log = agent.log(task).ok_or("log missing")?;
        let mut replayed = registry.load_world(task);
        for entry in &log.entries {
            replayed.apply_in_place(&entry.action).map_err(|e| e.to_string())?;
        }
        if replayed != world {
            return Err(format!("{task}: replayed log differs from world"));
        }
        if snapshot_from_log(log).map_err(|e| e.to_string())? != DeclarativeSnapshot::of_world(&world) {
            return Err(format!("{task}: log snapshot differs from world"));
        }
    }
    Ok("round 1 logs 3/3/2/2/2, all goals hold, logs replay to ground truth".into())
}

fn criterion_5() -> Result<String, String> {
    let registry = registry();
    let run = |backend: BackendSpec, memory: bool| -> Result<MetricsTable, String> {
        let config = ExperimentConfig {
            mode: Mode::Intervened,
            trials: 50,
            memory,
            backend,
            parallelism: 0,
            ..ExperimentConfig::default()
        };
        let factory = SpecFactory::new(&config, registry.clone()).map_err(|e| e.to_string())?;
        run_experiment(&config, registry.clone(), &factory, None)
            .map(|r| r.table)
            .map_err(|e| e.to_string())
    };
    let with_memory = run(BackendSpec::Oracle, true)?;
    let forgetful = run(BackendSpec::Forgetful(tabletop_agent::config::DEFAULT_FORGETFUL_WINDOW), false)?;
    let degraded: Vec<String> = TaskId::ALL
        .into_iter()
        .filter(|t| {
            let on = with_memory.row(t.as_str()).map_or(0.0, |r| r.success);
            let off = forgetful.row(t.as_str()).map_or(1.0, |r| r.success);
            off < on
        })
        .map(|t| t.as_str().to_string())
        .collect();
    if degraded.len() < 3 {
        return Err(format!("only {degraded:?} degraded"));
    }
    Ok(format!("{} of 5 tasks below the memory-on run: {}", degraded.len(), degraded.join(", ")))
}

/// Oracle that misplaces the baseball at the first separating step of one trial.
struct OneBadTrial {
    bad_trial: usize,
}

struct Saboteur {
    inner: MockBackend,
    armed: bool,
}

impl LlmBackend for Saboteur {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn chat(&mut self, messages: &[Message], params: &GenerationParams) -> Result<String, LlmError> {
        let last = messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        if self.armed && last.starts_with("[STEP] separating") {
            self.armed = false;
            return Ok("<move_to_box_1(baseball)>".into());
        }
        self.inner.chat(messages, params)
    }
}

impl BackendFactory for OneBadTrial {
    fn model_name(&self) -> String {
        "mock-oracle".into()
    }

    fn coordinator(&self, trial: usize) -> Box<dyn LlmBackend> {
        Box::new(Saboteur {
            inner: MockBackend::oracle(),
            armed: trial == self.bad_trial,
        })
    }

    fn worker(&self, _trial: usize) -> Box<dyn LlmBackend> {
        Box::new(MockBackend::oracle())
    }
}

fn criterion_6() -> Result<String, String> {
    let config = ExperimentConfig {
        mode: Mode::Standalone,
        trials: 50,
        parallelism: 0,
        ..ExperimentConfig::default()
    };
    let result = run_experiment(&config, registry(), &OneBadTrial { bad_trial: 17 }, None)
        .map_err(|e| e.to_string())?;
    let separate = result.table.row("separate").ok_or("no separate row")?;
    if separate.success != 0.98 {
        return Err(format!("separate success {}", separate.success));
    }
    for row in result.table.rows.iter().filter(|r| r.task != "separate") {
        if row.success != 1.0 {
            return Err(format!("{} success {}", row.task, row.success));
        }
    }
    let score = jaccard(&labels(&["pear"]), &labels(&["pear", "apple"]));
    if score != 0.5 {
        return Err(format!("jaccard {score}"));
    }
    Ok("separate 0.98 with one bad trial in 50; jaccard({pear},{pear,apple}) = 0.50".into())
}

const LABEL_POOL: &[&str] = &[
    "apple", "banana", "cup", "bowl", "baseball", "pear", "can", "lemon", "orange", "jello",
    "plate", "spoon", "tennis ball", "red mug", "green bottle", "cube 1", "cube 2", "cube 3",
    "cube 4", "cube 5", "cube 6", "cube 7",
];

fn random_world(rng: &mut ChaCha8Rng) -> WorldState {
    let count = rng.gen_range(1..=12);
    let mut pool = LABEL_POOL.to_vec();
    pool.shuffle(rng);
    let objects = pool[..count]
        .iter()
        .map(|label| {
            let category = if label.contains("cube") {
                Category::Cube
            } else {
                *[Category::Fruit, Category::Kitchenware, Category::Container, Category::Toy, Category::Ingredient]
                    .choose(rng)
                    .expect("non-empty")
            };
            let color = if category == Category::Cube || rng.gen_bool(0.7) {
                Some(*Color::ALL.choose(rng).expect("non-empty"))
            } else {
                None
            };
            ObjectInstance::new(*label, color, category)
        })
        .collect();
    WorldState::new(objects).expect("pool labels are valid")
}

const MANIPULATIONS: [ActionKind; 6] = [
    ActionKind::Point,
    ActionKind::Give,
    ActionKind::MoveToBox1,
    ActionKind::MoveToBox2,
    ActionKind::PutOnTower,
    ActionKind::PlaceInBowl,
];

fn sorted_labels(world: &WorldState) -> Vec<String> {
    let mut labels = world.labels();
    labels.sort();
    labels
}

fn criterion_7() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7AB1E);
    let mut executed = 0usize;
    let mut rejected = 0usize;
    for sequence in 0..1000 {
        let mut world = random_world(&mut rng);
        let initial = sorted_labels(&world);
        let object_count = initial.len();
        let mut log = TaskLog::new(TaskId::ALL[sequence % 5]);
        for _ in 0..rng.gen_range(1..=object_count + 4) {
            let kind = *MANIPULATIONS.choose(&mut rng).expect("non-empty");
            let movable: Vec<String> = world
                .visible_objects()
                .into_iter()
                .filter(|label| !world.pointed().contains(label))
                .collect();
            // Occasionally aim at something that is not there to exercise rejection.
            let target = if movable.is_empty() || rng.gen_bool(0.1) {
                LABEL_POOL.choose(&mut rng).expect("non-empty").to_string()
            } else {
                movable.choose(&mut rng).expect("non-empty").clone()
            };
            let action = cmd(kind, &target);
            if !movable.contains(&target) {
                let before = world.clone();
                if world.apply_in_place(&action).is_ok() {
                    return Err(format!("sequence {sequence}: {action} accepted"));
                } else if world != before {
                    return Err(format!("sequence {sequence}: rejected action changed the world"));
                }
                rejected += 1;
                continue;
            }
            world.apply_in_place(&action).map_err(|e| format!("sequence {sequence}: {e}"))?;
            log.append(&action, &world);
            executed += 1;

            if sorted_labels(&world) != initial {
                return Err(format!("sequence {sequence}: labels not conserved"));
            }
            if log.len() > object_count {
                return Err(format!("sequence {sequence}: {} entries for {object_count} objects", log.len()));
            }
            let snapshot = snapshot_from_log(&log).map_err(|e| e.to_string())?;
            if snapshot != DeclarativeSnapshot::of_world(&world) {
                return Err(format!("sequence {sequence}: log and world out of sync after {action}"));
            }
            let reparsed = TaskLog::parse(log.task, &log.render()).map_err(|e| e.to_string())?;
            if reparsed != log {
                return Err(format!("sequence {sequence}: log does not round-trip"));
            }
        }
    }
    Ok(format!("1000 sequences, {executed} actions, {rejected} rejections, no violations"))
}

fn criterion_8() -> Result<String, String> {
    let label_set = [
        "apple", "banana", "cup", "bowl", "baseball", "pear", "can", "lemon", "orange", "jello",
        "cube 1", "cube 2", "cube 3", "cube 4", "cube 5", "cube 6", "tennis ball", "red mug",
        "separating", "tower",
    ];
    let mut checked = 0;
    for kind in ActionKind::ALL {
        for label in label_set {
            let command = cmd(kind, label);
            let parsed = parse_reply(&command.to_string());
            if parsed.commands != [command.clone()] || !parsed.errors.is_empty() {
                return Err(format!("{command} did not round-trip"));
            }
            checked += 1;
        }
    }

    let alphabet: Vec<char> = "<>()_, abcxyz019point_givemove_to_box_1\n\t<(".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fuzzed = panic::catch_unwind(AssertUnwindSafe(|| {
        for _ in 0..100_000 {
            let len = rng.gen_range(0..40);
            let text: String = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.05) {
                        char::from_u32(rng.gen_range(0x80..0x3000)).unwrap_or('?')
                    } else {
                        *alphabet.choose(&mut rng).expect("non-empty")
                    }
                })
                .collect();
            let _ = parse_reply(&text);
        }
    }));
    if fuzzed.is_err() {
        return Err("parser panicked during fuzzing".into());
    }

    let mut agent = AgentContext::new(
        registry(),
        AgentConfig {
            memory_enabled: false,
            ..AgentConfig::default()
        },
        Box::new(MockBackend::trace(vec![
            "OK".into(),
            "<point(lemon)> <point(banana)>".into(),
        ])),
        Box::new(MockBackend::oracle()),
    );
    agent.command_task(TaskId::Point).map_err(|e| e.to_string())?;
    match agent.step().map_err(|e| e.to_string())? {
        StepOutcome::Failure {
            reason: FailureReason::BatchViolation,
            ..
        } => {}
        other => return Err(format!("batch reply gave {other:?}")),
    }
    Ok(format!("{checked} round-trips, 100000 fuzz inputs, batch_violation in strict mode"))
}

fn criterion_9() -> Result<String, String> {
    let registry = registry();
    let config = ExperimentConfig {
        mode: Mode::Intervened,
        trials: 6,
        seed: 42,
        parallelism: 3,
        ..ExperimentConfig::default()
    };
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let factory = SpecFactory::new(&config, registry.clone()).map_err(|e| e.to_string())?;
        run_experiment(&config, registry.clone(), &factory, Some(dir.path())).map_err(|e| e.to_string())?;
        dirs.push(dir);
    }
    let read = |path: std::path::PathBuf| std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()));
    for trial in 0..config.trials {
        let a = read(trial_dir(dirs[0].path(), trial).join("events.ndjson"))?;
        let b = read(trial_dir(dirs[1].path(), trial).join("events.ndjson"))?;
        if a != b || a.is_empty() {
            return Err(format!("trial {trial}: events differ"));
        }
    }
    if read(dirs[0].path().join(REPORT_CSV))? != read(dirs[1].path().join(REPORT_CSV))? {
        return Err("report.csv differs".into());
    }
    Ok("events.ndjson and report.csv byte-identical across two runs".into())
}

fn main() {
    let criteria: [(&str, fn() -> Result<String, String>); 9] = [
        ("prompt fixtures byte-exact", criterion_1),
        ("worked-example extraction", criterion_2),
        ("oracle tables in all modes", criterion_3),
        ("intervention protocol", criterion_4),
        ("memory ablation sensitivity", criterion_5),
        ("metric arithmetic", criterion_6),
        ("conservation fuzz", criterion_7),
        ("parser properties", criterion_8),
        ("determinism", criterion_9),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(result) => result,
            Err(payload) => Err(payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
