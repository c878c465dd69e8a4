//! Procedural memory: the five task definitions, their ground-truth policies
//! and the action-specification catalog shown to the coordinator.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionCommand, ActionKind};
use crate::world::{Category, Color, Container, Inventories, Location, ObjectInstance, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Separate,
    Arrange,
    Point,
    Recipe,
    Tower,
}

impl TaskId {
    /// Registry order, also the run order for multi-task modes.
    pub const ALL: [TaskId; 5] = [
        TaskId::Separate,
        TaskId::Arrange,
        TaskId::Point,
        TaskId::Recipe,
        TaskId::Tower,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Separate => "separate",
            TaskId::Arrange => "arrange",
            TaskId::Point => "point",
            TaskId::Recipe => "recipe",
            TaskId::Tower => "tower",
        }
    }

    /// Name used as the argument of memory calls, e.g. `separating`.
    pub fn memory_name(self) -> &'static str {
        match self {
            TaskId::Separate => "separating",
            TaskId::Arrange => "arrangement",
            TaskId::Point => "pointing",
            TaskId::Recipe => "recipe",
            TaskId::Tower => "tower",
        }
    }

    /// Heading of the task paragraph in the base prompt.
    pub fn title(self) -> &'static str {
        match self {
            TaskId::Separate => "Separating task",
            TaskId::Arrange => "Arrangement task",
            TaskId::Point => "Pointing task",
            TaskId::Recipe => "Recipe task",
            TaskId::Tower => "Tower task",
        }
    }

    /// State containers reported for this task, in reporting order.
    pub fn containers(self) -> &'static [Container] {
        match self {
            TaskId::Separate => &[Container::Box1, Container::Box2],
            TaskId::Arrange => &[Container::Bowl],
            TaskId::Point => &[Container::Pointed],
            TaskId::Recipe => &[Container::Given],
            TaskId::Tower => &[Container::Tower],
        }
    }

    pub fn allowed_actions(self) -> &'static [ActionKind] {
        match self {
            TaskId::Separate => &[ActionKind::MoveToBox1, ActionKind::MoveToBox2],
            TaskId::Arrange => &[ActionKind::PlaceInBowl],
            TaskId::Point => &[ActionKind::Point],
            TaskId::Recipe => &[ActionKind::Give],
            TaskId::Tower => &[ActionKind::PutOnTower],
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown task `{0}`")]
pub struct UnknownTask(pub String);

impl FromStr for TaskId {
    type Err = UnknownTask;

    /// Accepts both the short id (`separate`) and the memory name (`separating`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s) || t.memory_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownTask(s.to_string()))
    }
}

const RECIPE_ITEMS: [&str; 3] = ["bowl", "jello", "banana"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Task paragraph of the coordinator's base prompt.
    pub spec_text: String,
    /// One-line description opening worker prompts.
    pub description: String,
    /// Short cue injected as part of working memory.
    pub reminder: String,
    pub allowed_actions: BTreeSet<ActionKind>,
}

impl TaskSpec {
    pub fn is_relevant(&self, object: &ObjectInstance) -> bool {
        is_relevant(self.id, object)
    }
}

fn is_relevant(task: TaskId, object: &ObjectInstance) -> bool {
    match task {
        TaskId::Separate => matches!(
            object.category,
            Category::Fruit | Category::Kitchenware | Category::Container
        ),
        TaskId::Arrange => object.category == Category::Fruit,
        TaskId::Point => matches!(object.color, Some(Color::Yellow | Color::Red)),
        TaskId::Recipe => RECIPE_ITEMS
            .iter()
            .any(|item| item.eq_ignore_ascii_case(&object.label)),
        TaskId::Tower => {
            object.category == Category::Cube
                && !matches!(object.color, Some(Color::Black | Color::White) | None)
        }
    }
}

/// The manipulation that puts a relevant object where the task wants it.
fn required_action(task: TaskId, object: &ObjectInstance) -> Option<ActionKind> {
    if !is_relevant(task, object) {
        return None;
    }
    Some(match task {
        TaskId::Separate if object.category == Category::Fruit => ActionKind::MoveToBox1,
        TaskId::Separate => ActionKind::MoveToBox2,
        TaskId::Arrange => ActionKind::PlaceInBowl,
        TaskId::Point => ActionKind::Point,
        TaskId::Recipe => ActionKind::Give,
        TaskId::Tower => ActionKind::PutOnTower,
    })
}

fn location_satisfies(kind: ActionKind, location: Location) -> bool {
    match kind {
        ActionKind::MoveToBox1 => location == Location::InBox1,
        ActionKind::MoveToBox2 => location == Location::InBox2,
        ActionKind::PlaceInBowl => location == Location::InBowl,
        ActionKind::Give => location == Location::WithUser,
        ActionKind::PutOnTower => matches!(location, Location::OnTower(_)),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpec {
    pub kind: ActionKind,
    pub description: String,
}

/// Function descriptions shown to the coordinator: six manipulations and two memory calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpecCatalog {
    pub entries: Vec<ActionSpec>,
}

impl ActionSpecCatalog {
    pub fn get(&self, kind: ActionKind) -> Option<&ActionSpec> {
        self.entries.iter().find(|e| e.kind == kind)
    }

    fn render_entry(entry: &ActionSpec) -> String {
        let param = if entry.kind.is_memory() { "task" } else { "object" };
        format!("<{}({param})>: {}", entry.kind.name(), entry.description)
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read fixture {path}: {source}")]
    Fixture {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid fixture {file}: {reason}")]
    Invalid { file: String, reason: String },
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
}

/// Fixture texts the registry is assembled from.
#[derive(Debug, Clone)]
pub struct Fixtures {
    pub task_texts: Vec<(TaskId, String)>,
    pub closing: String,
    pub actions: String,
    pub descriptions: String,
    pub reminders: String,
    pub inventories: String,
}

impl Fixtures {
    pub fn builtin() -> Self {
        Self {
            task_texts: vec![
                (TaskId::Separate, include_str!("../fixtures/tasks/separate.txt").into()),
                (TaskId::Arrange, include_str!("../fixtures/tasks/arrange.txt").into()),
                (TaskId::Point, include_str!("../fixtures/tasks/point.txt").into()),
                (TaskId::Recipe, include_str!("../fixtures/tasks/recipe.txt").into()),
                (TaskId::Tower, include_str!("../fixtures/tasks/tower.txt").into()),
            ],
            closing: include_str!("../fixtures/tasks/closing.txt").into(),
            actions: include_str!("../fixtures/actions.txt").into(),
            descriptions: include_str!("../fixtures/descriptions.txt").into(),
            reminders: include_str!("../fixtures/reminders.txt").into(),
            inventories: include_str!("../fixtures/inventories.csv").into(),
        }
    }

    /// Reads the same layout as the builtin set from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, RegistryError> {
        let read = |rel: &str| {
            let path = dir.join(rel);
            std::fs::read_to_string(&path).map_err(|source| RegistryError::Fixture { path, source })
        };
        let mut task_texts = Vec::new();
        for task in TaskId::ALL {
            task_texts.push((task, read(&format!("tasks/{task}.txt"))?));
        }
        Ok(Self {
            task_texts,
            closing: read("tasks/closing.txt")?,
            actions: read("actions.txt")?,
            descriptions: read("descriptions.txt")?,
            reminders: read("reminders.txt")?,
            inventories: read("inventories.csv")?,
        })
    }
}

fn parse_tab_table(file: &str, text: &str) -> Result<Vec<(String, String)>, RegistryError> {
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            line.split_once('\t')
                .map(|(k, v)| (k.trim().to_string(), v.trim_end().to_string()))
                .ok_or_else(|| RegistryError::Invalid {
                    file: file.into(),
                    reason: format!("expected `key<TAB>text`, got `{line}`"),
                })
        })
        .collect()
}

fn per_task(file: &str, text: &str) -> Result<Vec<(TaskId, String)>, RegistryError> {
    let rows = parse_tab_table(file, text)?;
    let mut out = Vec::new();
    for task in TaskId::ALL {
        let text = rows
            .iter()
            .find(|(k, _)| k.parse::<TaskId>().ok() == Some(task))
            .map(|(_, v)| v.clone())
            .ok_or_else(|| RegistryError::Invalid {
                file: file.into(),
                reason: format!("missing entry for `{task}`"),
            })?;
        out.push((task, text));
    }
    Ok(out)
}

/// Immutable after construction; share freely across trials.
#[derive(Debug, Clone)]
pub struct TaskRegistry {
    specs: Vec<TaskSpec>,
    closing: String,
    catalog: ActionSpecCatalog,
    inventories: Inventories,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TaskRegistry {
    pub fn builtin() -> Self {
        Self::from_fixtures(&Fixtures::builtin()).expect("builtin fixtures are valid")
    }

    pub fn from_dir(dir: &Path) -> Result<Self, RegistryError> {
        Self::from_fixtures(&Fixtures::from_dir(dir)?)
    }

    pub fn from_fixtures(fixtures: &Fixtures) -> Result<Self, RegistryError> {
        let descriptions = per_task("descriptions.txt", &fixtures.descriptions)?;
        let reminders = per_task("reminders.txt", &fixtures.reminders)?;
        let mut specs = Vec::new();
        for task in TaskId::ALL {
            let spec_text = fixtures
                .task_texts
                .iter()
                .find(|(t, _)| *t == task)
                .map(|(_, text)| text.trim_end().to_string())
                .ok_or_else(|| RegistryError::Invalid {
                    file: format!("tasks/{task}.txt"),
                    reason: "missing".into(),
                })?;
            let lookup = |table: &[(TaskId, String)]| {
                table.iter().find(|(t, _)| *t == task).map(|(_, s)| s.clone()).unwrap_or_default()
            };
            specs.push(TaskSpec {
                id: task,
                spec_text,
                description: lookup(&descriptions),
                reminder: lookup(&reminders),
                allowed_actions: task.allowed_actions().iter().copied().collect(),
            });
        }

        let mut entries = Vec::new();
        for (name, description) in parse_tab_table("actions.txt", &fixtures.actions)? {
            let kind = name.parse::<ActionKind>().map_err(|e| RegistryError::Invalid {
                file: "actions.txt".into(),
                reason: e.to_string(),
            })?;
            entries.push(ActionSpec { kind, description });
        }
        let kinds: HashSet<ActionKind> = entries.iter().map(|e| e.kind).collect();
        if entries.len() != ActionKind::ALL.len() || kinds.len() != ActionKind::ALL.len() {
            return Err(RegistryError::Invalid {
                file: "actions.txt".into(),
                reason: "expected exactly one entry per action kind".into(),
            });
        }

        let inventories = Inventories::parse(&fixtures.inventories)?;
        for task in TaskId::ALL {
            inventories.world(task)?;
        }
        Ok(Self {
            specs,
            closing: fixtures.closing.trim_end().to_string(),
            catalog: ActionSpecCatalog { entries },
            inventories,
        })
    }

    pub fn spec(&self, task: TaskId) -> &TaskSpec {
        self.specs
            .iter()
            .find(|s| s.id == task)
            .expect("registry holds every task")
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn catalog(&self) -> &ActionSpecCatalog {
        &self.catalog
    }

    pub fn inventories(&self) -> &Inventories {
        &self.inventories
    }

    pub fn load_world(&self, task: TaskId) -> WorldState {
        self.inventories
            .world(task)
            .expect("inventories validated at construction")
    }

    /// The coordinator's base prompt: task paragraphs, action functions and,
    /// when memory is on, the two memory functions.
    pub fn base_prompt(&self, with_memory: bool) -> String {
        let mut out = String::new();
        for spec in &self.specs {
            out.push_str(&format!("{}: {}\n\n", spec.id.title(), spec.spec_text));
        }
        out.push_str(&self.closing);
        out.push_str("\n\n");
        let manipulations: Vec<String> = self
            .catalog
            .entries
            .iter()
            .filter(|e| e.kind.is_manipulation())
            .map(ActionSpecCatalog::render_entry)
            .collect();
        out.push_str(&manipulations.join("\n"));
        if with_memory {
            out.push_str("\n\n");
            let memory: Vec<String> = self
                .catalog
                .entries
                .iter()
                .filter(|e| e.kind.is_memory())
                .map(ActionSpecCatalog::render_entry)
                .collect();
            out.push_str(&memory.join("\n"));
        }
        out
    }

    fn attributes<'a>(&'a self, task: TaskId, label: &str) -> Option<&'a ObjectInstance> {
        let label = label.trim();
        self.inventories
            .objects(task)
            .and_then(|objs| objs.iter().find(|o| o.label.eq_ignore_ascii_case(label)))
            .or_else(|| self.inventories.lookup(label))
    }

    /// Order-preserving sub-list of the labels the task acts on.
    pub fn relevant_objects(&self, task: TaskId, labels: &[String]) -> Vec<String> {
        labels
            .iter()
            .filter(|label| {
                self.attributes(task, label)
                    .is_some_and(|object| is_relevant(task, object))
            })
            .cloned()
            .collect()
    }

    /// Ground-truth remaining actions from `state`.
    ///
    /// Unordered tasks follow world insertion order; pointing emits all
    /// unpointed yellow objects before any unpointed red one.
    pub fn oracle_actions(&self, task: TaskId, state: &WorldState) -> Vec<ActionCommand> {
        let on_table = state
            .objects()
            .iter()
            .filter(|o| o.location == Location::OnTable);
        if task == TaskId::Point {
            let unpointed = |color: Color| {
                state
                    .objects()
                    .iter()
                    .filter(move |o| o.location == Location::OnTable && o.color == Some(color))
                    .filter(|o| !state.pointed().iter().any(|p| p.eq_ignore_ascii_case(&o.label)))
                    .map(|o| ActionCommand::new(ActionKind::Point, o.label.clone()))
            };
            return unpointed(Color::Yellow).chain(unpointed(Color::Red)).collect();
        }
        on_table
            .filter_map(|o| required_action(task, o).map(|k| ActionCommand::new(k, o.label.clone())))
            .collect()
    }

    /// Whether the task goal holds and no object outside the task was touched.
    pub fn is_complete(&self, task: TaskId, state: &WorldState) -> bool {
        if task == TaskId::Point {
            return pointing_complete(state);
        }
        if !state.pointed().is_empty() {
            return false;
        }
        state.objects().iter().all(|object| match required_action(task, object) {
            Some(kind) => location_satisfies(kind, object.location),
            None => object.location == Location::OnTable,
        })
    }

    /// Number of executed actions after which a task is interrupted: ceil(n / 2).
    pub fn intervention_index(&self, task: TaskId) -> usize {
        let required = self.oracle_actions(task, &self.load_world(task)).len();
        required.div_ceil(2)
    }

    pub fn required_actions(&self, task: TaskId) -> usize {
        self.oracle_actions(task, &self.load_world(task)).len()
    }
}

fn pointing_complete(state: &WorldState) -> bool {
    if state.objects().iter().any(|o| o.location != Location::OnTable) {
        return false;
    }
    let color_of = |label: &str| state.find(label).and_then(|o| o.color);
    let pointed = state.pointed();
    let distinct: HashSet<String> = pointed.iter().map(|l| l.to_lowercase()).collect();
    if distinct.len() != pointed.len() {
        return false;
    }
    let targets: HashSet<String> = state
        .objects()
        .iter()
        .filter(|o| matches!(o.color, Some(Color::Yellow | Color::Red)))
        .map(|o| o.label.to_lowercase())
        .collect();
    if distinct != targets {
        return false;
    }
    let mut seen_red = false;
    for label in pointed {
        match color_of(label) {
            Some(Color::Red) => seen_red = true,
            Some(Color::Yellow) if seen_red => return false,
            _ => {}
        }
    }
    true
}
