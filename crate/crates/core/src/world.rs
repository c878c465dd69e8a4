//! Simulated tabletop: object state, manipulation effects and label-level perception.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionCommand, ActionKind};
use crate::tasks::TaskId;

const BUILTIN_INVENTORIES: &str = include_str!("../fixtures/inventories.csv");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("object `{label}` is not on the table ({location})")]
    NotOnTable { label: String, location: Location },
    #[error("object `{0}` was already pointed at")]
    AlreadyHandled(String),
    #[error("`{0}` is not a manipulation action")]
    NotManipulation(ActionKind),
    #[error("duplicate object label `{0}`")]
    DuplicateLabel(String),
    #[error("invalid object `{label}`: {reason}")]
    InvalidObject { label: String, reason: String },
    #[error("no inventory for task `{0}`")]
    UnknownTask(String),
    #[error("inventory parse error: {0}")]
    Inventory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Yellow,
    Orange,
    Green,
    Blue,
    Black,
    White,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Yellow,
        Color::Orange,
        Color::Green,
        Color::Blue,
        Color::Black,
        Color::White,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Black => "black",
            Color::White => "white",
        }
    }
}

impl FromStr for Color {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Color::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| WorldError::Inventory(format!("unknown color `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Fruit,
    Kitchenware,
    Container,
    Toy,
    Ingredient,
    Cube,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Fruit,
        Category::Kitchenware,
        Category::Container,
        Category::Toy,
        Category::Ingredient,
        Category::Cube,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Fruit => "fruit",
            Category::Kitchenware => "kitchenware",
            Category::Container => "container",
            Category::Toy => "toy",
            Category::Ingredient => "ingredient",
            Category::Cube => "cube",
        }
    }
}

impl FromStr for Category {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| WorldError::Inventory(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "snake_case")]
pub enum Location {
    OnTable,
    InBox1,
    InBox2,
    InBowl,
    /// Tower level, 1 is the bottom cube.
    OnTower(u32),
    WithUser,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::OnTable => f.write_str("on the table"),
            Location::InBox1 => f.write_str("in box 1"),
            Location::InBox2 => f.write_str("in box 2"),
            Location::InBowl => f.write_str("in the bowl"),
            Location::OnTower(level) => write!(f, "on the tower at level {level}"),
            Location::WithUser => f.write_str("with the user"),
        }
    }
}

/// A named place objects end up in after an action, as reported in task logs.
///
/// `Pointed` is not a physical place: it is the pointing history, which the
/// pointing task treats as its task state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Container {
    Box1,
    Box2,
    Bowl,
    Pointed,
    Given,
    Tower,
}

impl Container {
    pub const ALL: [Container; 6] = [
        Container::Box1,
        Container::Box2,
        Container::Bowl,
        Container::Pointed,
        Container::Given,
        Container::Tower,
    ];

    /// Heading used on log state lines, e.g. `Box 1`.
    pub fn name(self) -> &'static str {
        match self {
            Container::Box1 => "Box 1",
            Container::Box2 => "Box 2",
            Container::Bowl => "Bowl",
            Container::Pointed => "Pointed",
            Container::Given => "Given",
            Container::Tower => "Tower",
        }
    }

    /// Noun phrase used in worker instructions, e.g. `objects in box 1`.
    pub fn phrase(self) -> &'static str {
        match self {
            Container::Box1 => "objects in box 1",
            Container::Box2 => "objects in box 2",
            Container::Bowl => "objects in the bowl",
            Container::Pointed => "objects pointed at",
            Container::Given => "objects given to the user",
            Container::Tower => "objects in the tower",
        }
    }

    pub fn from_name(name: &str) -> Option<Container> {
        let name = name.trim();
        Container::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(name))
    }

    pub fn for_action(kind: ActionKind) -> Option<Container> {
        match kind {
            ActionKind::MoveToBox1 => Some(Container::Box1),
            ActionKind::MoveToBox2 => Some(Container::Box2),
            ActionKind::PlaceInBowl => Some(Container::Bowl),
            ActionKind::Point => Some(Container::Pointed),
            ActionKind::Give => Some(Container::Given),
            ActionKind::PutOnTower => Some(Container::Tower),
            ActionKind::RetrieveWorkingMemory | ActionKind::RetrieveDeclarativeMemory => None,
        }
    }
}

impl fmt::Display for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub label: String,
    pub color: Option<Color>,
    pub category: Category,
    pub location: Location,
}

impl ObjectInstance {
    pub fn new(label: impl Into<String>, color: Option<Color>, category: Category) -> Self {
        Self {
            label: label.into(),
            color,
            category,
            location: Location::OnTable,
        }
    }

    fn validate(&self) -> Result<(), WorldError> {
        let invalid = |reason: &str| WorldError::InvalidObject {
            label: self.label.clone(),
            reason: reason.to_string(),
        };
        if self.label.trim().is_empty() {
            return Err(invalid("empty label"));
        }
        if self.label.contains(['(', ')', '<', '>', ',']) {
            return Err(invalid("labels cannot contain parentheses, angle brackets or commas"));
        }
        let named_cube = self.label.to_ascii_lowercase().contains("cube");
        if named_cube != (self.category == Category::Cube) {
            return Err(invalid("category cube must match a cube label"));
        }
        if self.category == Category::Cube && self.color.is_none() {
            return Err(invalid("cubes must carry a color"));
        }
        Ok(())
    }
}

/// Full tabletop state. Cloned on every action; trials never share one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    objects: Vec<ObjectInstance>,
    pointed: Vec<String>,
    /// Labels in the order they left the table.
    placements: Vec<String>,
}

impl WorldState {
    pub fn new(objects: Vec<ObjectInstance>) -> Result<Self, WorldError> {
        let mut seen = std::collections::HashSet::new();
        for object in &objects {
            object.validate()?;
            if !seen.insert(object.label.to_lowercase()) {
                return Err(WorldError::DuplicateLabel(object.label.clone()));
            }
            if object.location != Location::OnTable {
                return Err(WorldError::InvalidObject {
                    label: object.label.clone(),
                    reason: "initial objects must be on the table".into(),
                });
            }
        }
        Ok(Self {
            objects,
            pointed: Vec::new(),
            placements: Vec::new(),
        })
    }

    pub fn empty() -> Self {
        Self {
            objects: Vec::new(),
            pointed: Vec::new(),
            placements: Vec::new(),
        }
    }

    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }

    pub fn pointed(&self) -> &[String] {
        &self.pointed
    }

    /// Case-insensitive label lookup.
    pub fn find(&self, label: &str) -> Option<&ObjectInstance> {
        let label = label.trim();
        self.objects
            .iter()
            .find(|o| o.label.eq_ignore_ascii_case(label))
    }

    pub fn labels(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.label.clone()).collect()
    }

    /// Labels currently on the table, in insertion order.
    pub fn visible_objects(&self) -> Vec<String> {
        self.objects
            .iter()
            .filter(|o| o.location == Location::OnTable)
            .map(|o| o.label.clone())
            .collect()
    }

    fn tower_height(&self) -> u32 {
        self.objects
            .iter()
            .filter_map(|o| match o.location {
                Location::OnTower(level) => Some(level),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Applies a manipulation action and returns the successor state.
    pub fn apply_action(&self, action: &ActionCommand) -> Result<WorldState, WorldError> {
        let mut next = self.clone();
        next.apply_in_place(action)?;
        Ok(next)
    }

    /// In-place variant of [`WorldState::apply_action`]; leaves `self` untouched on error.
    pub fn apply_in_place(&mut self, action: &ActionCommand) -> Result<(), WorldError> {
        if !action.kind.is_manipulation() {
            return Err(WorldError::NotManipulation(action.kind));
        }
        let tower_height = self.tower_height();
        let idx = self
            .objects
            .iter()
            .position(|o| o.label.eq_ignore_ascii_case(action.argument.trim()))
            .ok_or_else(|| WorldError::UnknownObject(action.argument.clone()))?;
        let object = &mut self.objects[idx];
        // Each object is acted on at most once, so logs never outgrow the inventory.
        if self.pointed.iter().any(|p| p.eq_ignore_ascii_case(&object.label)) {
            return Err(WorldError::AlreadyHandled(object.label.clone()));
        }
        if object.location != Location::OnTable {
            return Err(WorldError::NotOnTable {
                label: object.label.clone(),
                location: object.location,
            });
        }
        let destination = match action.kind {
            ActionKind::Point => {
                self.pointed.push(object.label.clone());
                return Ok(());
            }
            ActionKind::MoveToBox1 => Location::InBox1,
            ActionKind::MoveToBox2 => Location::InBox2,
            ActionKind::PlaceInBowl => Location::InBowl,
            ActionKind::Give => Location::WithUser,
            ActionKind::PutOnTower => Location::OnTower(tower_height + 1),
            ActionKind::RetrieveWorkingMemory | ActionKind::RetrieveDeclarativeMemory => {
                unreachable!("memory calls rejected above")
            }
        };
        object.location = destination;
        self.placements.push(object.label.clone());
        Ok(())
    }

    /// Contents of a container in placement order (tower: bottom to top).
    pub fn contents(&self, container: Container) -> Vec<String> {
        let wanted = match container {
            Container::Pointed => return self.pointed.clone(),
            Container::Tower => {
                let mut stacked: Vec<(u32, &str)> = self
                    .objects
                    .iter()
                    .filter_map(|o| match o.location {
                        Location::OnTower(level) => Some((level, o.label.as_str())),
                        _ => None,
                    })
                    .collect();
                stacked.sort_by_key(|(level, _)| *level);
                return stacked.into_iter().map(|(_, l)| l.to_string()).collect();
            }
            Container::Box1 => Location::InBox1,
            Container::Box2 => Location::InBox2,
            Container::Bowl => Location::InBowl,
            Container::Given => Location::WithUser,
        };
        self.placements
            .iter()
            .filter(|label| self.find(label).map(|o| o.location) == Some(wanted))
            .cloned()
            .collect()
    }

    /// Every non-empty container with its contents.
    pub fn projection(&self) -> BTreeMap<Container, Vec<String>> {
        Container::ALL
            .into_iter()
            .map(|c| (c, self.contents(c)))
            .filter(|(_, labels)| !labels.is_empty())
            .collect()
    }
}

/// Per-task starting inventories, loaded from a `task,label,color,category` table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventories {
    worlds: BTreeMap<TaskId, Vec<ObjectInstance>>,
}

#[derive(Debug, Deserialize)]
struct InventoryRow {
    task: String,
    label: String,
    color: String,
    category: String,
}

impl Inventories {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_INVENTORIES).expect("builtin inventory fixture is valid")
    }

    pub fn parse(text: &str) -> Result<Self, WorldError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut worlds: BTreeMap<TaskId, Vec<ObjectInstance>> = BTreeMap::new();
        for row in reader.deserialize::<InventoryRow>() {
            let row = row.map_err(|e| WorldError::Inventory(e.to_string()))?;
            let task: TaskId = row
                .task
                .parse()
                .map_err(|_| WorldError::UnknownTask(row.task.clone()))?;
            let color = if row.color.is_empty() {
                None
            } else {
                Some(row.color.parse()?)
            };
            let object = ObjectInstance::new(row.label, color, row.category.parse()?);
            worlds.entry(task).or_default().push(object);
        }
        let inventories = Self { worlds };
        for task in inventories.worlds.keys() {
            inventories.world(*task)?;
        }
        Ok(inventories)
    }

    pub fn world(&self, task: TaskId) -> Result<WorldState, WorldError> {
        let objects = self
            .worlds
            .get(&task)
            .ok_or_else(|| WorldError::UnknownTask(task.to_string()))?;
        WorldState::new(objects.clone())
    }

    pub fn objects(&self, task: TaskId) -> Option<&[ObjectInstance]> {
        self.worlds.get(&task).map(Vec::as_slice)
    }

    /// Attribute lookup by label across every inventory (first match wins).
    pub fn lookup(&self, label: &str) -> Option<&ObjectInstance> {
        let label = label.trim();
        self.worlds
            .values()
            .flatten()
            .find(|o| o.label.eq_ignore_ascii_case(label))
    }

    /// All distinct objects across inventories, in first-seen order.
    pub fn catalog(&self) -> Vec<ObjectInstance> {
        let mut out: Vec<ObjectInstance> = Vec::new();
        for object in self.worlds.values().flatten() {
            if !out.iter().any(|o| o.label.eq_ignore_ascii_case(&object.label)) {
                out.push(object.clone());
            }
        }
        out
    }
}

/// Initial world for a task from the builtin inventories.
pub fn load_world(task: TaskId) -> Result<WorldState, WorldError> {
    Inventories::builtin().world(task)
}
