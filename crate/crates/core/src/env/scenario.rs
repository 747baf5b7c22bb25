//! Scenario documents: apps as finite screen machines plus the task pack.
//!
//! See `docs/scenario-schema.md` for the JSON layout.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::{Action, BBox, Platform};
use crate::env::EnvError;
use crate::tasks::{Bucket, Task};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Button,
    TextField,
    ListItem,
    Tab,
    Icon,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Button,
        Role::TextField,
        Role::ListItem,
        Role::Tab,
        Role::Icon,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Element {
    pub id: String,
    pub label: String,
    pub role: Role,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Variable written by `Type` while this text field has focus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<String>,
}

/// A scrollable list whose visible window is `page_size` items laid out top
/// to bottom inside `area`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListSpec {
    pub items: Vec<String>,
    pub page_size: usize,
    pub area: BBox,
    /// Variable set to the label of the clicked item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_var: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_goto: Option<String>,
}

impl ListSpec {
    pub fn max_offset(&self) -> usize {
        self.items.len().saturating_sub(self.page_size)
    }

    pub fn item_id(index: usize) -> String {
        format!("item{index}")
    }

    /// Elements for the window starting at `offset`.
    pub fn visible(&self, offset: usize) -> Vec<Element> {
        let rows = self.page_size.max(1) as i32;
        let h = (self.area.y2() - self.area.y1()) / rows;
        self.items
            .iter()
            .enumerate()
            .skip(offset)
            .take(self.page_size)
            .enumerate()
            .map(|(row, (index, label))| {
                let y1 = self.area.y1() + row as i32 * h;
                let y2 = (y1 + h - 1).max(y1);
                Element {
                    id: Self::item_id(index),
                    label: label.clone(),
                    role: Role::ListItem,
                    bbox: BBox::new(self.area.x1(), y1, self.area.x2(), y2)
                        .expect("row inside list area"),
                    var: None,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Screen {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub elements: Vec<Element>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list: Option<ListSpec>,
}

/// Abstract event a transition reacts to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Trigger {
    Click(String),
    LongPress(String),
    Back,
    Home,
    Enter,
}

impl Trigger {
    pub fn parse(s: &str) -> Option<Trigger> {
        match s {
            "back" => Some(Trigger::Back),
            "home" => Some(Trigger::Home),
            "enter" => Some(Trigger::Enter),
            _ => {
                if let Some(id) = s.strip_prefix("click:") {
                    Some(Trigger::Click(id.to_string()))
                } else {
                    s.strip_prefix("long_press:")
                        .map(|id| Trigger::LongPress(id.to_string()))
                }
            }
        }
    }

    fn element(&self) -> Option<&str> {
        match self {
            Trigger::Click(id) | Trigger::LongPress(id) => Some(id),
            _ => None,
        }
    }
}

impl std::fmt::Display for Trigger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trigger::Click(id) => write!(f, "click:{id}"),
            Trigger::LongPress(id) => write!(f, "long_press:{id}"),
            Trigger::Back => f.write_str("back"),
            Trigger::Home => f.write_str("home"),
            Trigger::Enter => f.write_str("enter"),
        }
    }
}

impl Serialize for Trigger {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Trigger {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Trigger::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown trigger `{s}`")))
    }
}

/// Effects of one `(screen, trigger)` pair, applied as copy, set, toggle, then goto.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub screen: String,
    pub trigger: Trigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goto: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub set: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub toggle: Vec<String>,
    /// `destination -> source` variable copies.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub copy: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub id: String,
    pub platform: Platform,
    pub initial_screen: String,
    /// Declared variables with their initial values.
    #[serde(default)]
    pub variables: BTreeMap<String, String>,
    pub screens: Vec<Screen>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

/// An app with its transition table indexed for stepping.
#[derive(Debug, Clone)]
pub struct AppModel {
    pub spec: AppSpec,
    screens: HashMap<String, usize>,
    table: HashMap<(String, Trigger), usize>,
}

impl AppModel {
    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn platform(&self) -> Platform {
        self.spec.platform
    }

    pub fn screen(&self, id: &str) -> Option<&Screen> {
        self.screens.get(id).map(|&i| &self.spec.screens[i])
    }

    pub fn transition(&self, screen: &str, trigger: &Trigger) -> Option<&Transition> {
        self.table
            .get(&(screen.to_string(), trigger.clone()))
            .map(|&i| &self.spec.transitions[i])
    }

    fn build(spec: AppSpec) -> Result<Self, EnvError> {
        let bad = |msg: String| EnvError::Scenario(format!("app `{}`: {msg}", spec.id));
        let mut screens = HashMap::new();
        for (i, s) in spec.screens.iter().enumerate() {
            if screens.insert(s.id.clone(), i).is_some() {
                return Err(bad(format!("duplicate screen `{}`", s.id)));
            }
        }
        if !screens.contains_key(&spec.initial_screen) {
            return Err(bad(format!(
                "unknown initial screen `{}`",
                spec.initial_screen
            )));
        }
        let declared = |v: &str| spec.variables.contains_key(v);
        for s in &spec.screens {
            let mut ids = BTreeSet::new();
            for e in &s.elements {
                if !ids.insert(e.id.as_str()) || e.id.starts_with("item") && s.list.is_some() {
                    return Err(bad(format!(
                        "screen `{}`: duplicate or reserved element id `{}`",
                        s.id, e.id
                    )));
                }
                match (&e.var, e.role) {
                    (Some(v), Role::TextField) if declared(v) => {}
                    (None, Role::TextField) => {
                        return Err(bad(format!("text field `{}` has no variable", e.id)))
                    }
                    (None, _) => {}
                    (Some(v), _) => {
                        return Err(bad(format!(
                            "element `{}` binds `{v}` but is not a declared text field",
                            e.id
                        )))
                    }
                }
            }
            let mut boxes: Vec<BBox> = s.elements.iter().map(|e| e.bbox).collect();
            if let Some(list) = &s.list {
                if list.page_size == 0 || list.items.is_empty() {
                    return Err(bad(format!("screen `{}`: empty list", s.id)));
                }
                if (list.area.y2() - list.area.y1()) / (list.page_size as i32) < 1 {
                    return Err(bad(format!("screen `{}`: list area too small", s.id)));
                }
                if let Some(v) = &list.select_var {
                    if !declared(v) {
                        return Err(bad(format!("list selects undeclared variable `{v}`")));
                    }
                }
                if let Some(g) = &list.select_goto {
                    if !screens.contains_key(g) {
                        return Err(bad(format!("list goes to unknown screen `{g}`")));
                    }
                }
                boxes.push(list.area);
            }
            for (i, a) in boxes.iter().enumerate() {
                if boxes[i + 1..].iter().any(|b| a.overlaps(b)) {
                    return Err(bad(format!("screen `{}`: sibling boxes overlap", s.id)));
                }
            }
        }
        let mut table = HashMap::new();
        for (i, t) in spec.transitions.iter().enumerate() {
            let screen = spec
                .screens
                .iter()
                .find(|s| s.id == t.screen)
                .ok_or_else(|| bad(format!("transition on unknown screen `{}`", t.screen)))?;
            if let Some(id) = t.trigger.element() {
                if !screen.elements.iter().any(|e| e.id == id) {
                    return Err(bad(format!(
                        "trigger `{}` names unknown element",
                        t.trigger
                    )));
                }
            }
            if let Some(g) = &t.goto {
                if !screens.contains_key(g) {
                    return Err(bad(format!("transition goes to unknown screen `{g}`")));
                }
            }
            let vars = t
                .set
                .keys()
                .chain(t.toggle.iter())
                .chain(t.copy.keys())
                .chain(t.copy.values());
            for v in vars {
                if !declared(v) {
                    return Err(bad(format!("transition touches undeclared variable `{v}`")));
                }
            }
            if table
                .insert((t.screen.clone(), t.trigger.clone()), i)
                .is_some()
            {
                return Err(bad(format!(
                    "duplicate transition `{}` on `{}`",
                    t.trigger, t.screen
                )));
            }
        }
        let model = AppModel {
            spec,
            screens,
            table,
        };
        model.check_connected()?;
        Ok(model)
    }

    fn successors(&self, screen: &Screen) -> Vec<String> {
        let mut out: Vec<String> = self
            .spec
            .transitions
            .iter()
            .filter(|t| t.screen == screen.id)
            .filter_map(|t| t.goto.clone())
            .collect();
        if let Some(g) = screen.list.as_ref().and_then(|l| l.select_goto.clone()) {
            out.push(g);
        }
        out
    }

    fn check_connected(&self) -> Result<(), EnvError> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([self.spec.initial_screen.clone()]);
        while let Some(id) = queue.pop_front() {
            if !seen.insert(id.clone()) {
                continue;
            }
            let screen = self.screen(&id).expect("validated screen id");
            queue.extend(self.successors(screen));
        }
        match self.spec.screens.iter().find(|s| !seen.contains(&s.id)) {
            Some(s) => Err(EnvError::Scenario(format!(
                "app `{}`: screen `{}` unreachable from `{}`",
                self.spec.id, s.id, self.spec.initial_screen
            ))),
            None => Ok(()),
        }
    }
}

/// A condition over the final state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Condition {
    Var { var: String, equals: String },
    Screen { screen: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierSpec {
    /// Conjunction of conditions, checked deterministically against the state.
    Rule(Vec<Condition>),
    /// Named judge from the registry.
    Judge(String),
}

/// Mock-judge lexicon entry: a query phrase and the outcome it asks for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub app: String,
    pub phrase: String,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub version: u32,
    pub apps: Vec<AppSpec>,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub judge_lexicon: Vec<LexiconEntry>,
}

/// A validated scenario pack.
#[derive(Debug, Clone)]
pub struct Scenario {
    apps: BTreeMap<String, Arc<AppModel>>,
    pub tasks: Vec<Task>,
    pub judge_lexicon: Vec<LexiconEntry>,
}

impl Scenario {
    pub fn from_doc(doc: ScenarioDoc) -> Result<Self, EnvError> {
        if doc.version != SCENARIO_VERSION {
            return Err(EnvError::Scenario(format!(
                "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                doc.version
            )));
        }
        let mut apps = BTreeMap::new();
        for spec in doc.apps {
            let id = spec.id.clone();
            if apps
                .insert(id.clone(), Arc::new(AppModel::build(spec)?))
                .is_some()
            {
                return Err(EnvError::Scenario(format!("duplicate app `{id}`")));
            }
        }
        let mut scenario = Scenario {
            apps,
            tasks: Vec::new(),
            judge_lexicon: doc.judge_lexicon,
        };
        for e in &scenario.judge_lexicon {
            let app = scenario.app(&e.app)?;
            scenario.check_conditions(app, &e.conditions)?;
        }
        let mut ids = BTreeSet::new();
        for mut task in doc.tasks {
            if !ids.insert(task.id.clone()) {
                return Err(EnvError::Scenario(format!("duplicate task `{}`", task.id)));
            }
            scenario.check_task(&mut task)?;
            scenario.tasks.push(task);
        }
        Ok(scenario)
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let doc: ScenarioDoc =
            serde_json::from_str(text).map_err(|e| EnvError::Scenario(format!("parse: {e}")))?;
        Self::from_doc(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The pack shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_SCENARIO).expect("shipped scenario is valid")
    }

    pub fn app(&self, id: &str) -> Result<&Arc<AppModel>, EnvError> {
        self.apps
            .get(id)
            .ok_or_else(|| EnvError::UnknownApp(id.to_string()))
    }

    pub fn apps(&self) -> impl Iterator<Item = &Arc<AppModel>> {
        self.apps.values()
    }

    pub fn task(&self, id: &str) -> Result<&Task, EnvError> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| EnvError::UnknownTask(id.to_string()))
    }

    fn check_conditions(&self, app: &AppModel, conds: &[Condition]) -> Result<(), EnvError> {
        for c in conds {
            let ok = match c {
                Condition::Var { var, .. } => app.spec.variables.contains_key(var),
                Condition::Screen { screen } => app.screen(screen).is_some(),
            };
            if !ok {
                return Err(EnvError::Scenario(format!(
                    "app `{}`: condition {c:?} references an undeclared name",
                    app.id()
                )));
            }
        }
        Ok(())
    }

    /// Validate a task against its app; also fills in the derived bucket.
    pub fn check_task(&self, task: &mut Task) -> Result<(), EnvError> {
        let app = self.app(&task.app_id)?;
        let bad = |msg: String| EnvError::Scenario(format!("task `{}`: {msg}", task.id));
        if task.n_steps == 0 {
            return Err(bad("expected steps must be at least 1".into()));
        }
        task.bucket = Bucket::of(task.n_steps);
        if let VerifierSpec::Rule(conds) = &task.verifier {
            self.check_conditions(app, conds)?;
        }
        if !task.oracle.is_empty() && task.oracle.len() != task.n_steps {
            return Err(bad(format!(
                "oracle has {} actions but expected steps is {}",
                task.oracle.len(),
                task.n_steps
            )));
        }
        if let Some(a) = task
            .oracle
            .iter()
            .find(|a: &&Action| a.validate(app.platform()).is_err())
        {
            return Err(bad(format!(
                "oracle action `{a}` invalid on {}",
                app.platform()
            )));
        }
        Ok(())
    }
}

/// Scenario pack compiled into the crate (also shipped as `scenarios/default.json`).
pub const BUILTIN_SCENARIO: &str = include_str!("../../scenarios/default.json");
