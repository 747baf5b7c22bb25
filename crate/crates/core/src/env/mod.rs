//! Deterministic synthetic GUI world.
//!
//! Apps are finite screen machines ([`scenario`]); an [`EnvInstance`] binds
//! one task to one app and executes actions against it.

mod generate;
mod provider;
mod scenario;
mod search;
mod verify;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, LaunchTarget, Platform, Point, Scroll, ScrollDirection};
use crate::tasks::Task;
use crate::util::fnv1a64;

pub use generate::TemplateGenerator;
pub use provider::{EnvProvider, EnvSession, LocalEnvProvider, LocalSession};
pub use scenario::{
    AppModel, AppSpec, Condition, Element, LexiconEntry, ListSpec, Role, Scenario, ScenarioDoc,
    Screen, Transition, Trigger, VerifierSpec, BUILTIN_SCENARIO, SCENARIO_VERSION,
};
pub use search::{shortest_solution, Solution};
pub use verify::{
    conditions_hold, verify, verify_spec, Judge, JudgeRegistry, MockJudge, MOCK_JUDGE,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("unknown app `{0}`")]
    UnknownApp(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("episode already terminal")]
    Terminal,
    #[error("episode has not finished yet")]
    NotFinished,
    #[error("no judge registered as `{0}`")]
    UnknownJudge(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("lease expired")]
    LeaseExpired,
    #[error("remote: {0}")]
    Remote(String),
}

/// Visible window of a screen's scrollable list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListWindow {
    pub offset: usize,
    pub page_size: usize,
    pub len: usize,
}

impl ListWindow {
    pub fn can_scroll(&self, dir: ScrollDirection) -> bool {
        match dir {
            ScrollDirection::Up => self.offset > 0,
            ScrollDirection::Down => self.offset + self.page_size < self.len,
        }
    }
}

/// What the agent sees of the current screen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenState {
    pub app_id: String,
    pub screen_id: String,
    pub title: String,
    /// Static elements followed by the visible list rows.
    pub elements: Vec<Element>,
    pub variables: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list: Option<ListWindow>,
    /// Id of the focused text field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<String>,
}

impl ScreenState {
    pub fn element_at(&self, p: Point) -> Option<&Element> {
        self.elements.iter().find(|e| e.bbox.contains(p))
    }

    pub fn element(&self, id: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.id == id)
    }

    pub fn focused(&self) -> Option<&Element> {
        self.focus.as_deref().and_then(|id| self.element(id))
    }

    /// `app/screen@hash`, where the hash covers the whole state.
    pub fn state_ref(&self) -> String {
        let json = serde_json::to_vec(self).expect("state serializes");
        format!(
            "{}/{}@{:016x}",
            self.app_id,
            self.screen_id,
            fnv1a64(&[&json])
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub screen_id: String,
    /// `None` for an unparseable turn.
    pub action: Option<Action>,
    /// Label of the element the action landed on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub task_id: String,
    pub query: String,
    pub platform: Platform,
    #[serde(default)]
    pub snippets: Vec<String>,
    pub screen: ScreenState,
    pub step: usize,
    pub max_steps: usize,
    pub terminal: bool,
    pub history: Vec<HistoryEntry>,
}

impl Observation {
    pub fn candidates(&self) -> Vec<Action> {
        candidate_actions(&self.screen, self.platform, &self.snippets)
    }
}

/// Mutable part of the world; hashable so search can deduplicate states.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) struct WorldState {
    pub screen: String,
    pub vars: BTreeMap<String, String>,
    pub offset: usize,
    pub focus: Option<String>,
}

impl WorldState {
    pub fn initial(app: &AppModel) -> Self {
        WorldState {
            screen: app.spec.initial_screen.clone(),
            vars: app.spec.variables.clone(),
            offset: 0,
            focus: None,
        }
    }

    fn enter(&mut self, screen: &str) {
        if self.screen != screen {
            self.screen = screen.to_string();
            self.offset = 0;
            self.focus = None;
        }
    }
}

pub(crate) fn render(app: &AppModel, w: &WorldState) -> ScreenState {
    let screen = app
        .screen(&w.screen)
        .expect("world state names a valid screen");
    let mut elements = screen.elements.clone();
    let mut list = None;
    if let Some(l) = &screen.list {
        elements.extend(l.visible(w.offset));
        list = Some(ListWindow {
            offset: w.offset,
            page_size: l.page_size,
            len: l.items.len(),
        });
    }
    ScreenState {
        app_id: app.id().to_string(),
        screen_id: screen.id.clone(),
        title: screen.title.clone(),
        elements,
        variables: w.vars.clone(),
        list,
        focus: w.focus.clone(),
    }
}

fn fire(app: &AppModel, w: &mut WorldState, trigger: &Trigger) -> bool {
    let Some(t) = app.transition(&w.screen, trigger) else {
        return false;
    };
    let copies: Vec<(String, String)> = t
        .copy
        .iter()
        .map(|(dst, src)| (dst.clone(), w.vars[src].clone()))
        .collect();
    for (dst, v) in copies {
        w.vars.insert(dst, v);
    }
    for (k, v) in &t.set {
        w.vars.insert(k.clone(), v.clone());
    }
    for k in &t.toggle {
        let v = w.vars.get_mut(k).expect("validated variable");
        *v = if v == "on" { "off".into() } else { "on".into() };
    }
    if let Some(g) = &t.goto {
        w.enter(g);
    }
    true
}

/// Direction in which a scroll moves the content window.
pub fn scroll_direction(s: &Scroll) -> Option<ScrollDirection> {
    match s {
        Scroll::Direction(d) => Some(*d),
        // swiping upward reveals content further down
        Scroll::Swipe { start, end } if end.y < start.y => Some(ScrollDirection::Down),
        Scroll::Swipe { start, end } if end.y > start.y => Some(ScrollDirection::Up),
        Scroll::Swipe { .. } => None,
    }
}

/// Apply one action; returns the label of the element it landed on, if any.
pub(crate) fn apply(app: &AppModel, w: &mut WorldState, action: &Action) -> Option<String> {
    let view = render(app, w);
    let screen = app.screen(&w.screen).expect("valid screen");
    match action {
        Action::Click(p) | Action::DoubleClick(p) => {
            let el = view.element_at(*p)?.clone();
            if let (Some(list), true) = (
                &screen.list,
                el.role == Role::ListItem && el.id.starts_with("item"),
            ) {
                if let Some(v) = &list.select_var {
                    w.vars.insert(v.clone(), el.label.clone());
                }
                if let Some(g) = &list.select_goto {
                    w.enter(g);
                }
                return Some(el.label);
            }
            if el.role == Role::TextField {
                w.focus = Some(el.id.clone());
            }
            fire(app, w, &Trigger::Click(el.id.clone()));
            Some(el.label)
        }
        Action::LongPress(p) => {
            let el = view.element_at(*p)?.clone();
            fire(app, w, &Trigger::LongPress(el.id.clone()));
            Some(el.label)
        }
        Action::Hover(p) => view.element_at(*p).map(|e| e.label.clone()),
        Action::Type(text) => {
            let field = view.focused()?;
            let var = field.var.clone()?;
            let label = field.label.clone();
            w.vars.insert(var, text.clone());
            w.focus = None;
            Some(label)
        }
        Action::Scroll(s) => {
            let (dir, list) = (scroll_direction(s)?, view.list?);
            if list.can_scroll(dir) {
                w.offset = match dir {
                    ScrollDirection::Down => {
                        (w.offset + list.page_size).min(list.len - list.page_size)
                    }
                    ScrollDirection::Up => w.offset.saturating_sub(list.page_size),
                };
            }
            None
        }
        Action::PressBack => {
            fire(app, w, &Trigger::Back);
            None
        }
        Action::PressHome => {
            if !fire(app, w, &Trigger::Home) {
                w.enter(&app.spec.initial_screen.clone());
            }
            None
        }
        Action::PressEnter => {
            fire(app, w, &Trigger::Enter);
            None
        }
        Action::Launch(target) => {
            let name = match target {
                LaunchTarget::App(s) | LaunchTarget::Url(s) => s,
            };
            if name.to_lowercase().contains(&app.id().to_lowercase()) {
                w.enter(&app.spec.initial_screen.clone());
            }
            None
        }
        Action::Drag { .. }
        | Action::Wait
        | Action::PressRecent
        | Action::Hotkey(_)
        | Action::Finished(_)
        | Action::CallUser(_) => None,
    }
}

pub const SWIPE_LOW: Point = Point { x: 500, y: 750 };
pub const SWIPE_HIGH: Point = Point { x: 500, y: 250 };

/// The scroll actions offered on a platform, down first.
pub fn scroll_variants(platform: Platform) -> [Action; 2] {
    match platform {
        Platform::Mobile => [
            Action::Scroll(Scroll::Swipe {
                start: SWIPE_LOW,
                end: SWIPE_HIGH,
            }),
            Action::Scroll(Scroll::Swipe {
                start: SWIPE_HIGH,
                end: SWIPE_LOW,
            }),
        ],
        Platform::Web => [
            Action::Scroll(Scroll::Direction(ScrollDirection::Down)),
            Action::Scroll(Scroll::Direction(ScrollDirection::Up)),
        ],
    }
}

/// The policy's discrete support at a state.
///
/// Clicks on every element by id, scrolls when the screen has a list, one
/// `Type` per snippet while a field is focused, then the fixed tail.
pub fn candidate_actions(
    state: &ScreenState,
    platform: Platform,
    snippets: &[String],
) -> Vec<Action> {
    let mut els: Vec<&Element> = state.elements.iter().collect();
    els.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out: Vec<Action> = els.iter().map(|e| Action::Click(e.bbox.center())).collect();
    if state.list.is_some() {
        out.extend(scroll_variants(platform));
    }
    if state.focused().is_some() {
        out.extend(snippets.iter().map(|s| Action::Type(s.clone())));
    }
    out.extend([
        Action::PressBack,
        Action::PressHome,
        Action::Finished(String::new()),
        Action::CallUser(String::new()),
    ]);
    out
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub terminal: bool,
}

/// One episode of one task.
#[derive(Debug, Clone)]
pub struct EnvInstance {
    app: Arc<AppModel>,
    task: Task,
    world: WorldState,
    step: usize,
    max_steps: usize,
    terminal: bool,
    history: Vec<HistoryEntry>,
}

impl EnvInstance {
    pub fn reset(scenario: &Scenario, task: &Task) -> Result<Self, EnvError> {
        let app = scenario.app(&task.app_id)?.clone();
        Ok(Self::with_app(app, task.clone()))
    }

    pub fn with_app(app: Arc<AppModel>, task: Task) -> Self {
        let world = WorldState::initial(&app);
        let max_steps = task.max_steps();
        EnvInstance {
            app,
            task,
            world,
            step: 0,
            max_steps,
            terminal: false,
            history: Vec::new(),
        }
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn platform(&self) -> Platform {
        self.app.platform()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn state(&self) -> ScreenState {
        render(&self.app, &self.world)
    }

    pub fn observe(&self) -> Observation {
        Observation {
            task_id: self.task.id.clone(),
            query: self.task.query.clone(),
            platform: self.platform(),
            snippets: self.task.snippets.clone(),
            screen: self.state(),
            step: self.step,
            max_steps: self.max_steps,
            terminal: self.terminal,
            history: self.history.clone(),
        }
    }

    /// Execute one action; `None` is an unparseable turn and only consumes a step.
    pub fn step(&mut self, action: Option<&Action>) -> Result<StepOutcome, EnvError> {
        if self.terminal {
            return Err(EnvError::Terminal);
        }
        let screen_id = self.world.screen.clone();
        let target = match action {
            Some(a) if a.validate(self.platform()).is_ok() => apply(&self.app, &mut self.world, a),
            _ => None,
        };
        self.history.push(HistoryEntry {
            screen_id,
            action: action.cloned(),
            target,
        });
        self.step += 1;
        if action.is_some_and(Action::is_terminal) || self.step >= self.max_steps {
            self.terminal = true;
        }
        Ok(StepOutcome {
            observation: self.observe(),
            terminal: self.terminal,
        })
    }

    /// Check the task's success condition on the final state.
    pub fn verify(&self, judges: &JudgeRegistry) -> Result<bool, EnvError> {
        if !self.terminal {
            return Err(EnvError::NotFinished);
        }
        verify(&self.task, &self.state(), judges)
    }
}

/// Replay `actions` from a fresh episode and return the final instance.
pub fn replay<'a>(
    scenario: &Scenario,
    task: &Task,
    actions: impl IntoIterator<Item = Option<&'a Action>>,
) -> Result<EnvInstance, EnvError> {
    let mut env = EnvInstance::reset(scenario, task)?;
    for a in actions {
        if env.is_terminal() {
            break;
        }
        env.step(a)?;
    }
    Ok(env)
}
