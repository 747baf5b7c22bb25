//! Breadth-first search over an app's state machine.

use std::collections::{HashMap, HashSet, VecDeque};

use super::{apply, candidate_actions, render, AppModel, ScreenState, WorldState};
use crate::action::Action;

/// A shortest solving sequence, `Finished` included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub actions: Vec<Action>,
}

impl Solution {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn moves(app: &AppModel, state: &ScreenState, snippets: &[String]) -> Vec<Action> {
    let mut out: Vec<Action> = candidate_actions(state, app.platform(), snippets)
        .into_iter()
        .filter(|a| !a.is_terminal())
        .collect();
    out.extend(
        state
            .elements
            .iter()
            .map(|e| Action::LongPress(e.bbox.center())),
    );
    out.push(Action::PressEnter);
    out
}

/// Fewest actions that reach a state satisfying `goal`, then `Finished`.
///
/// Explores every state reachable within `max_depth` non-terminal actions;
/// typed text is limited to `snippets`.
pub fn shortest_solution(
    app: &AppModel,
    snippets: &[String],
    goal: impl Fn(&ScreenState) -> bool,
    max_depth: usize,
) -> Option<Solution> {
    let start = WorldState::initial(app);
    let mut parent: HashMap<WorldState, Option<(WorldState, Action)>> = HashMap::new();
    parent.insert(start.clone(), None);
    let mut queue = VecDeque::from([(start, 0usize)]);
    while let Some((w, depth)) = queue.pop_front() {
        let view = render(app, &w);
        if goal(&view) {
            let mut actions = vec![Action::Finished(String::new())];
            let mut cur = w;
            while let Some(Some((prev, a))) = parent.get(&cur).cloned() {
                actions.push(a);
                cur = prev;
            }
            actions.reverse();
            return Some(Solution { actions });
        }
        if depth == max_depth {
            continue;
        }
        for a in moves(app, &view, snippets) {
            let mut next = w.clone();
            apply(app, &mut next, &a);
            if !parent.contains_key(&next) {
                parent.insert(next.clone(), Some((w.clone(), a)));
                queue.push_back((next, depth + 1));
            }
        }
    }
    None
}

/// Every world state reachable within a depth budget, in breadth-first order.
///
/// Built once and queried for many goals; the first match in order is a
/// shortest path.
pub(crate) struct Explored {
    nodes: Vec<(WorldState, Option<(usize, Action)>)>,
}

impl Explored {
    pub fn new(app: &AppModel, snippets: &[String], max_depth: usize) -> Self {
        let start = WorldState::initial(app);
        let mut seen = HashSet::from([start.clone()]);
        let mut nodes = vec![(start, None)];
        let mut begin = 0;
        for _ in 0..max_depth {
            let end = nodes.len();
            for i in begin..end {
                let view = render(app, &nodes[i].0);
                for a in moves(app, &view, snippets) {
                    let mut next = nodes[i].0.clone();
                    apply(app, &mut next, &a);
                    if seen.insert(next.clone()) {
                        nodes.push((next, Some((i, a))));
                    }
                }
            }
            begin = end;
            if begin == nodes.len() {
                break;
            }
        }
        Self { nodes }
    }

    /// Shortest path to a state whose screen and variables satisfy `goal`.
    pub fn solve(&self, goal: impl Fn(&WorldState) -> bool) -> Option<Solution> {
        let mut i = self.nodes.iter().position(|(w, _)| goal(w))?;
        let mut actions = vec![Action::Finished(String::new())];
        while let Some((p, a)) = &self.nodes[i].1 {
            actions.push(a.clone());
            i = *p;
        }
        actions.reverse();
        Some(Solution { actions })
    }
}

