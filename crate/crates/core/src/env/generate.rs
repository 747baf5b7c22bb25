//! Deterministic template task generator over the synthetic world.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::search::Explored;
use super::{Condition, LexiconEntry, Scenario, VerifierSpec, WorldState};
use crate::tasks::{Bucket, GeneratorError, Split, Task, TaskGenerator, TaskPool};
use crate::trajectory::Trajectory;

/// Builds tasks from one or two judge-lexicon goals of the same app and
/// solves each by breadth-first search, so every emitted task comes with a
/// shortest oracle.
///
/// The agent may type any value named by its app's lexicon; the search over
/// each app runs once and is shared by all of that app's templates.
pub struct TemplateGenerator {
    scenario: Arc<Scenario>,
    per_round: usize,
    max_depth: usize,
    seed: u64,
    templates: Vec<Vec<LexiconEntry>>,
    snippets: BTreeMap<String, Vec<String>>,
    explored: BTreeMap<String, Explored>,
}

fn holds(conds: &[Condition], w: &WorldState) -> bool {
    conds.iter().all(|c| match c {
        Condition::Var { var, equals } => w.vars.get(var) == Some(equals),
        Condition::Screen { screen } => &w.screen == screen,
    })
}

fn conflicting(a: &[Condition], b: &[Condition]) -> bool {
    a.iter().any(|x| {
        b.iter().any(|y| match (x, y) {
            (Condition::Var { var: v1, equals: e1 }, Condition::Var { var: v2, equals: e2 }) => v1 == v2 && e1 != e2,
            (Condition::Screen { screen: s1 }, Condition::Screen { screen: s2 }) => s1 != s2,
            _ => false,
        })
    })
}

impl TemplateGenerator {
    pub fn new(scenario: Arc<Scenario>, per_round: usize, seed: u64) -> Self {
        let mut by_app: BTreeMap<&str, Vec<&LexiconEntry>> = BTreeMap::new();
        for e in &scenario.judge_lexicon {
            by_app.entry(e.app.as_str()).or_default().push(e);
        }
        let mut templates = Vec::new();
        for entries in by_app.values() {
            templates.extend(entries.iter().map(|e| vec![(*e).clone()]));
            for (i, a) in entries.iter().enumerate() {
                for b in &entries[i + 1..] {
                    if !conflicting(&a.conditions, &b.conditions) {
                        templates.push(vec![(*a).clone(), (*b).clone()]);
                    }
                }
            }
        }
        let mut snippets: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in &scenario.judge_lexicon {
            let s = snippets.entry(e.app.clone()).or_default();
            s.extend(e.conditions.iter().filter_map(|c| match c {
                Condition::Var { equals, .. } => Some(equals.to_lowercase()),
                Condition::Screen { .. } => None,
            }));
        }
        for s in snippets.values_mut() {
            s.sort();
            s.dedup();
        }
        Self { scenario, per_round, max_depth: 6, seed, templates, snippets, explored: BTreeMap::new() }
    }

    pub fn with_max_depth(mut self, depth: usize) -> Self {
        self.max_depth = depth;
        self
    }

    fn instantiate(&mut self, parts: &[LexiconEntry]) -> Option<Task> {
        let app_id = parts[0].app.clone();
        let app = self.scenario.app(&app_id).ok()?.clone();
        let conditions: Vec<Condition> = parts.iter().flat_map(|p| p.conditions.iter().cloned()).collect();
        let snippets = self.snippets.get(&app_id).cloned().unwrap_or_default();
        let depth = self.max_depth;
        let explored = self.explored.entry(app_id.clone()).or_insert_with(|| Explored::new(&app, &snippets, depth));
        let solution = explored.solve(|w| holds(&conditions, w))?;
        let slug: Vec<String> = parts.iter().map(|p| p.phrase.replace(' ', "-")).collect();
        let mut task = Task {
            id: format!("gen-{app_id}-{}", slug.join("+")),
            query: format!("in {app_id} {}", parts.iter().map(|p| p.phrase.as_str()).collect::<Vec<_>>().join(" then ")),
            app_id,
            n_steps: solution.len(),
            bucket: Bucket::of(solution.len()),
            verifier: VerifierSpec::Rule(conditions),
            snippets,
            oracle: solution.actions,
            exact_min_steps: true,
            split: Split::Train,
            tags: vec!["generated".into()],
        };
        self.scenario.check_task(&mut task).ok()?;
        Some(task)
    }
}

impl TaskGenerator for TemplateGenerator {
    /// Templates of apps seen in the exemplars come first; within that order
    /// the pick is a seeded shuffle, skipping ids already in the pool.
    fn generate(&mut self, round: usize, exemplars: &[Trajectory], pool: &TaskPool) -> Result<Vec<Task>, GeneratorError> {
        let mut order: Vec<usize> = (0..self.templates.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let favored = |i: &usize| !exemplars.iter().any(|t| t.app_id == self.templates[*i][0].app);
        order.sort_by_key(favored);
        let mut out = Vec::new();
        for i in order {
            if out.len() == self.per_round {
                break;
            }
            let parts = self.templates[i].clone();
            if let Some(t) = self.instantiate(&parts) {
                if pool.tasks().iter().all(|p| p.id != t.id) {
                    out.push(t);
                }
            }
        }
        Ok(out)
    }
}
