//! Success verification: rule predicates and pluggable judges.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Condition, EnvError, LexiconEntry, Scenario, ScreenState, VerifierSpec};
use crate::tasks::Task;

pub const MOCK_JUDGE: &str = "mock";

/// Decides success from the instruction and the final state.
pub trait Judge: Send + Sync {
    fn judge(&self, query: &str, state: &ScreenState) -> bool;
}

pub fn conditions_hold(conds: &[Condition], state: &ScreenState) -> bool {
    conds.iter().all(|c| match c {
        Condition::Var { var, equals } => state.variables.get(var) == Some(equals),
        Condition::Screen { screen } => &state.screen_id == screen,
    })
}

/// Deterministic stand-in for a model judge.
///
/// Every lexicon phrase of the state's app found in the query contributes its
/// conditions; the verdict is their conjunction, and a query matching no
/// phrase is judged a failure.
#[derive(Debug, Clone, Default)]
pub struct MockJudge {
    lexicon: Vec<LexiconEntry>,
}

impl MockJudge {
    pub fn new(lexicon: Vec<LexiconEntry>) -> Self {
        Self { lexicon }
    }

    /// Conditions the judge would check for `query` in `app`, or `None` if no phrase matches.
    pub fn conditions(&self, app: &str, query: &str) -> Option<Vec<Condition>> {
        let q = query.to_lowercase();
        let hits: Vec<&LexiconEntry> = self
            .lexicon
            .iter()
            .filter(|e| e.app == app && q.contains(&e.phrase.to_lowercase()))
            .collect();
        if hits.is_empty() {
            return None;
        }
        Some(
            hits.iter()
                .flat_map(|e| e.conditions.iter().cloned())
                .collect(),
        )
    }
}

impl Judge for MockJudge {
    fn judge(&self, query: &str, state: &ScreenState) -> bool {
        self.conditions(&state.app_id, query)
            .is_some_and(|c| conditions_hold(&c, state))
    }
}

#[derive(Clone, Default)]
pub struct JudgeRegistry {
    judges: BTreeMap<String, Arc<dyn Judge>>,
}

impl std::fmt::Debug for JudgeRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.judges.keys()).finish()
    }
}

impl JudgeRegistry {
    /// Registry holding the scenario's lexicon judge under [`MOCK_JUDGE`].
    pub fn for_scenario(scenario: &Scenario) -> Self {
        let mut r = Self::default();
        r.register(
            MOCK_JUDGE,
            Arc::new(MockJudge::new(scenario.judge_lexicon.clone())),
        );
        r
    }

    pub fn register(&mut self, name: &str, judge: Arc<dyn Judge>) {
        self.judges.insert(name.to_string(), judge);
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn Judge>, EnvError> {
        self.judges
            .get(name)
            .ok_or_else(|| EnvError::UnknownJudge(name.to_string()))
    }
}

pub fn verify_spec(
    spec: &VerifierSpec,
    query: &str,
    state: &ScreenState,
    judges: &JudgeRegistry,
) -> Result<bool, EnvError> {
    match spec {
        VerifierSpec::Rule(conds) => Ok(conditions_hold(conds, state)),
        VerifierSpec::Judge(name) => Ok(judges.get(name)?.judge(query, state)),
    }
}

pub fn verify(task: &Task, state: &ScreenState, judges: &JudgeRegistry) -> Result<bool, EnvError> {
    verify_spec(&task.verifier, &task.query, state, judges)
}
