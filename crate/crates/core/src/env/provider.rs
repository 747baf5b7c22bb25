//! Episode sessions behind a transport-neutral interface.

use std::sync::Arc;

use super::{EnvError, EnvInstance, JudgeRegistry, Observation, Scenario};
use crate::action::Action;
use crate::tasks::Task;

/// One live episode, local or remote.
pub trait EnvSession: Send {
    fn observe(&self) -> Observation;
    fn step(&mut self, action: Option<&Action>) -> Result<Observation, EnvError>;
    fn verify(&mut self) -> Result<bool, EnvError>;
}

/// Opens sessions for tasks.
pub trait EnvProvider: Send + Sync {
    fn open(&self, task: &Task) -> Result<Box<dyn EnvSession>, EnvError>;
}

/// In-process episodes over a shared scenario.
#[derive(Debug, Clone)]
pub struct LocalEnvProvider {
    scenario: Arc<Scenario>,
    judges: Arc<JudgeRegistry>,
}

impl LocalEnvProvider {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        let judges = Arc::new(JudgeRegistry::for_scenario(&scenario));
        Self { scenario, judges }
    }

    pub fn with_judges(scenario: Arc<Scenario>, judges: Arc<JudgeRegistry>) -> Self {
        Self { scenario, judges }
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }
}

pub struct LocalSession {
    env: EnvInstance,
    judges: Arc<JudgeRegistry>,
}

impl LocalSession {
    pub fn new(env: EnvInstance, judges: Arc<JudgeRegistry>) -> Self {
        Self { env, judges }
    }

    pub fn instance(&self) -> &EnvInstance {
        &self.env
    }
}

impl EnvSession for LocalSession {
    fn observe(&self) -> Observation {
        self.env.observe()
    }

    fn step(&mut self, action: Option<&Action>) -> Result<Observation, EnvError> {
        self.env.step(action).map(|o| o.observation)
    }

    fn verify(&mut self) -> Result<bool, EnvError> {
        self.env.verify(&self.judges)
    }
}

impl EnvProvider for LocalEnvProvider {
    fn open(&self, task: &Task) -> Result<Box<dyn EnvSession>, EnvError> {
        let env = EnvInstance::reset(&self.scenario, task)?;
        Ok(Box::new(LocalSession::new(env, self.judges.clone())))
    }
}
