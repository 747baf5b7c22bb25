//! The run configuration document.
//!
//! One JSON object with a section per stage. Relative paths resolve against
//! the directory holding the config file. Only the fleet's host and port can
//! be overridden from the environment (`GUIRL_HOST`, `GUIRL_PORT`).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use guirl_core::env::Scenario;
use guirl_core::grpo::GrpoConfig;
use guirl_core::merge::MergeSpec;
use guirl_core::reward::{OfflineRewardConfig, OnlineRewardConfig};
use guirl_core::tasks::{Bucket, DedupConfig, Split, Task, TaskPool};
use guirl_gateway::fleet::NodeAddr;
use guirl_gateway::{FleetSpec, FleetTopology};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario document; the built-in pack when absent.
    pub scenario: Option<PathBuf>,
    /// Extra tasks (JSON lines) appended to the scenario's own.
    pub task_pool: Option<PathBuf>,
    /// Recorded trajectories (JSON lines) for offline training and refinement.
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Overrides `grpo.seed`.
    pub seed: Option<u64>,
    pub grpo: GrpoConfig,
    pub offline_reward: OfflineRewardConfig,
    pub online_reward: OnlineRewardConfig,
    /// Near-duplicate threshold for the training pool.
    pub dedup: DedupConfig,
    pub merge: Option<MergeSpec>,
    pub gateway: GatewaySection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub refine: RefineSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    /// Fleet to serve with `serve-fleet`.
    pub fleet: Option<FleetSpec>,
    /// Node endpoints for `train-online --gateway`.
    pub endpoints: Vec<NodeAddr>,
    /// Topology file written by `serve-fleet`; used when no endpoints are listed.
    pub topology: Option<PathBuf>,
}

/// Which tasks a stage uses. Every present field must match.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFilter {
    pub split: Option<Split>,
    pub buckets: Option<Vec<Bucket>>,
    pub apps: Option<Vec<String>>,
    /// Tasks carrying any of these tags.
    pub tags: Option<Vec<String>>,
    pub ids: Option<Vec<String>>,
}

impl TaskFilter {
    pub fn matches(&self, t: &Task) -> bool {
        self.split.map_or(true, |s| s == t.split)
            && self.buckets.as_ref().map_or(true, |b| b.contains(&t.bucket))
            && self.apps.as_ref().map_or(true, |a| a.contains(&t.app_id))
            && self.tags.as_ref().map_or(true, |g| g.iter().any(|x| t.has_tag(x)))
            && self.ids.as_ref().map_or(true, |i| i.contains(&t.id))
    }

    pub fn select(&self, tasks: &[Task]) -> Vec<Task> {
        tasks.iter().filter(|t| self.matches(t)).cloned().collect()
    }

    fn heldout() -> Self {
        Self { split: Some(Split::Heldout), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub tasks: TaskFilter,
    /// Greedy evaluation at each eval point.
    pub eval_tasks: TaskFilter,
    /// Tasks deciding reference updates; the first `grpo.validation_size` are used.
    pub validation_tasks: TaskFilter,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            tasks: TaskFilter { split: Some(Split::Train), ..TaskFilter::default() },
            eval_tasks: TaskFilter::heldout(),
            validation_tasks: TaskFilter::heldout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: TaskFilter,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tasks: TaskFilter::heldout() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    /// Stop once this share of traces is gold.
    pub target: f64,
    pub max_passes: usize,
    /// Replace reconstruct-band traces with oracle replays instead of dropping them.
    pub reconstruct: bool,
    /// Size of the review sample.
    pub review: usize,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self { target: 0.9, max_passes: 3, reconstruct: true, review: 20 }
    }
}

impl RunConfig {
    /// Read, resolve and validate a config file.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.scenario);
        fix(&mut self.task_pool);
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        fix(&mut self.gateway.topology);
        if let Some(seed) = self.seed {
            self.grpo.seed = seed;
        }
    }

    /// Check every sub-config invariant and that referenced inputs exist.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        self.grpo.validate().map_err(|e| cfg(e.to_string()))?;
        self.offline_reward.validate().map_err(|e| cfg(e.to_string()))?;
        self.online_reward.validate().map_err(|e| cfg(e.to_string()))?;
        self.dedup.validate().map_err(|e| cfg(e.to_string()))?;
        if let Some(m) = &self.merge {
            if let Some(w) = &m.weights {
                if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(cfg("merge weights must be finite and non-negative".into()));
                }
            }
            if !(m.density > 0.0 && m.density <= 1.0) {
                return Err(cfg(format!("merge density {} must lie in (0, 1]", m.density)));
            }
        }
        if !(0.0..=1.0).contains(&self.refine.target) {
            return Err(cfg("refine target must lie in [0, 1]".into()));
        }
        for p in [&self.scenario, &self.task_pool, &self.dataset].into_iter().flatten() {
            if !p.is_file() {
                return Err(cfg(format!("{}: no such file", p.display())));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// The scenario with the task pool file's tasks appended.
    pub fn scenario(&self) -> Result<Arc<Scenario>, CliError> {
        let mut s = match &self.scenario {
            Some(p) => Scenario::load(p).map_err(|e| CliError::Config(e.to_string()))?,
            None => Scenario::builtin(),
        };
        if let Some(p) = &self.task_pool {
            let pool = TaskPool::load_jsonl(p, self.dedup)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            for t in pool.tasks() {
                let mut t = t.clone();
                if s.tasks.iter().any(|x| x.id == t.id) {
                    return Err(CliError::Config(format!("task `{}` is defined twice", t.id)));
                }
                s.check_task(&mut t).map_err(|e| CliError::Config(e.to_string()))?;
                s.tasks.push(t);
            }
        }
        Ok(Arc::new(s))
    }

    /// Fleet spec with `GUIRL_HOST` / `GUIRL_PORT` applied.
    pub fn fleet_spec(&self, scenario: &Scenario) -> Result<FleetSpec, CliError> {
        let mut spec = self.gateway.fleet.clone().unwrap_or_else(|| {
            let apps: Vec<String> = scenario.apps().map(|a| a.id().to_string()).collect();
            let apps: Vec<&str> = apps.iter().map(String::as_str).collect();
            FleetSpec::uniform(2, 2, &apps)
        });
        if let Ok(h) = std::env::var("GUIRL_HOST") {
            spec.host = h;
        }
        if let Ok(p) = std::env::var("GUIRL_PORT") {
            spec.base_port = p
                .parse()
                .map_err(|_| CliError::Config(format!("GUIRL_PORT `{p}` is not a port")))?;
        }
        spec.validate(scenario).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Where `train-online --gateway` connects.
    pub fn topology(&self) -> Result<FleetTopology, CliError> {
        if !self.gateway.endpoints.is_empty() {
            return Ok(FleetTopology {
                nodes: self.gateway.endpoints.clone(),
                devices: Vec::new(),
                heartbeat_interval_ms: guirl_gateway::lease::DEFAULT_INTERVAL_MS,
            });
        }
        let Some(p) = &self.gateway.topology else {
            return Err(CliError::Config("gateway mode needs gateway.endpoints or gateway.topology".into()));
        };
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }
}
