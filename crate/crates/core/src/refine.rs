//! Iterative trajectory refinement: score each trace 0 to 10, keep the good
//! ones, rewrite the middling ones, reconstruct or drop the rest.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    replay, verify_spec, Condition, JudgeRegistry, Scenario, ScreenState, VerifierSpec, MOCK_JUDGE,
};
use crate::tasks::Task;
use crate::trajectory::{Provenance, Trajectory, TrajectoryStep};

/// Provenance marker for traces a stage failed on.
pub const QUARANTINE: &str = "quarantine";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("quality score {0} outside 0..=10")]
    Score(u8),
    #[error("judge: {0}")]
    Judge(String),
    #[error("rewriter: {0}")]
    Rewrite(String),
    #[error("reconstructor: {0}")]
    Reconstruct(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QualityScore(u8);

impl QualityScore {
    pub const MAX: u8 = 10;

    pub fn new(v: u8) -> Result<Self, RefineError> {
        if v > Self::MAX {
            return Err(RefineError::Score(v));
        }
        Ok(Self(v))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Gold,
    Rewrite,
    Reconstruct,
}

pub fn route_band(score: QualityScore) -> Band {
    match score.value() {
        7..=10 => Band::Gold,
        4..=6 => Band::Rewrite,
        _ => Band::Reconstruct,
    }
}

/// Scores a trace's quality.
pub trait TraceJudge: Send + Sync {
    fn score(&self, trace: &Trajectory) -> Result<QualityScore, RefineError>;
}

/// A replacement instruction, optionally with the success condition it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct Rewrite {
    pub instruction: String,
    pub verifier: Option<VerifierSpec>,
}

/// Re-targets a middling trace by rewriting its instruction.
pub trait Rewriter: Send + Sync {
    fn rewrite(&self, trace: &Trajectory) -> Result<Rewrite, RefineError>;
}

/// Rebuilds a low-quality trace from scratch; `None` drops it.
pub trait Reconstructor: Send + Sync {
    fn reconstruct(&self, trace: &Trajectory) -> Result<Option<Trajectory>, RefineError>;
}

pub fn is_quarantined(trace: &Trajectory) -> bool {
    trace
        .provenance
        .history
        .iter()
        .any(|h| h.starts_with(QUARANTINE))
}

fn quarantine(mut trace: Trajectory, err: &RefineError) -> Trajectory {
    trace
        .provenance
        .history
        .push(format!("{QUARANTINE}: {err}"));
    trace
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub pass: usize,
    pub total: usize,
    pub gold: usize,
    pub rewrite: usize,
    pub reconstruct: usize,
    /// Traces a judge or rewriter failed on, kept and flagged.
    pub quarantined: usize,
    /// Reconstruct-band traces replaced rather than dropped.
    pub reconstructed: usize,
    /// Share of traces scored gold.
    pub high_fidelity: f64,
}

/// One refinement pass.
///
/// Gold traces pass through untouched, rewrite-band traces get a new
/// instruction (they are scored again on the next pass), reconstruct-band
/// traces are dropped unless a reconstructor replaces them. Traces already
/// quarantined are carried along without being judged again.
pub fn refine_pass(
    dataset: Vec<Trajectory>,
    pass: usize,
    judge: &dyn TraceJudge,
    rewriter: &dyn Rewriter,
    reconstructor: Option<&dyn Reconstructor>,
) -> (Vec<Trajectory>, RefineReport) {
    let scores: Vec<Option<Result<QualityScore, RefineError>>> = dataset
        .par_iter()
        .map(|t| (!is_quarantined(t)).then(|| judge.score(t)))
        .collect();
    let total = dataset.len();
    let mut report = RefineReport {
        pass,
        total,
        gold: 0,
        rewrite: 0,
        reconstruct: 0,
        quarantined: 0,
        reconstructed: 0,
        high_fidelity: 0.0,
    };
    let mut out = Vec::with_capacity(total);
    for (trace, score) in dataset.into_iter().zip(scores) {
        let score = match score {
            None => {
                report.quarantined += 1;
                out.push(trace);
                continue;
            }
            Some(Err(e)) => {
                report.quarantined += 1;
                out.push(quarantine(trace, &e));
                continue;
            }
            Some(Ok(s)) => s,
        };
        match route_band(score) {
            Band::Gold => {
                report.gold += 1;
                out.push(trace);
            }
            Band::Rewrite => match rewriter.rewrite(&trace) {
                Ok(rw) => {
                    report.rewrite += 1;
                    let mut t = trace;
                    t.provenance
                        .history
                        .push(format!("pass {pass}: rewrote `{}`", t.instruction));
                    t.instruction = rw.instruction;
                    if rw.verifier.is_some() {
                        t.verifier = rw.verifier;
                    }
                    out.push(t);
                }
                Err(e) => {
                    report.quarantined += 1;
                    out.push(quarantine(trace, &e));
                }
            },
            Band::Reconstruct => match reconstructor.map(|r| r.reconstruct(&trace)) {
                None | Some(Ok(None)) => report.reconstruct += 1,
                Some(Ok(Some(mut t))) => {
                    report.reconstruct += 1;
                    report.reconstructed += 1;
                    t.provenance
                        .history
                        .push(format!("pass {pass}: reconstructed"));
                    out.push(t);
                }
                Some(Err(e)) => {
                    report.quarantined += 1;
                    out.push(quarantine(trace, &e));
                }
            },
        }
    }
    report.high_fidelity = if total == 0 {
        1.0
    } else {
        report.gold as f64 / total as f64
    };
    (out, report)
}

/// Run passes until the gold share reaches `target` or `max_passes` is spent.
pub fn iterate_refine(
    mut dataset: Vec<Trajectory>,
    judge: &dyn TraceJudge,
    rewriter: &dyn Rewriter,
    reconstructor: Option<&dyn Reconstructor>,
    target: f64,
    max_passes: usize,
) -> (Vec<Trajectory>, Vec<RefineReport>) {
    let mut reports = Vec::new();
    for pass in 0..max_passes {
        let (next, report) = refine_pass(dataset.clone(), pass, judge, rewriter, reconstructor);
        let done = report.high_fidelity >= target;
        reports.push(report);
        if done {
            break;
        }
        dataset = next;
    }
    (dataset, reports)
}

/// A seeded sample of traces set aside for human review.
pub fn review_sample(dataset: &[Trajectory], n: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, dataset.len(), n.min(dataset.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| dataset[i].clone()).collect()
}

/// Replays traces in the synthetic world.
#[derive(Clone)]
pub struct ReplayWorld {
    scenario: Arc<Scenario>,
    judges: Arc<JudgeRegistry>,
    tasks: HashMap<String, Task>,
}

impl ReplayWorld {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        let judges = Arc::new(JudgeRegistry::for_scenario(&scenario));
        let tasks = scenario
            .tasks
            .iter()
            .map(|t| (t.id.clone(), t.clone()))
            .collect();
        Self {
            scenario,
            judges,
            tasks,
        }
    }

    /// Add tasks (for instance generated ones) that traces may refer to.
    pub fn with_tasks(mut self, tasks: impl IntoIterator<Item = Task>) -> Self {
        self.tasks
            .extend(tasks.into_iter().map(|t| (t.id.clone(), t)));
        self
    }

    fn task(&self, id: &str) -> Result<&Task, String> {
        self.tasks
            .get(id)
            .ok_or_else(|| format!("unknown task `{id}`"))
    }

    /// Final state of replaying the trace, and whether the episode ended.
    pub fn final_state(&self, trace: &Trajectory) -> Result<(ScreenState, bool), String> {
        let task = self.task(&trace.task_id)?;
        let env = replay(&self.scenario, task, trace.actions()).map_err(|e| e.to_string())?;
        Ok((env.state(), env.is_terminal()))
    }

    /// Whether the trace's own success condition holds after replay.
    pub fn verifies(&self, trace: &Trajectory) -> Result<bool, String> {
        let task = self.task(&trace.task_id)?;
        let (state, terminal) = self.final_state(trace)?;
        let spec = trace.verifier.as_ref().unwrap_or(&task.verifier);
        Ok(terminal
            && verify_spec(spec, &trace.instruction, &state, &self.judges)
                .map_err(|e| e.to_string())?)
    }
}

/// Rule-based judge: 0 if any step failed to parse, else 10 if the trace
/// verifies on replay and 5 if it does not.
#[derive(Clone)]
pub struct MockTraceJudge {
    pub world: ReplayWorld,
}

impl TraceJudge for MockTraceJudge {
    fn score(&self, trace: &Trajectory) -> Result<QualityScore, RefineError> {
        if trace.unparseable_steps() > 0 {
            return QualityScore::new(0);
        }
        let ok = self.world.verifies(trace).map_err(RefineError::Judge)?;
        QualityScore::new(if ok { 10 } else { 5 })
    }
}

/// Describes what the trace actually achieved: every lexicon phrase of the
/// app whose conditions hold in the final state, joined with "and".
#[derive(Clone)]
pub struct LexiconRewriter {
    pub world: ReplayWorld,
}

impl Rewriter for LexiconRewriter {
    fn rewrite(&self, trace: &Trajectory) -> Result<Rewrite, RefineError> {
        let (state, _) = self
            .world
            .final_state(trace)
            .map_err(RefineError::Rewrite)?;
        let phrases: Vec<&str> = self
            .world
            .scenario
            .judge_lexicon
            .iter()
            .filter(|e| e.app == state.app_id && crate::env::conditions_hold(&e.conditions, &state))
            .filter(|e| {
                !e.conditions
                    .iter()
                    .all(|c| matches!(c, Condition::Screen { .. }))
            })
            .map(|e| e.phrase.as_str())
            .collect();
        if phrases.is_empty() {
            return Err(RefineError::Rewrite(format!(
                "nothing achieved in `{}`",
                trace.terminal_state_ref
            )));
        }
        Ok(Rewrite {
            instruction: phrases.join(" and "),
            verifier: Some(VerifierSpec::Judge(MOCK_JUDGE.into())),
        })
    }
}

/// Replaces a trace with a replay of its task's oracle.
#[derive(Clone)]
pub struct OracleReconstructor {
    pub world: ReplayWorld,
}

impl Reconstructor for OracleReconstructor {
    fn reconstruct(&self, trace: &Trajectory) -> Result<Option<Trajectory>, RefineError> {
        let task = self
            .world
            .task(&trace.task_id)
            .map_err(RefineError::Reconstruct)?;
        if task.oracle.is_empty() {
            return Ok(None);
        }
        let mut env = crate::env::EnvInstance::reset(&self.world.scenario, task)
            .map_err(|e| RefineError::Reconstruct(e.to_string()))?;
        let mut steps = Vec::new();
        for a in &task.oracle {
            let obs = env.observe();
            steps.push(TrajectoryStep {
                state_ref: obs.screen.state_ref(),
                response: crate::rollout::agent_turn(&obs, a),
                action: Some(a.clone()),
            });
            env.step(Some(a))
                .map_err(|e| RefineError::Reconstruct(e.to_string()))?;
        }
        let success = env
            .verify(&self.world.judges)
            .map_err(|e| RefineError::Reconstruct(e.to_string()))?;
        Ok(Some(Trajectory {
            task_id: task.id.clone(),
            app_id: task.app_id.clone(),
            instruction: task.query.clone(),
            platform: env.platform(),
            steps,
            success,
            terminal_state_ref: env.state().state_ref(),
            verifier: None,
            provenance: Provenance {
                source: "oracle".into(),
                history: trace.provenance.history.clone(),
            },
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Platform;

    fn trace(id: &str) -> Trajectory {
        Trajectory {
            task_id: id.into(),
            app_id: "a".into(),
            instruction: format!("do {id}"),
            platform: Platform::Mobile,
            steps: vec![],
            success: false,
            terminal_state_ref: "a/s@0".into(),
            verifier: None,
            provenance: Provenance::default(),
        }
    }

    /// Scores from a table keyed by task id; missing ids are judge errors.
    struct Table(HashMap<String, u8>);

    impl TraceJudge for Table {
        fn score(&self, t: &Trajectory) -> Result<QualityScore, RefineError> {
            let v = self
                .0
                .get(&t.task_id)
                .ok_or_else(|| RefineError::Judge(t.task_id.clone()))?;
            QualityScore::new(*v)
        }
    }

    struct Upper;

    impl Rewriter for Upper {
        fn rewrite(&self, t: &Trajectory) -> Result<Rewrite, RefineError> {
            if t.task_id == "norw" {
                return Err(RefineError::Rewrite("no".into()));
            }
            Ok(Rewrite {
                instruction: t.instruction.to_uppercase(),
                verifier: None,
            })
        }
    }

    struct Fixed;

    impl Reconstructor for Fixed {
        fn reconstruct(&self, t: &Trajectory) -> Result<Option<Trajectory>, RefineError> {
            Ok(Some(Trajectory {
                instruction: "rebuilt".into(),
                ..t.clone()
            }))
        }
    }

    fn table(pairs: &[(&str, u8)]) -> Table {
        Table(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    #[test]
    fn band_thresholds() {
        assert_eq!(route_band(QualityScore::new(7).unwrap()), Band::Gold);
        assert_eq!(route_band(QualityScore::new(5).unwrap()), Band::Rewrite);
        assert_eq!(route_band(QualityScore::new(2).unwrap()), Band::Reconstruct);
        assert!(QualityScore::new(11).is_err());
    }

    #[test]
    fn all_gold_is_unchanged() {
        let data = vec![trace("a"), trace("b")];
        let (out, r) = refine_pass(data.clone(), 0, &table(&[("a", 9), ("b", 7)]), &Upper, None);
        assert_eq!(out, data);
        assert_eq!(r.high_fidelity, 1.0);
    }

    #[test]
    fn pass_routes_and_reconciles() {
        let data = vec![
            trace("g"),
            trace("r"),
            trace("x"),
            trace("missing"),
            trace("norw"),
        ];
        let judge = table(&[("g", 8), ("r", 4), ("x", 3), ("norw", 6)]);
        let (out, r) = refine_pass(data.clone(), 0, &judge, &Upper, None);
        assert_eq!(
            (
                r.gold,
                r.rewrite,
                r.reconstruct,
                r.quarantined,
                r.reconstructed
            ),
            (1, 1, 1, 2, 0)
        );
        assert_eq!(r.gold + r.rewrite + r.reconstruct + r.quarantined, r.total);
        assert_eq!(out.len(), r.gold + r.rewrite + r.quarantined);
        assert_eq!(out[0], data[0]);
        assert_eq!(out[1].instruction, "DO R");
        assert!(is_quarantined(&out[2]) && is_quarantined(&out[3]));
        assert!((r.high_fidelity - 0.2).abs() < 1e-15);

        let (out, r) = refine_pass(data, 0, &judge, &Upper, Some(&Fixed));
        assert_eq!(r.reconstructed, 1);
        assert_eq!(
            out.len(),
            r.gold + r.rewrite + r.quarantined + r.reconstructed
        );
        assert!(out.iter().any(|t| t.instruction == "rebuilt"));
    }

    #[test]
    fn quarantined_traces_are_not_rejudged() {
        let (out, _) = refine_pass(vec![trace("missing")], 0, &table(&[]), &Upper, None);
        let (out2, r) = refine_pass(out.clone(), 1, &table(&[("missing", 0)]), &Upper, None);
        assert_eq!(out, out2);
        assert_eq!(r.quarantined, 1);
    }

    #[test]
    fn iterate_stops_at_target_or_budget() {
        let data = vec![trace("a"), trace("b")];
        let judge = table(&[("a", 10), ("b", 5)]);
        let (out, reports) = iterate_refine(data.clone(), &judge, &Upper, None, 0.5, 5);
        assert_eq!(reports.len(), 1);
        assert_eq!(out, data);
        let (out, reports) = iterate_refine(data.clone(), &judge, &Upper, None, 0.9, 0);
        assert!(reports.is_empty());
        assert_eq!(out, data);
        let (_, reports) = iterate_refine(data, &judge, &Upper, None, 0.9, 3);
        assert_eq!(
            reports.iter().map(|r| r.pass).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn review_sample_is_seeded_subset() {
        let data: Vec<Trajectory> = (0..20).map(|i| trace(&i.to_string())).collect();
        let a = review_sample(&data, 5, 3);
        assert_eq!(a, review_sample(&data, 5, 3));
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|t| data.contains(t)));
        assert_eq!(review_sample(&data, 50, 3).len(), 20);
    }
}
