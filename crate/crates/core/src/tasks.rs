//! Online task bank: difficulty buckets, similarity dedup, stratified
//! sampling and the generation loop.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::env::VerifierSpec;
use crate::trajectory::Trajectory;
use crate::util::tokens;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub enum Bucket {
    #[default]
    Easy,
    Medium,
    Hard,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Easy, Bucket::Medium, Bucket::Hard];

    /// Easy up to 10 expected steps, Medium up to 20, Hard beyond.
    pub fn of(n_steps: usize) -> Bucket {
        match n_steps {
            0..=10 => Bucket::Easy,
            11..=20 => Bucket::Medium,
            _ => Bucket::Hard,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Episode step budget: twice the bucket's upper bound.
    pub fn max_steps(self) -> usize {
        match self {
            Bucket::Easy => 20,
            Bucket::Medium => 40,
            Bucket::Hard => 60,
        }
    }
}

impl std::fmt::Display for Bucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Bucket::Easy => "easy",
            Bucket::Medium => "medium",
            Bucket::Hard => "hard",
        })
    }
}

/// Whether a task is used for training or kept for validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    pub query: String,
    pub app_id: String,
    pub n_steps: usize,
    /// Derived from `n_steps`; recomputed whenever a task enters a pool or scenario.
    #[serde(default)]
    pub bucket: Bucket,
    pub verifier: VerifierSpec,
    /// Text the agent may type while solving the task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snippets: Vec<String>,
    /// A solving action sequence of length `n_steps`, ending in `Finished`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub oracle: Vec<Action>,
    /// `n_steps` is the true minimum (checked by exhaustive search).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exact_min_steps: bool,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl Task {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    pub fn max_steps(&self) -> usize {
        self.bucket.max_steps()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("task pool is empty")]
    EmptyPool,
    #[error("bucket {0} is empty but has a nonzero proportion")]
    EmptyBucket(Bucket),
    #[error("proportions must be non-negative and sum to 1, got {0:?}")]
    Proportions([f64; 3]),
    #[error("dedup threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("task `{0}` is a near-duplicate of `{1}`")]
    Duplicate(String, String),
    #[error("task `{0}` needs at least one expected step")]
    ZeroSteps(String),
    #[error("task bank line {line}: {msg}")]
    Bank { line: usize, msg: String },
    #[error("task bank io: {0}")]
    Io(String),
}

/// Text similarity used for deduplication.
pub trait Similarity: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// Cosine of lowercase token-frequency vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenCosine;

fn frequency(text: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for t in tokens(text) {
        *m.entry(t).or_insert(0.0) += 1.0;
    }
    m
}

impl Similarity for TokenCosine {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        let (fa, fb) = (frequency(a), frequency(b));
        let norm = |m: &BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
        let (na, nb) = (norm(&fa), norm(&fb));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = fa
            .iter()
            .filter_map(|(k, v)| fb.get(k).map(|w| v * w))
            .sum();
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

pub fn similarity(a: &str, b: &str) -> f64 {
    TokenCosine.similarity(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupConfig {
    pub epsilon_dedup: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { epsilon_dedup: 0.9 }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        if (0.0..=1.0).contains(&self.epsilon_dedup) {
            Ok(())
        } else {
            Err(PoolError::Threshold(self.epsilon_dedup))
        }
    }
}

/// Task bank whose queries are pairwise less similar than the dedup threshold.
#[derive(Clone)]
pub struct TaskPool {
    tasks: Vec<Task>,
    cfg: DedupConfig,
    sim: Arc<dyn Similarity>,
    pub seed: u64,
}

impl std::fmt::Debug for TaskPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskPool")
            .field("tasks", &self.tasks.len())
            .field("cfg", &self.cfg)
            .field("seed", &self.seed)
            .finish()
    }
}

impl TaskPool {
    pub fn new(cfg: DedupConfig) -> Self {
        Self::with_similarity(cfg, Arc::new(TokenCosine))
    }

    pub fn with_similarity(cfg: DedupConfig, sim: Arc<dyn Similarity>) -> Self {
        Self {
            tasks: Vec::new(),
            cfg,
            sim,
            seed: 0,
        }
    }

    /// Build a pool, rejecting the whole set if any two tasks are near-duplicates.
    pub fn from_tasks(
        tasks: impl IntoIterator<Item = Task>,
        cfg: DedupConfig,
    ) -> Result<Self, PoolError> {
        cfg.validate()?;
        let mut pool = Self::new(cfg);
        for t in tasks {
            pool.insert(t)?;
        }
        Ok(pool)
    }

    pub fn config(&self) -> DedupConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn bucket(&self, b: Bucket) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(move |t| t.bucket == b)
    }

    /// Highest similarity between `query` and any pooled task, with the task id.
    pub fn max_similarity(&self, query: &str) -> Option<(f64, &str)> {
        self.tasks
            .iter()
            .map(|t| (self.sim.similarity(query, &t.query), t.id.as_str()))
            .fold(None, |best, cur| match best {
                Some((s, _)) if s >= cur.0 => best,
                _ => Some(cur),
            })
    }

    /// Insert after normalizing the bucket; rejects near-duplicates.
    pub fn insert(&mut self, mut task: Task) -> Result<(), PoolError> {
        if task.n_steps == 0 {
            return Err(PoolError::ZeroSteps(task.id));
        }
        task.bucket = Bucket::of(task.n_steps);
        if let Some((s, other)) = self.max_similarity(&task.query) {
            if s >= self.cfg.epsilon_dedup {
                return Err(PoolError::Duplicate(task.id, other.to_string()));
            }
        }
        self.tasks.push(task);
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), PoolError> {
        let io = |e: std::io::Error| PoolError::Io(e.to_string());
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for t in &self.tasks {
            let line = serde_json::to_string(t).expect("tasks serialize");
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load_jsonl(path: impl AsRef<Path>, cfg: DedupConfig) -> Result<Self, PoolError> {
        cfg.validate()?;
        let io = |e: std::io::Error| PoolError::Io(e.to_string());
        let file = std::fs::File::open(path).map_err(io)?;
        let mut pool = Self::new(cfg);
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let task: Task = serde_json::from_str(&line).map_err(|e| PoolError::Bank {
                line: i + 1,
                msg: e.to_string(),
            })?;
            pool.insert(task)?;
        }
        Ok(pool)
    }
}

/// Indices of the candidates that survive dedup, in input order.
///
/// A candidate is kept when its similarity to every pooled task and to every
/// candidate already kept in this call is below the threshold.
pub fn dedup_filter(candidates: &[String], pool: &TaskPool, cfg: &DedupConfig) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let against_pool = pool
            .tasks
            .iter()
            .all(|t| pool.sim.similarity(c, &t.query) < cfg.epsilon_dedup);
        let against_batch = kept
            .iter()
            .all(|&j| pool.sim.similarity(c, &candidates[j]) < cfg.epsilon_dedup);
        if against_pool && against_batch {
            kept.push(i);
        }
    }
    kept
}

/// Largest-remainder split of `batch` over the three buckets; leftover seats
/// go to the largest fractional parts, ties in bucket order.
pub fn bucket_quotas(proportions: [f64; 3], batch: usize) -> Result<[usize; 3], PoolError> {
    let sum: f64 = proportions.iter().sum();
    if proportions.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(PoolError::Proportions(proportions));
    }
    let exact = proportions.map(|p| p * batch as f64);
    let mut quotas = exact.map(|e| e.floor() as usize);
    let assigned: usize = quotas.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().take(batch.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    Ok(quotas)
}

/// Seeded stratified batch: per-bucket quotas drawn without replacement when
/// the bucket is large enough, with replacement otherwise.
pub fn stratified_sample(
    pool: &TaskPool,
    proportions: [f64; 3],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Task>, PoolError> {
    if pool.is_empty() {
        return Err(PoolError::EmptyPool);
    }
    let quotas = bucket_quotas(proportions, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_size);
    for b in Bucket::ALL {
        let quota = quotas[b.index()];
        if quota == 0 {
            continue;
        }
        let members: Vec<&Task> = pool.bucket(b).collect();
        if members.is_empty() {
            return Err(PoolError::EmptyBucket(b));
        }
        if quota <= members.len() {
            out.extend(
                sample(&mut rng, members.len(), quota)
                    .into_iter()
                    .map(|i| members[i].clone()),
            );
        } else {
            out.extend((0..quota).map(|_| members[rng.gen_range(0..members.len())].clone()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("task generator failed: {0}")]
pub struct GeneratorError(pub String);

/// Source of candidate tasks for the generation loop.
pub trait TaskGenerator {
    /// `exemplars` are verified trajectories offered as in-context examples.
    fn generate(
        &mut self,
        round: usize,
        exemplars: &[Trajectory],
        pool: &TaskPool,
    ) -> Result<Vec<Task>, GeneratorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub rounds: usize,
    /// Maximum number of exemplar trajectories handed to the generator.
    pub exemplars_k: usize,
    pub dedup: DedupConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            exemplars_k: 4,
            dedup: DedupConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub generated: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run `cfg.rounds` rounds of generate, dedup, insert.
///
/// A failing round is recorded with its error and leaves the pool untouched.
pub fn generation_loop(
    generator: &mut dyn TaskGenerator,
    pool: &mut TaskPool,
    exemplars: &[Trajectory],
    cfg: &GenerationConfig,
) -> Result<Vec<RoundStats>, PoolError> {
    cfg.dedup.validate()?;
    let verified: Vec<Trajectory> = exemplars
        .iter()
        .filter(|t| t.success)
        .take(cfg.exemplars_k)
        .cloned()
        .collect();
    let mut stats = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let candidates = match generator.generate(round, &verified, pool) {
            Ok(c) => c,
            Err(e) => {
                stats.push(RoundStats {
                    round,
                    generated: 0,
                    accepted: 0,
                    acceptance_rate: 0.0,
                    error: Some(e.0),
                });
                continue;
            }
        };
        let queries: Vec<String> = candidates.iter().map(|t| t.query.clone()).collect();
        let keep = dedup_filter(&queries, pool, &cfg.dedup);
        let mut accepted = 0;
        let mut staged = pool.clone();
        let mut failure = None;
        for i in keep {
            match staged.insert(candidates[i].clone()) {
                Ok(()) => accepted += 1,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let generated = candidates.len();
        match failure {
            None => {
                *pool = staged;
                let acceptance_rate = if generated == 0 {
                    0.0
                } else {
                    accepted as f64 / generated as f64
                };
                stats.push(RoundStats {
                    round,
                    generated,
                    accepted,
                    acceptance_rate,
                    error: None,
                });
            }
            Some(e) => stats.push(RoundStats {
                round,
                generated,
                accepted: 0,
                acceptance_rate: 0.0,
                error: Some(e),
            }),
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str, query: &str, n: usize) -> Task {
        Task {
            id: id.into(),
            query: query.into(),
            app_id: "a".into(),
            n_steps: n,
            bucket: Bucket::Easy,
            verifier: VerifierSpec::Judge("mock".into()),
            snippets: vec![],
            oracle: vec![],
            exact_min_steps: false,
            split: Split::Train,
            tags: vec![],
        }
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(Bucket::of(10), Bucket::Easy);
        assert_eq!(Bucket::of(11), Bucket::Medium);
        assert_eq!(Bucket::of(15), Bucket::Medium);
        assert_eq!(Bucket::of(20), Bucket::Medium);
        assert_eq!(Bucket::of(21), Bucket::Hard);
        assert_eq!(Bucket::of(25), Bucket::Hard);
    }

    #[test]
    fn similarity_examples() {
        assert!((similarity("open wifi", "open wifi") - 1.0).abs() < 1e-12);
        assert_eq!(similarity("open wifi", "close door"), 0.0);
        assert!((similarity("open settings wifi", "open wifi settings") - 1.0).abs() < 1e-12);
        assert_eq!(similarity("", "x"), 0.0);
    }

    #[test]
    fn dedup_examples() {
        let pool =
            TaskPool::from_tasks([task("t", "turn on wifi", 3)], DedupConfig::default()).unwrap();
        let cfg = DedupConfig { epsilon_dedup: 0.9 };
        assert!(dedup_filter(&["turn on wifi".into()], &pool, &cfg).is_empty());
        assert_eq!(dedup_filter(&["buy a lamp".into()], &pool, &cfg), vec![0]);
        let empty = TaskPool::new(cfg);
        assert_eq!(
            dedup_filter(&["a b".into(), "a b".into()], &empty, &cfg),
            vec![0]
        );
    }

    #[test]
    fn quotas_largest_remainder() {
        assert_eq!(bucket_quotas([1.0, 0.0, 0.0], 4).unwrap(), [4, 0, 0]);
        assert_eq!(bucket_quotas([0.5, 0.25, 0.25], 8).unwrap(), [4, 2, 2]);
        assert_eq!(bucket_quotas([0.4, 0.4, 0.2], 8).unwrap(), [3, 3, 2]);
        // equal remainders break toward Easy, then Medium
        assert_eq!(
            bucket_quotas([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 4).unwrap(),
            [2, 1, 1]
        );
        assert!(bucket_quotas([0.5, 0.5, 0.5], 4).is_err());
    }

    #[test]
    fn stratified_is_seeded() {
        let tasks = (0..6)
            .map(|i| task(&format!("e{i}"), &format!("easy {i}"), 3))
            .chain([task("m", "medium one", 15), task("h", "hard one", 30)]);
        let pool = TaskPool::from_tasks(tasks, DedupConfig::default()).unwrap();
        let a = stratified_sample(&pool, [1.0, 0.0, 0.0], 4, 9).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|t| t.bucket == Bucket::Easy));
        assert_eq!(a, stratified_sample(&pool, [1.0, 0.0, 0.0], 4, 9).unwrap());
        let mixed = stratified_sample(&pool, [0.5, 0.25, 0.25], 8, 1).unwrap();
        let count = |b| mixed.iter().filter(|t| t.bucket == b).count();
        assert_eq!(
            (
                count(Bucket::Easy),
                count(Bucket::Medium),
                count(Bucket::Hard)
            ),
            (4, 2, 2)
        );
        // without replacement inside the bucket when it is large enough
        let mut ids: Vec<_> = a.iter().map(|t| t.id.clone()).collect();
        ids.dedup();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert!(matches!(
            stratified_sample(
                &TaskPool::new(DedupConfig::default()),
                [1.0, 0.0, 0.0],
                1,
                0
            ),
            Err(PoolError::EmptyPool)
        ));
    }

    struct Fixed(Vec<&'static str>, bool);

    impl TaskGenerator for Fixed {
        fn generate(
            &mut self,
            round: usize,
            _: &[Trajectory],
            _: &TaskPool,
        ) -> Result<Vec<Task>, GeneratorError> {
            if self.1 && round == 1 {
                return Err(GeneratorError("boom".into()));
            }
            Ok(self
                .0
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    task(
                        &format!("g{round}-{i}"),
                        &format!("{q} {}", if self.1 { round } else { 0 }),
                        2,
                    )
                })
                .collect())
        }
    }

    #[test]
    fn generation_rates() {
        let mut pool = TaskPool::new(DedupConfig::default());
        let cfg = GenerationConfig {
            rounds: 3,
            ..Default::default()
        };
        let stats = generation_loop(
            &mut Fixed(vec!["alpha", "beta"], false),
            &mut pool,
            &[],
            &cfg,
        )
        .unwrap();
        assert_eq!(stats[0].acceptance_rate, 1.0);
        assert_eq!(stats[1].acceptance_rate, 0.0);
        assert_eq!(pool.len(), 2);

        let mut pool = TaskPool::new(DedupConfig::default());
        let stats =
            generation_loop(&mut Fixed(vec!["x", "y"], true), &mut pool, &[], &cfg).unwrap();
        assert_eq!(stats[1].error.as_deref(), Some("boom"));
        assert_eq!(stats[2].acceptance_rate, 1.0);
        assert_eq!(pool.len(), 4);
    }

    #[test]
    fn bank_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        let pool = TaskPool::from_tasks(
            [task("a", "one two", 4), task("b", "three", 14)],
            DedupConfig::default(),
        )
        .unwrap();
        pool.save_jsonl(&path).unwrap();
        let back = TaskPool::load_jsonl(&path, DedupConfig::default()).unwrap();
        assert_eq!(back.tasks(), pool.tasks());
        assert_eq!(back.tasks()[1].bucket, Bucket::Medium);
    }
}
