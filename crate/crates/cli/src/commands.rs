//! Subcommand bodies. Results go to stdout as JSON; files go to the output
//! directory. Nothing printed or written depends on wall-clock time.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use guirl_core::action::{parse_action, Action};
use guirl_core::env::{EnvInstance, EnvProvider, JudgeRegistry, LocalEnvProvider, Scenario};
use guirl_core::grpo::{
    gradient_check, train_offline as run_offline, train_online as run_online, EvalSet, Member,
    OfflineRun, OnlineRun, RolloutGroup, TrainState,
};
use guirl_core::merge::MergeMode;
use guirl_core::metrics::{JsonlSink, MetricRecord};
use guirl_core::params::ParameterMap;
use guirl_core::policy;
use guirl_core::refine::{
    iterate_refine, review_sample, LexiconRewriter, MockTraceJudge, OracleReconstructor, Reconstructor,
    ReplayWorld,
};
use guirl_core::reward::{online_trajectory_reward, step_reward};
use guirl_core::rollout::{
    evaluate_oracle, evaluate_traces, greedy_step_hit, oracle_prompts, rollout, rollout_seed, trajectory_prompts,
    Decode, EvalReport, Prompt, TaskResult,
};
use guirl_core::tasks::{Bucket, Task, TaskPool};
use guirl_core::trajectory::{read_jsonl, write_jsonl};
use guirl_gateway::{serve_fleet_with_clock, Clock, Conn, FakeClock, GatewayProvider, SystemClock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{EvalArgs, GradArgs, MergeArgs, OnlineArgs, RefineArgs, ReplayArgs, ServeArgs, TrainArgs};

/// Marks a checkpoint that replays task oracles instead of holding weights.
pub const ORACLE_TENSOR: &str = "policy.oracle";

const CHECKPOINT: &str = "checkpoint.grpk";
const METRICS: &str = "metrics.jsonl";
const CURVE: &str = "curve.csv";

/// What a checkpoint decodes to.
enum Policy {
    Linear(Vec<f64>),
    Oracle,
}

fn load_checkpoint(path: &Path) -> Result<ParameterMap, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!("{}: no such checkpoint", path.display())));
    }
    ParameterMap::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_policy(path: &Path) -> Result<Policy, CliError> {
    let params = load_checkpoint(path)?;
    if params.get(ORACLE_TENSOR).is_ok() {
        return Ok(Policy::Oracle);
    }
    let w = policy::weights(&params).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
    Ok(Policy::Linear(w.to_vec()))
}

fn init_state(init: Option<&Path>) -> Result<ParameterMap, CliError> {
    let params = match init {
        Some(p) => load_checkpoint(p)?,
        None => policy::init_params(),
    };
    policy::weights(&params).map_err(|e| CliError::Mismatch(e.to_string()))?;
    Ok(params)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn nonempty(tasks: Vec<Task>, what: &str) -> Result<Vec<Task>, CliError> {
    if tasks.is_empty() {
        return Err(CliError::Config(format!("no tasks match the {what} filter")));
    }
    Ok(tasks)
}

fn eval_set(scenario: &Scenario, tasks: Vec<Task>) -> Result<EvalSet, CliError> {
    Ok(EvalSet { prompts: oracle_prompts(scenario, &tasks)?, tasks })
}

/// Eval points of a run as plot data.
fn write_curve(path: &Path, records: &[MetricRecord]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "phase,iteration,step_sr,trace_sr,loss,mean_reward")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records.iter().filter(|r| r.step_sr.is_some() || r.trace_sr.is_some()) {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.phase,
            r.iteration,
            opt(r.step_sr),
            opt(r.trace_sr),
            r.loss,
            r.mean_reward
        )?;
    }
    w.flush()?;
    Ok(())
}

fn finish_training(dir: &Path, stage: &str, state: &TrainState) -> Result<(), CliError> {
    state.theta.save(dir.join(CHECKPOINT))?;
    write_curve(&dir.join(CURVE), &state.metrics)?;
    let last_eval = state.metrics.iter().rev().find(|r| r.step_sr.is_some());
    print_json(&json!({
        "stage": stage,
        "iterations": state.iteration,
        "step_sr": last_eval.and_then(|r| r.step_sr),
        "trace_sr": last_eval.and_then(|r| r.trace_sr),
        "weights": policy::weights(&state.theta)?,
    }));
    Ok(())
}

pub fn train_offline(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let scenario = cfg.scenario()?;
    let dataset: Vec<Prompt> = match &cfg.dataset {
        Some(p) => {
            let traces = read_jsonl(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            trajectory_prompts(&scenario, &traces)?
        }
        None => oracle_prompts(&scenario, &nonempty(cfg.train.tasks.select(&scenario.tasks), "train")?)?,
    };
    if dataset.is_empty() {
        return Err(CliError::Config("the offline dataset yields no prompts".into()));
    }
    let eval = eval_set(&scenario, cfg.train.eval_tasks.select(&scenario.tasks))?;
    let provider = LocalEnvProvider::new(scenario.clone());
    let mut state = TrainState::new(init_state(args.init.as_deref())?, Vec::new());
    let dir = out_dir(cfg)?;
    let mut sink = JsonlSink::new(BufWriter::new(File::create(dir.join(METRICS))?));
    let run = OfflineRun {
        dataset: &dataset,
        rewards: cfg.offline_reward.clone(),
        provider: Some(&provider),
        eval: &eval,
    };
    run_offline(&mut state, &cfg.grpo, &run, &mut sink)?;
    finish_training(&dir, "offline", &state)
}

fn gateway_provider(cfg: &RunConfig) -> Result<GatewayProvider, CliError> {
    let topology = cfg.topology()?;
    if topology.nodes.is_empty() {
        return Err(CliError::Config("the gateway topology lists no nodes".into()));
    }
    for n in &topology.nodes {
        Conn::connect(&n.addr).map_err(|e| CliError::Connect(format!("gateway node {}: {e}", n.id)))?;
    }
    Ok(GatewayProvider::new(topology, format!("train-{}", cfg.grpo.seed)))
}

pub fn train_online(cfg: &RunConfig, args: &OnlineArgs) -> Result<(), CliError> {
    let scenario = cfg.scenario()?;
    let train = nonempty(cfg.train.tasks.select(&scenario.tasks), "train")?;
    let pool = TaskPool::from_tasks(train, cfg.dedup).map_err(|e| CliError::Config(e.to_string()))?;
    let eval = eval_set(&scenario, cfg.train.eval_tasks.select(&scenario.tasks))?;
    let mut validation = cfg.train.validation_tasks.select(&scenario.tasks);
    validation.truncate(cfg.grpo.validation_size);
    let provider: Box<dyn EnvProvider> = if args.gateway {
        Box::new(gateway_provider(cfg)?)
    } else {
        Box::new(LocalEnvProvider::new(scenario.clone()))
    };
    let mut state = TrainState::new(init_state(args.init.as_deref())?, validation);
    let dir = out_dir(cfg)?;
    let mut sink = JsonlSink::new(BufWriter::new(File::create(dir.join(METRICS))?));
    let run = OnlineRun {
        provider: provider.as_ref(),
        pool: &pool,
        rewards: cfg.online_reward,
        step_rewards: cfg.offline_reward.clone(),
        eval: &eval,
    };
    run_online(&mut state, &cfg.grpo, &run, &mut sink)?;
    finish_training(&dir, "online", &state)
}

#[derive(Serialize)]
struct DeltaStats {
    tensor: String,
    against: String,
    values: usize,
    changed: usize,
    mean_abs: f64,
    max_abs: f64,
}

fn delta_stats(merged: &ParameterMap, other: &ParameterMap, against: &str) -> Vec<DeltaStats> {
    merged
        .iter()
        .filter_map(|(name, t)| {
            let o = other.get(name).ok()?;
            let d: Vec<f64> = t.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).collect();
            Some(DeltaStats {
                tensor: name.clone(),
                against: against.to_string(),
                values: d.len(),
                changed: d.iter().filter(|x| **x != 0.0).count(),
                mean_abs: d.iter().sum::<f64>() / d.len().max(1) as f64,
                max_abs: d.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect()
}

pub fn merge(cfg: &RunConfig, args: &MergeArgs) -> Result<(), CliError> {
    if args.checkpoints.len() < 2 {
        return Err(CliError::Config(format!(
            "merge needs at least 2 checkpoints, got {}",
            args.checkpoints.len()
        )));
    }
    let spec = cfg
        .merge
        .as_ref()
        .ok_or_else(|| CliError::Config("the config has no `merge` section".into()))?;
    let models = args.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    for (p, m) in args.checkpoints.iter().zip(&models).skip(1) {
        m.check_layout(&models[0])
            .map_err(|e| CliError::Mismatch(format!("{} vs {}: {e}", p.display(), args.checkpoints[0].display())))?;
    }
    let base = match (&args.base, spec.mode) {
        (Some(p), _) => Some(load_checkpoint(p)?),
        (None, MergeMode::Ties) => Some(policy::init_params()),
        (None, MergeMode::Linear) => None,
    };
    let merged = spec.apply(base.as_ref(), &models)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    merged.save(&args.out)?;
    if let Some(b) = &base {
        for s in delta_stats(&merged, b, "base") {
            print_json(&s);
        }
    }
    for (i, m) in models.iter().enumerate() {
        for s in delta_stats(&merged, m, &format!("input{i}")) {
            print_json(&s);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BucketStats {
    tasks: usize,
    trace_sr: f64,
    mean_steps: f64,
}

#[derive(Serialize)]
struct EvalOutput {
    tasks: usize,
    samples_per_task: usize,
    step_sr: f64,
    trace_sr: f64,
    mean_steps: f64,
    buckets: BTreeMap<String, BucketStats>,
    results: Vec<TaskResult>,
}

fn sampled_eval(provider: &dyn EnvProvider, tasks: &[Task], theta: &[f64], n: usize, seed: u64) -> Result<EvalReport, CliError> {
    let mut results = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        for m in 0..n {
            let r = rollout(provider, t, theta, Decode::Sample(rollout_seed(seed, 0, i as u64, m as u64)))?;
            results.push(TaskResult { task_id: t.id.clone(), success: r.trajectory.success, steps: r.trajectory.len() });
        }
    }
    let k = results.len().max(1) as f64;
    Ok(EvalReport {
        trace_sr: results.iter().filter(|r| r.success).count() as f64 / k,
        mean_steps: results.iter().map(|r| r.steps as f64).sum::<f64>() / k,
        tasks: results,
    })
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let policy = load_policy(&args.checkpoint)?;
    let scenario = cfg.scenario()?;
    let tasks = nonempty(cfg.eval.tasks.select(&scenario.tasks), "eval")?;
    let provider = LocalEnvProvider::new(scenario.clone());
    let prompts = oracle_prompts(&scenario, &tasks)?;
    let samples = args.samples.unwrap_or(1);
    if samples == 0 {
        return Err(CliError::Config("--samples must be positive".into()));
    }
    let (step_hits, report) = match &policy {
        Policy::Oracle => (
            prompts
                .iter()
                .filter(|p| {
                    let resp = guirl_core::action::parse_response(
                        &guirl_core::rollout::agent_turn(&p.observation, &p.sample.gt_action),
                        p.sample.platform,
                    );
                    step_reward(&resp, &p.sample, &cfg.offline_reward).is_step_success()
                })
                .count(),
            evaluate_oracle(&provider, &tasks)?,
        ),
        Policy::Linear(theta) => (
            prompts.iter().filter(|p| greedy_step_hit(p, theta, &cfg.offline_reward)).count(),
            match args.samples {
                Some(n) => sampled_eval(&provider, &tasks, theta, n, cfg.grpo.seed)?,
                None => evaluate_traces(&provider, &tasks, theta)?,
            },
        ),
    };
    let bucket_of: BTreeMap<&str, Bucket> = tasks.iter().map(|t| (t.id.as_str(), t.bucket)).collect();
    let mut buckets = BTreeMap::new();
    for b in Bucket::ALL {
        let rows: Vec<&TaskResult> = report.tasks.iter().filter(|r| bucket_of[r.task_id.as_str()] == b).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        buckets.insert(
            b.to_string(),
            BucketStats {
                tasks: rows.len() / samples,
                trace_sr: rows.iter().filter(|r| r.success).count() as f64 / n,
                mean_steps: rows.iter().map(|r| r.steps as f64).sum::<f64>() / n,
            },
        );
    }
    if let Some(p) = &args.csv {
        let mut w = BufWriter::new(File::create(p)?);
        writeln!(w, "task_id,bucket,success,steps")?;
        for r in &report.tasks {
            writeln!(w, "{},{},{},{}", r.task_id, bucket_of[r.task_id.as_str()], u8::from(r.success), r.steps)?;
        }
        w.flush()?;
    }
    let out = EvalOutput {
        tasks: tasks.len(),
        samples_per_task: samples,
        step_sr: if prompts.is_empty() { 0.0 } else { step_hits as f64 / prompts.len() as f64 },
        trace_sr: report.trace_sr,
        mean_steps: report.mean_steps,
        buckets,
        results: report.tasks,
    };
    let text = serde_json::to_string_pretty(&out).expect("serializable");
    if let Some(p) = &args.out {
        fs::write(p, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

pub fn refine(cfg: &RunConfig, args: &RefineArgs) -> Result<(), CliError> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Config("refine needs a `dataset` of trajectories".into()))?;
    let traces = read_jsonl(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let scenario = cfg.scenario()?;
    let world = ReplayWorld::new(scenario);
    let judge = MockTraceJudge { world: world.clone() };
    let rewriter = LexiconRewriter { world: world.clone() };
    let reconstructor = OracleReconstructor { world };
    let recon = cfg.refine.reconstruct.then_some(&reconstructor as &dyn Reconstructor);
    let (refined, reports) = iterate_refine(traces, &judge, &rewriter, recon, cfg.refine.target, cfg.refine.max_passes);
    let dir = out_dir(cfg)?;
    write_jsonl(dir.join("refined.jsonl"), &refined)?;
    let mut w = BufWriter::new(File::create(dir.join("refine_report.jsonl"))?);
    for r in &reports {
        writeln!(w, "{}", serde_json::to_string(r).expect("serializable"))?;
        print_json(r);
    }
    w.flush()?;
    let n = args.review.unwrap_or(cfg.refine.review);
    if n > 0 {
        write_jsonl(dir.join("review.jsonl"), &review_sample(&refined, n, cfg.grpo.seed))?;
    }
    Ok(())
}

impl From<guirl_core::trajectory::TraceIoError> for CliError {
    fn from(e: guirl_core::trajectory::TraceIoError) -> Self {
        CliError::Internal(e.to_string())
    }
}

pub fn serve_fleet(cfg: &RunConfig, args: &ServeArgs) -> Result<(), CliError> {
    let scenario = cfg.scenario()?;
    let spec = cfg.fleet_spec(&scenario)?;
    let clock: Arc<dyn Clock> = if args.fake_clock {
        Arc::new(FakeClock::default())
    } else {
        Arc::new(SystemClock::default())
    };
    let fleet = serve_fleet_with_clock(&spec, scenario, clock).map_err(|e| match e {
        guirl_gateway::GatewayError::Spec(m) => CliError::Config(m),
        other => CliError::Connect(other.to_string()),
    })?;
    let topo_path = match &args.topology_out {
        Some(p) => p.clone(),
        None => out_dir(cfg)?.join("topology.json"),
    };
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        // listen before announcing, so an interrupt right after the topology appears is caught
        let stop = interrupted()?;
        // written under a temporary name first so readers never see half a file
        let tmp = topo_path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(fleet.topology()).expect("serializable"))?;
        fs::rename(&tmp, &topo_path)?;
        print_json(&json!({
            "serving": fleet.topology().nodes,
            "devices": fleet.topology().devices.len(),
        }));
        std::io::stdout().flush()?;
        match args.duration_ms {
            Some(ms) => tokio::select! {
                _ = stop => {}
                _ = tokio::time::sleep(Duration::from_millis(ms)) => {}
            },
            None => stop.await,
        }
        Ok::<_, CliError>(())
    })?;
    let released = fleet.shutdown();
    print_json(&json!({ "shutdown": true, "released": released, "active": fleet.table().active().len() }));
    Ok(())
}

/// Resolves on SIGINT or SIGTERM.
#[cfg(unix)]
fn interrupted() -> Result<impl std::future::Future<Output = ()>, CliError> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut int = signal(SignalKind::interrupt())?;
    let mut term = signal(SignalKind::terminate())?;
    Ok(async move {
        tokio::select! {
            _ = int.recv() => {}
            _ = term.recv() => {}
        }
    })
}

#[cfg(not(unix))]
fn interrupted() -> Result<impl std::future::Future<Output = ()>, CliError> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
    })
}

/// Relative gradient error allowed by `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-5;

pub fn gradcheck(cfg: &RunConfig, args: &GradArgs) -> Result<(), CliError> {
    let theta = match &args.checkpoint {
        Some(p) => match load_policy(p)? {
            Policy::Linear(w) => w,
            Policy::Oracle => return Err(CliError::Mismatch("the oracle checkpoint has no weights".into())),
        },
        None => policy::weights(&policy::init_params())?.to_vec(),
    };
    if args.batches == 0 {
        return Err(CliError::Config("--batches must be positive".into()));
    }
    let scenario = cfg.scenario()?;
    let tasks = nonempty(cfg.train.tasks.select(&scenario.tasks), "train")?;
    let provider = LocalEnvProvider::new(scenario);
    let g = &cfg.grpo;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut worst: f64 = 0.0;
    for b in 0..args.batches {
        let mut groups = Vec::new();
        for slot in 0..2u64 {
            let task = &tasks[rng.gen_range(0..tasks.len())];
            let rollouts = (0..g.g)
                .map(|m| rollout(&provider, task, &theta, Decode::Sample(rollout_seed(g.seed, b as u64, slot, m as u64))))
                .collect::<Result<Vec<_>, _>>()?;
            let t_min = rollouts.iter().filter(|r| r.trajectory.success).map(|r| r.trajectory.len()).min();
            let members = rollouts
                .into_iter()
                .map(|r| Member {
                    reward: online_trajectory_reward(&r.trajectory, t_min, &cfg.online_reward),
                    steps: r.steps,
                })
                .collect();
            groups.push(RolloutGroup::new(members, g.eps_num));
        }
        // move off theta_old so the clipped ratios and the KL term are exercised
        let current: Vec<f64> = theta.iter().map(|v| v + rng.gen_range(-0.15..0.15)).collect();
        let reference: Vec<f64> = theta.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let err = gradient_check(&groups, &current, &reference, g.lambda0, g, 1e-5)?;
        worst = worst.max(err);
    }
    let pass = worst < GRADCHECK_TOL;
    print_json(&json!({ "batches": args.batches, "max_rel_err": worst, "tolerance": GRADCHECK_TOL, "pass": pass }));
    if pass {
        Ok(())
    } else {
        Err(CliError::Internal(format!("gradient check failed: max relative error {worst:e}")))
    }
}

pub fn env_replay(cfg: &RunConfig, args: &ReplayArgs) -> Result<(), CliError> {
    let scenario = cfg.scenario()?;
    let task = scenario.task(&args.task)?.clone();
    let platform = scenario.app(&task.app_id)?.platform();
    let actions: Vec<Action> = match &args.actions {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                parse_action(l, platform).map_err(|e| CliError::Config(format!("action line {}: {e}", i + 1)))
            })
            .collect::<Result<_, _>>()?,
        None => task.oracle.clone(),
    };
    let mut env = EnvInstance::reset(&scenario, &task)?;
    print_json(&json!({ "step": 0, "observation": env.observe() }));
    for a in &actions {
        if env.is_terminal() {
            break;
        }
        let out = env.step(Some(a))?;
        print_json(&json!({ "step": out.observation.step, "action": a.to_string(), "observation": out.observation }));
    }
    let success = env.is_terminal() && env.verify(&JudgeRegistry::for_scenario(&scenario))?;
    print_json(&json!({ "task": task.id, "terminal": env.is_terminal(), "success": success }));
    Ok(())
}
