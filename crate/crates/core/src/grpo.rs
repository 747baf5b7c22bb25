//! Group Relative Policy Optimization for the analytic policy.
//!
//! Online training groups G full episodes of one task; offline training
//! groups G sampled actions for one supervised prompt. Both minimize
//!
//! `L = sum_groups L_clip + beta * KL(pi_theta || pi_ref) - lambda_t * H(pi_theta)`
//!
//! with KL and entropy averaged over the states visited in the wave. Group
//! surrogates are summed, so the step size grows with the batch.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::parse_response;
use crate::env::{EnvError, EnvProvider};
use crate::metrics::{MetricRecord, MetricSink};
use crate::params::{blend, ParamError, ParameterMap};
use crate::policy::{self, Features, StateFeatures, D};
use crate::reward::{
    online_trajectory_reward, step_reward, OfflineRewardConfig, OnlineRewardConfig,
    RewardConfigError,
};
use crate::rollout::{
    agent_turn, evaluate_traces, rollout, rollout_seed, step_accuracy, Decode, Prompt, StepRecord,
};
use crate::tasks::{stratified_sample, PoolError, Task, TaskPool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Group size.
    pub g: usize,
    pub eps_clip: f64,
    /// Advantage denominator stabilizer.
    pub eps_num: f64,
    pub beta: f64,
    /// Reference blend rate.
    pub alpha: f64,
    /// Validation margin required before the reference moves.
    pub delta: f64,
    pub lambda0: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Tasks (online) or prompts (offline) per iteration.
    pub batch_size: usize,
    /// Easy / medium / hard sampling shares.
    pub proportions: [f64; 3],
    /// Greedy evaluation every this many iterations, and at the last one.
    pub eval_every: usize,
    /// Held-out tasks used to decide reference updates.
    pub validation_size: usize,
    /// Subtract the KL term instead of adding it, as the objective is literally written.
    pub literal_objective: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            g: 8,
            eps_clip: 0.2,
            eps_num: 1e-4,
            beta: 0.05,
            alpha: 0.5,
            delta: 0.05,
            lambda0: 0.01,
            sigma: 0.98,
            learning_rate: 0.05,
            max_iterations: 200,
            seed: 7,
            batch_size: 32,
            proportions: [0.4, 0.4, 0.2],
            eval_every: 1,
            validation_size: 10,
            literal_objective: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("old probability must be positive, got {0}")]
    OldProb(f64),
    #[error(transparent)]
    Reward(#[from] RewardConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("metric sink: {0}")]
    Sink(#[from] std::io::Error),
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.g < 2 {
            return bad("group size must be at least 2");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("eps_clip must lie in (0, 1)");
        }
        if !(self.eps_num > 0.0) {
            return bad("eps_num must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad("sigma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.beta >= 0.0 && self.lambda0 >= 0.0 && self.learning_rate > 0.0) {
            return bad("beta and lambda0 must be non-negative and the learning rate positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        Ok(())
    }
}

/// `(R_i - mean) / (std + eps_num)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], eps_num: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards
        .iter()
        .map(|r| (r - mean) / (std + eps_num))
        .collect()
}

/// `lambda0 * sigma^k`.
pub fn entropy_coef(lambda0: f64, sigma: f64, k: usize) -> f64 {
    lambda0 * sigma.powf(k as f64)
}

/// One member of a group: its decisions and scalar reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub steps: Vec<StepRecord>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub members: Vec<Member>,
    /// One advantage per member, shared by all of its steps.
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(members: Vec<Member>, eps_num: f64) -> Self {
        let rewards: Vec<f64> = members.iter().map(|m| m.reward).collect();
        let advantages = compute_advantages(&rewards, eps_num);
        Self {
            members,
            advantages,
        }
    }

    pub fn states(&self) -> impl Iterator<Item = &StateFeatures> {
        self.members
            .iter()
            .flat_map(|m| m.steps.iter().map(|s| &s.features))
    }
}

fn axpy(acc: &mut Features, a: f64, x: &Features) {
    for (y, xi) in acc.iter_mut().zip(x) {
        *y += a * xi;
    }
}

/// Clipped surrogate loss of one group at `theta` and its gradient.
///
/// A step whose clipped branch is strictly smaller contributes no gradient.
pub fn grpo_loss_and_grad(
    group: &RolloutGroup,
    theta: &[f64],
    eps_clip: f64,
) -> Result<(f64, Features), GrpoError> {
    let g = group.members.len() as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; D];
    for (m, &adv) in group.members.iter().zip(&group.advantages) {
        if m.steps.is_empty() {
            continue;
        }
        let scale = 1.0 / (g * m.steps.len() as f64);
        for s in &m.steps {
            if !(s.old_prob > 0.0) {
                return Err(GrpoError::OldProb(s.old_prob));
            }
            let logp = s.features.log_probs(theta)[s.chosen];
            let r = (logp - s.old_prob.ln()).exp();
            let unclipped = r * adv;
            let clipped = r.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv;
            loss -= scale * unclipped.min(clipped);
            if unclipped <= clipped {
                axpy(
                    &mut grad,
                    -scale * adv * r,
                    &s.features.grad_log_prob(theta, s.chosen),
                );
            }
        }
    }
    Ok((loss, grad))
}

/// Mean closed-form `KL(pi_theta || pi_ref)` over states.
pub fn kl_penalty<'a>(
    theta: &[f64],
    reference: &[f64],
    states: impl IntoIterator<Item = &'a StateFeatures>,
) -> f64 {
    let (sum, n) = states.into_iter().fold((0.0, 0usize), |(s, n), f| {
        (s + f.kl(theta, reference), n + 1)
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Value and gradient of the full objective over a wave of groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub entropy: f64,
    pub grad: Features,
}

pub fn total_objective(
    groups: &[RolloutGroup],
    theta: &[f64],
    reference: &[f64],
    lambda_t: f64,
    cfg: &GrpoConfig,
) -> Result<Objective, GrpoError> {
    let mut grad = [0.0; D];
    let mut surrogate = 0.0;
    for g in groups {
        let (l, gr) = grpo_loss_and_grad(g, theta, cfg.eps_clip)?;
        surrogate += l;
        axpy(&mut grad, 1.0, &gr);
    }
    let states: Vec<&StateFeatures> = groups.iter().flat_map(RolloutGroup::states).collect();
    let (mut kl, mut entropy) = (0.0, 0.0);
    let kl_sign = if cfg.literal_objective { -1.0 } else { 1.0 };
    if !states.is_empty() {
        let w = 1.0 / states.len() as f64;
        for s in &states {
            kl += w * s.kl(theta, reference);
            entropy += w * s.entropy(theta);
            axpy(
                &mut grad,
                kl_sign * cfg.beta * w,
                &s.kl_grad(theta, reference),
            );
            axpy(&mut grad, -lambda_t * w, &s.entropy_grad(theta));
        }
    }
    let total = surrogate + kl_sign * cfg.beta * kl - lambda_t * entropy;
    Ok(Objective {
        total,
        surrogate,
        kl,
        entropy,
        grad,
    })
}

/// Largest deviation between the analytic gradient of [`total_objective`] and
/// central differences with step `h`, relative to the larger of the two
/// gradients in the max norm. Coordinates whose difference stencil moves a
/// ratio across a clip boundary are skipped, as the objective has no
/// derivative there.
pub fn gradient_check(
    groups: &[RolloutGroup],
    theta: &[f64],
    reference: &[f64],
    lambda_t: f64,
    cfg: &GrpoConfig,
    h: f64,
) -> Result<f64, GrpoError> {
    let obj = total_objective(groups, theta, reference, lambda_t, cfg)?;
    let here = clip_regions(groups, theta, cfg.eps_clip);
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for k in 0..D {
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[k] += h;
        dn[k] -= h;
        // the clipped surrogate has a kink where a ratio meets 1 ± eps
        if clip_regions(groups, &up, cfg.eps_clip) != here
            || clip_regions(groups, &dn, cfg.eps_clip) != here
        {
            continue;
        }
        let fu = total_objective(groups, &up, reference, lambda_t, cfg)?.total;
        let fd = total_objective(groups, &dn, reference, lambda_t, cfg)?.total;
        let num = (fu - fd) / (2.0 * h);
        diff = diff.max((num - obj.grad[k]).abs());
        norm = norm.max(num.abs()).max(obj.grad[k].abs());
    }
    Ok(if norm == 0.0 { 0.0 } else { diff / norm })
}

/// For every step, which side of the clip range its ratio falls on.
fn clip_regions(groups: &[RolloutGroup], theta: &[f64], eps_clip: f64) -> Vec<i8> {
    groups
        .iter()
        .flat_map(|g| &g.members)
        .flat_map(|m| &m.steps)
        .map(|s| {
            let r = (s.features.log_probs(theta)[s.chosen] - s.old_prob.ln()).exp();
            if r < 1.0 - eps_clip {
                -1
            } else if r > 1.0 + eps_clip {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Parameters, reference, and progress of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: ParameterMap,
    pub reference: ParameterMap,
    pub iteration: usize,
    pub validation: Vec<Task>,
    pub metrics: Vec<MetricRecord>,
}

impl TrainState {
    /// Start from `params` with the reference equal to it.
    pub fn new(params: ParameterMap, validation: Vec<Task>) -> Self {
        Self {
            reference: params.clone(),
            theta: params,
            iteration: 0,
            validation,
            metrics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefDecision {
    pub sr_theta: f64,
    pub sr_ref: f64,
    pub updated: bool,
}

/// Blend the reference toward theta if theta beats it on validation by more than `delta`.
pub fn maybe_update_ref(
    state: &mut TrainState,
    provider: &dyn EnvProvider,
    cfg: &GrpoConfig,
) -> Result<RefDecision, GrpoError> {
    if state.validation.is_empty() {
        return Err(GrpoError::Config("validation task list is empty".into()));
    }
    let sr_theta =
        evaluate_traces(provider, &state.validation, policy::weights(&state.theta)?)?.trace_sr;
    let sr_ref = evaluate_traces(
        provider,
        &state.validation,
        policy::weights(&state.reference)?,
    )?
    .trace_sr;
    Ok(apply_ref_rule(state, sr_theta, sr_ref, cfg)?)
}

/// The decision rule on already measured success rates.
pub fn apply_ref_rule(
    state: &mut TrainState,
    sr_theta: f64,
    sr_ref: f64,
    cfg: &GrpoConfig,
) -> Result<RefDecision, ParamError> {
    let updated = sr_theta - sr_ref > cfg.delta;
    if updated {
        state.reference = blend(&state.reference, &state.theta, cfg.alpha)?;
    }
    Ok(RefDecision {
        sr_theta,
        sr_ref,
        updated,
    })
}

/// What a run is evaluated on.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    /// Tasks for greedy trace success.
    pub tasks: Vec<Task>,
    /// Oracle prompts for greedy step accuracy.
    pub prompts: Vec<Prompt>,
}

fn gradient_step(theta: &mut ParameterMap, grad: &Features, lr: f64) -> Result<(), ParamError> {
    let w = theta.get_mut(policy::WEIGHTS)?;
    for (t, g) in w.data.iter_mut().zip(grad) {
        *t -= lr * g;
    }
    Ok(())
}

fn is_eval_point(cfg: &GrpoConfig, k: usize) -> bool {
    (k + 1) % cfg.eval_every == 0 || k + 1 == cfg.max_iterations
}

/// Inputs of an online run besides the state and config.
pub struct OnlineRun<'a> {
    pub provider: &'a dyn EnvProvider,
    pub pool: &'a TaskPool,
    pub rewards: OnlineRewardConfig,
    pub step_rewards: OfflineRewardConfig,
    pub eval: &'a EvalSet,
}

/// Roll out G episodes per sampled task, reward them, and take one step per wave.
pub fn train_online(
    state: &mut TrainState,
    cfg: &GrpoConfig,
    run: &OnlineRun<'_>,
    sink: &mut dyn MetricSink,
) -> Result<(), GrpoError> {
    cfg.validate()?;
    run.rewards.validate()?;
    let start = state.iteration;
    for k in start..cfg.max_iterations {
        let lambda_t = entropy_coef(cfg.lambda0, cfg.sigma, k);
        let tasks = stratified_sample(
            run.pool,
            cfg.proportions,
            cfg.batch_size,
            rollout_seed(cfg.seed, k as u64, u64::MAX, 0),
        )?;
        let theta = policy::weights(&state.theta)?.to_vec();
        let jobs: Vec<(usize, usize)> = (0..tasks.len())
            .flat_map(|t| (0..cfg.g).map(move |m| (t, m)))
            .collect();
        let results: Vec<_> = jobs
            .par_iter()
            .map(|&(t, m)| {
                let seed = rollout_seed(cfg.seed, k as u64, t as u64, m as u64);
                rollout(run.provider, &tasks[t], &theta, Decode::Sample(seed))
            })
            .collect();
        let mut groups = Vec::new();
        let mut failed_groups = 0;
        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        for chunk in results.chunks(cfg.g) {
            let Ok(rollouts) = chunk.iter().cloned().collect::<Result<Vec<_>, _>>() else {
                failed_groups += 1;
                continue;
            };
            let t_min = rollouts
                .iter()
                .filter(|r| r.trajectory.success)
                .map(|r| r.trajectory.len())
                .min();
            let members: Vec<Member> = rollouts
                .into_iter()
                .map(|r| Member {
                    reward: online_trajectory_reward(&r.trajectory, t_min, &run.rewards),
                    steps: r.steps,
                })
                .collect();
            reward_sum += members.iter().map(|m| m.reward).sum::<f64>();
            reward_n += members.len();
            groups.push(RolloutGroup::new(members, cfg.eps_num));
        }
        let reference = policy::weights(&state.reference)?.to_vec();
        let obj = total_objective(&groups, &theta, &reference, lambda_t, cfg)?;
        gradient_step(&mut state.theta, &obj.grad, cfg.learning_rate)?;
        state.iteration = k + 1;

        let (mut step_sr, mut trace_sr, mut ref_updated) = (None, None, false);
        if is_eval_point(cfg, k) {
            let new_theta = policy::weights(&state.theta)?;
            step_sr = Some(step_accuracy(
                &run.eval.prompts,
                new_theta,
                &run.step_rewards,
            ));
            if !run.eval.tasks.is_empty() {
                trace_sr =
                    Some(evaluate_traces(run.provider, &run.eval.tasks, new_theta)?.trace_sr);
            }
            if !state.validation.is_empty() {
                ref_updated = maybe_update_ref(state, run.provider, cfg)?.updated;
            }
        }
        let record = MetricRecord {
            phase: "online".into(),
            iteration: k,
            step_sr,
            trace_sr,
            loss: obj.total,
            kl: obj.kl,
            entropy: obj.entropy,
            lambda_t,
            ref_updated,
            mean_reward: if reward_n == 0 {
                0.0
            } else {
                reward_sum / reward_n as f64
            },
            failed_groups,
        };
        sink.emit(&record)?;
        state.metrics.push(record);
    }
    Ok(())
}

/// Inputs of an offline run besides the state and config.
pub struct OfflineRun<'a> {
    pub dataset: &'a [Prompt],
    pub rewards: OfflineRewardConfig,
    /// Provider for trace evaluation; step accuracy needs none.
    pub provider: Option<&'a dyn EnvProvider>,
    pub eval: &'a EvalSet,
}

/// Sample G actions per prompt, score them against the ground truth, and step.
pub fn train_offline(
    state: &mut TrainState,
    cfg: &GrpoConfig,
    run: &OfflineRun<'_>,
    sink: &mut dyn MetricSink,
) -> Result<(), GrpoError> {
    cfg.validate()?;
    run.rewards.validate()?;
    if run.dataset.is_empty() {
        return Err(GrpoError::Config("offline dataset is empty".into()));
    }
    let features: Vec<StateFeatures> = run.dataset.iter().map(Prompt::features).collect();
    let start = state.iteration;
    for k in start..cfg.max_iterations {
        let lambda_t = entropy_coef(cfg.lambda0, cfg.sigma, k);
        let theta = policy::weights(&state.theta)?.to_vec();
        let n = run.dataset.len();
        let mut batch_rng =
            ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, k as u64, u64::MAX, 1));
        let mut batch: Vec<usize> = sample(&mut batch_rng, n, cfg.batch_size.min(n)).into_vec();
        batch.sort_unstable();
        let mut reward_sum = 0.0;
        let groups: Vec<RolloutGroup> = batch
            .iter()
            .map(|&i| {
                let prompt = &run.dataset[i];
                let f = &features[i];
                let probs = f.probs(&theta);
                let mut rng =
                    ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, k as u64, i as u64, 0));
                let members = (0..cfg.g)
                    .map(|_| {
                        let chosen = f.sample(&theta, &mut rng);
                        let resp = parse_response(
                            &agent_turn(&prompt.observation, &prompt.candidates[chosen]),
                            prompt.sample.platform,
                        );
                        let reward = step_reward(&resp, &prompt.sample, &run.rewards).total;
                        Member {
                            steps: vec![StepRecord {
                                features: f.clone(),
                                chosen,
                                old_prob: probs[chosen],
                            }],
                            reward,
                        }
                    })
                    .collect::<Vec<_>>();
                reward_sum += members.iter().map(|m| m.reward).sum::<f64>();
                RolloutGroup::new(members, cfg.eps_num)
            })
            .collect();
        let reference = policy::weights(&state.reference)?.to_vec();
        let obj = total_objective(&groups, &theta, &reference, lambda_t, cfg)?;
        gradient_step(&mut state.theta, &obj.grad, cfg.learning_rate)?;
        state.iteration = k + 1;

        let (mut step_sr, mut trace_sr) = (None, None);
        if is_eval_point(cfg, k) {
            let new_theta = policy::weights(&state.theta)?;
            step_sr = Some(step_accuracy(&run.eval.prompts, new_theta, &run.rewards));
            if let (Some(p), false) = (run.provider, run.eval.tasks.is_empty()) {
                trace_sr = Some(evaluate_traces(p, &run.eval.tasks, new_theta)?.trace_sr);
            }
        }
        let record = MetricRecord {
            phase: "offline".into(),
            iteration: k,
            step_sr,
            trace_sr,
            loss: obj.total,
            kl: obj.kl,
            entropy: obj.entropy,
            lambda_t,
            ref_updated: false,
            mean_reward: reward_sum / (batch.len() * cfg.g) as f64,
            failed_groups: 0,
        };
        sink.emit(&record)?;
        state.metrics.push(record);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{BIAS, N_KINDS};
    use rand::Rng;

    fn onehot(i: usize) -> Features {
        let mut f = [0.0; D];
        f[i] = 1.0;
        f[BIAS] = 1.0;
        f
    }

    fn random_group(rng: &mut ChaCha8Rng, theta_old: &[f64], g: usize) -> RolloutGroup {
        let members = (0..g)
            .map(|_| {
                let len = rng.gen_range(1..5);
                let steps = (0..len)
                    .map(|_| {
                        let n = rng.gen_range(1..6);
                        let rows = (0..n)
                            .map(|_| {
                                let mut f = onehot(rng.gen_range(0..N_KINDS));
                                for v in f[N_KINDS..BIAS].iter_mut() {
                                    *v = rng.gen_range(0.0..1.0);
                                }
                                f
                            })
                            .collect();
                        let features = StateFeatures { rows };
                        let chosen = rng.gen_range(0..n);
                        let old_prob = features.probs(theta_old)[chosen];
                        StepRecord {
                            features,
                            chosen,
                            old_prob,
                        }
                    })
                    .collect();
                Member {
                    steps,
                    reward: f64::from(rng.gen_range(0..3u8)) * 0.5,
                }
            })
            .collect();
        RolloutGroup::new(members, 1e-4)
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[0.3; 4], 1e-4), vec![0.0; 4]);
        let a = compute_advantages(&[1.0, 0.0], 1e-4);
        assert!((a[0] - 0.5 / 0.5001).abs() < 1e-15);
        assert!((a[1] + 0.5 / 0.5001).abs() < 1e-15);
    }

    #[test]
    fn entropy_schedule() {
        assert_eq!(entropy_coef(0.01, 0.98, 0), 0.01);
        assert_eq!(entropy_coef(1.0, 0.5, 3), 0.125);
        for k in 0..50 {
            assert!(entropy_coef(0.01, 0.98, k + 1) < entropy_coef(0.01, 0.98, k));
        }
    }

    #[test]
    fn clip_uses_upper_bound_for_positive_advantage() {
        // two equal candidates, old prob 0.5; raising the chosen logit by ln(1.3/0.7) gives r = 1.3
        let features = StateFeatures {
            rows: vec![onehot(0), onehot(1)],
        };
        let group = RolloutGroup {
            members: vec![Member {
                steps: vec![StepRecord {
                    features,
                    chosen: 0,
                    old_prob: 0.5,
                }],
                reward: 1.0,
            }],
            advantages: vec![1.0],
        };
        let mut theta = [0.0; D];
        theta[0] = (1.3f64 / 0.7).ln();
        let (loss, grad) = grpo_loss_and_grad(&group, &theta, 0.2).unwrap();
        assert!((loss + 1.2).abs() < 1e-12);
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_nonpositive_old_probability() {
        let features = StateFeatures {
            rows: vec![onehot(0)],
        };
        let group = RolloutGroup {
            members: vec![Member {
                steps: vec![StepRecord {
                    features,
                    chosen: 0,
                    old_prob: 0.0,
                }],
                reward: 0.0,
            }],
            advantages: vec![0.0],
        };
        assert!(matches!(
            grpo_loss_and_grad(&group, &[0.0; D], 0.2),
            Err(GrpoError::OldProb(_))
        ));
    }

    #[test]
    fn loss_at_old_params_is_minus_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let theta: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let group = random_group(&mut rng, &theta, 8);
            let (loss, grad) = grpo_loss_and_grad(&group, &theta, 0.2).unwrap();
            assert!(loss.abs() < 1e-9, "{loss}");
            // at r = 1 the gradient is the plain policy-gradient estimator
            let mut pg = [0.0; D];
            for (m, a) in group.members.iter().zip(&group.advantages) {
                for s in &m.steps {
                    axpy(
                        &mut pg,
                        -a / (8.0 * m.steps.len() as f64),
                        &s.features.grad_log_prob(&theta, s.chosen),
                    );
                }
            }
            for (x, y) in grad.iter().zip(pg) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_rewards_give_no_surrogate_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = [0.0; D];
        let mut group = random_group(&mut rng, &theta, 4);
        for m in &mut group.members {
            m.reward = 1.0;
        }
        let group = RolloutGroup::new(group.members, 1e-4);
        let (loss, grad) = grpo_loss_and_grad(&group, &theta, 0.2).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for literal in [false, true] {
            let cfg = GrpoConfig {
                literal_objective: literal,
                ..GrpoConfig::default()
            };
            for _ in 0..60 {
                let old: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let groups: Vec<_> = (0..3).map(|_| random_group(&mut rng, &old, 4)).collect();
                let theta: Vec<f64> = old.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
                let reference: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let err = gradient_check(&groups, &theta, &reference, 0.3, &cfg, h).unwrap();
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn kl_is_zero_at_reference_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let group = random_group(&mut rng, &theta, 4);
        assert_eq!(kl_penalty(&theta, &theta, group.states()), 0.0);
        let other: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(kl_penalty(&theta, &other, group.states()) >= 0.0);
    }

    #[test]
    fn reference_rule_is_strict() {
        let cfg = GrpoConfig {
            alpha: 1.0,
            ..GrpoConfig::default()
        };
        let theta = policy::params_from(&[1.0; D]);
        let mut st = TrainState::new(policy::init_params(), vec![]);
        st.theta = theta.clone();
        assert!(!apply_ref_rule(&mut st, 0.5, 0.5, &cfg).unwrap().updated);
        let exact = GrpoConfig {
            delta: 0.25,
            ..cfg.clone()
        };
        assert!(!apply_ref_rule(&mut st, 0.75, 0.5, &exact).unwrap().updated);
        assert_eq!(st.reference, policy::init_params());
        assert!(apply_ref_rule(&mut st, 0.9, 0.5, &cfg).unwrap().updated);
        assert_eq!(st.reference, theta);
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig {
                g: 1,
                ..GrpoConfig::default()
            },
            GrpoConfig {
                eps_clip: 1.0,
                ..GrpoConfig::default()
            },
            GrpoConfig {
                sigma: 1.0,
                ..GrpoConfig::default()
            },
            GrpoConfig {
                alpha: 1.5,
                ..GrpoConfig::default()
            },
            GrpoConfig {
                eps_num: 0.0,
                ..GrpoConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn offline_dominant_action_gains_probability() {
        use crate::action::{Action, Platform, Point};
        use crate::env::{Observation, Scenario};
        let s = Scenario::builtin();
        let task = s.task("set-wifi").unwrap();
        let env = crate::env::EnvInstance::reset(&s, task).unwrap();
        let obs: Observation = env.observe();
        let good = task.oracle[0].clone();
        let candidates = vec![good.clone(), Action::Click(Point::new(1, 1))];
        assert_eq!(obs.platform, Platform::Mobile);
        let prompt = Prompt {
            task_id: task.id.clone(),
            sample: crate::rollout::step_sample(&obs, &good),
            observation: obs,
            candidates,
        };
        let dataset = vec![prompt];
        let eval = EvalSet {
            tasks: vec![],
            prompts: dataset.clone(),
        };
        let cfg = GrpoConfig {
            max_iterations: 1,
            batch_size: 1,
            ..GrpoConfig::default()
        };
        let mut st = TrainState::new(policy::init_params(), vec![]);
        let run = OfflineRun {
            dataset: &dataset,
            rewards: OfflineRewardConfig::default(),
            provider: None,
            eval: &eval,
        };
        let mut last = dataset[0]
            .features()
            .probs(policy::weights(&st.theta).unwrap())[0];
        for it in 1..=20 {
            let cfg = GrpoConfig {
                max_iterations: it,
                ..cfg.clone()
            };
            train_offline(&mut st, &cfg, &run, &mut crate::metrics::NullSink).unwrap();
            let p = dataset[0]
                .features()
                .probs(policy::weights(&st.theta).unwrap())[0];
            assert!(p >= last, "iteration {it}: {p} < {last}");
            last = p;
        }
        assert!(last > 0.5);
    }
}
