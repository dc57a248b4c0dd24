//! Proximal policy optimization for the harvesting problem.
//!
//! Rollouts use the stochastic Gaussian policy over raw actions, squashed into
//! the admissible set before they reach the environment. The unmet terminal
//! constraints are folded into the final reward of each trajectory according
//! to the configured [`RewardScheme`].

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, HarvestEnv, State};
use crate::eval::run_deterministic;
use crate::nn::{clip_grad_norm, gaussian_entropy, gaussian_log_prob, gaussian_log_prob_grads, Adam, GaussianHead, Mlp, NnError, Tape};
use crate::policy::{critic_input, PolicyParameters, DEFAULT_LOG_STD};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("invalid scenario:\n{0}")]
    InvalidScenario(crate::scenario::ValidationReport),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss during update: {0}")]
    NonFiniteLoss(UpdateStats),
}

/// How unmet terminal constraints enter the return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardScheme {
    /// Subtract `λᵀf(x_N, g)` at the final step.
    #[default]
    Lagrangian,
    /// Subtract a fixed constant from any unsuccessful trajectory.
    LargeTerminal,
    /// Only the per-step `-1`.
    None,
}

impl RewardScheme {
    pub const ALL: [RewardScheme; 3] = [RewardScheme::Lagrangian, RewardScheme::LargeTerminal, RewardScheme::None];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardScheme::Lagrangian => "lagrangian",
            RewardScheme::LargeTerminal => "large-terminal",
            RewardScheme::None => "none",
        }
    }
}

impl fmt::Display for RewardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lagrangian" => Ok(RewardScheme::Lagrangian),
            "large-terminal" | "large" => Ok(RewardScheme::LargeTerminal),
            "none" => Ok(RewardScheme::None),
            other => Err(format!("unknown reward scheme `{other}` (expected lagrangian, large-terminal, or none)")),
        }
    }
}

/// Where the terminal penalty lands relative to the discounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyFold {
    /// Added as-is to the last step's reward.
    #[default]
    Undiscounted,
    /// Divided by `γ^(N-1)` so that it carries weight one in the return
    /// seen from the initial state.
    DiscountCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Environment steps gathered per learning step (whole episodes).
    pub batch_steps: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Number of collect/update cycles.
    pub learning_steps: usize,
    pub scheme: RewardScheme,
    pub penalty_fold: PenaltyFold,
    /// Constant charged by [`RewardScheme::LargeTerminal`].
    pub large_penalty: f64,
    pub multipliers: [f64; 2],
    pub hidden: Vec<usize>,
    pub initial_log_std: f64,
    pub max_grad_norm: f64,
    pub substeps: usize,
    /// Multiplies every reward before advantage estimation; the critic
    /// works in scaled units.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 10,
            minibatch_size: 64,
            batch_steps: 2048,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            learning_steps: 300,
            scheme: RewardScheme::Lagrangian,
            penalty_fold: PenaltyFold::Undiscounted,
            large_penalty: 200.0,
            multipliers: crate::env::DEFAULT_MULTIPLIERS,
            hidden: crate::policy::DEFAULT_HIDDEN.to_vec(),
            initial_log_std: DEFAULT_LOG_STD,
            max_grad_norm: 0.5,
            substeps: crate::env::DEFAULT_SUBSTEPS,
            reward_scale: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.batch_steps == 0 {
            return bad("epochs, minibatch_size, and batch_steps must be positive");
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return bad("hidden widths must be positive");
        }
        if self.multipliers.iter().any(|&l| !(l >= 0.0)) {
            return bad("multipliers must be non-negative");
        }
        if self.substeps == 0 {
            return bad("substeps must be positive");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward_scale must be positive");
        }
        Ok(())
    }

    pub fn make_env(&self, scenario: ScenarioConfig) -> HarvestEnv {
        HarvestEnv::new(scenario)
            .with_multipliers(self.multipliers)
            .with_substeps(self.substeps)
    }
}

/// One recorded transition of a training rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Normalized observation the action was drawn from.
    pub observation: Vec<f64>,
    /// Fraction of the step budget spent before this step.
    pub elapsed: f64,
    pub raw_action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// `λᵀf(x_N, g)` at the last state (zero on success).
    pub terminal_penalty: f64,
    pub success: bool,
    pub final_state: State,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Steps to completion, charging the full budget on failure.
    pub fn completion_steps(&self, n_max: usize) -> usize {
        if self.success {
            self.len()
        } else {
            n_max
        }
    }

    /// Undiscounted sum of the shaped rewards.
    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Extra reward added to the last step of a finished episode.
pub fn terminal_reward(cfg: &PpoConfig, penalty: f64, success: bool, steps: usize) -> f64 {
    match cfg.scheme {
        RewardScheme::Lagrangian => {
            let scale = match cfg.penalty_fold {
                PenaltyFold::Undiscounted => 1.0,
                PenaltyFold::DiscountCorrected => cfg.gamma.powi(-(steps.saturating_sub(1) as i32)),
            };
            -penalty * scale
        }
        RewardScheme::LargeTerminal if !success => -cfg.large_penalty,
        RewardScheme::LargeTerminal | RewardScheme::None => 0.0,
    }
}

/// SplitMix64-style mixing for per-episode seeds, so rollouts do not depend
/// on how episodes are scheduled.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs one episode of the stochastic policy to goal or budget exhaustion.
pub fn run_episode(env: &HarvestEnv, params: &PolicyParameters, cfg: &PpoConfig, seed: u64) -> Result<Trajectory, PpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.initial_state();
    let mut transitions = Vec::with_capacity(env.n_max());
    let mut tape = Tape::default();
    loop {
        let observation = params.observer.observe(&state);
        let mean = params.actor.forward_tape(&observation, &mut tape)?.to_vec();
        let elapsed = state.step_index as f64 / env.n_max() as f64;
        let value = params.critic.forward_tape(&critic_input(&observation, elapsed), &mut tape)?[0];
        let sample = params.head.sample_and_logprob(&mean, &mut rng);
        let action = params.squash(&sample.action);
        let out = env.step(&state, &action)?;
        transitions.push(Transition {
            observation,
            elapsed,
            raw_action: sample.action,
            log_prob: sample.log_prob,
            reward: out.reward,
            value,
        });
        state = out.next_state;
        if out.terminal {
            let steps = transitions.len();
            if let Some(last) = transitions.last_mut() {
                last.reward += terminal_reward(cfg, out.terminal_penalty, out.success, steps);
            }
            return Ok(Trajectory {
                transitions,
                terminal_penalty: out.terminal_penalty,
                success: out.success,
                final_state: state,
            });
        }
    }
}

/// Collects `count` independent episodes; episode `k` is seeded from
/// `(seed, k)` alone.
pub fn collect_rollouts(
    env: &HarvestEnv,
    params: &PolicyParameters,
    cfg: &PpoConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, PpoError> {
    (0..count)
        .map(|k| run_episode(env, params, cfg, derive_seed(seed, 0, k as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Generalized advantage estimates for one finished trajectory; the value
/// after the last step is taken as zero.
pub fn gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Advantages {
    let rewards: Vec<f64> = traj.transitions.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = traj.transitions.iter().map(|t| t.value).collect();
    gae_from_slices(&rewards, &values, gamma, lambda)
}

pub fn gae_from_slices(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Advantages {
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        advantages[t] = running;
    }
    let value_targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Advantages {
        advantages,
        value_targets,
    }
}

/// Flattened training samples of a batch of trajectories.
#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    pub observations: Vec<Vec<f64>>,
    pub critic_inputs: Vec<Vec<f64>>,
    pub raw_actions: Vec<Vec<f64>>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl SampleBatch {
    pub fn from_trajectories(batch: &[Trajectory], cfg: &PpoConfig, normalize: bool) -> Self {
        let mut out = SampleBatch::default();
        for traj in batch {
            let rewards: Vec<f64> = traj.transitions.iter().map(|t| t.reward * cfg.reward_scale).collect();
            let values: Vec<f64> = traj.transitions.iter().map(|t| t.value).collect();
            let adv = gae_from_slices(&rewards, &values, cfg.gamma, cfg.gae_lambda);
            for (t, (a, target)) in traj.transitions.iter().zip(adv.advantages.into_iter().zip(adv.value_targets)) {
                out.observations.push(t.observation.clone());
                out.critic_inputs.push(critic_input(&t.observation, t.elapsed));
                out.raw_actions.push(t.raw_action.clone());
                out.old_log_probs.push(t.log_prob);
                out.advantages.push(a);
                out.value_targets.push(target);
            }
        }
        if normalize && out.advantages.len() > 1 {
            let n = out.advantages.len() as f64;
            let mean = out.advantages.iter().sum::<f64>() / n;
            let var = out.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let std = var.sqrt() + 1e-8;
            for a in &mut out.advantages {
                *a = (*a - mean) / std;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

/// Diagnostics averaged over every minibatch of an update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub regularizer: f64,
    pub total_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl fmt::Display for UpdateStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "policy {:.4} value {:.4} entropy {:.4} reg {:.4} total {:.4} kl {:.5} clip {:.3}",
            self.policy_loss, self.value_loss, self.entropy, self.regularizer, self.total_loss, self.approx_kl, self.clip_fraction
        )
    }
}

/// Auxiliary actor loss added during PPO updates.
pub trait ActorRegularizer {
    /// Adds `weight · ∂R/∂θ` for the minibatch into the actor and log-std
    /// gradients and returns the unweighted regularizer value `R`.
    fn accumulate(
        &self,
        actor: &Mlp,
        head: &GaussianHead,
        observations: &[&[f64]],
        actor_grads: &mut [f64],
        log_std_grads: &mut [f64],
    ) -> f64;

    fn weight(&self) -> f64;
}

/// Optimizer state for every trainable piece of [`PolicyParameters`].
#[derive(Debug, Clone)]
pub struct PpoOptimizers {
    pub actor: Adam,
    pub log_std: Adam,
    pub critic: Adam,
}

impl PpoOptimizers {
    pub fn new(params: &PolicyParameters, cfg: &PpoConfig) -> Self {
        PpoOptimizers {
            actor: Adam::new(params.actor.num_params(), cfg.actor_lr),
            log_std: Adam::new(params.head.dim(), cfg.actor_lr),
            critic: Adam::new(params.critic.num_params(), cfg.critic_lr),
        }
    }
}

struct Scratch {
    tape: Tape,
    actor_grads: Vec<f64>,
    log_std_grads: Vec<f64>,
    critic_grads: Vec<f64>,
}

/// Clipped-surrogate, value, and entropy terms of the PPO loss over the
/// given sample indices, accumulating gradients into `scratch`.
fn minibatch_loss(
    params: &PolicyParameters,
    batch: &SampleBatch,
    indices: &[usize],
    cfg: &PpoConfig,
    scratch: &mut Scratch,
    with_grads: bool,
) -> Result<UpdateStats, NnError> {
    let inv_n = 1.0 / indices.len() as f64;
    let log_std = &params.head.log_std;
    let entropy = gaussian_entropy(log_std);
    let mut stats = UpdateStats {
        entropy,
        ..Default::default()
    };
    let mut grad_mean = vec![0.0; params.actor.output_dim()];
    for &i in indices {
        let obs = &batch.observations[i];
        let action = &batch.raw_actions[i];
        let adv = batch.advantages[i];
        let mean = params.actor.forward_tape(obs, &mut scratch.tape)?.to_vec();
        let log_prob = gaussian_log_prob(&mean, log_std, action);
        let log_ratio = log_prob - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        let surrogate = (ratio * adv).min(clipped * adv);
        stats.policy_loss -= surrogate * inv_n;
        stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv_n;
        let is_clipped = (adv >= 0.0 && ratio > 1.0 + cfg.clip_ratio) || (adv < 0.0 && ratio < 1.0 - cfg.clip_ratio);
        if (ratio - 1.0).abs() > cfg.clip_ratio {
            stats.clip_fraction += inv_n;
        }
        if with_grads && !is_clipped {
            // ∂(−ratio·A)/∂logπ = −ratio·A
            let coeff = -ratio * adv * inv_n;
            let (dm, dls) = gaussian_log_prob_grads(&mean, log_std, action);
            for (g, d) in grad_mean.iter_mut().zip(&dm) {
                *g = coeff * d;
            }
            params.actor.backward(&mut scratch.tape, &grad_mean, &mut scratch.actor_grads, None);
            for (g, d) in scratch.log_std_grads.iter_mut().zip(&dls) {
                *g += coeff * d;
            }
        }

        let value = params.critic.forward_tape(&batch.critic_inputs[i], &mut scratch.tape)?[0];
        let err = value - batch.value_targets[i];
        stats.value_loss += err * err * inv_n;
        if with_grads {
            let g = [2.0 * cfg.value_coef * err * inv_n];
            params.critic.backward(&mut scratch.tape, &g, &mut scratch.critic_grads, None);
        }
    }
    if with_grads {
        for g in scratch.log_std_grads.iter_mut() {
            *g -= cfg.entropy_coef;
        }
    }
    stats.total_loss = stats.policy_loss + cfg.value_coef * stats.value_loss - cfg.entropy_coef * entropy;
    Ok(stats)
}

/// Combined loss of the current parameters on the whole batch, without
/// touching any gradient state.
pub fn batch_loss(params: &PolicyParameters, batch: &SampleBatch, cfg: &PpoConfig) -> Result<UpdateStats, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    let mut scratch = Scratch {
        tape: Tape::default(),
        actor_grads: Vec::new(),
        log_std_grads: Vec::new(),
        critic_grads: Vec::new(),
    };
    Ok(minibatch_loss(params, batch, &indices, cfg, &mut scratch, false)?)
}

/// Runs `cfg.epochs` passes of shuffled minibatch updates over `batch`.
pub fn ppo_update(
    batch: &SampleBatch,
    params: &mut PolicyParameters,
    opt: &mut PpoOptimizers,
    cfg: &PpoConfig,
    regularizer: Option<&dyn ActorRegularizer>,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let mut scratch = Scratch {
        tape: Tape::default(),
        actor_grads: vec![0.0; params.actor.num_params()],
        log_std_grads: vec![0.0; params.head.dim()],
        critic_grads: vec![0.0; params.critic.num_params()],
    };
    let mut indices: Vec<usize> = (0..batch.len()).collect();
    let mut totals = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.minibatch_size) {
            scratch.actor_grads.iter_mut().for_each(|g| *g = 0.0);
            scratch.log_std_grads.iter_mut().for_each(|g| *g = 0.0);
            scratch.critic_grads.iter_mut().for_each(|g| *g = 0.0);
            let mut stats = minibatch_loss(params, batch, chunk, cfg, &mut scratch, true)?;
            if let Some(reg) = regularizer {
                let obs: Vec<&[f64]> = chunk.iter().map(|&i| batch.observations[i].as_slice()).collect();
                stats.regularizer = reg.accumulate(
                    &params.actor,
                    &params.head,
                    &obs,
                    &mut scratch.actor_grads,
                    &mut scratch.log_std_grads,
                );
                stats.total_loss += reg.weight() * stats.regularizer;
            }
            let grads_finite = scratch
                .actor_grads
                .iter()
                .chain(&scratch.log_std_grads)
                .chain(&scratch.critic_grads)
                .all(|g| g.is_finite());
            if !stats.total_loss.is_finite() || !grads_finite {
                return Err(PpoError::NonFiniteLoss(stats));
            }
            clip_grad_norm(&mut [&mut scratch.actor_grads, &mut scratch.log_std_grads], cfg.max_grad_norm);
            clip_grad_norm(&mut [&mut scratch.critic_grads], cfg.max_grad_norm);
            opt.actor.step(params.actor.params_mut(), &scratch.actor_grads)?;
            opt.log_std.step(&mut params.head.log_std, &scratch.log_std_grads)?;
            opt.critic.step(params.critic.params_mut(), &scratch.critic_grads)?;
            totals.policy_loss += stats.policy_loss;
            totals.value_loss += stats.value_loss;
            totals.entropy += stats.entropy;
            totals.regularizer += stats.regularizer;
            totals.total_loss += stats.total_loss;
            totals.approx_kl += stats.approx_kl;
            totals.clip_fraction += stats.clip_fraction;
            count += 1.0;
        }
    }
    let avg = UpdateStats {
        policy_loss: totals.policy_loss / count,
        value_loss: totals.value_loss / count,
        entropy: totals.entropy / count,
        regularizer: totals.regularizer / count,
        total_loss: totals.total_loss / count,
        approx_kl: totals.approx_kl / count,
        clip_fraction: totals.clip_fraction / count,
    };
    if avg.approx_kl > 0.1 {
        log::warn!("approximate KL {:.4} exceeds 0.1 in one update", avg.approx_kl);
    }
    Ok(avg)
}

/// Mean and sample standard deviation of completion steps for one learning
/// step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub learning_step: usize,
    pub mean_steps: f64,
    pub std_steps: f64,
}

pub fn write_curve_csv<W: std::io::Write>(curve: &[CurvePoint], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["learning_step", "mean_steps", "std_steps"])?;
    for p in curve {
        w.write_record([p.learning_step.to_string(), p.mean_steps.to_string(), p.std_steps.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Stateful collect/update loop shared by plain and smoothed training.
pub struct Trainer {
    pub env: HarvestEnv,
    pub cfg: PpoConfig,
    pub params: PolicyParameters,
    pub opt: PpoOptimizers,
    pub curve: Vec<CurvePoint>,
    pub stats: Vec<UpdateStats>,
    seed: u64,
    iteration: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(scenario: &ScenarioConfig, cfg: &PpoConfig, seed: u64) -> Result<Self, PpoError> {
        cfg.validate()?;
        let report = scenario.validate();
        if !report.is_valid() {
            return Err(PpoError::InvalidScenario(report));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
        let mut params = PolicyParameters::new(scenario, &cfg.hidden, &mut init_rng);
        params.head = GaussianHead::new(params.head.dim(), cfg.initial_log_std);
        let opt = PpoOptimizers::new(&params, cfg);
        Ok(Trainer {
            env: cfg.make_env(scenario.clone()),
            cfg: cfg.clone(),
            params,
            opt,
            curve: Vec::new(),
            stats: Vec::new(),
            seed,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0)),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Gathers whole episodes until at least `batch_steps` transitions exist.
    pub fn collect(&mut self) -> Result<Vec<Trajectory>, PpoError> {
        let mut batch = Vec::new();
        let mut steps = 0;
        let mut k = 0u64;
        while steps < self.cfg.batch_steps {
            let seed = derive_seed(self.seed, 3 + self.iteration as u64, k);
            let traj = run_episode(&self.env, &self.params, &self.cfg, seed)?;
            steps += traj.len();
            batch.push(traj);
            k += 1;
        }
        Ok(batch)
    }

    /// Records the batch on the learning curve and applies one PPO update.
    pub fn update(&mut self, batch: &[Trajectory], regularizer: Option<&dyn ActorRegularizer>) -> Result<UpdateStats, PpoError> {
        let n_max = self.env.n_max();
        let steps: Vec<f64> = batch.iter().map(|t| t.completion_steps(n_max) as f64).collect();
        let (mean_steps, std_steps) = mean_std(&steps);
        self.curve.push(CurvePoint {
            learning_step: self.iteration,
            mean_steps,
            std_steps,
        });
        let samples = SampleBatch::from_trajectories(batch, &self.cfg, true);
        let stats = ppo_update(&samples, &mut self.params, &mut self.opt, &self.cfg, regularizer, &mut self.rng)?;
        log::debug!(
            "step {} mean steps {:.2} success {:.2} {}",
            self.iteration,
            mean_steps,
            batch.iter().filter(|t| t.success).count() as f64 / batch.len() as f64,
            stats
        );
        self.stats.push(stats);
        self.iteration += 1;
        Ok(stats)
    }

    pub fn finish(self) -> TrainOutcome {
        let result = run_deterministic(&self.env, &self.params);
        TrainOutcome {
            final_steps: result.completion_steps(self.env.n_max()),
            final_time: result.estimate.time,
            success: result.estimate.goal_met,
            params: self.params,
            curve: self.curve,
            stats: self.stats,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParameters,
    pub curve: Vec<CurvePoint>,
    pub stats: Vec<UpdateStats>,
    /// Deterministic-policy steps to completion (`N_max` on failure).
    pub final_steps: usize,
    /// Deterministic-policy expected completion time.
    pub final_time: f64,
    pub success: bool,
}

/// Trains a policy from scratch; fully determined by `seed`.
pub fn train(scenario: &ScenarioConfig, cfg: &PpoConfig, seed: u64) -> Result<TrainOutcome, PpoError> {
    let mut trainer = Trainer::new(scenario, cfg, seed)?;
    for _ in 0..cfg.learning_steps {
        let batch = trainer.collect()?;
        trainer.update(&batch, None)?;
    }
    Ok(trainer.finish())
}
