//! Adversarial policy smoothing.
//!
//! An adversary network proposes bounded perturbations of the normalized
//! observation that move the actor's action distribution as far as possible;
//! the actor is then trained with an extra penalty on that divergence.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::nn::{Adam, Checkpoint, GaussianHead, Mlp, NnError, Tape};
use crate::policy::PolicyParameters;
use crate::env::HarvestEnv;
use crate::ppo::{collect_rollouts, derive_seed, ActorRegularizer, PpoConfig, PpoError, TrainOutcome, Trainer};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("invalid smoothing config: {0}")]
    InvalidConfig(String),
    #[error("empty observation batch")]
    EmptyBatch,
    #[error("non-finite adversary loss")]
    NonFinite,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
}

/// Divergence between the action distributions at `x` and `x̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    /// `‖μ(x) − μ(x̂)‖²`
    #[default]
    MeanSquared,
    /// `KL(π(·|x) ‖ π(·|x̂))` for the diagonal Gaussian policy.
    GaussianKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothConfig {
    pub epsilon: f64,
    pub weight: f64,
    pub adversary_steps: usize,
    pub adversary_lr: f64,
    /// Observations sampled per adversary step (the whole batch if larger).
    pub adversary_batch: usize,
    pub divergence: Divergence,
    pub adversary_hidden: Vec<usize>,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            epsilon: 0.05,
            weight: 0.5,
            adversary_steps: 5,
            adversary_lr: 1e-3,
            adversary_batch: 256,
            divergence: Divergence::MeanSquared,
            adversary_hidden: crate::policy::DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<(), SmoothError> {
        let bad = |m: &str| Err(SmoothError::InvalidConfig(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.weight >= 0.0) {
            return bad("weight must be non-negative");
        }
        if self.adversary_steps == 0 || self.adversary_batch == 0 {
            return bad("adversary_steps and adversary_batch must be positive");
        }
        Ok(())
    }
}

/// `μ_φ`: maps a normalized observation to a raw perturbation of the same
/// width; [`perturb`](Self::perturb) squashes it into the ℓ∞ ball.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryNet {
    pub net: Mlp,
    pub epsilon: f64,
}

impl AdversaryNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], epsilon: f64, rng: &mut R) -> Self {
        let mut widths = vec![obs_dim];
        widths.extend_from_slice(hidden);
        widths.push(obs_dim);
        // Non-zero output at init: the divergence gradient vanishes at x̂ = x.
        AdversaryNet {
            net: Mlp::new(&widths, 1.0, rng),
            epsilon,
        }
    }

    pub fn zeros(obs_dim: usize, hidden: &[usize], epsilon: f64) -> Self {
        let mut widths = vec![obs_dim];
        widths.extend_from_slice(hidden);
        widths.push(obs_dim);
        AdversaryNet {
            net: Mlp::zeros(&widths),
            epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn perturb(&self, x: &[f64]) -> Vec<f64> {
        perturb(self, x, self.epsilon)
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        self.net.write_to("adversary", ckpt);
        ckpt.insert("adversary.epsilon", vec![1], vec![self.epsilon]);
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self, NnError> {
        let net = Mlp::read_from("adversary", ckpt)?;
        let epsilon = ckpt.vector("adversary.epsilon")?;
        match epsilon.as_slice() {
            [e] => Ok(AdversaryNet { net, epsilon: *e }),
            _ => Err(NnError::Checkpoint("adversary.epsilon must hold one value".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut ckpt = Checkpoint::new();
        self.write_to(&mut ckpt);
        ckpt.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::read_from(&Checkpoint::load(path)?)
    }
}

/// `x̂ = x + ε·tanh(μ_φ(x))`.
pub fn perturb(adversary: &AdversaryNet, x: &[f64], epsilon: f64) -> Vec<f64> {
    let raw = adversary.net.forward(x).expect("observation width matches adversary");
    x.iter().zip(raw).map(|(&xi, r)| shift_within(xi, epsilon * r.tanh(), epsilon)).collect()
}

/// `x + delta`, nudged back by an ulp where rounding would leave the ball.
fn shift_within(x: f64, delta: f64, epsilon: f64) -> f64 {
    let mut y = x + delta;
    while (y - x).abs() > epsilon {
        y = if y > x { y.next_down() } else { y.next_up() };
    }
    y
}

/// Divergence between the policy at two means (shared state-independent
/// log-std), with its gradient with respect to the second mean and to the
/// log-std.
fn divergence_and_grads(kind: Divergence, head: &GaussianHead, mean: &[f64], mean_hat: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    match kind {
        Divergence::MeanSquared => {
            let d: Vec<f64> = mean_hat.iter().zip(mean).map(|(a, b)| a - b).collect();
            let value = d.iter().map(|v| v * v).sum();
            (value, d.iter().map(|v| 2.0 * v).collect(), vec![0.0; head.dim()])
        }
        Divergence::GaussianKl => {
            let mut value = 0.0;
            let mut g_mean = Vec::with_capacity(mean.len());
            let mut g_ls = Vec::with_capacity(mean.len());
            for ((a, b), ls) in mean_hat.iter().zip(mean).zip(&head.log_std) {
                let inv_var = (-2.0 * ls).exp();
                let d = a - b;
                value += 0.5 * d * d * inv_var;
                g_mean.push(d * inv_var);
                g_ls.push(-d * d * inv_var);
            }
            (value, g_mean, g_ls)
        }
    }
}

/// Mean divergence between `π(·|x)` and `π(·|x̂)` over the batch.
pub fn mean_divergence(params: &PolicyParameters, adversary: &AdversaryNet, observations: &[&[f64]], kind: Divergence) -> f64 {
    if observations.is_empty() {
        return 0.0;
    }
    let total: f64 = observations
        .iter()
        .map(|x| {
            let m = params.mean(x);
            let mh = params.mean(&adversary.perturb(x));
            divergence_and_grads(kind, &params.head, &m, &mh).0
        })
        .sum();
    total / observations.len() as f64
}

/// Mean divergence under uniform noise in the same ℓ∞ ball.
pub fn random_divergence<R: Rng + ?Sized>(
    params: &PolicyParameters,
    observations: &[&[f64]],
    epsilon: f64,
    kind: Divergence,
    rng: &mut R,
) -> f64 {
    if observations.is_empty() {
        return 0.0;
    }
    let total: f64 = observations
        .iter()
        .map(|x| {
            let xh: Vec<f64> = x.iter().map(|v| v + rng.random_range(-epsilon..=epsilon)).collect();
            divergence_and_grads(kind, &params.head, &params.mean(x), &params.mean(&xh)).0
        })
        .sum();
    total / observations.len() as f64
}

/// Adam state for an adversary.
#[derive(Debug, Clone)]
pub struct AdversaryOptimizer {
    pub adam: Adam,
}

impl AdversaryOptimizer {
    pub fn new(adversary: &AdversaryNet, lr: f64) -> Self {
        AdversaryOptimizer {
            adam: Adam::new(adversary.net.num_params(), lr),
        }
    }
}

/// Ascends the mean divergence with respect to the adversary only, for
/// `cfg.adversary_steps` optimizer steps. Returns the mean divergence of the
/// last step's sample, measured before that step.
pub fn adversary_update(
    adversary: &mut AdversaryNet,
    opt: &mut AdversaryOptimizer,
    params: &PolicyParameters,
    observations: &[&[f64]],
    cfg: &SmoothConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, SmoothError> {
    if observations.is_empty() {
        return Err(SmoothError::EmptyBatch);
    }
    let dim = adversary.dim();
    let mut grads = vec![0.0; adversary.net.num_params()];
    let mut actor_scratch = vec![0.0; params.actor.num_params()];
    let mut grad_x = vec![0.0; dim];
    let mut adv_tape = Tape::default();
    let mut actor_tape = Tape::default();
    let mut last = 0.0;
    for _ in 0..cfg.adversary_steps {
        let picks: Vec<usize> = if observations.len() <= cfg.adversary_batch {
            (0..observations.len()).collect()
        } else {
            sample(rng, observations.len(), cfg.adversary_batch).into_vec()
        };
        let inv_n = 1.0 / picks.len() as f64;
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for &i in &picks {
            let x = observations[i];
            let mean = params.actor.forward(x)?;
            let raw = adversary.net.forward_tape(x, &mut adv_tape)?.to_vec();
            let squashed: Vec<f64> = raw.iter().map(|r| r.tanh()).collect();
            let x_hat: Vec<f64> = x.iter().zip(&squashed).map(|(&a, t)| shift_within(a, adversary.epsilon * t, adversary.epsilon)).collect();
            let mean_hat = params.actor.forward_tape(&x_hat, &mut actor_tape)?.to_vec();
            let (value, g_mean_hat, _) = divergence_and_grads(cfg.divergence, &params.head, &mean, &mean_hat);
            total += value * inv_n;
            // Gradient ascent: minimize −D.
            let g_out: Vec<f64> = g_mean_hat.iter().map(|g| -g * inv_n).collect();
            params.actor.backward(&mut actor_tape, &g_out, &mut actor_scratch, Some(&mut grad_x));
            let g_raw: Vec<f64> = grad_x
                .iter()
                .zip(&squashed)
                .map(|(g, t)| g * adversary.epsilon * (1.0 - t * t))
                .collect();
            adversary.net.backward(&mut adv_tape, &g_raw, &mut grads, None);
        }
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(SmoothError::NonFinite);
        }
        opt.adam.step(adversary.net.params_mut(), &grads)?;
        last = total;
    }
    Ok(last)
}

/// Actor-side regularizer with a frozen adversary.
pub struct SmoothRegularizer<'a> {
    pub adversary: &'a AdversaryNet,
    pub divergence: Divergence,
    pub weight: f64,
}

impl SmoothRegularizer<'_> {
    /// Unweighted regularizer value and its gradients with respect to the
    /// actor parameters and log-std.
    pub fn value_and_grads(&self, actor: &Mlp, head: &GaussianHead, observations: &[&[f64]]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut g_actor = vec![0.0; actor.num_params()];
        let mut g_ls = vec![0.0; head.dim()];
        let value = self.accumulate_scaled(actor, head, observations, &mut g_actor, &mut g_ls, 1.0);
        (value, g_actor, g_ls)
    }

    fn accumulate_scaled(
        &self,
        actor: &Mlp,
        head: &GaussianHead,
        observations: &[&[f64]],
        actor_grads: &mut [f64],
        log_std_grads: &mut [f64],
        scale: f64,
    ) -> f64 {
        if observations.is_empty() {
            return 0.0;
        }
        let inv_n = 1.0 / observations.len() as f64;
        let mut tape = Tape::default();
        let mut total = 0.0;
        for x in observations {
            let x_hat = self.adversary.perturb(x);
            let mean = actor.forward(x).expect("observation width matches actor");
            let mean_hat = actor.forward_tape(&x_hat, &mut tape).expect("observation width matches actor").to_vec();
            let (value, g_hat, g_ls) = divergence_and_grads(self.divergence, head, &mean, &mean_hat);
            total += value * inv_n;
            let g: Vec<f64> = g_hat.iter().map(|v| v * inv_n * scale).collect();
            actor.backward(&mut tape, &g, actor_grads, None);
            // D depends on μ(x) and μ(x̂) only through their difference.
            actor.forward_tape(x, &mut tape).expect("observation width matches actor");
            let g_neg: Vec<f64> = g.iter().map(|v| -v).collect();
            actor.backward(&mut tape, &g_neg, actor_grads, None);
            for (a, b) in log_std_grads.iter_mut().zip(&g_ls) {
                *a += b * inv_n * scale;
            }
        }
        total
    }
}

impl ActorRegularizer for SmoothRegularizer<'_> {
    fn accumulate(
        &self,
        actor: &Mlp,
        head: &GaussianHead,
        observations: &[&[f64]],
        actor_grads: &mut [f64],
        log_std_grads: &mut [f64],
    ) -> f64 {
        self.accumulate_scaled(actor, head, observations, actor_grads, log_std_grads, self.weight)
    }

    fn weight(&self) -> f64 {
        self.weight
    }
}

#[derive(Debug, Clone)]
pub struct SmoothOutcome {
    pub outcome: TrainOutcome,
    pub adversary: AdversaryNet,
    /// Mean divergence reached by the adversary in each cycle.
    pub adversary_divergence: Vec<f64>,
}

/// PPO with the smoothing regularizer: each cycle collects a batch, fits the
/// adversary on its observations, then updates the actor and critic.
pub fn train_smooth(scenario: &ScenarioConfig, ppo: &PpoConfig, cfg: &SmoothConfig, seed: u64) -> Result<SmoothOutcome, SmoothError> {
    cfg.validate()?;
    let mut trainer = Trainer::new(scenario, ppo, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4, 0));
    let mut adversary = AdversaryNet::new(trainer.params.observer.dim(), &cfg.adversary_hidden, cfg.epsilon, &mut rng);
    let mut opt = AdversaryOptimizer::new(&adversary, cfg.adversary_lr);
    let mut adversary_divergence = Vec::with_capacity(ppo.learning_steps);
    for _ in 0..ppo.learning_steps {
        let batch = trainer.collect()?;
        let observations: Vec<&[f64]> = batch
            .iter()
            .flat_map(|t| t.transitions.iter().map(|s| s.observation.as_slice()))
            .collect();
        let d = adversary_update(&mut adversary, &mut opt, &trainer.params, &observations, cfg, &mut rng)?;
        adversary_divergence.push(d);
        let reg = SmoothRegularizer {
            adversary: &adversary,
            divergence: cfg.divergence,
            weight: cfg.weight,
        };
        trainer.update(&batch, Some(&reg))?;
    }
    Ok(SmoothOutcome {
        outcome: trainer.finish(),
        adversary,
        adversary_divergence,
    })
}

/// Trains a fresh adversary against a fixed policy on the given
/// observations, e.g. to attack a policy that was trained without one.
pub fn fit_adversary(
    params: &PolicyParameters,
    observations: &[&[f64]],
    cfg: &SmoothConfig,
    steps: usize,
    seed: u64,
) -> Result<AdversaryNet, SmoothError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, 0));
    let mut adversary = AdversaryNet::new(params.observer.dim(), &cfg.adversary_hidden, cfg.epsilon, &mut rng);
    let mut opt = AdversaryOptimizer::new(&adversary, cfg.adversary_lr);
    let one_step = SmoothConfig {
        adversary_steps: 1,
        ..cfg.clone()
    };
    for _ in 0..steps {
        adversary_update(&mut adversary, &mut opt, params, observations, &one_step, &mut rng)?;
    }
    Ok(adversary)
}

/// Fits an adversary against `params` on observations visited by its own
/// stochastic rollouts.
pub fn fit_adversary_on_rollouts(
    env: &HarvestEnv,
    params: &PolicyParameters,
    cfg: &SmoothConfig,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<AdversaryNet, SmoothError> {
    let batch = collect_rollouts(env, params, &PpoConfig::default(), episodes, derive_seed(seed, 7, 0))?;
    let observations: Vec<&[f64]> = batch
        .iter()
        .flat_map(|t| t.transitions.iter().map(|s| s.observation.as_slice()))
        .collect();
    fit_adversary(params, &observations, cfg, steps, seed)
}
