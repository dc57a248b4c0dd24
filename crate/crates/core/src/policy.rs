//! Observation normalization, action squashing, and the policy interface
//! shared by the learners and the evaluation harness.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;

use crate::env::{JointAction, PolarAction, State};
use crate::nn::{Checkpoint, GaussianHead, Mlp, NnError};
use crate::scenario::ScenarioConfig;

/// Affine map from raw states to network inputs: positions relative to the
/// workspace box divided by its larger side, harvested data divided by the
/// initial volume of each target.
#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Observer {
    pub fn for_scenario(scenario: &ScenarioConfig) -> Self {
        let (lo, hi) = scenario.workspace_bounds();
        let extent = (hi.x - lo.x).max(hi.y - lo.y);
        let extent = if extent > 0.0 { extent } else { 1.0 };
        let mut offset = Vec::with_capacity(scenario.state_dim());
        let mut scale = Vec::with_capacity(scenario.state_dim());
        for _ in &scenario.agents {
            offset.extend([lo.x, lo.y]);
            scale.extend([extent, extent]);
        }
        for t in &scenario.targets {
            offset.push(0.0);
            scale.push(if t.initial_volume > 0.0 { t.initial_volume } else { 1.0 });
        }
        Observer { offset, scale }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn observe(&self, state: &State) -> Vec<f64> {
        let mut v = state.to_vec();
        self.normalize_in_place(&mut v);
        v
    }

    pub fn normalize_in_place(&self, raw: &mut [f64]) {
        for ((v, o), s) in raw.iter_mut().zip(&self.offset).zip(&self.scale) {
            *v = (*v - o) / s;
        }
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("obs.offset", vec![self.dim()], self.offset.clone());
        ckpt.insert("obs.scale", vec![self.dim()], self.scale.clone());
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self, NnError> {
        Ok(Observer {
            offset: ckpt.vector("obs.offset")?,
            scale: ckpt.vector("obs.scale")?,
        })
    }
}

/// Maps an unbounded raw action (two entries per agent) into the admissible
/// set: speed through a shifted `tanh`, heading wrapped onto `[0, 2π)`.
pub fn squash(raw: &[f64], max_speeds: &[f64]) -> JointAction {
    debug_assert_eq!(raw.len(), 2 * max_speeds.len());
    JointAction(
        raw.chunks_exact(2)
            .zip(max_speeds)
            .map(|(u, &max_speed)| {
                let speed = (max_speed * 0.5 * (1.0 + u[0].tanh())).clamp(0.0, max_speed);
                let mut heading = u[1].rem_euclid(TAU);
                if !(heading < TAU) {
                    heading = 0.0;
                }
                PolarAction::new(speed, heading)
            })
            .collect(),
    )
}

/// Anything that turns a (possibly perturbed) normalized observation into a
/// joint action.
pub trait Policy {
    fn act(&self, observation: &[f64]) -> JointAction;
}

impl<F: Fn(&[f64]) -> JointAction> Policy for F {
    fn act(&self, observation: &[f64]) -> JointAction {
        self(observation)
    }
}

/// The critic also sees how much of the step budget is spent: returns of
/// unfinished episodes depend on it, and the actor's state does not carry it.
pub fn critic_input(observation: &[f64], elapsed: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(observation.len() + 1);
    v.extend_from_slice(observation);
    v.push(elapsed);
    v
}

/// Actor mean network, Gaussian head, critic, and the observation map they
/// were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub actor: Mlp,
    pub head: GaussianHead,
    pub critic: Mlp,
    pub observer: Observer,
    pub max_speeds: Vec<f64>,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_LOG_STD: f64 = -0.693_147_180_559_945_3; // ln 0.5

impl PolicyParameters {
    pub fn new<R: Rng + ?Sized>(scenario: &ScenarioConfig, hidden: &[usize], rng: &mut R) -> Self {
        let observer = Observer::for_scenario(scenario);
        let obs_dim = observer.dim();
        let act_dim = 2 * scenario.num_agents();
        let widths = |out: usize| {
            let mut w = vec![obs_dim];
            w.extend_from_slice(hidden);
            w.push(out);
            w
        };
        PolicyParameters {
            actor: Mlp::new(&widths(act_dim), 0.01, rng),
            head: GaussianHead::new(act_dim, DEFAULT_LOG_STD),
            critic: {
                let mut w = widths(1);
                w[0] += 1;
                Mlp::new(&w, 1.0, rng)
            },
            observer,
            max_speeds: scenario.agents.iter().map(|a| a.max_speed).collect(),
        }
    }

    /// Mean of the raw action distribution.
    pub fn mean(&self, observation: &[f64]) -> Vec<f64> {
        self.actor.forward(observation).expect("observation width matches actor")
    }

    /// Critic estimate; `elapsed` is the fraction of the step budget used.
    pub fn value(&self, observation: &[f64], elapsed: f64) -> f64 {
        self.critic.forward(&critic_input(observation, elapsed)).expect("observation width matches critic")[0]
    }

    pub fn squash(&self, raw: &[f64]) -> JointAction {
        squash(raw, &self.max_speeds)
    }

    /// Evaluation-mode policy: the squashed mean, no sampling.
    pub fn deterministic_policy(&self) -> DeterministicPolicy<'_> {
        DeterministicPolicy { params: self }
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        self.actor.write_to("actor", ckpt);
        ckpt.insert("actor.log_std", vec![self.head.dim()], self.head.log_std.clone());
        self.critic.write_to("critic", ckpt);
        self.observer.write_to(ckpt);
        ckpt.insert("max_speed", vec![self.max_speeds.len()], self.max_speeds.clone());
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self, NnError> {
        let actor = Mlp::read_from("actor", ckpt)?;
        let log_std = ckpt.vector("actor.log_std")?;
        if log_std.len() != actor.output_dim() {
            return Err(NnError::Checkpoint("actor.log_std does not match actor output".into()));
        }
        Ok(PolicyParameters {
            actor,
            head: GaussianHead { log_std },
            critic: Mlp::read_from("critic", ckpt)?,
            observer: Observer::read_from(ckpt)?,
            max_speeds: ckpt.vector("max_speed")?,
        })
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

#[derive(Debug, Clone, Copy)]
pub struct DeterministicPolicy<'a> {
    params: &'a PolicyParameters,
}

impl Policy for DeterministicPolicy<'_> {
    fn act(&self, observation: &[f64]) -> JointAction {
        self.params.squash(&self.params.mean(observation))
    }
}
