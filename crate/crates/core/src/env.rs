//! The harvesting MDP.
//!
//! Agents fly straight segments chosen by polar actions, collecting data from
//! every target along the way at the Shannon-Hartley/Friis rate. Every step
//! costs one unit of reward; episodes end when the goal is met within
//! tolerance or the step budget runs out, at which point the unmet terminal
//! constraints are priced by the Lagrange multipliers.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::scenario::{ScenarioConfig, TargetSpec};

/// Squared distances are floored here so an agent at zero height directly
/// over a target sees a very large but finite rate.
pub const MIN_DIST_SQ: f64 = 1e-9;

pub const DEFAULT_SUBSTEPS: usize = 10;

/// Instantaneous rate `B·log2(1 + K/d²)` between an agent and a target, with
/// `d²` the squared planar offset plus the squared flight height.
pub fn transmission_rate(agent_pos: Vec2, height: f64, target: &TargetSpec) -> f64 {
    let d_sq = (agent_pos.distance_sq(target.position) + height * height).max(MIN_DIST_SQ);
    target.bandwidth * (target.gain / d_sq).ln_1p() / std::f64::consts::LN_2
}

/// Rate achieved hovering directly over the target.
pub fn peak_rate(height: f64, target: &TargetSpec) -> f64 {
    transmission_rate(target.position, height, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub positions: Vec<Vec2>,
    pub harvested: Vec<f64>,
    pub step_index: usize,
}

impl State {
    /// Flattened `[x_0, y_0, …, x_{M_a-1}, y_{M_a-1}, d_0, …, d_{M_s-1}]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.positions.len() + self.harvested.len());
        for p in &self.positions {
            v.push(p.x);
            v.push(p.y);
        }
        v.extend_from_slice(&self.harvested);
        v
    }
}

/// Per-agent command: displacement length `speed` along `heading` radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarAction {
    pub speed: f64,
    pub heading: f64,
}

impl PolarAction {
    pub const HOVER: PolarAction = PolarAction {
        speed: 0.0,
        heading: 0.0,
    };

    pub fn new(speed: f64, heading: f64) -> Self {
        PolarAction { speed, heading }
    }

    pub fn displacement(self) -> Vec2 {
        Vec2::polar(self.speed, self.heading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAction(pub Vec<PolarAction>);

impl JointAction {
    pub fn hover(num_agents: usize) -> Self {
        JointAction(vec![PolarAction::HOVER; num_agents])
    }
}

/// Goal state and the knobs that decide when it counts as reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub final_positions: Vec<Vec2>,
    pub full_volumes: Vec<f64>,
    pub position_tolerance: f64,
    pub data_tolerance: f64,
    /// Multipliers for (time-to-finals, remaining-data 1-norm).
    pub multipliers: [f64; 2],
}

pub const DEFAULT_POSITION_TOLERANCE: f64 = 0.05;
pub const DEFAULT_DATA_TOLERANCE: f64 = 0.01;
pub const DEFAULT_MULTIPLIERS: [f64; 2] = [2.0, 2.0];

impl GoalSpec {
    pub fn for_scenario(scenario: &ScenarioConfig) -> Self {
        GoalSpec {
            final_positions: scenario.agents.iter().map(|a| a.final_pos).collect(),
            full_volumes: scenario.initial_volumes(),
            position_tolerance: DEFAULT_POSITION_TOLERANCE,
            data_tolerance: DEFAULT_DATA_TOLERANCE,
            multipliers: DEFAULT_MULTIPLIERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: f64,
    pub harvested_delta: Vec<f64>,
    pub terminal: bool,
    /// True when the episode ended because the goal was met.
    pub success: bool,
    pub terminal_penalty: f64,
}

/// Result of pricing a possibly unfinished run in time units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionEstimate {
    pub time: f64,
    pub goal_met: bool,
    /// Data remained that no agent could reach from its final position.
    pub failed: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("agent {agent}: inadmissible action (speed {speed}, heading {heading}); speed must lie in [0, {max_speed}] and heading in [0, 2π)")]
    InadmissibleAction {
        agent: usize,
        speed: f64,
        heading: f64,
        max_speed: f64,
    },
    #[error("expected {expected} per-agent actions, got {got}")]
    ActionArity { expected: usize, got: usize },
    #[error("state has already reached the goal")]
    AlreadyTerminal,
    #[error("step budget of {0} steps exhausted")]
    BudgetExhausted(usize),
    #[error("substeps must be at least 1")]
    ZeroSubsteps,
}

/// Deterministic transition model over a fixed scenario and goal.
#[derive(Debug, Clone)]
pub struct HarvestEnv {
    scenario: ScenarioConfig,
    goal: GoalSpec,
    substeps: usize,
}

impl HarvestEnv {
    pub fn new(scenario: ScenarioConfig) -> Self {
        let goal = GoalSpec::for_scenario(&scenario);
        HarvestEnv {
            scenario,
            goal,
            substeps: DEFAULT_SUBSTEPS,
        }
    }

    pub fn with_goal(mut self, goal: GoalSpec) -> Self {
        self.goal = goal;
        self
    }

    pub fn with_multipliers(mut self, multipliers: [f64; 2]) -> Self {
        self.goal.multipliers = multipliers;
        self
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps.max(1);
        self
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn goal(&self) -> &GoalSpec {
        &self.goal
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn n_max(&self) -> usize {
        self.scenario.n_max
    }

    pub fn initial_state(&self) -> State {
        State {
            positions: self.scenario.agents.iter().map(|a| a.start).collect(),
            harvested: vec![0.0; self.scenario.targets.len()],
            step_index: 0,
        }
    }

    /// Checks `action` against the admissible set.
    pub fn check_action(&self, action: &JointAction) -> Result<(), EnvError> {
        let agents = &self.scenario.agents;
        if action.0.len() != agents.len() {
            return Err(EnvError::ActionArity {
                expected: agents.len(),
                got: action.0.len(),
            });
        }
        for (j, (a, spec)) in action.0.iter().zip(agents).enumerate() {
            let ok_speed = a.speed >= 0.0 && a.speed <= spec.max_speed;
            let ok_heading = a.heading >= 0.0 && a.heading < TAU;
            if !(ok_speed && ok_heading) {
                return Err(EnvError::InadmissibleAction {
                    agent: j,
                    speed: a.speed,
                    heading: a.heading,
                    max_speed: spec.max_speed,
                });
            }
        }
        Ok(())
    }

    /// Applies one step of the kinematics.
    pub fn move_agents(&self, positions: &[Vec2], action: &JointAction) -> Result<Vec<Vec2>, EnvError> {
        self.check_action(action)?;
        Ok(positions
            .iter()
            .zip(&action.0)
            .map(|(&p, a)| p + a.displacement())
            .collect())
    }

    /// Unclamped data each target would hand over while agents fly from
    /// `from` to `to` in one step, by the composite trapezoid rule.
    pub fn harvest_along(&self, from: &[Vec2], to: &[Vec2], substeps: usize) -> Vec<f64> {
        let s = substeps.max(1);
        let h = self.scenario.dt / s as f64;
        let mut out = vec![0.0; self.scenario.targets.len()];
        for ((spec, &a), &b) in self.scenario.agents.iter().zip(from).zip(to) {
            for k in 0..=s {
                let p = a.lerp(b, k as f64 / s as f64);
                let w = if k == 0 || k == s { 0.5 * h } else { h };
                for (acc, target) in out.iter_mut().zip(&self.scenario.targets) {
                    *acc += w * transmission_rate(p, spec.height, target);
                }
            }
        }
        out
    }

    /// Data collected from each target during one step, clamped so that no
    /// target gives up more than it still holds.
    pub fn accumulate(&self, state: &State, action: &JointAction, substeps: usize) -> Result<Vec<f64>, EnvError> {
        if substeps == 0 {
            return Err(EnvError::ZeroSubsteps);
        }
        let next = self.move_agents(&state.positions, action)?;
        Ok(self.clamp_delta(state, self.harvest_along(&state.positions, &next, substeps)))
    }

    fn clamp_delta(&self, state: &State, raw: Vec<f64>) -> Vec<f64> {
        raw.into_iter()
            .zip(&state.harvested)
            .zip(&self.goal.full_volumes)
            .map(|((r, &d), &full)| r.min(full - d).max(0.0))
            .collect()
    }

    pub fn goal_met(&self, state: &State) -> bool {
        let g = &self.goal;
        let positions_ok = state
            .positions
            .iter()
            .zip(&g.final_positions)
            .all(|(p, f)| p.distance(*f) <= g.position_tolerance);
        let data_ok = state
            .harvested
            .iter()
            .zip(&g.full_volumes)
            .all(|(d, full)| full - d <= g.data_tolerance);
        positions_ok && data_ok
    }

    /// Same as [`goal_met`](Self::goal_met): terminal means the goal is reached.
    pub fn is_terminal(&self, state: &State) -> bool {
        self.goal_met(state)
    }

    /// Terminal constraint values: the slowest agent's direct flight time to
    /// its final position, and the 1-norm of data left at the targets.
    pub fn constraint_values(&self, state: &State) -> [f64; 2] {
        let time = state
            .positions
            .iter()
            .zip(&self.goal.final_positions)
            .enumerate()
            .map(|(j, (p, f))| self.scenario.travel_time(j, p.distance(*f)))
            .fold(0.0, f64::max);
        let data = state
            .harvested
            .iter()
            .zip(&self.goal.full_volumes)
            .map(|(d, full)| (full - d).max(0.0))
            .sum();
        [time, data]
    }

    /// `λᵀf(x_N, g)`; zero when the goal is met within tolerance.
    pub fn terminal_penalty(&self, state: &State) -> f64 {
        if self.goal_met(state) {
            return 0.0;
        }
        let f = self.constraint_values(state);
        let lambda = self.goal.multipliers;
        lambda[0] * f[0] + lambda[1] * f[1]
    }

    pub fn step(&self, state: &State, action: &JointAction) -> Result<StepOutcome, EnvError> {
        if self.goal_met(state) {
            return Err(EnvError::AlreadyTerminal);
        }
        if state.step_index >= self.scenario.n_max {
            return Err(EnvError::BudgetExhausted(self.scenario.n_max));
        }
        let positions = self.move_agents(&state.positions, action)?;
        let delta = self.clamp_delta(state, self.harvest_along(&state.positions, &positions, self.substeps));
        let harvested = state
            .harvested
            .iter()
            .zip(&delta)
            .zip(&self.goal.full_volumes)
            .map(|((d, dd), &full)| (d + dd).min(full))
            .collect();
        let next_state = State {
            positions,
            harvested,
            step_index: state.step_index + 1,
        };
        let success = self.goal_met(&next_state);
        let terminal = success || next_state.step_index == self.scenario.n_max;
        let terminal_penalty = if terminal {
            self.terminal_penalty(&next_state)
        } else {
            0.0
        };
        Ok(StepOutcome {
            next_state,
            reward: -1.0,
            harvested_delta: delta,
            terminal,
            success,
            terminal_penalty,
        })
    }

    /// Cap on the residual data-collection time charged to unfinished runs.
    pub fn residual_cap(&self) -> f64 {
        10.0 * self.scenario.n_max as f64 * self.scenario.dt
    }

    /// Executed time plus the time to drain the remaining data while hovering
    /// at the final state, plus the direct flight time to the finals.
    pub fn expected_completion_time(&self, final_state: &State, steps_executed: usize) -> CompletionEstimate {
        let executed = steps_executed as f64 * self.scenario.dt;
        if self.goal_met(final_state) {
            return CompletionEstimate {
                time: executed,
                goal_met: true,
                failed: false,
            };
        }
        let cap = self.residual_cap();
        let mut failed = false;
        let mut residual: f64 = 0.0;
        for (i, target) in self.scenario.targets.iter().enumerate() {
            let remaining = self.goal.full_volumes[i] - final_state.harvested[i];
            if remaining <= self.goal.data_tolerance {
                continue;
            }
            let rate: f64 = self
                .scenario
                .agents
                .iter()
                .zip(&final_state.positions)
                .map(|(a, &p)| transmission_rate(p, a.height, target))
                .sum();
            if rate > 0.0 {
                residual = residual.max(remaining / rate);
            } else {
                failed = true;
            }
        }
        if failed {
            residual = cap;
        }
        residual = residual.min(cap);
        let travel = final_state
            .positions
            .iter()
            .zip(&self.goal.final_positions)
            .enumerate()
            .map(|(j, (p, f))| {
                let dist = p.distance(*f);
                if dist <= self.goal.position_tolerance {
                    0.0
                } else {
                    self.scenario.travel_time(j, dist)
                }
            })
            .fold(0.0, f64::max);
        CompletionEstimate {
            time: executed + residual + travel,
            goal_met: false,
            failed,
        }
    }
}
