//! Discrete-action comparators: best-first search over the joint
//! {N, E, S, W, hover} action tree and a double DQN learner over the same
//! action set.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::{FRAC_PI_2, PI};
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CompletionEstimate, EnvError, HarvestEnv, JointAction, PolarAction, State};
use crate::nn::{clip_grad_norm, Adam, Checkpoint, Mlp, NnError, Tape};
use crate::policy::{Observer, Policy};
use crate::ppo::{derive_seed, mean_std, CurvePoint, PpoConfig, RewardScheme};
use crate::trajectory::TrajectoryLog;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("step length {step} exceeds agent {agent}'s max speed {max_speed}")]
    StepTooLong { step: f64, agent: usize, max_speed: f64 },
    #[error("step length must be positive, got {0}")]
    BadStep(f64),
    #[error("{0} agents give too many joint actions for a discrete learner")]
    TooManyAgents(usize),
    #[error("invalid DQN config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-agent primitive moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    North,
    East,
    South,
    West,
    Hover,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::North, Move::East, Move::South, Move::West, Move::Hover];
}

/// Joint actions encoded as base-5 integers, agent 0 in the least
/// significant digit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteActionSet {
    pub num_agents: usize,
    pub step: f64,
}

impl DiscreteActionSet {
    pub fn new(env: &HarvestEnv, step: f64) -> Result<Self, BaselineError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(BaselineError::BadStep(step));
        }
        let agents = &env.scenario().agents;
        if agents.len() > 6 {
            return Err(BaselineError::TooManyAgents(agents.len()));
        }
        for (agent, a) in agents.iter().enumerate() {
            if step > a.max_speed {
                return Err(BaselineError::StepTooLong {
                    step,
                    agent,
                    max_speed: a.max_speed,
                });
            }
        }
        Ok(DiscreteActionSet {
            num_agents: agents.len(),
            step,
        })
    }

    pub fn len(&self) -> usize {
        5usize.pow(self.num_agents as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn decode(&self, mut id: usize) -> Vec<Move> {
        (0..self.num_agents)
            .map(|_| {
                let m = Move::ALL[id % 5];
                id /= 5;
                m
            })
            .collect()
    }

    pub fn encode(&self, moves: &[Move]) -> usize {
        moves
            .iter()
            .rev()
            .fold(0, |acc, m| acc * 5 + Move::ALL.iter().position(|x| x == m).expect("known move"))
    }

    pub fn joint_action(&self, id: usize) -> JointAction {
        JointAction(
            self.decode(id)
                .into_iter()
                .map(|m| match m {
                    Move::North => PolarAction::new(self.step, FRAC_PI_2),
                    Move::East => PolarAction::new(self.step, 0.0),
                    Move::South => PolarAction::new(self.step, 3.0 * FRAC_PI_2),
                    Move::West => PolarAction::new(self.step, PI),
                    Move::Hover => PolarAction::HOVER,
                })
                .collect(),
        )
    }
}

/// Lower bound on the remaining time: the slowest agent's direct flight to
/// within tolerance of its final position, or the slowest target to drain
/// with every agent at its peak rate over it.
pub fn heuristic(state: &State, env: &HarvestEnv) -> f64 {
    let sc = env.scenario();
    let goal = env.goal();
    let travel = sc
        .agents
        .iter()
        .zip(&state.positions)
        .enumerate()
        .map(|(j, (a, p))| sc.travel_time(j, (p.distance(a.final_pos) - goal.position_tolerance).max(0.0)))
        .fold(0.0, f64::max);
    let remaining: Vec<f64> = goal.full_volumes.iter().zip(&state.harvested).map(|(f, d)| f - d).collect();
    let positions: Vec<_> = sc.agents.iter().map(|a| a.final_pos).collect();
    // Only the data side of the shared bound; travel is handled above.
    let data = sc.remaining_time_bound(&positions, &remaining, goal.data_tolerance);
    travel.max(data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AStarConfig {
    pub step: f64,
    /// Node expansions before giving up.
    pub budget: usize,
    /// Open-list entries before giving up, to bound memory.
    pub max_frontier: usize,
    /// Quantum for harvested data in duplicate detection; `None` compares
    /// exact values.
    pub data_quantum: Option<f64>,
}

impl Default for AStarConfig {
    fn default() -> Self {
        AStarConfig {
            step: 1.0,
            budget: 2_000_000,
            max_frontier: 20_000_000,
            data_quantum: Some(1e-2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub state: State,
    /// Time elapsed, `steps · Δt`.
    pub g: f64,
    pub h: f64,
    pub parent: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct AStarResult {
    pub actions: Vec<JointAction>,
    pub log: TrajectoryLog,
    pub estimate: CompletionEstimate,
    /// `true` when the returned plan reaches the goal.
    pub complete: bool,
    pub expansions: usize,
    pub generated: usize,
    /// Pops whose f-value fell below the previous pop's.
    pub inconsistencies: usize,
    /// `(expansions, best expected completion time)` each time the
    /// incumbent improved.
    pub incumbent_curve: Vec<(usize, f64)>,
}

impl AStarResult {
    pub fn write_diagnostics_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["expansions", "best_time"])?;
        for (e, t) in &self.incumbent_curve {
            w.write_record([e.to_string(), t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Open {
    f: f64,
    g: f64,
    node: usize,
}

impl PartialEq for Open {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Open {}
impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Open {
    // Max-heap: smaller f first, then deeper nodes, then older nodes.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
            .then(other.node.cmp(&self.node))
    }
}

fn state_key(state: &State, quantum: Option<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for p in &state.positions {
        ((p.x * 1e6).round() as i64).hash(&mut h);
        ((p.y * 1e6).round() as i64).hash(&mut h);
    }
    for d in &state.harvested {
        match quantum {
            Some(q) => ((d / q).round() as i64).hash(&mut h),
            None => d.to_bits().hash(&mut h),
        }
    }
    h.finish()
}

/// Best-first search on `f = g + h` over the discrete action tree, bounded
/// by the scenario's step budget. Returns the first goal node popped, or the
/// generated node with the lowest expected completion time when the
/// expansion or frontier budget runs out.
pub fn astar_plan(env: &HarvestEnv, cfg: &AStarConfig) -> Result<AStarResult, BaselineError> {
    let actions = DiscreteActionSet::new(env, cfg.step)?;
    let n_max = env.n_max();
    let dt = env.scenario().dt;
    let root = env.initial_state();
    let h0 = heuristic(&root, env);
    let mut nodes = vec![SearchNode {
        state: root.clone(),
        g: 0.0,
        h: h0,
        parent: None,
    }];
    let mut best_g: HashMap<u64, f64> = HashMap::new();
    best_g.insert(state_key(&root, cfg.data_quantum), 0.0);
    let mut open = BinaryHeap::new();
    open.push(Open { f: h0, g: 0.0, node: 0 });

    let mut incumbent = (0usize, env.expected_completion_time(&root, 0));
    let mut incumbent_curve = vec![(0, incumbent.1.time)];
    let mut expansions = 0;
    let mut generated = 1;
    let mut inconsistencies = 0;
    let mut last_f = f64::NEG_INFINITY;
    let mut goal_node = None;

    while let Some(Open { f, g, node }) = open.pop() {
        if g > best_g.get(&state_key(&nodes[node].state, cfg.data_quantum)).copied().unwrap_or(f64::INFINITY) {
            continue;
        }
        if f < last_f - 1e-9 {
            inconsistencies += 1;
        }
        last_f = last_f.max(f);
        if env.goal_met(&nodes[node].state) {
            goal_node = Some(node);
            break;
        }
        if expansions >= cfg.budget || open.len() >= cfg.max_frontier {
            break;
        }
        if nodes[node].state.step_index >= n_max {
            continue;
        }
        expansions += 1;
        for id in 0..actions.len() {
            let out = env.step(&nodes[node].state, &actions.joint_action(id))?;
            let child_g = g + dt;
            let key = state_key(&out.next_state, cfg.data_quantum);
            if best_g.get(&key).is_some_and(|&b| b <= child_g) {
                continue;
            }
            best_g.insert(key, child_g);
            generated += 1;
            let steps = out.next_state.step_index;
            let estimate = env.expected_completion_time(&out.next_state, steps);
            let h = heuristic(&out.next_state, env);
            nodes.push(SearchNode {
                state: out.next_state,
                g: child_g,
                h,
                parent: Some((node, id)),
            });
            let idx = nodes.len() - 1;
            if estimate.time < incumbent.1.time {
                incumbent = (idx, estimate);
                incumbent_curve.push((expansions, estimate.time));
            }
            open.push(Open {
                f: child_g + h,
                g: child_g,
                node: idx,
            });
        }
    }
    if inconsistencies > 0 {
        log::info!("A*: {inconsistencies} pops below the running f maximum");
    }

    let (end, complete) = match goal_node {
        Some(n) => (n, true),
        None => (incumbent.0, false),
    };
    let mut ids = Vec::new();
    let mut cursor = end;
    while let Some((parent, id)) = nodes[cursor].parent {
        ids.push(id);
        cursor = parent;
    }
    ids.reverse();
    let mut log = TrajectoryLog::new(root.clone());
    let mut state = root;
    let mut plan = Vec::with_capacity(ids.len());
    for id in ids {
        let a = actions.joint_action(id);
        state = env.step(&state, &a)?.next_state;
        log.push(a.clone(), state.clone());
        plan.push(a);
    }
    let estimate = env.expected_completion_time(&state, plan.len());
    if complete {
        incumbent_curve.push((expansions, estimate.time));
    }
    Ok(AStarResult {
        actions: plan,
        log,
        estimate,
        complete,
        expansions,
        generated,
        inconsistencies,
        incumbent_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub step: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Gradient updates between target-network syncs.
    pub target_sync: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Environment steps over which ε decays linearly.
    pub eps_decay_steps: usize,
    pub total_steps: usize,
    /// Environment steps per gradient update.
    pub train_freq: usize,
    /// Environment steps collected before learning starts.
    pub warmup: usize,
    pub hidden: Vec<usize>,
    pub scheme: RewardScheme,
    pub multipliers: [f64; 2],
    pub large_penalty: f64,
    pub reward_scale: f64,
    pub max_grad_norm: f64,
    /// Episodes between learning-curve points.
    pub log_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            step: 1.0,
            gamma: 0.99,
            lr: 5e-4,
            batch_size: 64,
            replay_capacity: 100_000,
            target_sync: 1_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 200_000,
            total_steps: 300_000,
            train_freq: 4,
            warmup: 1_000,
            hidden: crate::policy::DEFAULT_HIDDEN.to_vec(),
            scheme: RewardScheme::Lagrangian,
            multipliers: crate::env::DEFAULT_MULTIPLIERS,
            large_penalty: 200.0,
            reward_scale: 0.1,
            max_grad_norm: 10.0,
            log_every: 50,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync == 0 || self.train_freq == 0 {
            return bad("batch_size, replay_capacity, target_sync, and train_freq must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("exploration rates must lie in [0, 1]");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        if self.eps_decay_steps == 0 || step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.eps_decay_steps as f64;
        self.eps_start + frac * (self.eps_end - self.eps_start)
    }

    fn terminal_reward(&self, penalty: f64, success: bool) -> f64 {
        let ppo = PpoConfig {
            scheme: self.scheme,
            large_penalty: self.large_penalty,
            ..PpoConfig::default()
        };
        crate::ppo::terminal_reward(&ppo, penalty, success, 0)
    }
}

/// One replayed transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Experience>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Experience> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// `r + γ·Q_target(s', argmax_a Q_online(s', a))`, zero bootstrap on done.
pub fn double_q_targets(online: &Mlp, target: &Mlp, batch: &[&Experience], gamma: f64) -> Result<Vec<f64>, NnError> {
    batch
        .iter()
        .map(|e| {
            if e.done {
                return Ok(e.reward);
            }
            let a = argmax(&online.forward(&e.next_observation)?);
            Ok(e.reward + gamma * target.forward(&e.next_observation)?[a])
        })
        .collect()
}

/// `r + γ·max_a Q_target(s', a)`, the single-network target.
pub fn max_q_targets(target: &Mlp, batch: &[&Experience], gamma: f64) -> Result<Vec<f64>, NnError> {
    batch
        .iter()
        .map(|e| {
            if e.done {
                return Ok(e.reward);
            }
            let q = target.forward(&e.next_observation)?;
            Ok(e.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// Huber loss with unit threshold and its derivative.
fn huber(err: f64) -> (f64, f64) {
    if err.abs() <= 1.0 {
        (0.5 * err * err, err)
    } else {
        (err.abs() - 0.5, err.signum())
    }
}

/// Greedy policy over a trained Q-network.
#[derive(Debug, Clone, PartialEq)]
pub struct DqnPolicy {
    pub q: Mlp,
    pub observer: Observer,
    pub actions: DiscreteActionSet,
}

impl DqnPolicy {
    pub fn action_id(&self, observation: &[f64]) -> usize {
        argmax(&self.q.forward(observation).expect("observation width matches Q-network"))
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        self.q.write_to("q", ckpt);
        self.observer.write_to(ckpt);
        ckpt.insert("q.step", vec![1], vec![self.actions.step]);
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self, NnError> {
        let q = Mlp::read_from("q", ckpt)?;
        let observer = Observer::read_from(ckpt)?;
        let step = ckpt.vector("q.step")?;
        let num_agents = (0..=6)
            .find(|&m| 5usize.pow(m as u32) == q.output_dim())
            .ok_or_else(|| NnError::Checkpoint("Q-network width is not a power of 5".into()))?;
        Ok(DqnPolicy {
            q,
            observer,
            actions: DiscreteActionSet {
                num_agents,
                step: step.first().copied().unwrap_or(1.0),
            },
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        let mut ckpt = Checkpoint::new();
        self.write_to(&mut ckpt);
        ckpt.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NnError> {
        Self::read_from(&Checkpoint::load(path)?)
    }
}

impl Policy for DqnPolicy {
    fn act(&self, observation: &[f64]) -> JointAction {
        self.actions.joint_action(self.action_id(observation))
    }
}

#[derive(Debug, Clone)]
pub struct DqnOutcome {
    pub policy: DqnPolicy,
    /// Mean and sample std of completion steps over each window of
    /// `log_every` episodes.
    pub curve: Vec<CurvePoint>,
    pub updates: usize,
}

/// Trains a double DQN agent; fully determined by `seed`.
pub fn dqn_train(env: &HarvestEnv, cfg: &DqnConfig, seed: u64) -> Result<DqnOutcome, BaselineError> {
    cfg.validate()?;
    let actions = DiscreteActionSet::new(env, cfg.step)?;
    let observer = Observer::for_scenario(env.scenario());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6, 0));
    let mut widths = vec![observer.dim()];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(actions.len());
    let mut online = Mlp::new(&widths, 0.01, &mut rng);
    let mut target = online.clone();
    let mut adam = Adam::new(online.num_params(), cfg.lr);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut grads = vec![0.0; online.num_params()];
    let mut tape = Tape::default();
    let mut curve = Vec::new();
    let mut window = Vec::new();
    let mut updates = 0;
    let mut episodes = 0;

    let mut state = env.initial_state();
    let mut obs = observer.observe(&state);
    for t in 0..cfg.total_steps {
        let id = if rng.random::<f64>() < cfg.epsilon_at(t) {
            rng.random_range(0..actions.len())
        } else {
            argmax(&online.forward(&obs)?)
        };
        let out = env.step(&state, &actions.joint_action(id))?;
        let mut reward = out.reward;
        if out.terminal {
            reward += cfg.terminal_reward(out.terminal_penalty, out.success);
        }
        let next_obs = observer.observe(&out.next_state);
        replay.push(Experience {
            observation: std::mem::take(&mut obs),
            action: id,
            reward: reward * cfg.reward_scale,
            next_observation: next_obs.clone(),
            done: out.terminal,
        });
        if out.terminal {
            window.push(if out.success { out.next_state.step_index } else { env.n_max() } as f64);
            episodes += 1;
            if window.len() == cfg.log_every {
                let (mean_steps, std_steps) = mean_std(&window);
                curve.push(CurvePoint {
                    learning_step: episodes,
                    mean_steps,
                    std_steps,
                });
                window.clear();
            }
            state = env.initial_state();
            obs = observer.observe(&state);
        } else {
            state = out.next_state;
            obs = next_obs;
        }

        if t >= cfg.warmup && t % cfg.train_freq == 0 && replay.len() >= cfg.batch_size {
            let batch = replay.sample(cfg.batch_size, &mut rng);
            let targets = double_q_targets(&online, &target, &batch, cfg.gamma)?;
            grads.iter_mut().for_each(|g| *g = 0.0);
            let inv_n = 1.0 / batch.len() as f64;
            let mut g_out = vec![0.0; actions.len()];
            for (e, y) in batch.iter().zip(&targets) {
                let q = online.forward_tape(&e.observation, &mut tape)?[e.action];
                let (_, d) = huber(q - y);
                g_out.iter_mut().for_each(|g| *g = 0.0);
                g_out[e.action] = d * inv_n;
                online.backward(&mut tape, &g_out, &mut grads, None);
            }
            clip_grad_norm(&mut [&mut grads], cfg.max_grad_norm);
            adam.step(online.params_mut(), &grads)?;
            updates += 1;
            if updates % cfg.target_sync == 0 {
                target = online.clone();
            }
        }
    }
    Ok(DqnOutcome {
        policy: DqnPolicy {
            q: online,
            observer,
            actions,
        },
        curve,
        updates,
    })
}
