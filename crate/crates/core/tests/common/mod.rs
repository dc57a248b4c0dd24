//! Property checks shared by the property tests and the acceptance run.
//! Each returns `Err` with a description of the first violation.

#![allow(dead_code)]

use std::collections::HashMap;

use harvest_core::baselines::{astar_plan, double_q_targets, heuristic, max_q_targets, AStarConfig, DiscreteActionSet, Experience};
use harvest_core::env::{transmission_rate, HarvestEnv, JointAction, PolarAction, State};
use harvest_core::eval::{evaluate, run_deterministic, NoiseSpec};
use harvest_core::geom::Vec2;
use harvest_core::nn::{gaussian_log_prob, gaussian_log_prob_grads, Mlp};
use harvest_core::plot::render_svg;
use harvest_core::ppo::{gae_from_slices, terminal_reward, train, PpoConfig};
use harvest_core::scenario::{builtin_config_1, builtin_config_2, AgentSpec, ScenarioConfig, TargetSpec};
use harvest_core::smooth::AdversaryNet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn rate_identity_and_monotonicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let t = TargetSpec {
            position: Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            bandwidth: rng.random_range(0.1..3.0),
            gain: rng.random_range(0.3..4.0),
            initial_volume: 1.0,
        };
        let h = rng.random_range(0.0..t.gain.sqrt());
        let planar = (t.gain - h * h).sqrt();
        let at_k = transmission_rate(t.position + Vec2::new(planar, 0.0), h, &t);
        if (at_k - t.bandwidth).abs() > 1e-12 {
            return Err(format!("d² = K gives rate {at_k}, expected {}", t.bandwidth));
        }
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let r = transmission_rate(t.position + Vec2::new(0.2 * k as f64, 0.0), h.max(0.05), &t);
            if r > prev {
                return Err(format!("rate increased with distance at step {k}"));
            }
            prev = r;
        }
    }
    Ok(())
}

fn reference_harvest(env: &HarvestEnv, from: &[Vec2], to: &[Vec2]) -> Vec<f64> {
    env.harvest_along(from, to, 20_000)
}

/// Error of the `s`-substep rule against a fine reference, for each `s`.
pub fn trapezoid_errors(substeps: &[usize]) -> Vec<f64> {
    let env = HarvestEnv::new(builtin_config_1());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut errs = vec![0.0; substeps.len()];
    for _ in 0..20 {
        let from: Vec<Vec2> = (0..3).map(|_| Vec2::new(rng.random_range(0.0..8.0), rng.random_range(0.0..9.0))).collect();
        let to: Vec<Vec2> = from
            .iter()
            .map(|p| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                *p + Vec2::new(a.cos(), a.sin())
            })
            .collect();
        let reference = reference_harvest(&env, &from, &to);
        for (e, &s) in errs.iter_mut().zip(substeps) {
            let got = env.harvest_along(&from, &to, s);
            *e += got.iter().zip(&reference).map(|(g, r)| (g - r).abs()).sum::<f64>();
        }
    }
    errs
}

pub fn trapezoid_convergence() -> Check {
    let errs = trapezoid_errors(&[2, 4, 10, 20, 100]);
    for (pair, (a, b)) in [(2, 4), (10, 20)].iter().zip([(errs[0], errs[1]), (errs[2], errs[3])]) {
        if a / b < 3.5 {
            return Err(format!("doubling substeps {pair:?} reduced error only {:.2}×", a / b));
        }
    }
    if errs[2] / errs[4] < 3.5 {
        return Err(format!("10 → 100 substeps reduced error only {:.2}×", errs[2] / errs[4]));
    }
    Ok(())
}

fn random_action<R: Rng>(env: &HarvestEnv, rng: &mut R) -> JointAction {
    JointAction(
        env.scenario()
            .agents
            .iter()
            .map(|a| PolarAction::new(rng.random_range(0.0..=a.max_speed), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect(),
    )
}

pub fn data_bounds_on_random_rollouts(rollouts: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (k, sc) in (0..rollouts).map(|k| (k, if k % 2 == 0 { builtin_config_1() } else { builtin_config_2() })) {
        let env = HarvestEnv::new(sc);
        let mut state = env.initial_state();
        while !env.is_terminal(&state) && state.step_index < env.n_max() {
            let prev = state.harvested.clone();
            state = env.step(&state, &random_action(&env, &mut rng)).map_err(|e| e.to_string())?.next_state;
            for ((d, p), full) in state.harvested.iter().zip(&prev).zip(&env.goal().full_volumes) {
                if !(*d >= 0.0 && d <= full && d >= p) {
                    return Err(format!("rollout {k}: harvested {d} outside [{p}, {full}]"));
                }
            }
        }
    }
    Ok(())
}

/// `A_t = Σ_l (γλ)^l δ_{t+l}` summed directly.
pub fn gae_oracle(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let next = |t: usize| if t + 1 < n { values[t + 1] } else { 0.0 };
    (0..n)
        .map(|t| {
            (t..n)
                .map(|l| (gamma * lambda).powi((l - t) as i32) * (rewards[l] + gamma * next(l) - values[l]))
                .sum()
        })
        .collect()
}

pub fn gae_matches_oracle(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..cases {
        let n = rng.random_range(1..80);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..0.0)).collect();
        let gamma = rng.random_range(0.8..=1.0);
        let lambda = rng.random_range(0.0..=1.0);
        let got = gae_from_slices(&rewards, &values, gamma, lambda);
        let want = gae_oracle(&rewards, &values, gamma, lambda);
        for t in 0..n {
            if (got.advantages[t] - want[t]).abs() > 1e-10 {
                return Err(format!("case {case} t {t}: {} vs {}", got.advantages[t], want[t]));
            }
            if (got.value_targets[t] - (want[t] + values[t])).abs() > 1e-10 {
                return Err(format!("case {case} t {t}: value target off"));
            }
        }
    }
    Ok(())
}

/// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` against central differences of `loss`.
fn fd_relative_error(params: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut p = params.to_vec();
    let mut num = 0.0;
    let mut den_a = 0.0;
    let mut den_n = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        num += (fd - analytic[i]).powi(2);
        den_a += analytic[i].powi(2);
        den_n += fd.powi(2);
    }
    num.sqrt() / den_a.sqrt().max(den_n.sqrt()).max(1e-300)
}

fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    Mlp::from_params(net.widths(), p.to_vec()).expect("same shape")
}

fn huber(e: f64) -> (f64, f64) {
    if e.abs() <= 1.0 {
        (0.5 * e * e, e)
    } else {
        (e.abs() - 0.5, e.signum())
    }
}

/// Relative gradient errors for the actor, critic, adversary and Q-network.
pub fn gradient_errors(seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_dim = 10;
    let x: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(0.0..1.0)).collect();

    // Actor: Gaussian log-likelihood of a fixed raw action.
    let actor = Mlp::new(&[obs_dim, 16, 16, 6], 1.0, &mut rng);
    let log_std = vec![-0.5; 6];
    let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = actor.forward(&x).unwrap();
    let (g_mean, _) = gaussian_log_prob_grads(&mean, &log_std, &a);
    let (g_actor, _) = actor.vjp(&x, &g_mean).unwrap();
    let e_actor = fd_relative_error(actor.params(), &g_actor, |p| {
        gaussian_log_prob(&with_params(&actor, p).forward(&x).unwrap(), &log_std, &a)
    });

    // Critic: squared error to a target, with the elapsed-time input.
    let mut xc = x.clone();
    xc.push(0.3);
    let critic = Mlp::new(&[obs_dim + 1, 16, 16, 1], 1.0, &mut rng);
    let target = -4.0;
    let v = critic.forward(&xc).unwrap()[0];
    let (g_critic, _) = critic.vjp(&xc, &[2.0 * (v - target)]).unwrap();
    let e_critic = fd_relative_error(critic.params(), &g_critic, |p| {
        (with_params(&critic, p).forward(&xc).unwrap()[0] - target).powi(2)
    });

    // Adversary: divergence between the actor at x and at x + ε·tanh(φ(x)).
    let eps = 0.05;
    let adv = Mlp::new(&[obs_dim, 16, obs_dim], 1.0, &mut rng);
    let divergence = |adv: &Mlp| {
        let r = adv.forward(&x).unwrap();
        let xh: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + eps * b.tanh()).collect();
        let mh = actor.forward(&xh).unwrap();
        mean.iter().zip(&mh).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let r = adv.forward(&x).unwrap();
    let xh: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + eps * b.tanh()).collect();
    let mh = actor.forward(&xh).unwrap();
    let g_mh: Vec<f64> = mh.iter().zip(&mean).map(|(a, b)| 2.0 * (a - b)).collect();
    let (_, g_xh) = actor.vjp(&xh, &g_mh).unwrap();
    let g_r: Vec<f64> = g_xh.iter().zip(&r).map(|(g, v)| g * eps * (1.0 - v.tanh().powi(2))).collect();
    let (g_adv, _) = adv.vjp(&x, &g_r).unwrap();
    let e_adv = fd_relative_error(adv.params(), &g_adv, |p| divergence(&with_params(&adv, p)));

    // Q-network: Huber loss on one action's value.
    let q = Mlp::new(&[obs_dim, 16, 16, 25], 1.0, &mut rng);
    let act = 7;
    let y = 0.4;
    let qv = q.forward(&x).unwrap();
    let mut g_out = vec![0.0; 25];
    g_out[act] = huber(qv[act] - y).1;
    let (g_q, _) = q.vjp(&x, &g_out).unwrap();
    let e_q = fd_relative_error(q.params(), &g_q, |p| huber(with_params(&q, p).forward(&x).unwrap()[act] - y).0);

    [e_actor, e_critic, e_adv, e_q]
}

pub fn gradient_checks() -> Check {
    for seed in 0..5 {
        let errs = gradient_errors(seed);
        for (name, e) in ["actor", "critic", "adversary", "q-network"].iter().zip(errs) {
            if !(e <= 1e-4) {
                return Err(format!("{name} seed {seed}: relative error {e:.3e}"));
            }
        }
    }
    Ok(())
}

/// One agent, one or two targets, grid-aligned endpoints, a short budget.
pub fn micro_instance(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Vec2::new(rng.random_range(-1..=1) as f64, rng.random_range(-1..=1) as f64);
    let final_pos = Vec2::new(rng.random_range(-2..=2) as f64, rng.random_range(-2..=2) as f64);
    let targets = (0..rng.random_range(1..=2))
        .map(|_| TargetSpec {
            position: Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            bandwidth: rng.random_range(0.5..2.0),
            gain: rng.random_range(0.5..2.0),
            initial_volume: rng.random_range(0.0..2.5),
        })
        .collect();
    ScenarioConfig {
        targets,
        agents: vec![AgentSpec {
            start,
            final_pos,
            height: 0.5,
            max_speed: 1.0,
        }],
        n_max: 6,
        dt: 1.0,
    }
}

/// Fewest remaining steps to the goal from every node of the full action
/// tree, keyed by node path; `None` if unreachable within the budget.
fn exhaustive_cost_to_go(env: &HarvestEnv, actions: &DiscreteActionSet, state: &State, out: &mut Vec<(State, Option<usize>)>) -> Option<usize> {
    let best = if env.goal_met(state) {
        Some(0)
    } else if state.step_index >= env.n_max() {
        None
    } else {
        (0..actions.len())
            .filter_map(|id| {
                let next = env.step(state, &actions.joint_action(id)).expect("admissible").next_state;
                exhaustive_cost_to_go(env, actions, &next, out).map(|c| c + 1)
            })
            .min()
    };
    out.push((state.clone(), best));
    best
}

/// Heuristic versus exhaustive cost-to-go on every reachable node; also
/// returns the exhaustive optimum from the root.
pub fn heuristic_admissibility(instances: u64) -> Result<usize, String> {
    let mut checked = 0;
    for seed in 0..instances {
        let env = HarvestEnv::new(micro_instance(seed));
        let actions = DiscreteActionSet::new(&env, 1.0).map_err(|e| e.to_string())?;
        let mut nodes = Vec::new();
        exhaustive_cost_to_go(&env, &actions, &env.initial_state(), &mut nodes);
        for (s, cost) in &nodes {
            if let Some(c) = cost {
                checked += 1;
                let h = heuristic(s, &env);
                if h > *c as f64 * env.scenario().dt + 1e-9 {
                    return Err(format!("instance {seed}: h = {h} exceeds cost-to-go {c} at {:?}", s.positions));
                }
            }
        }
    }
    Ok(checked)
}

/// A* against the exhaustive optimum; returns how many instances had a
/// reachable goal.
pub fn astar_matches_exhaustive(instances: u64) -> Result<usize, String> {
    let mut solved = 0;
    for seed in 0..instances {
        let env = HarvestEnv::new(micro_instance(seed));
        let actions = DiscreteActionSet::new(&env, 1.0).map_err(|e| e.to_string())?;
        let mut nodes = Vec::new();
        let best = exhaustive_cost_to_go(&env, &actions, &env.initial_state(), &mut nodes);
        let cfg = AStarConfig {
            data_quantum: None,
            ..AStarConfig::default()
        };
        let plan = astar_plan(&env, &cfg).map_err(|e| e.to_string())?;
        match best {
            Some(c) => {
                solved += 1;
                if !plan.complete || plan.actions.len() != c {
                    return Err(format!("instance {seed}: A* found {} steps, exhaustive {c}", plan.actions.len()));
                }
            }
            None => {
                if plan.complete {
                    return Err(format!("instance {seed}: A* claims a plan the exhaustive search lacks"));
                }
            }
        }
    }
    Ok(solved)
}

pub fn projection_bound(pairs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut adversaries: HashMap<usize, AdversaryNet> = HashMap::new();
    for k in 0..pairs {
        let dim = [7, 10, 13][k % 3];
        let eps = rng.random_range(0.0..0.2);
        let adv = adversaries.entry(k % 50).or_insert_with(|| {
            let mut a = AdversaryNet::new(dim, &[16], 0.05, &mut rng);
            let scale = rng.random_range(0.1..100.0);
            a.net.params_mut().iter_mut().for_each(|p| *p *= scale);
            a
        });
        if adv.dim() != dim {
            continue;
        }
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..2.0)).collect();
        let xh = harvest_core::smooth::perturb(adv, &x, eps);
        let worst = x.iter().zip(&xh).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if worst > eps {
            return Err(format!("pair {k}: ‖x̂ − x‖∞ = {worst} > ε = {eps}"));
        }
    }
    Ok(())
}

/// A failed run ends at `N_max` with a positive penalty; compare it with a
/// successful run of every admissible length, using the env's penalty on
/// near-miss terminal states.
pub fn lagrangian_dominance() -> Check {
    let cfg = PpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for sc in [builtin_config_1(), builtin_config_2()] {
        let env = cfg.make_env(sc.clone());
        let n_max = env.n_max();
        let worst_success = -(n_max as f64) + terminal_reward(&cfg, 0.0, true, n_max);
        for trial in 0..200 {
            let mut positions: Vec<Vec2> = sc.agents.iter().map(|a| a.final_pos).collect();
            let mut harvested = env.goal().full_volumes.clone();
            if trial % 2 == 0 {
                let j = rng.random_range(0..positions.len());
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let r = rng.random_range(0.06..3.0);
                positions[j] = positions[j] + Vec2::new(r * a.cos(), r * a.sin());
            } else {
                let i = rng.random_range(0..harvested.len());
                harvested[i] -= rng.random_range(0.02..harvested[i].max(0.03));
            }
            let state = State {
                positions,
                harvested,
                step_index: n_max,
            };
            if env.goal_met(&state) {
                continue;
            }
            let penalty = env.terminal_penalty(&state);
            let failed = -(n_max as f64) + terminal_reward(&cfg, penalty, false, n_max);
            if !(failed < worst_success) {
                return Err(format!("failed return {failed} not below successful {worst_success}"));
            }
        }
    }
    Ok(())
}

pub fn double_q_below_max_q(cases: u64) -> Check {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = Mlp::new(&[6, 12, 9], 1.0, &mut rng);
        let target = Mlp::new(&[6, 12, 9], 1.0, &mut rng);
        let batch: Vec<Experience> = (0..32)
            .map(|_| Experience {
                observation: (0..6).map(|_| rng.random_range(0.0..1.0)).collect(),
                action: rng.random_range(0..9),
                reward: rng.random_range(-2.0..0.0),
                next_observation: (0..6).map(|_| rng.random_range(0.0..1.0)).collect(),
                done: rng.random_bool(0.2),
            })
            .collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        let d = double_q_targets(&online, &target, &refs, 0.99).map_err(|e| e.to_string())?;
        let m = max_q_targets(&target, &refs, 0.99).map_err(|e| e.to_string())?;
        if let Some(k) = d.iter().zip(&m).position(|(a, b)| a > b) {
            return Err(format!("seed {seed} sample {k}: double-Q {} > max-Q {}", d[k], m[k]));
        }
    }
    Ok(())
}

/// Train, evaluate and plot twice with one seed; everything must match.
pub fn determinism() -> Check {
    let sc = builtin_config_1();
    let cfg = PpoConfig {
        learning_steps: 2,
        batch_steps: 128,
        hidden: vec![16, 16],
        ..PpoConfig::default()
    };
    let run = || {
        let out = train(&sc, &cfg, 9).expect("training runs");
        let env = cfg.make_env(sc.clone());
        let report = evaluate(&out.params, &env, &NoiseSpec::random(0.05), 5, 2).expect("eval runs");
        let svg = render_svg(&sc, &[&run_deterministic(&env, &out.params).log]);
        (out.params.actor.checksum(), out.params.critic.checksum(), report.times, svg)
    };
    if run() != run() {
        return Err("train/eval/plot outputs differ between identical runs".into());
    }
    Ok(())
}
