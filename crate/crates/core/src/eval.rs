//! Rollouts of deterministic policies under observation noise, with
//! summary statistics and comparison tables.
//!
//! Noise only touches what the policy sees; the environment always steps
//! from the true state.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CompletionEstimate, EnvError, HarvestEnv};
use crate::policy::{Observer, Policy, PolicyParameters};
use crate::ppo::{derive_seed, mean_std};
use crate::smooth::{perturb, AdversaryNet};
use crate::trajectory::TrajectoryLog;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("adversarial noise needs an adversary checkpoint")]
    MissingAdversary,
    #[error("noise level must be finite and non-negative, got {0}")]
    BadEpsilon(f64),
    #[error("adversary expects {expected} inputs but observations have {got}")]
    AdversaryShape { expected: usize, got: usize },
    #[error("at least one trial is required")]
    NoTrials,
    #[error("comparison needs at least two reports")]
    TooFewReports,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Random,
    Adversarial,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::None => "none",
            NoiseKind::Random => "random",
            NoiseKind::Adversarial => "adv",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub epsilon: f64,
    pub adversary: Option<AdversaryNet>,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            epsilon: 0.0,
            adversary: None,
        }
    }

    pub fn random(epsilon: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Random,
            epsilon,
            adversary: None,
        }
    }

    pub fn adversarial(adversary: AdversaryNet, epsilon: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Adversarial,
            epsilon,
            adversary: Some(adversary),
        }
    }

    pub fn validate(&self, obs_dim: usize) -> Result<(), EvalError> {
        if self.kind == NoiseKind::None {
            return Ok(());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(EvalError::BadEpsilon(self.epsilon));
        }
        if self.kind == NoiseKind::Adversarial {
            let adv = self.adversary.as_ref().ok_or(EvalError::MissingAdversary)?;
            if adv.dim() != obs_dim {
                return Err(EvalError::AdversaryShape {
                    expected: adv.dim(),
                    got: obs_dim,
                });
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            NoiseKind::None => "none".to_string(),
            kind => format!("{kind} {}", self.epsilon),
        }
    }
}

/// The observation the policy sees for a normalized true observation.
pub fn perturb_observation<R: Rng + ?Sized>(observation: &[f64], noise: &NoiseSpec, rng: &mut R) -> Result<Vec<f64>, EvalError> {
    match noise.kind {
        NoiseKind::None => Ok(observation.to_vec()),
        NoiseKind::Random => {
            let e = noise.epsilon;
            if e == 0.0 {
                return Ok(observation.to_vec());
            }
            Ok(observation.iter().map(|x| x + rng.random_range(-e..=e)).collect())
        }
        NoiseKind::Adversarial => {
            let adv = noise.adversary.as_ref().ok_or(EvalError::MissingAdversary)?;
            if adv.dim() != observation.len() {
                return Err(EvalError::AdversaryShape {
                    expected: adv.dim(),
                    got: observation.len(),
                });
            }
            Ok(perturb(adv, observation, noise.epsilon))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub log: TrajectoryLog,
    pub estimate: CompletionEstimate,
}

impl EpisodeResult {
    pub fn steps(&self) -> usize {
        self.log.steps()
    }

    /// Steps to completion, charging the full budget on failure.
    pub fn completion_steps(&self, n_max: usize) -> usize {
        if self.estimate.goal_met {
            self.steps()
        } else {
            n_max
        }
    }
}

/// Runs `policy` from the initial state until the goal or the step budget.
pub fn run_policy<P: Policy + ?Sized, R: Rng + ?Sized>(
    env: &HarvestEnv,
    observer: &Observer,
    policy: &P,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<EpisodeResult, EvalError> {
    let mut state = env.initial_state();
    let mut log = TrajectoryLog::new(state.clone());
    while !env.is_terminal(&state) && state.step_index < env.n_max() {
        let obs = perturb_observation(&observer.observe(&state), noise, rng)?;
        let action = policy.act(&obs);
        let out = env.step(&state, &action)?;
        state = out.next_state;
        log.push(action, state.clone());
    }
    let estimate = env.expected_completion_time(&state, log.steps());
    Ok(EpisodeResult { log, estimate })
}

/// Noise-free rollout of the squashed mean policy.
pub fn run_deterministic(env: &HarvestEnv, params: &PolicyParameters) -> EpisodeResult {
    run_policy(env, &params.observer, &params.deterministic_policy(), &NoiseSpec::none(), &mut ChaCha8Rng::seed_from_u64(0))
        .expect("squashed actions are admissible")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub noise: String,
    /// Expected completion time per trial.
    pub times: Vec<f64>,
    pub successes: Vec<bool>,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
}

impl EvalReport {
    pub fn from_trials(label: impl Into<String>, noise: impl Into<String>, times: Vec<f64>, successes: Vec<bool>) -> Self {
        let (mean, std) = mean_std(&times);
        EvalReport {
            label: label.into(),
            noise: noise.into(),
            times,
            successes,
            mean,
            std,
        }
    }

    pub fn trials(&self) -> usize {
        self.times.len()
    }

    pub fn success_rate(&self) -> f64 {
        self.successes.iter().filter(|s| **s).count() as f64 / self.successes.len().max(1) as f64
    }

    pub fn write_trials_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["trial", "T", "success"])?;
        for (i, (t, s)) in self.times.iter().zip(&self.successes).enumerate() {
            w.write_record([i.to_string(), t.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["label", "noise", "trials", "mean", "std", "success_rate"])?;
        w.write_record([
            self.label.clone(),
            self.noise.clone(),
            self.trials().to_string(),
            self.mean.to_string(),
            self.std.to_string(),
            self.success_rate().to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Evaluates any policy over `trials` runs; trial `k` draws its noise from
/// a generator seeded by `(seed, k)`.
pub fn evaluate_policy<P: Policy + ?Sized>(
    env: &HarvestEnv,
    observer: &Observer,
    policy: &P,
    noise: &NoiseSpec,
    trials: usize,
    seed: u64,
    label: &str,
) -> Result<EvalReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    noise.validate(observer.dim())?;
    let mut times = Vec::with_capacity(trials);
    let mut successes = Vec::with_capacity(trials);
    for k in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100, k as u64));
        let result = run_policy(env, observer, policy, noise, &mut rng)?;
        times.push(result.estimate.time);
        successes.push(result.estimate.goal_met);
    }
    Ok(EvalReport::from_trials(label, noise.label(), times, successes))
}

/// Evaluates the deterministic policy of `params`.
pub fn evaluate(params: &PolicyParameters, env: &HarvestEnv, noise: &NoiseSpec, trials: usize, seed: u64) -> Result<EvalReport, EvalError> {
    evaluate_policy(env, &params.observer, &params.deterministic_policy(), noise, trials, seed, "policy")
}

/// Aligned mean ± std table over several reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub noise: String,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub success_rate: f64,
}

pub fn compare(reports: &[&EvalReport]) -> Result<ComparisonTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports);
    }
    Ok(ComparisonTable {
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                label: r.label.clone(),
                noise: r.noise.clone(),
                trials: r.trials(),
                mean: r.mean,
                std: r.std,
                success_rate: r.success_rate(),
            })
            .collect(),
    })
}

impl ComparisonTable {
    const HEADER: [&'static str; 5] = ["policy", "noise", "trials", "T (mean ± std)", "success"];

    fn cells(&self) -> Vec<[String; 5]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.noise.clone(),
                    r.trials.to_string(),
                    format!("{:.2} ± {:.2}", r.mean, r.std),
                    format!("{:.2}", r.success_rate),
                ]
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut widths = Self::HEADER.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| {
            row.iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&Self::HEADER.map(String::from));
        out.push('\n');
        out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["policy", "noise", "trials", "mean", "std", "success_rate"])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.noise.clone(),
                r.trials.to_string(),
                format!("{:.2}", r.mean),
                format!("{:.2}", r.std),
                format!("{:.2}", r.success_rate),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{JointAction, PolarAction};
    use crate::scenario::builtin_config_1;

    #[test]
    fn zero_random_noise_is_identity() {
        let x = vec![0.1, 0.2, 0.3];
        let y = perturb_observation(&x, &NoiseSpec::random(0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn adversarial_without_adversary_errors() {
        let noise = NoiseSpec {
            kind: NoiseKind::Adversarial,
            epsilon: 0.05,
            adversary: None,
        };
        assert!(matches!(noise.validate(10), Err(EvalError::MissingAdversary)));
        assert!(matches!(
            perturb_observation(&[0.0], &noise, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(EvalError::MissingAdversary)
        ));
    }

    #[test]
    fn constant_policy_ignores_noise() {
        let env = HarvestEnv::new(builtin_config_1());
        let observer = Observer::for_scenario(env.scenario());
        let policy = |_: &[f64]| JointAction(vec![PolarAction::new(0.7, 1.0); 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = run_policy(&env, &observer, &policy, &NoiseSpec::none(), &mut rng).unwrap();
        let noisy = run_policy(&env, &observer, &policy, &NoiseSpec::random(0.5), &mut rng).unwrap();
        assert_eq!(clean, noisy);
    }

    #[test]
    fn report_statistics_recompute() {
        let r = EvalReport::from_trials("x", "none", vec![18.0, 19.0, 20.0, 17.5], vec![true; 4]);
        let mean = (18.0 + 19.0 + 20.0 + 17.5) / 4.0;
        let var = [18.0, 19.0, 20.0, 17.5f64].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!((r.mean - mean).abs() < 1e-12);
        assert!((r.std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn compare_needs_two_reports() {
        let r = EvalReport::from_trials("x", "none", vec![1.0], vec![true]);
        assert!(compare(&[&r]).is_err());
        let t = compare(&[&r, &r]).unwrap();
        assert_eq!(t.rows[0], t.rows[1]);
        let text = t.to_text();
        assert_eq!(text.lines().count(), 4);
    }
}
