//! World description: sensor targets, agents, and the episode budget.
//!
//! A [`ScenarioConfig`] is immutable once built. It can be loaded from and
//! saved to JSON, checked with [`ScenarioConfig::validate`], or taken from the
//! two built-in layouts.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::peak_rate;
use crate::geom::Vec2;

/// A fixed sensor node holding data to be harvested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub position: Vec2,
    /// Channel bandwidth `B` (data units per time unit).
    pub bandwidth: f64,
    /// Dimensionless channel constant `K`.
    pub gain: f64,
    /// Data volume `D_i` stored at the node when the mission starts.
    pub initial_volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: Vec2,
    #[serde(rename = "final")]
    pub final_pos: Vec2,
    /// Flight height above the target plane.
    pub height: f64,
    /// Maximum displacement per step.
    pub max_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub targets: Vec<TargetSpec>,
    pub agents: Vec<AgentSpec>,
    /// Step budget `N_max`.
    pub n_max: usize,
    /// Time units per step.
    pub dt: f64,
}

/// One violated invariant, located by a JSON-style path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario {path}:\n{report}")]
    Validation {
        path: PathBuf,
        report: ValidationReport,
    },
    #[error("unknown builtin scenario `{0}` (expected config1 or config2)")]
    UnknownBuiltin(String),
}

const BUILTIN_GAIN: f64 = 0.7;
const BUILTIN_HEIGHT: f64 = 0.5;
const DEFAULT_MAX_SPEED: f64 = 1.0;
const DEFAULT_DT: f64 = 1.0;

/// Multiple of the lower-bound completion time used for the default budget.
const BUDGET_FACTOR: f64 = 3.0;

fn targets_from(positions: &[(f64, f64)], bandwidths: &[f64], volumes: &[f64]) -> Vec<TargetSpec> {
    positions
        .iter()
        .zip(bandwidths)
        .zip(volumes)
        .map(|((&(x, y), &bandwidth), &initial_volume)| TargetSpec {
            position: Vec2::new(x, y),
            bandwidth,
            gain: BUILTIN_GAIN,
            initial_volume,
        })
        .collect()
}

fn agent(start: (f64, f64), final_pos: (f64, f64)) -> AgentSpec {
    AgentSpec {
        start: Vec2::new(start.0, start.1),
        final_pos: Vec2::new(final_pos.0, final_pos.1),
        height: BUILTIN_HEIGHT,
        max_speed: DEFAULT_MAX_SPEED,
    }
}

/// Four targets, three agents flying from (0,1) to (7,9).
pub fn builtin_config_1() -> ScenarioConfig {
    let targets = targets_from(
        &[(3.0, 1.0), (7.0, 1.0), (7.0, 5.0), (7.0, 7.0)],
        &[0.5, 1.0, 1.5, 2.0],
        &[5.0, 6.0, 3.0, 3.0],
    );
    let agents = vec![agent((0.0, 1.0), (7.0, 9.0)); 3];
    ScenarioConfig::with_default_budget(targets, agents, DEFAULT_DT)
}

/// Five targets, three agents leaving the origin for distinct destinations.
pub fn builtin_config_2() -> ScenarioConfig {
    let targets = targets_from(
        &[(3.0, 1.0), (6.0, 7.0), (8.0, 2.0), (1.0, 6.0), (3.0, 9.0)],
        &[0.5, 1.0, 1.5, 2.0, 2.5],
        &[5.0, 6.0, 3.0, 4.0, 4.0],
    );
    let agents = vec![
        agent((0.0, 0.0), (9.0, 6.0)),
        agent((0.0, 0.0), (5.0, 5.0)),
        agent((0.0, 0.0), (7.0, 8.0)),
    ];
    ScenarioConfig::with_default_budget(targets, agents, DEFAULT_DT)
}

/// Resolves `builtin:config1`, `builtin:config2`, or a path to a JSON file.
pub fn resolve(spec: &str) -> Result<ScenarioConfig, ScenarioError> {
    match spec.strip_prefix("builtin:") {
        Some("config1") => Ok(builtin_config_1()),
        Some("config2") => Ok(builtin_config_2()),
        Some(other) => Err(ScenarioError::UnknownBuiltin(other.to_string())),
        None => ScenarioConfig::load(spec),
    }
}

impl ScenarioConfig {
    /// Builds a scenario whose budget is three times its lower-bound
    /// completion time, rounded up to whole steps.
    pub fn with_default_budget(targets: Vec<TargetSpec>, agents: Vec<AgentSpec>, dt: f64) -> Self {
        let mut config = ScenarioConfig {
            targets,
            agents,
            n_max: 1,
            dt,
        };
        let steps = (BUDGET_FACTOR * config.lower_bound_time() / dt).ceil();
        config.n_max = if steps.is_finite() && steps >= 1.0 {
            steps as usize
        } else {
            1
        };
        config
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Length of the flattened state vector: two coordinates per agent plus
    /// one harvested amount per target.
    pub fn state_dim(&self) -> usize {
        2 * self.agents.len() + self.targets.len()
    }

    pub fn initial_volumes(&self) -> Vec<f64> {
        self.targets.iter().map(|t| t.initial_volume).collect()
    }

    /// Time to travel from the given distance at an agent's top speed.
    pub fn travel_time(&self, agent: usize, distance: f64) -> f64 {
        distance * self.dt / self.agents[agent].max_speed
    }

    /// Lower bound on the completion time from the start configuration.
    pub fn lower_bound_time(&self) -> f64 {
        let positions: Vec<Vec2> = self.agents.iter().map(|a| a.start).collect();
        let remaining = self.initial_volumes();
        self.remaining_time_bound(&positions, &remaining, 0.0)
    }

    /// Admissible bound on the time still needed from agent positions and
    /// per-target remaining data: the slowest direct flight home, or the
    /// slowest target to drain if every agent sat at its peak rate over it.
    pub fn remaining_time_bound(&self, positions: &[Vec2], remaining: &[f64], data_tolerance: f64) -> f64 {
        let travel = self
            .agents
            .iter()
            .zip(positions)
            .enumerate()
            .map(|(j, (a, p))| self.travel_time(j, p.distance(a.final_pos)))
            .fold(0.0, f64::max);
        let data = self
            .targets
            .iter()
            .zip(remaining)
            .map(|(t, &rem)| {
                let rem = (rem - data_tolerance).max(0.0);
                if rem == 0.0 {
                    return 0.0;
                }
                let total_peak: f64 = self.agents.iter().map(|a| peak_rate(a.height, t)).sum();
                if total_peak.is_infinite() {
                    0.0
                } else {
                    rem / total_peak
                }
            })
            .fold(0.0, f64::max);
        travel.max(data)
    }

    /// Axis-aligned box around every target, start, and final position.
    pub fn workspace_bounds(&self) -> (Vec2, Vec2) {
        let points = self
            .targets
            .iter()
            .map(|t| t.position)
            .chain(self.agents.iter().flat_map(|a| [a.start, a.final_pos]));
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    /// Checks every invariant and reports all violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.targets.is_empty() {
            report.push("targets", "M_s ≥ 1: at least one target is required");
        }
        if self.agents.is_empty() {
            report.push("agents", "M_a ≥ 1: at least one agent is required");
        }
        if self.n_max < 1 {
            report.push("n_max", "N_max ≥ 1 is required");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            report.push("dt", format!("dt must be finite and > 0, got {}", self.dt));
        }
        for (i, t) in self.targets.iter().enumerate() {
            let loc = |field: &str| format!("targets[{i}].{field}");
            if !t.position.is_finite() {
                report.push(loc("position"), "position must be finite");
            }
            if !(t.bandwidth > 0.0 && t.bandwidth.is_finite()) {
                report.push(loc("bandwidth"), format!("bandwidth must be > 0, got {}", t.bandwidth));
            }
            if !(t.gain > 0.0 && t.gain.is_finite()) {
                report.push(loc("gain"), format!("gain must be > 0, got {}", t.gain));
            }
            if !(t.initial_volume >= 0.0 && t.initial_volume.is_finite()) {
                report.push(
                    loc("initial_volume"),
                    format!("initial_volume must be ≥ 0, got {}", t.initial_volume),
                );
            }
            for (k, other) in self.targets.iter().enumerate().skip(i + 1) {
                if other.position == t.position {
                    report.push(
                        loc("position"),
                        format!("duplicates the position of targets[{k}]"),
                    );
                }
            }
        }
        for (j, a) in self.agents.iter().enumerate() {
            let loc = |field: &str| format!("agents[{j}].{field}");
            if !a.start.is_finite() {
                report.push(loc("start"), "start must be finite");
            }
            if !a.final_pos.is_finite() {
                report.push(loc("final"), "final must be finite");
            }
            if !(a.height >= 0.0 && a.height.is_finite()) {
                report.push(loc("height"), format!("height must be ≥ 0, got {}", a.height));
            }
            if !(a.max_speed > 0.0 && a.max_speed.is_finite()) {
                report.push(loc("max_speed"), format!("max_speed must be > 0, got {}", a.max_speed));
            }
        }
        report
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        let report = config.validate();
        if !report.is_valid() {
            return Err(ScenarioError::Validation {
                path: path.to_path_buf(),
                report,
            });
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text, path)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string() + "\n").map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_config_1_matches_published_layout() {
        let c = builtin_config_1();
        assert_eq!(c.targets[0].position, Vec2::new(3.0, 1.0));
        let positions: Vec<_> = c.targets.iter().map(|t| t.position).collect();
        assert_eq!(
            positions,
            vec![
                Vec2::new(3.0, 1.0),
                Vec2::new(7.0, 1.0),
                Vec2::new(7.0, 5.0),
                Vec2::new(7.0, 7.0)
            ]
        );
        assert_eq!(c.initial_volumes(), vec![5.0, 6.0, 3.0, 3.0]);
        let b: Vec<_> = c.targets.iter().map(|t| t.bandwidth).collect();
        assert_eq!(b, vec![0.5, 1.0, 1.5, 2.0]);
        assert!(c.targets.iter().all(|t| t.gain == 0.7));
        assert_eq!(c.agents.len(), 3);
        for a in &c.agents {
            assert_eq!(a.start, Vec2::new(0.0, 1.0));
            assert_eq!(a.height, 0.5);
        }
        assert_eq!(c.agents[2].final_pos, Vec2::new(7.0, 9.0));
        assert_eq!(c.dt, 1.0);
        // ceil(3 · 10.63)
        assert_eq!(c.n_max, 32);
    }

    #[test]
    fn builtin_config_2_matches_published_layout() {
        let c = builtin_config_2();
        assert_eq!(c.targets[4].position, Vec2::new(3.0, 9.0));
        assert_eq!(c.agents[0].final_pos, Vec2::new(9.0, 6.0));
        assert_eq!(c.agents[1].final_pos, Vec2::new(5.0, 5.0));
        assert_eq!(c.agents[2].final_pos, Vec2::new(7.0, 8.0));
        let b: Vec<_> = c.targets.iter().map(|t| t.bandwidth).collect();
        assert_eq!(b, vec![0.5, 1.0, 1.5, 2.0, 2.5]);
        assert_eq!(c.initial_volumes(), vec![5.0, 6.0, 3.0, 4.0, 4.0]);
        assert!(c.agents.iter().all(|a| a.start == Vec2::ZERO));
        assert_eq!(c.n_max, 33);
    }

    #[test]
    fn builtins_validate_clean() {
        assert!(builtin_config_1().validate().is_valid());
        assert!(builtin_config_2().validate().is_valid());
    }

    #[test]
    fn zero_bandwidth_names_the_target() {
        let mut c = builtin_config_1();
        c.targets[2].bandwidth = 0.0;
        let report = c.validate();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].location, "targets[2].bandwidth");
    }

    #[test]
    fn zero_agents_reported() {
        let mut c = builtin_config_1();
        c.agents.clear();
        let report = c.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].message.contains("M_a ≥ 1"));
    }

    #[test]
    fn duplicate_target_positions_rejected() {
        let mut c = builtin_config_1();
        c.targets[1].position = c.targets[0].position;
        assert!(!c.validate().is_valid());
    }

    #[test]
    fn validate_does_not_mutate() {
        let c = builtin_config_2();
        let before = c.clone();
        let _ = c.validate();
        assert_eq!(c, before);
    }

    #[test]
    fn json_round_trip_is_identity() {
        for c in [builtin_config_1(), builtin_config_2()] {
            let text = c.to_json_string();
            let back = ScenarioConfig::from_json_str(&text, Path::new("mem")).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn missing_targets_key_is_a_parse_error_naming_it() {
        let text = r#"{"agents": [], "n_max": 10, "dt": 1.0}"#;
        match ScenarioConfig::from_json_str(text, Path::new("x.json")) {
            Err(ScenarioError::Parse { message, .. }) => assert!(message.contains("targets")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_volume_is_a_validation_error() {
        let mut c = builtin_config_1();
        c.targets[0].initial_volume = -1.0;
        let text = serde_json::to_string(&c).unwrap();
        match ScenarioConfig::from_json_str(&text, Path::new("x.json")) {
            Err(ScenarioError::Validation { report, .. }) => {
                assert_eq!(report.violations[0].location, "targets[0].initial_volume")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn json_schema_uses_documented_keys() {
        let value: serde_json::Value = serde_json::from_str(&builtin_config_1().to_json_string()).unwrap();
        assert!(value.get("n_max").is_some());
        assert!(value.get("dt").is_some());
        let a = &value["agents"][0];
        assert_eq!(a["final"], serde_json::json!([7.0, 9.0]));
        assert_eq!(a["start"], serde_json::json!([0.0, 1.0]));
        let t = &value["targets"][0];
        for key in ["position", "bandwidth", "gain", "initial_volume"] {
            assert!(t.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn resolve_builtins_and_unknown() {
        assert_eq!(resolve("builtin:config1").unwrap(), builtin_config_1());
        assert_eq!(resolve("builtin:config2").unwrap(), builtin_config_2());
        assert!(matches!(resolve("builtin:nope"), Err(ScenarioError::UnknownBuiltin(_))));
    }
}
