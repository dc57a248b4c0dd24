//! Time-optimal multi-agent data harvesting.
//!
//! Agents fly over a field of fixed sensor targets and pull their data at a
//! distance-dependent rate while heading for their final positions. The crate
//! provides the simulator ([`env`]), a small neural-network substrate
//! ([`nn`]), a PPO trainer with a Lagrangian terminal penalty ([`ppo`]),
//! adversarial policy smoothing ([`smooth`]), discrete A* and DDQN baselines
//! ([`baselines`]), and an evaluation harness with observation noise
//! ([`eval`]).

pub mod geom;
pub mod scenario;
pub mod env;
pub mod trajectory;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod smooth;
pub mod eval;
pub mod baselines;
pub mod plot;

pub use env::{GoalSpec, HarvestEnv, JointAction, PolarAction, State, StepOutcome};
pub use geom::Vec2;
pub use scenario::{builtin_config_1, builtin_config_2, ScenarioConfig};
