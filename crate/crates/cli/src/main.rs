//! `harvest`: train, evaluate, plan, and plot multi-agent data harvesting runs.
//!
//! Every command writes `manifest.json` into its output directory before
//! doing any work. Exit status is 0 on success, 1 on usage errors and 2 on
//! runtime failures.

mod overrides;
mod run;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use harvest_core::baselines::{astar_plan, dqn_train, AStarConfig, DqnConfig, DqnPolicy};
use harvest_core::eval::{evaluate_policy, run_deterministic, run_policy, NoiseSpec};
use harvest_core::nn::Checkpoint;
use harvest_core::policy::PolicyParameters;
use harvest_core::ppo::{train, write_curve_csv, PpoConfig, RewardScheme, TrainOutcome};
use harvest_core::scenario::{self, ScenarioConfig};
use harvest_core::smooth::{fit_adversary_on_rollouts, train_smooth, AdversaryNet, SmoothConfig};
use harvest_core::trajectory::TrajectoryLog;
use harvest_core::{plot, HarvestEnv};

use overrides::{Override, Target};
use run::{write_json, Run};

#[derive(Parser, Debug)]
#[command(name = "harvest", author, version, about = "Multi-agent data harvesting: PPO, smoothing, A* and DDQN")]
struct Cli {
    /// Root under which a fresh `<command>-<run id>` directory is created
    /// (default: $HARVEST_OUT, then ./runs)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Write results into exactly this directory
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `builtin:config1`, `builtin:config2`, or a scenario JSON file
    #[arg(long, default_value = "builtin:config1")]
    scenario: String,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Config override `key=value`; prefix with `smooth.`, `dqn.` or `astar.`
    /// to address those configs
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a PPO policy, optionally with adversarial smoothing
    Train(TrainArgs),
    /// Evaluate a checkpoint under observation noise
    Eval(EvalArgs),
    /// Run a baseline planner
    Plan {
        #[command(subcommand)]
        planner: Planner,
    },
    /// Render a scenario and trajectories as SVG
    Plot(PlotArgs),
    /// Train over a grid of seeds and override sets
    Sweep(SweepArgs),
    /// Check a scenario file
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<RewardScheme>,

    /// Train with the smoothing regularizer
    #[arg(long)]
    smooth: bool,

    /// Perturbation bound for the smoothing adversary
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum NoiseArg {
    None,
    Random,
    Adv,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,

    /// Policy checkpoint (PPO or DQN)
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long, value_enum, default_value = "none")]
    noise: NoiseArg,

    #[arg(long, default_value_t = 0.05)]
    eps: f64,

    #[arg(long, default_value_t = 100)]
    trials: usize,

    /// Adversary checkpoint for `--noise adv`
    #[arg(long)]
    adversary: Option<PathBuf>,

    /// Fit a fresh adversary against the policy instead of loading one
    #[arg(long)]
    fit_adversary: bool,

    /// Rollout episodes used to fit the adversary
    #[arg(long, default_value_t = 32)]
    fit_episodes: usize,

    /// Gradient steps used to fit the adversary
    #[arg(long, default_value_t = 200)]
    fit_steps: usize,
}

#[derive(Subcommand, Debug)]
enum Planner {
    /// Best-first search over the discrete action set
    Astar {
        #[command(flatten)]
        common: Common,

        /// Node expansions before returning the incumbent
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Double DQN over the discrete action set
    Dqn {
        #[command(flatten)]
        common: Common,

        #[arg(long)]
        total_steps: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,

    /// Trajectory CSV files to overlay
    #[arg(long = "trajectory")]
    trajectories: Vec<PathBuf>,

    /// SVG file name inside the output directory
    #[arg(long, default_value = "plot.svg")]
    output: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,

    /// JSON file: `{"seeds": [..], "sets": [{"name": .., "set": {key: value}}], "smooth": bool}`
    #[arg(long)]
    file: PathBuf,
}

#[derive(Debug, Deserialize)]
struct SweepFile {
    seeds: Vec<u64>,
    sets: Vec<SweepSet>,
    #[serde(default)]
    smooth: bool,
}

#[derive(Debug, Deserialize)]
struct SweepSet {
    name: String,
    #[serde(default)]
    set: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    scenario: String,
    seed: u64,
    scheme: RewardScheme,
    smooth: bool,
    learning_steps: usize,
    final_steps: usize,
    final_time: f64,
    success: bool,
}

fn parse_scheme(s: &str) -> Result<RewardScheme, String> {
    s.parse::<RewardScheme>().map_err(|e| e.to_string())
}

struct Outputs<'a> {
    root: Option<&'a Path>,
    exact: Option<&'a Path>,
}

impl Outputs<'_> {
    fn start(&self, command: &str, common: &Common, overrides: &[Override]) -> Result<Run> {
        let run = Run::start(
            command,
            &common.scenario,
            overrides.iter().map(|o| format!("{}={}", o.key(), o.value)).collect(),
            common.seed,
            self.root,
            self.exact,
        )?;
        info!("{command} run {} in {}", run.id(), run.dir.display());
        Ok(run)
    }
}

fn parse_overrides(sets: &[String]) -> Result<Vec<Override>> {
    sets.iter().map(|s| Override::parse(s)).collect()
}

fn load_scenario(spec: &str) -> Result<ScenarioConfig> {
    let sc = scenario::resolve(spec).with_context(|| format!("loading scenario `{spec}`"))?;
    let report = sc.validate();
    if !report.is_valid() {
        bail!("scenario `{spec}` is invalid:\n{report}");
    }
    Ok(sc)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_log(path: &Path, log: &TrajectoryLog) -> Result<()> {
    log.write_csv(create(path)?).with_context(|| format!("writing {}", path.display()))
}

fn write_training(run: &Run, env: &HarvestEnv, outcome: &TrainOutcome) -> Result<()> {
    outcome.params.save(run.path("policy.ckpt"))?;
    write_curve_csv(&outcome.curve, create(&run.path("curve.csv"))?)?;
    write_log(&run.path("trajectory.csv"), &run_deterministic(env, &outcome.params).log)
}

fn train_one(
    outputs: &Outputs,
    common: &Common,
    overrides: &[Override],
    smooth: bool,
) -> Result<(PathBuf, TrainSummary)> {
    let run = outputs.start("train", common, overrides)?;
    let sc = load_scenario(&common.scenario)?;
    let cfg: PpoConfig = overrides::apply(&PpoConfig::default(), overrides, Target::Ppo)?;
    cfg.validate()?;
    let env = cfg.make_env(sc.clone());
    let outcome = if smooth {
        let scfg: SmoothConfig = overrides::apply(&SmoothConfig::default(), overrides, Target::Smooth)?;
        let out = train_smooth(&sc, &cfg, &scfg, common.seed)?;
        out.adversary.save(run.path("adversary.ckpt"))?;
        out.outcome
    } else {
        train(&sc, &cfg, common.seed)?
    };
    write_training(&run, &env, &outcome)?;
    let summary = TrainSummary {
        scenario: common.scenario.clone(),
        seed: common.seed,
        scheme: cfg.scheme,
        smooth,
        learning_steps: cfg.learning_steps,
        final_steps: outcome.final_steps,
        final_time: outcome.final_time,
        success: outcome.success,
    };
    write_json(&run.path("summary.json"), &summary)?;
    Ok((run.finish()?, summary))
}

fn cmd_train(outputs: &Outputs, args: TrainArgs) -> Result<()> {
    let mut overrides = parse_overrides(&args.common.sets)?;
    if let Some(scheme) = args.scheme {
        overrides.push(Override::parse(&format!("scheme={}", scheme.as_str()))?);
    }
    if let Some(eps) = args.eps {
        overrides.push(Override::parse(&format!("smooth.epsilon={eps}"))?);
    }
    let (dir, s) = train_one(outputs, &args.common, &overrides, args.smooth)?;
    println!(
        "trained {} seed {}: {} steps (T = {:.3}, success {}) -> {}",
        s.scheme,
        s.seed,
        s.final_steps,
        s.final_time,
        s.success,
        dir.display()
    );
    Ok(())
}

enum LoadedPolicy {
    Ppo(PolicyParameters),
    Dqn(DqnPolicy),
}

fn load_policy(path: &Path) -> Result<LoadedPolicy> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if ckpt.has_prefix("q.") {
        Ok(LoadedPolicy::Dqn(DqnPolicy::read_from(&ckpt)?))
    } else {
        Ok(LoadedPolicy::Ppo(PolicyParameters::read_from(&ckpt)?))
    }
}

fn cmd_eval(outputs: &Outputs, args: EvalArgs) -> Result<()> {
    let overrides = parse_overrides(&args.common.sets)?;
    if !args.checkpoint.is_file() {
        bail!("checkpoint {} not found", args.checkpoint.display());
    }
    if args.noise == NoiseArg::Adv && args.adversary.is_none() && !args.fit_adversary {
        bail!("--noise adv needs an adversary checkpoint: pass --adversary <adversary.ckpt> or --fit-adversary");
    }
    let run = outputs.start("eval", &args.common, &overrides)?;
    let sc = load_scenario(&args.common.scenario)?;
    let cfg: PpoConfig = overrides::apply(&PpoConfig::default(), &overrides, Target::Ppo)?;
    let env = cfg.make_env(sc);
    let policy = load_policy(&args.checkpoint)?;
    let noise = match args.noise {
        NoiseArg::None => NoiseSpec::none(),
        NoiseArg::Random => NoiseSpec::random(args.eps),
        NoiseArg::Adv => {
            let adversary = match (&args.adversary, &policy) {
                (Some(path), _) => AdversaryNet::load(path).with_context(|| format!("reading adversary {}", path.display()))?,
                (None, LoadedPolicy::Ppo(params)) => {
                    let mut scfg: SmoothConfig = overrides::apply(&SmoothConfig::default(), &overrides, Target::Smooth)?;
                    scfg.epsilon = args.eps;
                    let adv =
                        fit_adversary_on_rollouts(&env, params, &scfg, args.fit_episodes, args.fit_steps, args.common.seed)?;
                    adv.save(run.path("adversary.ckpt"))?;
                    adv
                }
                (None, LoadedPolicy::Dqn(_)) => bail!("--fit-adversary needs a Gaussian PPO policy; pass --adversary instead"),
            };
            NoiseSpec::adversarial(adversary, args.eps)
        }
    };
    let (report, sample) = match &policy {
        LoadedPolicy::Ppo(p) => {
            let policy = p.deterministic_policy();
            let report = evaluate_policy(&env, &p.observer, &policy, &noise, args.trials, args.common.seed, "ppo")?;
            (report, sample_run(&env, &p.observer, &policy, &noise)?)
        }
        LoadedPolicy::Dqn(q) => {
            let report = evaluate_policy(&env, &q.observer, q, &noise, args.trials, args.common.seed, "dqn")?;
            (report, sample_run(&env, &q.observer, q, &noise)?)
        }
    };
    report.write_trials_csv(create(&run.path("trials.csv"))?)?;
    report.write_summary_csv(create(&run.path("summary.csv"))?)?;
    write_log(&run.path("trajectory.csv"), &sample)?;
    run.finish()?;
    println!("{} [{}]: {:.3} ± {:.3} over {} trials", report.label, report.noise, report.mean, report.std, report.trials());
    Ok(())
}

/// One noisy rollout for plotting.
fn sample_run<P: harvest_core::policy::Policy + ?Sized>(
    env: &HarvestEnv,
    observer: &harvest_core::policy::Observer,
    policy: &P,
    noise: &NoiseSpec,
) -> Result<TrajectoryLog> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Ok(run_policy(env, observer, policy, noise, &mut rng)?.log)
}

fn cmd_plan(outputs: &Outputs, planner: Planner) -> Result<()> {
    match planner {
        Planner::Astar { common, budget } => {
            let overrides = parse_overrides(&common.sets)?;
            let run = outputs.start("plan-astar", &common, &overrides)?;
            let sc = load_scenario(&common.scenario)?;
            let mut cfg: AStarConfig = overrides::apply(&AStarConfig::default(), &overrides, Target::Astar)?;
            if let Some(b) = budget {
                cfg.budget = b;
            }
            let env = HarvestEnv::new(sc);
            let result = astar_plan(&env, &cfg)?;
            write_log(&run.path("plan.csv"), &result.log)?;
            result.write_diagnostics_csv(create(&run.path("expansions.csv"))?)?;
            write_json(
                &run.path("summary.json"),
                &json!({
                    "complete": result.complete,
                    "steps": result.log.steps(),
                    "time": result.estimate.time,
                    "goal_met": result.estimate.goal_met,
                    "expansions": result.expansions,
                    "generated": result.generated,
                    "inconsistencies": result.inconsistencies,
                }),
            )?;
            run.finish()?;
            println!(
                "astar: T = {:.3} ({} steps, goal met {}, {} expansions, {})",
                result.estimate.time,
                result.log.steps(),
                result.estimate.goal_met,
                result.expansions,
                if result.complete { "optimal" } else { "budget exhausted" }
            );
        }
        Planner::Dqn { common, total_steps } => {
            let overrides = parse_overrides(&common.sets)?;
            let run = outputs.start("plan-dqn", &common, &overrides)?;
            let sc = load_scenario(&common.scenario)?;
            let mut cfg: DqnConfig = overrides::apply(&DqnConfig::default(), &overrides, Target::Dqn)?;
            if let Some(n) = total_steps {
                cfg.total_steps = n;
            }
            let env = HarvestEnv::new(sc);
            let out = dqn_train(&env, &cfg, common.seed)?;
            out.policy.save(run.path("dqn.ckpt"))?;
            write_curve_csv(&out.curve, create(&run.path("curve.csv"))?)?;
            let greedy = sample_run(&env, &out.policy.observer, &out.policy, &NoiseSpec::none())?;
            write_log(&run.path("trajectory.csv"), &greedy)?;
            let estimate = env.expected_completion_time(greedy.last_state().expect("non-empty log"), greedy.steps());
            write_json(
                &run.path("summary.json"),
                &json!({
                    "seed": common.seed,
                    "steps": greedy.steps(),
                    "time": estimate.time,
                    "goal_met": estimate.goal_met,
                    "updates": out.updates,
                }),
            )?;
            run.finish()?;
            println!("dqn seed {}: T = {:.3} ({} steps, goal met {})", common.seed, estimate.time, greedy.steps(), estimate.goal_met);
        }
    }
    Ok(())
}

fn cmd_plot(outputs: &Outputs, args: PlotArgs) -> Result<()> {
    let run = outputs.start("plot", &args.common, &[])?;
    let sc = scenario::resolve(&args.common.scenario).with_context(|| format!("loading scenario `{}`", args.common.scenario))?;
    let logs = args
        .trajectories
        .iter()
        .map(|p| {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            TrajectoryLog::read_csv(f).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrajectoryLog> = logs.iter().collect();
    let path = run.path(&args.output);
    std::fs::write(&path, plot::render_svg(&sc, &refs)).with_context(|| format!("writing {}", path.display()))?;
    run.finish()?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_sweep(outputs: &Outputs, args: SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    let sweep: SweepFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.file.display()))?;
    let base = parse_overrides(&args.common.sets)?;
    let run = outputs.start("sweep", &args.common, &base)?;
    let mut rows = csv::Writer::from_writer(create(&run.path("sweep.csv"))?);
    rows.write_record(["set", "seed", "final_steps", "final_time", "success", "dir"])?;
    for set in &sweep.sets {
        let mut overrides = base.clone();
        for (k, v) in &set.set {
            overrides.push(Override::parse(&format!("{k}={v}"))?);
        }
        for &seed in &sweep.seeds {
            let dir = run.dir.join(&set.name).join(format!("seed-{seed}"));
            let common = Common {
                seed,
                ..args.common.clone()
            };
            let (dir, s) = train_one(
                &Outputs {
                    root: None,
                    exact: Some(&dir),
                },
                &common,
                &overrides,
                sweep.smooth,
            )?;
            println!("{} seed {seed}: {} steps (T = {:.3})", set.name, s.final_steps, s.final_time);
            rows.write_record([
                set.name.clone(),
                seed.to_string(),
                s.final_steps.to_string(),
                s.final_time.to_string(),
                s.success.to_string(),
                dir.display().to_string(),
            ])?;
            rows.flush()?;
        }
    }
    drop(rows);
    run.finish()?;
    Ok(())
}

fn cmd_validate(outputs: &Outputs, common: Common) -> Result<()> {
    let run = outputs.start("validate", &common, &[])?;
    let sc = scenario::resolve(&common.scenario).with_context(|| format!("loading scenario `{}`", common.scenario))?;
    let report = sc.validate();
    write_json(&run.path("report.json"), &json!({ "valid": report.is_valid(), "report": report.to_string() }))?;
    run.finish()?;
    if !report.is_valid() {
        bail!("scenario `{}` is invalid:\n{report}", common.scenario);
    }
    println!(
        "{}: valid ({} targets, {} agents, N_max {}, lower bound {:.3})",
        common.scenario,
        sc.num_targets(),
        sc.num_agents(),
        sc.n_max,
        sc.lower_bound_time()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outputs = Outputs {
        root: cli.out.as_deref(),
        exact: cli.out_dir.as_deref(),
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&outputs, a),
        Command::Eval(a) => cmd_eval(&outputs, a),
        Command::Plan { planner } => cmd_plan(&outputs, planner),
        Command::Plot(a) => cmd_plot(&outputs, a),
        Command::Sweep(a) => cmd_sweep(&outputs, a),
        Command::Validate { common } => cmd_validate(&outputs, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
