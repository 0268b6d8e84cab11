use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use datasched::artifacts::Artifacts;
use datasched::config::{ExperimentConfig, ExperimentId};
use datasched::experiments::{
    chain_setup, learn_model_based, learn_model_free, plan, resolve_k, run_example1, run_example2, run_example3,
    run_linear_plan, run_threshold, simulate, truncation_bound, Consistency,
};
use datasched::CliError;
use datasched_core::planning::Strategy;
use datasched_core::PlanningState;
use serde_json::json;

/// Plan, learn and simulate collect-or-estimate strategies.
#[derive(Parser)]
#[command(name = "scheduler", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value iteration on the truncated planning space.
    Plan(Common),
    /// Q-learning (model-free) or count-based model estimation then planning.
    Learn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::ModelFree)]
        mode: Mode,
    },
    /// Monte-Carlo evaluation of a strategy.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Strategy CSV; the planned strategy is used when omitted.
        #[arg(long)]
        strategy: Option<PathBuf>,
    },
    /// Certainty threshold and the estimate-only recommendation.
    Threshold(Common),
    /// Elapsed-time dynamic program and finite-horizon schedule for a linear network.
    LinearPlan(Common),
    /// Runs the experiment named in the configuration.
    Example(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    ModelFree,
    ModelBased,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, value_enum)]
    experiment: Option<Preset>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "k")]
    epsilon: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Example1,
    Example2,
    Example3,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, self.experiment) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => ExperimentConfig::preset(match p {
                Preset::Example1 => ExperimentId::Example1,
                Preset::Example2 => ExperimentId::Example2,
                Preset::Example3 => ExperimentId::Example3,
            }),
            (None, None) => return Err(CliError::Config("pass --config <file> or --experiment <name>".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = Some(e);
            cfg.k = None;
        }
        if let Some(k) = self.k {
            cfg.k = Some(k);
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn artifacts(cfg: &ExperimentConfig, command: &str) -> Result<Option<Artifacts>, CliError> {
    cfg.out.as_deref().map(|dir| Artifacts::create(dir, cfg, command)).transpose()
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("JSON output"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Plan(common) => {
            let cfg = common.resolve()?;
            let setup = chain_setup(&cfg)?;
            let k = resolve_k(&cfg, &setup)?;
            let planned = plan(&setup, k)?;
            let out = artifacts(&cfg, "plan")?;
            if let Some(out) = &out {
                out.write("value_table.csv", |w| Ok(planned.table.write_csv(w)?))?;
                out.write("strategy.csv", |w| Ok(planned.strategy.write_csv(&setup.space, w)?))?;
            }
            let x0 = setup.initial();
            print(json!({
                "k": k,
                "atoms": setup.space.len(),
                "iterations": planned.table.iterations(),
                "initial_value": planned.table.value(x0, 0),
                "seconds": planned.seconds,
            }));
        }
        Command::Learn { common, mode } => {
            let cfg = common.resolve()?;
            let setup = chain_setup(&cfg)?;
            let k = resolve_k(&cfg, &setup)?;
            let out = artifacts(&cfg, "learn")?;
            match mode {
                Mode::ModelFree => {
                    let model = setup.model();
                    let costs = datasched_core::planning::StepCostTable::compute(&model, k)?;
                    let probes = vec![PlanningState::new(setup.initial(), 0)];
                    let learned = learn_model_free(&cfg, &setup, &costs, probes.clone())?;
                    let summary = json!({
                        "seed": cfg.seed,
                        "sweeps": learned.sweeps,
                        "last_drift": learned.last_drift,
                        "budget_exhausted": learned.budget_exhausted,
                        "initial_value": learned.table.min_q(setup.initial(), 0),
                    });
                    if let Some(out) = &out {
                        out.write("q_table.csv", |w| Ok(learned.table.write_csv(w)?))?;
                        out.write("learning_curve.csv", |w| Ok(learned.write_curve_csv(&probes, w)?))?;
                        let greedy = Strategy::from_fn(setup.space.len(), k, |x, y| learned.table.greedy(x, y));
                        out.write("strategy.csv", |w| Ok(greedy.write_csv(&setup.space, w)?))?;
                        out.write_json("q_table.json", &summary)?;
                    }
                    print(summary);
                }
                Mode::ModelBased => {
                    let learned = learn_model_based(&cfg, &setup, k)?;
                    if let Some(out) = &out {
                        out.write("value_table.csv", |w| Ok(learned.plan.table.write_csv(w)?))?;
                        out.write("strategy.csv", |w| Ok(learned.plan.strategy.write_csv(&setup.space, w)?))?;
                    }
                    let rows: Vec<Vec<f64>> =
                        learned.local_estimate.row_iter().map(|r| r.iter().copied().collect()).collect();
                    print(json!({
                        "local_kernel_estimate": rows,
                        "q_estimate": learned.q_estimate,
                        "initial_value": learned.plan.table.value(setup.initial(), 0),
                    }));
                }
            }
        }
        Command::Simulate { common, strategy } => {
            let cfg = common.resolve()?;
            let setup = chain_setup(&cfg)?;
            let k = resolve_k(&cfg, &setup)?;
            let planned = plan(&setup, k)?;
            let path = strategy.or_else(|| cfg.simulation.strategy.clone());
            let chosen = match &path {
                Some(p) => {
                    let file = std::fs::File::open(p)
                        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                    Strategy::read_csv(setup.space.len(), std::io::BufReader::new(file))?
                }
                None => planned.strategy.clone(),
            };
            let report = simulate(&cfg, &setup, &chosen, cfg.simulation.paths)?;
            let check = Consistency::new(
                planned.table.value(setup.initial(), 0),
                &report,
                truncation_bound(setup.gamma, k, setup.c_max()),
            );
            let summary = json!({
                "mean": report.mean,
                "std_err": report.std_err,
                "paths": report.paths,
                "horizon": report.horizon,
                "tail_bound": report.tail_bound,
                "dp_value": check.dp_value,
                "consistent_with_dp": check.consistent,
            });
            if let Some(out) = artifacts(&cfg, "simulate")? {
                out.write_json("simulation.json", &summary)?;
            }
            print(summary);
        }
        Command::Threshold(common) => {
            let cfg = common.resolve()?;
            let setup = chain_setup(&cfg)?;
            let report = run_threshold(&cfg, &setup)?;
            if let Some(out) = artifacts(&cfg, "threshold")? {
                out.write_json("threshold.json", &report)?;
            }
            print(serde_json::to_value(&report)?);
        }
        Command::LinearPlan(common) => {
            let cfg = common.resolve()?;
            let out = artifacts(&cfg, "linear-plan")?;
            let result = run_linear_plan(&cfg, out.as_ref())?;
            print(json!({
                "threshold": result.solution.threshold(),
                "value": result.solution.value(0),
                "stable": result.model.is_stable(),
                "schedule": result.schedule.as_ref().map(|s| s.actions.iter().map(|a| a.index()).collect::<Vec<_>>()),
                "schedule_objective": result.schedule.as_ref().map(|s| s.objective),
            }));
        }
        Command::Example(common) => {
            let cfg = common.resolve()?;
            let out = artifacts(&cfg, "example")?;
            let value = match cfg.experiment {
                ExperimentId::Example1 => serde_json::to_value(run_example1(&cfg, out.as_ref())?)?,
                ExperimentId::Example2 => {
                    let mut v = serde_json::to_value(run_example2(&cfg, out.as_ref())?)?;
                    // the full grids are in the CSV artifacts
                    v.as_object_mut().map(|o| o.remove("panels"));
                    v
                }
                ExperimentId::Example3 => serde_json::to_value(run_example3(&cfg, out.as_ref())?)?,
                ExperimentId::Custom => {
                    if cfg.linear.is_some() {
                        let r = run_linear_plan(&cfg, out.as_ref())?;
                        json!({ "threshold": r.solution.threshold(), "value": r.solution.value(0) })
                    } else {
                        let setup = chain_setup(&cfg)?;
                        let k = resolve_k(&cfg, &setup)?;
                        let planned = plan(&setup, k)?;
                        if let Some(out) = &out {
                            out.write("value_table.csv", |w| Ok(planned.table.write_csv(w)?))?;
                            out.write("strategy.csv", |w| Ok(planned.strategy.write_csv(&setup.space, w)?))?;
                        }
                        json!({ "k": k, "initial_value": planned.table.value(setup.initial(), 0) })
                    }
                }
            };
            print(value);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
