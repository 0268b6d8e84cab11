//! Model builders and drivers for the shipped experiments and custom runs.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use datasched_core::asymptotics::{
    certainty_threshold, estimate_lipschitz_constants, estimator_only_monte_carlo, recommend_estimate_only,
};
use datasched_core::chain::{
    build_kernel_exact, local_kernel_from_noise, EmpiricalDistribution, EmpiricalSpace, LocalKernel, NoisePmf,
    StateSpace, TransitionKernel,
};
use datasched_core::learning::{
    train_synchronized, CountModel, LearningRate, TrainOptions, TrainingOutcome, VirtualMdpConfig,
};
use datasched_core::linear::{
    complete_graph, estimator_only_cost, finite_horizon_schedule, spectral_vectorize, star_graph,
    y_space_value_iteration, ElapsedCostTable, ElapsedTimeSolution, GraphSpec, LinearNetworkModel,
    ObservationModel, Schedule,
};
use datasched_core::planning::{
    cost_bound, extract_strategy, truncation_index, value_iteration_with_costs, CostModel, Estimator,
    InfinitePopulationEstimator, KlFeeCost, LastObservationEstimator, MapEstimator, MeanEstimator, PlanningModel,
    QuadraticFeeCost, StepCostTable, Strategy, SupNormFeeCost, ValueIterationOptions, ValueTable, WeightedAbsCost,
};
use datasched_core::simulation::{
    evaluate_linear_strategy, evaluate_strategy, horizon_for_tail, read_trace_csv, ChainWorld, ChainWorldSpec,
    EvaluationReport, FunctionDynamics, KernelDynamics, KernelEstimates, LoggedEnvironment, ModeNoise,
    ModelEnvironment, NodeDynamics, NoiseFamily, SamplingPolicy,
};
use datasched_core::{Action, PlanningState};
use log::info;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::artifacts::Artifacts;
use crate::config::{
    ChainParams, CostKind, EstimatorKind, Example1Params, Example3Params, ExperimentConfig, ExperimentId,
    GraphSource, LinearParams, RateKind,
};
use crate::CliError;

const DEFAULT_EPSILON: f64 = 1e-3;

/// A finite-state network ready for planning, learning and simulation.
pub struct ChainSetup {
    pub space: Arc<EmpiricalSpace>,
    pub local: LocalKernel,
    pub kernel: TransitionKernel,
    pub cost: Box<dyn CostModel>,
    pub estimator: Box<dyn Estimator>,
    pub dynamics: Arc<dyn NodeDynamics>,
    pub q: f64,
    pub gamma: f64,
    pub fee: f64,
    pub anchor: usize,
    pub initial_nodes: Vec<usize>,
}

impl ChainSetup {
    pub fn model(&self) -> PlanningModel<'_> {
        PlanningModel {
            kernel: &self.kernel,
            cost: self.cost.as_ref(),
            estimator: self.estimator.as_ref(),
            q: self.q,
            gamma: self.gamma,
        }
    }

    pub fn world(&self) -> ChainWorldSpec {
        ChainWorldSpec {
            space: self.space.clone(),
            dynamics: self.dynamics.clone(),
            initial_nodes: self.initial_nodes.clone(),
            q: self.q,
            delay: 0,
        }
    }

    /// Atom index of the initial node configuration.
    pub fn initial(&self) -> usize {
        let atom = EmpiricalDistribution::from_node_states(&self.initial_nodes, self.space.dim());
        self.space.index_of(&atom).expect("initial nodes form an atom")
    }

    pub fn c_max(&self) -> f64 {
        cost_bound(self.cost.as_ref(), &self.space)
    }
}

fn point_mass_index(space: &EmpiricalSpace, state: usize) -> Result<usize, CliError> {
    space
        .index_of(&EmpiricalDistribution::point_mass(space.dim(), state, space.population()))
        .ok_or_else(|| CliError::Config(format!("state {state} has no atom")))
}

/// Battery level: one node on `{-(d_s+1) .. d_s+1}`, identity estimator,
/// cost `|s| |s - s_hat| + ell a`.
pub fn example1_setup(p: &Example1Params) -> Result<ChainSetup, CliError> {
    let bound = p.d_s + p.d_w;
    let states = StateSpace::integer_range(-bound, bound)?;
    let noise = NoisePmf::new(
        vec![-1.0, 0.0, 1.0],
        vec![p.p_d * (1.0 - p.p_g), p.p_g * p.p_d + (1.0 - p.p_g) * (1.0 - p.p_d), p.p_g * (1.0 - p.p_d)],
    )?;
    let (d_s, s_max, s_min) = (p.d_s as f64, p.s_max as f64, p.s_min as f64);
    let f = move |s: f64, w: f64| {
        if s > d_s {
            s_max
        } else if s < -d_s {
            s_min
        } else {
            s + w
        }
    };
    let local = local_kernel_from_noise(&states, &noise, f)?;
    let space = Arc::new(EmpiricalSpace::new(1, &states)?);
    let kernel = build_kernel_exact(&local, space.clone())?;
    let start = states
        .index_of(p.initial as f64)
        .ok_or_else(|| CliError::Config(format!("example1.initial {} outside the state space", p.initial)))?;
    let anchor = point_mass_index(&space, start)?;
    Ok(ChainSetup {
        dynamics: Arc::new(FunctionDynamics::new(states.clone(), noise, move |s, _, w| f(s, w))),
        cost: Box::new(WeightedAbsCost::new(states.labels().to_vec(), p.ell)),
        estimator: Box::new(LastObservationEstimator),
        space,
        local,
        kernel,
        q: p.q,
        gamma: p.gamma,
        fee: p.ell,
        anchor,
        initial_nodes: vec![start],
    })
}

/// Two candidates; state 0 is `A`. MAP estimator and KL cost.
pub fn example3_setup(p: &Example3Params) -> Result<ChainSetup, CliError> {
    let states = StateSpace::new(vec![1.0, 0.0])?;
    let local = LocalKernel::decoupled(DMatrix::from_row_slice(2, 2, &[p.p_aa, 1.0 - p.p_aa, 1.0 - p.p_bb, p.p_bb]))?;
    let space = Arc::new(EmpiricalSpace::new(p.n, &states)?);
    let kernel = build_kernel_exact(&local, space.clone())?;
    let anchor = space.nearest_to_uniform();
    let initial_nodes = initial_nodes_for(&space.atom(anchor).counts().to_vec());
    Ok(ChainSetup {
        dynamics: Arc::new(KernelDynamics(local.clone())),
        cost: Box::new(KlFeeCost::new(p.n, p.ell)),
        estimator: Box::new(MapEstimator),
        space,
        local,
        kernel,
        q: p.q,
        gamma: p.gamma,
        fee: p.ell,
        anchor,
        initial_nodes,
    })
}

/// Atom index of the configuration with `votes_for_a` nodes in state `A`.
pub fn example3_atom(setup: &ChainSetup, votes_for_a: u32) -> Option<usize> {
    let n = setup.space.population();
    setup.space.index_of(&EmpiricalDistribution::new(vec![votes_for_a, n.checked_sub(votes_for_a)?]).ok()?)
}

fn initial_nodes_for(counts: &[u32]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(s, &c)| std::iter::repeat_n(s, c as usize)).collect()
}

pub fn custom_chain_setup(c: &ChainParams) -> Result<ChainSetup, CliError> {
    let states = StateSpace::new(c.states.clone())?;
    let d = states.len();
    let rows: Vec<f64> = c.local_kernel.iter().flatten().copied().collect();
    if rows.len() != d * d {
        return Err(CliError::Config("chain.local_kernel must be square".into()));
    }
    let local = LocalKernel::decoupled(DMatrix::from_row_slice(d, d, &rows))?;
    let space = Arc::new(EmpiricalSpace::new(c.population, &states)?);
    let kernel = build_kernel_exact(&local, space.clone())?;
    let cost: Box<dyn CostModel> = match c.cost {
        CostKind::WeightedAbs => Box::new(WeightedAbsCost::new(states.labels().to_vec(), c.fee)),
        CostKind::Kl => Box::new(KlFeeCost::new(c.population, c.fee)),
        CostKind::SupNorm => Box::new(SupNormFeeCost::new(c.fee)),
        CostKind::Quadratic => Box::new(QuadraticFeeCost::new(c.weight, c.fee)),
    };
    let estimator: Box<dyn Estimator> = match c.estimator {
        EstimatorKind::Map => Box::new(MapEstimator),
        EstimatorKind::Mean => Box::new(MeanEstimator),
        EstimatorKind::Identity => Box::new(LastObservationEstimator),
        EstimatorKind::InfinitePopulation => Box::new(InfinitePopulationEstimator::new(local.clone())),
    };
    let initial = match &c.initial {
        Some(counts) => {
            let atom = EmpiricalDistribution::new(counts.clone())?;
            space.index_of(&atom).ok_or_else(|| CliError::Config("chain.initial is not an atom of M(n)".into()))?
        }
        None => space.nearest_to_uniform(),
    };
    let anchor = c.anchor.unwrap_or(initial);
    if anchor >= space.len() {
        return Err(CliError::Config(format!("chain.anchor {anchor} out of range")));
    }
    let initial_nodes = initial_nodes_for(space.atom(initial).counts());
    Ok(ChainSetup {
        dynamics: Arc::new(KernelDynamics(local.clone())),
        cost,
        estimator,
        space,
        local,
        kernel,
        q: c.q,
        gamma: c.gamma,
        fee: c.fee,
        anchor,
        initial_nodes,
    })
}

/// The chain model selected by the configuration.
pub fn chain_setup(cfg: &ExperimentConfig) -> Result<ChainSetup, CliError> {
    match cfg.experiment {
        ExperimentId::Example1 => example1_setup(&cfg.example1),
        ExperimentId::Example3 => example3_setup(&cfg.example3),
        ExperimentId::Custom => match &cfg.chain {
            Some(c) => custom_chain_setup(c),
            None => Err(CliError::Config("custom runs need a [chain] section".into())),
        },
        ExperimentId::Example2 => Err(CliError::Config("example2 is a linear model; use linear-plan or example".into())),
    }
}

/// `k` from the configuration, the experiment default, or `epsilon`.
pub fn resolve_k(cfg: &ExperimentConfig, setup: &ChainSetup) -> Result<usize, CliError> {
    if let Some(k) = cfg.k {
        return Ok(k);
    }
    if cfg.experiment == ExperimentId::Example3 && cfg.epsilon.is_none() {
        return Ok(cfg.example3.k);
    }
    let eps = cfg.epsilon.unwrap_or(DEFAULT_EPSILON);
    Ok(truncation_index(eps, setup.gamma, setup.c_max())?)
}

pub struct PlanOutcome {
    pub costs: StepCostTable,
    pub table: ValueTable,
    pub strategy: Strategy,
    pub seconds: f64,
}

pub fn plan(setup: &ChainSetup, k: usize) -> Result<PlanOutcome, CliError> {
    plan_model(&setup.model(), setup.anchor, k)
}

pub fn plan_model(model: &PlanningModel<'_>, anchor: usize, k: usize) -> Result<PlanOutcome, CliError> {
    let start = Instant::now();
    let costs = StepCostTable::compute(model, k)?;
    let opts = ValueIterationOptions { anchor: Some(anchor), ..Default::default() };
    let table = value_iteration_with_costs(model, &costs, &opts)?;
    let strategy = extract_strategy(&table);
    let seconds = start.elapsed().as_secs_f64();
    info!("planned {} atoms x {} elapsed times in {seconds:.1}s ({} sweeps)", costs.atoms(), k + 1, table.iterations());
    Ok(PlanOutcome { costs, table, strategy, seconds })
}

pub fn learning_rate(cfg: &ExperimentConfig, gamma: f64) -> LearningRate {
    match cfg.learning.rate {
        RateKind::Harmonic => LearningRate::Harmonic,
        RateKind::Rescaled => LearningRate::Rescaled { kappa: cfg.learning.kappa.unwrap_or(1.0 / (1.0 - gamma)) },
        RateKind::Polynomial => LearningRate::Polynomial { exponent: cfg.learning.exponent },
    }
}

fn train_options(cfg: &ExperimentConfig, gamma: f64, probes: Vec<PlanningState>) -> TrainOptions {
    TrainOptions {
        sweeps: cfg.learning.sweeps,
        rate: learning_rate(cfg, gamma),
        drift_threshold: cfg.learning.drift_threshold,
        drift_window: cfg.learning.drift_window,
        probes,
        record_every: cfg.learning.record_every,
    }
}

/// Model-free synchronized Q-learning on samples from the true model.
pub fn learn_model_free(
    cfg: &ExperimentConfig,
    setup: &ChainSetup,
    costs: &StepCostTable,
    probes: Vec<PlanningState>,
) -> Result<TrainingOutcome, CliError> {
    let vcfg = VirtualMdpConfig { k: costs.k(), anchor: setup.anchor, q: setup.q, gamma: setup.gamma };
    let opts = train_options(cfg, setup.gamma, probes);
    let outcome = match &cfg.learning.trace {
        Some(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| CliError::Config(format!("cannot read trace {}: {e}", path.display())))?;
            let records = read_trace_csv(std::io::BufReader::new(file))?;
            let env = LoggedEnvironment::from_trace(&records, setup.space.len(), costs.k())?;
            info!("offline learning from {} logged steps ({:.0}% coverage)", records.len(), 100.0 * env.coverage());
            train_synchronized(&env, &vcfg, &opts, cfg.seed)?
        }
        None => {
            let env = ModelEnvironment::new(&setup.kernel, costs, setup.cost.as_ref(), setup.q)?;
            train_synchronized(&env, &vcfg, &opts, cfg.seed)?
        }
    };
    Ok(outcome)
}

/// Estimated node kernel and credibility, then planning on the estimate.
pub struct ModelBasedOutcome {
    pub local_estimate: DMatrix<f64>,
    pub q_estimate: f64,
    pub plan: PlanOutcome,
}

pub fn learn_model_based(cfg: &ExperimentConfig, setup: &ChainSetup, k: usize) -> Result<ModelBasedOutcome, CliError> {
    if !setup.local.is_decoupled() {
        return Err(CliError::Config("model-based learning needs decoupled node dynamics".into()));
    }
    let mut world = ChainWorld::new(setup.world(), cfg.seed, 0)?;
    let mut counts = CountModel::new(setup.space.dim());
    for _ in 0..cfg.learning.model_samples {
        let before = world.nodes().to_vec();
        let obs = world.step(Action::Collect)?;
        for (&s, &t) in before.iter().zip(world.nodes()) {
            counts.observe_transition(s, t);
        }
        counts.observe_collection(!obs.is_blank());
    }
    let local_estimate = counts.transition_estimate();
    let q_estimate = counts.credibility_estimate().unwrap_or(0.0);
    let local = LocalKernel::decoupled(local_estimate.clone())?;
    let kernel = build_kernel_exact(&local, setup.space.clone())?;
    // the mean-field estimator must run on the estimated kernel too
    let refit = InfinitePopulationEstimator::new(local);
    let estimator: &dyn Estimator =
        if setup.estimator.name() == refit.name() { &refit } else { setup.estimator.as_ref() };
    let model = PlanningModel { kernel: &kernel, cost: setup.cost.as_ref(), estimator, q: q_estimate, gamma: setup.gamma };
    let plan = plan_model(&model, setup.anchor, k)?;
    Ok(ModelBasedOutcome { local_estimate, q_estimate, plan })
}

/// Simulated discounted cost of `strategy` from the initial configuration.
pub fn simulate(
    cfg: &ExperimentConfig,
    setup: &ChainSetup,
    strategy: &Strategy,
    paths: usize,
) -> Result<EvaluationReport, CliError> {
    let horizon = match cfg.simulation.horizon {
        Some(h) => h,
        None => horizon_for_tail(setup.gamma, cfg.simulation.relative_tail)?,
    };
    let estimates = KernelEstimates::new(&setup.kernel, setup.estimator.as_ref());
    let policy = SamplingPolicy::Table(strategy.clone());
    Ok(evaluate_strategy(&setup.world(), &policy, &estimates, setup.cost.as_ref(), setup.gamma, horizon, paths, cfg.seed)?)
}

/// Monte-Carlo cost against the planned value at the initial state.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Consistency {
    pub dp_value: f64,
    pub simulated: f64,
    pub std_err: f64,
    pub tail_bound: f64,
    pub truncation_bound: f64,
    pub consistent: bool,
}

impl Consistency {
    pub fn new(dp_value: f64, report: &EvaluationReport, truncation_bound: f64) -> Self {
        let gap = (dp_value - report.mean).abs();
        Self {
            dp_value,
            simulated: report.mean,
            std_err: report.std_err,
            tail_bound: report.tail_bound,
            truncation_bound,
            consistent: gap <= 3.0 * report.std_err + report.tail_bound + truncation_bound,
        }
    }
}

/// `2 gamma^k c_max / (1 - gamma)`.
pub fn truncation_bound(gamma: f64, k: usize, c_max: f64) -> f64 {
    2.0 * gamma.powi(k as i32) * c_max / (1.0 - gamma)
}

#[derive(Debug, Clone, Serialize)]
pub struct Example1Report {
    pub k: usize,
    pub probe_elapsed: usize,
    pub probe_value: f64,
    pub iterations: usize,
    pub plan_seconds: f64,
    /// First-collect elapsed time per battery level.
    pub thresholds: Vec<(i64, Option<usize>)>,
    pub mirror_symmetric: bool,
    pub consistency: Option<Consistency>,
    pub learned_probe: Option<f64>,
}

/// Reflection check `a(s, y) == a(-s, y)` on a strategy over a symmetric
/// integer state space with one node.
pub fn mirror_symmetric(setup: &ChainSetup, strategy: &Strategy) -> bool {
    let d = setup.space.dim();
    (0..=strategy.k()).all(|y| {
        (0..d).all(|s| {
            let (x, mx) = (point_mass_index(&setup.space, s), point_mass_index(&setup.space, d - 1 - s));
            matches!((x, mx), (Ok(x), Ok(mx)) if strategy.action(x, y) == strategy.action(mx, y))
        })
    })
}

pub fn run_example1(cfg: &ExperimentConfig, out: Option<&Artifacts>) -> Result<Example1Report, CliError> {
    let setup = example1_setup(&cfg.example1)?;
    let k = resolve_k(cfg, &setup)?;
    let planned = plan(&setup, k)?;
    let x0 = setup.initial();
    let probe = cfg.example1.probe_elapsed.min(k);
    let labels = setup.space.dim();
    let thresholds = (0..labels)
        .map(|s| {
            let x = point_mass_index(&setup.space, s)?;
            Ok((s as i64 - (labels as i64 - 1) / 2, planned.strategy.first_collect(x)))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let consistency = if cfg.simulation.paths > 0 {
        let report = simulate(cfg, &setup, &planned.strategy, cfg.simulation.paths)?;
        Some(Consistency::new(planned.table.value(x0, 0), &report, truncation_bound(setup.gamma, k, setup.c_max())))
    } else {
        None
    };
    let mut learned_probe = None;
    if let Some(out) = out {
        out.write("value_table.csv", |w| Ok(planned.table.write_csv(w)?))?;
        out.write("strategy.csv", |w| Ok(planned.strategy.write_csv(&setup.space, w)?))?;
        out.write("thresholds.csv", |w| {
            writeln!(w, "s,first_collect_y")?;
            for (s, t) in &thresholds {
                writeln!(w, "{s},{}", t.map(|v| v.to_string()).unwrap_or_default())?;
            }
            Ok(())
        })?;
    }
    if cfg.learning.sweeps > 0 {
        let probes = vec![PlanningState::new(x0, probe)];
        let learned = learn_model_free(cfg, &setup, &planned.costs, probes.clone())?;
        learned_probe = Some(learned.table.min_q(x0, probe));
        if let Some(out) = out {
            out.write("learning_curve.csv", |w| Ok(learned.write_curve_csv(&probes, w)?))?;
            out.write("q_table.csv", |w| Ok(learned.table.write_csv(w)?))?;
        }
    }
    let report = Example1Report {
        k,
        probe_elapsed: probe,
        probe_value: planned.table.value(x0, probe),
        iterations: planned.table.iterations(),
        plan_seconds: planned.seconds,
        thresholds,
        mirror_symmetric: mirror_symmetric(&setup, &planned.strategy),
        consistency,
        learned_probe,
    };
    if let Some(out) = out {
        out.write_json("report.json", &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Example3Report {
    pub k: usize,
    /// `(votes for A, first-collect elapsed time)` per probe.
    pub probes: Vec<(u32, Option<usize>)>,
    pub thresholds: Vec<(u32, Option<usize>)>,
    pub plan_seconds: f64,
    pub consistency: Option<Consistency>,
}

pub fn run_example3(cfg: &ExperimentConfig, out: Option<&Artifacts>) -> Result<Example3Report, CliError> {
    let setup = example3_setup(&cfg.example3)?;
    let k = resolve_k(cfg, &setup)?;
    let planned = plan(&setup, k)?;
    let n = cfg.example3.n;
    let first = |votes: u32| -> Result<Option<usize>, CliError> {
        let x = example3_atom(&setup, votes).ok_or_else(|| CliError::Config(format!("no atom with {votes} votes")))?;
        Ok(planned.strategy.first_collect(x))
    };
    let thresholds = (0..=n).map(|v| Ok((v, first(v)?))).collect::<Result<Vec<_>, CliError>>()?;
    let probes = cfg.example3.probes.iter().map(|&v| Ok((v, first(v)?))).collect::<Result<Vec<_>, CliError>>()?;
    let consistency = if cfg.simulation.paths > 0 {
        let report = simulate(cfg, &setup, &planned.strategy, cfg.simulation.paths)?;
        let x0 = setup.initial();
        Some(Consistency::new(planned.table.value(x0, 0), &report, truncation_bound(setup.gamma, k, setup.c_max())))
    } else {
        None
    };
    let report = Example3Report { k, probes, thresholds, plan_seconds: planned.seconds, consistency };
    if let Some(out) = out {
        out.write("value_table.csv", |w| Ok(planned.table.write_csv(w)?))?;
        out.write("strategy.csv", |w| Ok(planned.strategy.write_csv(&setup.space, w)?))?;
        out.write("thresholds.csv", |w| {
            writeln!(w, "votes_for_a,first_collect_y")?;
            for (v, t) in &report.thresholds {
                writeln!(w, "{v},{}", t.map(|v| v.to_string()).unwrap_or_default())?;
            }
            Ok(())
        })?;
        out.write_json("report.json", &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Complete,
    Star,
}

/// Dominant-mode model of a complete or star graph with
/// `alpha = (0, a / (n - 1))`.
pub fn graph_mode_model(
    topology: Topology,
    n: usize,
    a: f64,
    variance: f64,
    q: f64,
    gamma: f64,
    ell: f64,
) -> Result<(LinearNetworkModel, DMatrix<f64>), CliError> {
    if n < 2 {
        return Err(CliError::Config("graphs need at least two nodes".into()));
    }
    let adjacency = match topology {
        Topology::Complete => complete_graph(n),
        Topology::Star => star_graph(n),
    };
    let g = GraphSpec::new(adjacency, vec![0.0, a / (n as f64 - 1.0)], 1)?;
    let modes = spectral_vectorize(&g)?;
    let weights = DMatrix::from_fn(n, 1, |i, _| modes[0].weights[i]);
    Ok((LinearNetworkModel::from_modes(&modes, variance, q, gamma, ell)?, weights))
}

/// Strategies over a one-parameter family for one topology.
#[derive(Debug, Clone, Serialize)]
pub struct Panel {
    pub topology: Topology,
    pub axis: &'static str,
    pub values: Vec<f64>,
    /// `collect[i][y]` for parameter `values[i]`.
    pub collect: Vec<Vec<bool>>,
    pub thresholds: Vec<Option<usize>>,
    pub estimator_only: Vec<f64>,
}

impl Panel {
    /// Smallest grid value beyond which the strategy never collects.
    pub fn certainty_cutoff(&self) -> Option<f64> {
        let last_collect = self.thresholds.iter().rposition(Option::is_some)?;
        self.values.get(last_collect + 1).copied()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Example2Report {
    pub panels: Vec<Panel>,
    /// Collect regions grow with the noise variance on the complete graph.
    pub complete_monotone_in_variance: bool,
    /// Complete-graph collect region contains the star graph's, `n >= 3`.
    pub complete_contains_star: bool,
    pub complete_cutoff_n: Option<f64>,
    pub star_cutoff_n: Option<f64>,
    /// Estimator-only cost is larger on the complete graph for every `n >= 3`.
    pub complete_estimator_only_larger: bool,
    pub zero_noise_never_collects: bool,
    pub consistency: Option<Consistency>,
}

fn solve_linear(model: &LinearNetworkModel, k: usize) -> Result<ElapsedTimeSolution, CliError> {
    Ok(y_space_value_iteration(&ElapsedCostTable::compute(model, k), model.q, model.gamma, 1e-10)?)
}

fn panel(
    cfg: &ExperimentConfig,
    topology: Topology,
    axis: &'static str,
    values: Vec<f64>,
    build: impl Fn(f64) -> Result<(LinearNetworkModel, DMatrix<f64>), CliError>,
) -> Result<Panel, CliError> {
    let k = cfg.example2.k;
    let mut collect = Vec::new();
    let mut thresholds = Vec::new();
    let mut estimator_only = Vec::new();
    for &v in &values {
        let (model, _) = build(v)?;
        let sol = solve_linear(&model, k)?;
        collect.push(sol.strategy().iter().map(|a| a.is_collect()).collect());
        thresholds.push(sol.threshold());
        estimator_only.push(estimator_only_cost(&model));
    }
    Ok(Panel { topology, axis, values, collect, thresholds, estimator_only })
}

fn contains(big: &[bool], small: &[bool]) -> bool {
    big.iter().zip(small).all(|(b, s)| *b || !*s)
}

pub fn run_example2(cfg: &ExperimentConfig, out: Option<&Artifacts>) -> Result<Example2Report, CliError> {
    let p = &cfg.example2;
    let by_n = &p.by_n;
    let by_v = &p.by_variance;
    let n_values: Vec<f64> = by_n.n_values.iter().map(|&n| n as f64).collect();
    let mut panels = Vec::new();
    for topology in [Topology::Complete, Topology::Star] {
        panels.push(panel(cfg, topology, "n", n_values.clone(), |n| {
            graph_mode_model(topology, n as usize, by_n.a, by_n.variance, p.q, p.gamma, by_n.ell)
        })?);
        panels.push(panel(cfg, topology, "variance", by_v.variances.clone(), |v| {
            graph_mode_model(topology, by_v.n, by_v.a, v, p.q, p.gamma, by_v.ell)
        })?);
    }
    let (cn, cv, sn, sv) = (&panels[0], &panels[1], &panels[2], &panels[3]);
    let mut order: Vec<usize> = (0..cv.values.len()).collect();
    order.sort_by(|&i, &j| cv.values[i].total_cmp(&cv.values[j]));
    let complete_monotone_in_variance = order.windows(2).all(|w| contains(&cv.collect[w[1]], &cv.collect[w[0]]));
    let big_enough = |n: f64| n >= 3.0;
    let complete_contains_star = cn
        .values
        .iter()
        .enumerate()
        .filter(|(_, &n)| big_enough(n))
        .all(|(i, _)| contains(&cn.collect[i], &sn.collect[i]))
        && (by_v.n < 3 || (0..cv.values.len()).all(|i| contains(&cv.collect[i], &sv.collect[i])));
    let complete_estimator_only_larger = cn
        .values
        .iter()
        .enumerate()
        .filter(|(_, &n)| big_enough(n))
        .all(|(i, _)| cn.estimator_only[i] > sn.estimator_only[i]);
    let zero_noise_never_collects = [Topology::Complete, Topology::Star].iter().all(|&t| {
        [(by_n.n_values.first().copied().unwrap_or(5), by_n.a, by_n.ell), (by_v.n, by_v.a, by_v.ell)].iter().all(
            |&(n, a, ell)| {
                graph_mode_model(t, n, a, 0.0, p.q, p.gamma, ell)
                    .and_then(|(m, _)| solve_linear(&m, p.k))
                    .map(|s| s.threshold().is_none())
                    .unwrap_or(false)
            },
        )
    });

    let consistency = if cfg.simulation.paths > 0 {
        let (model, weights) = graph_mode_model(Topology::Complete, by_v.n, by_v.a, 6.0, p.q, p.gamma, by_v.ell)?;
        let sol = solve_linear(&model, p.k)?;
        let strategy = Strategy::from_fn(1, p.k, |_, y| sol.action(y));
        let horizon = match cfg.simulation.horizon {
            Some(h) => h,
            None => horizon_for_tail(p.gamma, cfg.simulation.relative_tail)?,
        };
        let noise = ModeNoise::Nodes { family: NoiseFamily::Gaussian, variance: 6.0, weights };
        let report = evaluate_linear_strategy(
            &model,
            &noise,
            &DVector::zeros(1),
            &SamplingPolicy::Table(strategy),
            horizon,
            cfg.simulation.paths,
            cfg.seed,
        )?;
        let c_max = ElapsedCostTable::compute(&model, p.k).c_max();
        Some(Consistency::new(sol.value(0), &report, truncation_bound(p.gamma, p.k, c_max)))
    } else {
        None
    };

    let report = Example2Report {
        complete_cutoff_n: cn.certainty_cutoff(),
        star_cutoff_n: sn.certainty_cutoff(),
        panels,
        complete_monotone_in_variance,
        complete_contains_star,
        complete_estimator_only_larger,
        zero_noise_never_collects,
        consistency,
    };
    if let Some(out) = out {
        for panel in &report.panels {
            let name = format!("strategy_{}_by_{}.csv", serde_json::to_value(panel.topology).unwrap().as_str().unwrap(), panel.axis);
            out.write(&name, |w| {
                writeln!(w, "{},y,action", panel.axis)?;
                for (v, row) in panel.values.iter().zip(&panel.collect) {
                    for (y, c) in row.iter().enumerate() {
                        writeln!(w, "{v},{y},{}", u8::from(*c))?;
                    }
                }
                Ok(())
            })?;
        }
        out.write_json("report.json", &report)?;
    }
    Ok(report)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("{what} must be a nonempty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Linear model from a `[linear]` section, with the node weights when it
/// comes from a graph.
pub fn linear_setup(l: &LinearParams) -> Result<(LinearNetworkModel, Option<DMatrix<f64>>), CliError> {
    if let Some(g) = &l.graph {
        let adjacency = match &g.source {
            GraphSource::Complete { n } => complete_graph(*n),
            GraphSource::Star { n } => star_graph(*n),
            GraphSource::DenseCsv { path } => GraphSpec::read_dense_csv(open(path)?)?,
            GraphSource::EdgeCsv { path, n } => GraphSpec::read_edge_list_csv(*n, open(path)?)?,
        };
        let spec = GraphSpec::new(adjacency, g.alpha.clone(), g.modes)?;
        let modes = spectral_vectorize(&spec)?;
        let n = spec.nodes();
        let weights = DMatrix::from_fn(n, modes.len(), |i, d| modes[d].weights[i]);
        let model = LinearNetworkModel::from_modes(&modes, g.node_variance, l.q, l.gamma, l.ell)?;
        return Ok((model, Some(weights)));
    }
    let a = matrix(l.a.as_deref().unwrap_or_default(), "linear.a")?;
    let s = matrix(l.sigma_w.as_deref().unwrap_or_default(), "linear.sigma_w")?;
    Ok((LinearNetworkModel::new(a, s, l.q, l.gamma, l.ell)?, None))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(std::io::BufReader::new(f))
}

pub struct LinearPlan {
    pub model: LinearNetworkModel,
    pub solution: ElapsedTimeSolution,
    pub schedule: Option<Schedule>,
}

pub fn run_linear_plan(cfg: &ExperimentConfig, out: Option<&Artifacts>) -> Result<LinearPlan, CliError> {
    let l = cfg.linear.as_ref().ok_or_else(|| CliError::Config("linear-plan needs a [linear] section".into()))?;
    let (model, _) = linear_setup(l)?;
    let costs = ElapsedCostTable::compute(&model, l.k);
    let solution = y_space_value_iteration(&costs, model.q, model.gamma, 1e-10)?;
    let schedule = match (&l.c, &l.sigma_xi, l.horizon) {
        (Some(c), Some(xi), Some(h)) => {
            let obs = ObservationModel { c: matrix(c, "linear.c")?, sigma_xi: matrix(xi, "linear.sigma_xi")? };
            Some(finite_horizon_schedule(&model, &obs, h)?)
        }
        (None, None, None) => None,
        _ => return Err(CliError::Config("the finite-horizon schedule needs c, sigma_xi and horizon".into())),
    };
    if let Some(out) = out {
        out.write("elapsed_strategy.csv", |w| {
            writeln!(w, "y,cost_estimate,cost_collect,V0,V1,action")?;
            for y in 0..=l.k {
                writeln!(
                    w,
                    "{y},{},{},{},{},{}",
                    costs.cost(y, Action::Estimate),
                    costs.cost(y, Action::Collect),
                    solution.v0[y],
                    solution.v1[y],
                    solution.action(y)
                )?;
            }
            Ok(())
        })?;
        if let Some(s) = &schedule {
            out.write("schedule.csv", |w| {
                writeln!(w, "t,action")?;
                for (t, a) in s.actions.iter().enumerate() {
                    writeln!(w, "{},{a}", t + 1)?;
                }
                Ok(())
            })?;
        }
    }
    Ok(LinearPlan { model, solution, schedule })
}

/// Certainty-threshold report.
#[derive(Debug, Clone, Serialize)]
pub struct ThresholdReport {
    pub n: u32,
    #[serde(rename = "K_c")]
    pub k_c: f64,
    #[serde(rename = "K_p")]
    pub k_p: f64,
    pub gamma: f64,
    #[serde(rename = "C_fit")]
    pub c_fit: f64,
    pub threshold: f64,
    pub collection_cost: f64,
    pub recommend_estimate_only: bool,
}

pub fn run_threshold(cfg: &ExperimentConfig, setup: &ChainSetup) -> Result<ThresholdReport, CliError> {
    let t = &cfg.threshold;
    let lip = estimate_lipschitz_constants(&setup.local, setup.cost.as_ref(), t.resolution)?;
    let initial = setup.space.atom(setup.initial()).clone();
    let mc = estimator_only_monte_carlo(&setup.local, setup.cost.as_ref(), &initial, setup.gamma, t.horizon, t.paths, cfg.seed)?;
    let n = setup.space.population();
    let threshold = certainty_threshold(lip.k_c, lip.k_p, setup.gamma, mc.c_fit / (n as f64).sqrt())?;
    let collection_cost = t.collection_cost.unwrap_or(setup.fee);
    Ok(ThresholdReport {
        n,
        k_c: lip.k_c,
        k_p: lip.k_p,
        gamma: setup.gamma,
        c_fit: mc.c_fit,
        threshold,
        collection_cost,
        recommend_estimate_only: recommend_estimate_only(threshold, collection_cost),
    })
}

