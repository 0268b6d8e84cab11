//! Closed-loop Monte-Carlo worlds.
//!
//! [`ChainWorld`] moves every node through its local dynamics and reports the
//! resulting empirical distribution; [`LinearWorld`] moves the mode vector of
//! a linear network. Both pass collected data through the Bernoulli
//! credibility channel and keep the decision maker's `(x, y)` bookkeeping.
//! [`ModelEnvironment`] and [`LoggedEnvironment`] feed the learners.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::chain::{
    sample_index, CumulativePmf, EmpiricalDistribution, EmpiricalSpace, LocalKernel, NoisePmf, StateSpace,
    TransitionKernel,
};
use crate::learning::{ExpectedEnvironment, SampleEnvironment};
use crate::linear::{kalman_like_update, LinearNetworkModel};
use crate::planning::{CostModel, EstimateInput, Estimator, StepCostTable, Strategy};
use crate::{stream_rng, Action, Error, Observation, PlanningState, Result, SimRng};

/// Per-node one-step dynamics `s' = f(s, m, w)`, on state indices.
pub trait NodeDynamics: Send + Sync {
    fn dim(&self) -> usize;

    fn step_node(&self, state: usize, m: &[f64], rng: &mut SimRng) -> Result<usize>;
}

type NodeFn = dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync;

/// Explicit `f(s, m, w)` on state labels with i.i.d. noise.
pub struct FunctionDynamics {
    states: StateSpace,
    noise: NoisePmf,
    f: Box<NodeFn>,
}

impl FunctionDynamics {
    pub fn new(states: StateSpace, noise: NoisePmf, f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { states, noise, f: Box::new(f) }
    }
}

impl NodeDynamics for FunctionDynamics {
    fn dim(&self) -> usize {
        self.states.len()
    }

    fn step_node(&self, state: usize, m: &[f64], rng: &mut SimRng) -> Result<usize> {
        let s = self.states.label(state);
        let w = self.noise.sample(rng);
        let out = (self.f)(s, m, w);
        self.states.index_of(out).ok_or(Error::DynamicsLeavesStateSpace { state: s, noise: w, output: out })
    }
}

/// Nodes drawn independently from a local kernel `T(. | s, m)`.
pub struct KernelDynamics(pub LocalKernel);

impl NodeDynamics for KernelDynamics {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn step_node(&self, state: usize, m: &[f64], rng: &mut SimRng) -> Result<usize> {
        let law = self.0.matrix_at(m)?;
        let row: Vec<f64> = law.row(state).iter().copied().collect();
        Ok(sample_index(&row, rng))
    }
}

/// Advances every node once with fresh noise and returns the new counts.
pub fn pathwise_step(
    dynamics: &dyn NodeDynamics,
    m: &EmpiricalDistribution,
    rng: &mut SimRng,
) -> Result<EmpiricalDistribution> {
    let p = m.probabilities();
    let mut next = vec![0u32; m.dim()];
    for (s, &c) in m.counts().iter().enumerate() {
        for _ in 0..c {
            next[dynamics.step_node(s, &p, rng)?] += 1;
        }
    }
    EmpiricalDistribution::new(next)
}

/// Everything needed to start chain paths.
#[derive(Clone)]
pub struct ChainWorldSpec {
    pub space: Arc<EmpiricalSpace>,
    pub dynamics: Arc<dyn NodeDynamics>,
    pub initial_nodes: Vec<usize>,
    pub q: f64,
    /// Fixed number of steps between a collection and its delivery.
    pub delay: usize,
}

/// Node-level finite-state network with a credibility channel.
pub struct ChainWorld {
    spec: ChainWorldSpec,
    nodes: Vec<usize>,
    m: usize,
    state: PlanningState,
    t: usize,
    pending: VecDeque<(usize, usize)>,
    noise_rng: SimRng,
    channel_rng: SimRng,
}

impl ChainWorld {
    /// World for path `path` of a seeded batch; `o_1 = m_1`.
    pub fn new(spec: ChainWorldSpec, seed: u64, path: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&spec.q) {
            return Err(Error::invalid(format!("credibility must lie in [0, 1], got {}", spec.q)));
        }
        if spec.initial_nodes.len() != spec.space.population() as usize {
            return Err(Error::DimensionMismatch {
                expected: spec.space.population() as usize,
                actual: spec.initial_nodes.len(),
            });
        }
        if spec.dynamics.dim() != spec.space.dim() || spec.initial_nodes.iter().any(|&s| s >= spec.space.dim()) {
            return Err(Error::invalid("node states and dynamics must match the state space"));
        }
        let nodes = spec.initial_nodes.clone();
        let m = Self::locate(&spec.space, &nodes)?;
        Ok(Self {
            spec,
            nodes,
            m,
            state: PlanningState::new(m, 0),
            t: 1,
            pending: VecDeque::new(),
            noise_rng: stream_rng(seed, 2 * path),
            channel_rng: stream_rng(seed, 2 * path + 1),
        })
    }

    fn locate(space: &EmpiricalSpace, nodes: &[usize]) -> Result<usize> {
        let atom = EmpiricalDistribution::from_node_states(nodes, space.dim());
        space.index_of(&atom).ok_or_else(|| Error::invalid("node states do not form an atom of M(n)"))
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Index of the current empirical distribution in `M(n)`.
    pub fn current(&self) -> usize {
        self.m
    }

    pub fn state(&self) -> PlanningState {
        self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn set_node_states(&mut self, nodes: Vec<usize>) -> Result<()> {
        if nodes.len() != self.nodes.len() {
            return Err(Error::DimensionMismatch { expected: self.nodes.len(), actual: nodes.len() });
        }
        self.m = Self::locate(&self.spec.space, &nodes)?;
        self.nodes = nodes;
        Ok(())
    }

    /// Moves every node, then passes a collected sample through the channel.
    /// The credibility coin is only drawn when collecting.
    pub fn step(&mut self, action: Action) -> Result<Observation> {
        let p = self.spec.space.probabilities(self.m).to_vec();
        for s in self.nodes.iter_mut() {
            *s = self.spec.dynamics.step_node(*s, &p, &mut self.noise_rng)?;
        }
        self.m = Self::locate(&self.spec.space, &self.nodes)?;
        self.t += 1;
        if action.is_collect() && self.channel_rng.random::<f64>() < self.spec.q {
            self.pending.push_back((self.t + self.spec.delay, self.m));
        }
        let observation = match self.pending.front() {
            Some(&(due, m)) if due == self.t => {
                self.pending.pop_front();
                Observation::Data(m)
            }
            _ => Observation::Blank,
        };
        self.state = match observation {
            Observation::Data(m) => PlanningState::new(m, self.spec.delay),
            Observation::Blank => self.state.advance(Observation::Blank),
        };
        Ok(observation)
    }
}

/// Advances a chain world one step.
pub fn step_chain(world: &mut ChainWorld, action: Action) -> Result<Observation> {
    world.step(action)
}

/// How the decision maker picks actions in simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingPolicy {
    Never,
    Always,
    /// Collect on every `period`-th step, counting from the first.
    Periodic(usize),
    /// Collect once the elapsed time reaches the threshold.
    Threshold(usize),
    /// Collect with a fixed probability, independently each step.
    Bernoulli(f64),
    Table(Strategy),
}

impl SamplingPolicy {
    pub fn decide<R: Rng + ?Sized>(&self, t: usize, state: PlanningState, rng: &mut R) -> Action {
        let collect = match self {
            SamplingPolicy::Never => false,
            SamplingPolicy::Always => true,
            SamplingPolicy::Periodic(p) => (t - 1).is_multiple_of((*p).max(1)),
            SamplingPolicy::Threshold(k) => state.elapsed >= *k,
            SamplingPolicy::Bernoulli(p) => rng.random::<f64>() < *p,
            SamplingPolicy::Table(s) => return s.action(state.last, state.elapsed),
        };
        if collect {
            Action::Collect
        } else {
            Action::Estimate
        }
    }
}

/// Estimates `h(P^y(x, .))` for any `(x, y)`, memoized.
pub struct KernelEstimates<'a> {
    kernel: &'a TransitionKernel,
    estimator: &'a dyn Estimator,
    cache: RwLock<HashMap<PlanningState, Arc<Vec<f64>>>>,
}

impl<'a> KernelEstimates<'a> {
    pub fn new(kernel: &'a TransitionKernel, estimator: &'a dyn Estimator) -> Self {
        Self { kernel, estimator, cache: RwLock::new(HashMap::new()) }
    }

    pub fn estimate(&self, state: PlanningState) -> Result<Arc<Vec<f64>>> {
        if let Some(e) = self.cache.read().expect("estimate cache poisoned").get(&state) {
            return Ok(e.clone());
        }
        let posterior: Vec<f64> = self.kernel.posterior(state.last, state.elapsed).iter().copied().collect();
        let input = EstimateInput {
            space: self.kernel.space(),
            last: state.last,
            elapsed: state.elapsed,
            posterior: &posterior,
        };
        let e = Arc::new(self.estimator.estimate(&input)?);
        self.cache.write().expect("estimate cache poisoned").insert(state, e.clone());
        Ok(e)
    }
}

/// Monte-Carlo estimate of the discounted cost of a strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluationReport {
    pub mean: f64,
    pub std_err: f64,
    pub paths: usize,
    pub horizon: usize,
    /// `gamma^H c_max / (1 - gamma)`, the cost beyond the horizon at most.
    pub tail_bound: f64,
}

/// Smallest `H` with `gamma^H <= relative_tail`.
pub fn horizon_for_tail(gamma: f64, relative_tail: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma < 1.0) || !(relative_tail > 0.0 && relative_tail < 1.0) {
        return Err(Error::invalid("need 0 < gamma < 1 and 0 < tail < 1"));
    }
    Ok((relative_tail.ln() / gamma.ln()).ceil() as usize)
}

fn summarize(values: &[f64], horizon: usize, gamma: f64, c_max: f64) -> EvaluationReport {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    EvaluationReport {
        mean,
        std_err: (var / n).sqrt(),
        paths: values.len(),
        horizon,
        tail_bound: gamma.powi(horizon as i32) * c_max / (1.0 - gamma),
    }
}

/// Discounted chain-world cost `sum_t gamma^{t-1} c(m_t, h(x_t, y_t), a_t)`
/// over `horizon` steps, averaged over independent seeded paths.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_strategy(
    spec: &ChainWorldSpec,
    policy: &SamplingPolicy,
    estimates: &KernelEstimates<'_>,
    cost: &dyn CostModel,
    gamma: f64,
    horizon: usize,
    paths: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    if paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let values = (0..paths)
        .into_par_iter()
        .map(|path| {
            let mut world = ChainWorld::new(spec.clone(), seed, path as u64)?;
            let mut policy_rng = stream_rng(seed ^ 0x9e37_79b9_7f4a_7c15, path as u64);
            let (mut total, mut discount) = (0.0, 1.0);
            for _ in 0..horizon {
                let state = world.state();
                let action = policy.decide(world.time(), state, &mut policy_rng);
                let est = estimates.estimate(state)?;
                total += discount * cost.cost(spec.space.probabilities(world.current()), &est, action);
                discount *= gamma;
                world.step(action)?;
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let c_max = crate::planning::cost_bound(cost, &spec.space);
    Ok(summarize(&values, horizon, gamma, c_max))
}

/// Standardized (zero mean, unit variance) noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    /// `Exp(1) - 1`.
    CenteredExponential,
}

impl NoiseFamily {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseFamily::Gaussian => StandardNormal.sample(rng),
            NoiseFamily::Uniform => (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt(),
            NoiseFamily::CenteredExponential => {
                let e: f64 = Exp1.sample(rng);
                e - 1.0
            }
        }
    }
}

/// Source of mode noise `w_bar`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeNoise {
    /// `w_bar = L z` with `L L' = Sigma_bar_w` and standardized `z`.
    Direct(NoiseFamily),
    /// Per-node noise with variance `variance`, combined through eigenvector
    /// weights: `w_bar_d = (1/n) sum_i v_i^d w_i`. Columns of `weights` are
    /// the modes.
    Nodes { family: NoiseFamily, variance: f64, weights: DMatrix<f64> },
}

/// Linear network in mode coordinates with a credibility channel and the
/// estimate `A^y x`.
pub struct LinearWorld<'a> {
    model: &'a LinearNetworkModel,
    noise: ModeNoise,
    factor: DMatrix<f64>,
    m: DVector<f64>,
    estimate: DVector<f64>,
    state_elapsed: usize,
    t: usize,
    noise_rng: SimRng,
    channel_rng: SimRng,
}

impl<'a> LinearWorld<'a> {
    pub fn new(model: &'a LinearNetworkModel, noise: ModeNoise, m1: DVector<f64>, seed: u64, path: u64) -> Result<Self> {
        let d = model.dim();
        if m1.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: m1.len() });
        }
        if let ModeNoise::Nodes { weights, variance, .. } = &noise {
            if weights.ncols() != d || *variance < 0.0 {
                return Err(Error::invalid("node weights need one column per mode and a nonnegative variance"));
            }
        }
        Ok(Self {
            model,
            noise,
            factor: covariance_factor(model.sigma_w()),
            estimate: m1.clone(),
            m: m1,
            state_elapsed: 0,
            t: 1,
            noise_rng: stream_rng(seed, 2 * path),
            channel_rng: stream_rng(seed, 2 * path + 1),
        })
    }

    pub fn modes(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    pub fn elapsed(&self) -> usize {
        self.state_elapsed
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn draw_noise(&mut self) -> DVector<f64> {
        let d = self.model.dim();
        match &self.noise {
            ModeNoise::Direct(family) => {
                let z = DVector::from_fn(d, |_, _| family.sample(&mut self.noise_rng));
                &self.factor * z
            }
            ModeNoise::Nodes { family, variance, weights } => {
                let n = weights.nrows();
                let sd = variance.sqrt();
                let w = DVector::from_fn(n, |_, _| sd * family.sample(&mut self.noise_rng));
                weights.transpose() * w / n as f64
            }
        }
    }

    /// `m' = A m + w_bar`; a credible collection resets the estimate to `m'`.
    pub fn step(&mut self, action: Action) -> Result<bool> {
        let w = self.draw_noise();
        self.m = self.model.a() * &self.m + w;
        self.t += 1;
        let credible = action.is_collect() && self.channel_rng.random::<f64>() < self.model.q;
        self.state_elapsed = if credible { 0 } else { self.state_elapsed + 1 };
        self.estimate =
            kalman_like_update(&self.estimate, credible.then_some(&self.m), self.state_elapsed, self.model.a())?;
        Ok(credible)
    }
}

/// Advances a linear world one step; returns whether fresh data arrived.
pub fn step_linear(world: &mut LinearWorld<'_>, action: Action) -> Result<bool> {
    world.step(action)
}

fn covariance_factor(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    match sigma.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            // semidefinite: use the symmetric square root
            let eig = sigma.clone().symmetric_eigen();
            let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
        }
    }
}

/// Discounted linear cost `sum_t gamma^{t-1} (||m_t - A^y x||^2 + ell a_t)`.
pub fn evaluate_linear_strategy(
    model: &LinearNetworkModel,
    noise: &ModeNoise,
    m1: &DVector<f64>,
    policy: &SamplingPolicy,
    horizon: usize,
    paths: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    if paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let values = (0..paths)
        .into_par_iter()
        .map(|path| {
            let mut world = LinearWorld::new(model, noise.clone(), m1.clone(), seed, path as u64)?;
            let mut policy_rng = stream_rng(seed ^ 0x9e37_79b9_7f4a_7c15, path as u64);
            let (mut total, mut discount) = (0.0, 1.0);
            for _ in 0..horizon {
                let state = PlanningState::new(0, world.elapsed());
                let action = policy.decide(world.time(), state, &mut policy_rng);
                let err = (world.modes() - world.estimate()).norm_squared();
                total += discount * (err + model.ell * action.as_f64());
                discount *= model.gamma;
                world.step(action)?;
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let c_max = crate::linear::ElapsedCostTable::compute(model, horizon.max(1)).c_max();
    Ok(summarize(&values, horizon, model.gamma, c_max))
}

/// Simulation-backed environment for the learners: costs and observations
/// drawn from the true kernel, with the same estimator the planner uses.
pub struct ModelEnvironment<'a> {
    kernel: &'a TransitionKernel,
    costs: &'a StepCostTable,
    cost: &'a dyn CostModel,
    q: f64,
    /// CDFs of `P^y(x, .)` indexed by `y * atoms + x`.
    cdfs: Vec<CumulativePmf>,
    /// Realized costs `[estimate id][m][a]` when the distinct estimates are few enough.
    realized: Option<RealizedCosts>,
}

struct RealizedCosts {
    /// Estimate id of `(x, y)` at `y * atoms + x`.
    ids: Vec<usize>,
    values: Vec<[f64; 2]>,
}

/// Largest realized-cost table kept in memory.
const REALIZED_COST_CAP: usize = 1 << 22;

fn realized_costs(kernel: &TransitionKernel, costs: &StepCostTable, cost: &dyn CostModel) -> Option<RealizedCosts> {
    let n = kernel.len();
    let mut seen = std::collections::HashMap::new();
    let mut distinct: Vec<&[f64]> = Vec::new();
    let mut ids = Vec::with_capacity(n * (costs.k() + 1));
    for y in 0..=costs.k() {
        for x in 0..n {
            let est = costs.estimate(x, y);
            let key: Vec<u64> = est.iter().map(|v| v.to_bits()).collect();
            let id = *seen.entry(key).or_insert_with(|| {
                distinct.push(est);
                distinct.len() - 1
            });
            if distinct.len() * n > REALIZED_COST_CAP {
                return None;
            }
            ids.push(id);
        }
    }
    let space = kernel.space();
    let values = distinct
        .par_iter()
        .flat_map_iter(|est| {
            (0..n).map(move |m| Action::ALL.map(|a| cost.cost(space.probabilities(m), est, a)))
        })
        .collect();
    Some(RealizedCosts { ids, values })
}

impl<'a> ModelEnvironment<'a> {
    pub fn new(kernel: &'a TransitionKernel, costs: &'a StepCostTable, cost: &'a dyn CostModel, q: f64) -> Result<Self> {
        let n = kernel.len();
        if costs.atoms() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: costs.atoms() });
        }
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("credibility must lie in [0, 1], got {q}")));
        }
        let k = costs.k().max(1);
        kernel.precompute(k);
        let cdfs = (0..=k)
            .into_par_iter()
            .flat_map_iter(|y| {
                let p = kernel.power(y);
                (0..n).map(move |x| CumulativePmf::new(p.row(x).iter())).collect::<Vec<_>>()
            })
            .collect();
        let realized = realized_costs(kernel, costs, cost);
        Ok(Self { kernel, costs, cost, q, cdfs, realized })
    }
}

impl SampleEnvironment for ModelEnvironment<'_> {
    fn atoms(&self) -> usize {
        self.kernel.len()
    }

    fn sample(&self, x: usize, y: usize, action: Action, rng: &mut SimRng) -> Result<(f64, Observation)> {
        let n = self.kernel.len();
        if y > self.costs.k() || x >= n {
            return Err(Error::invalid(format!("({x}, {y}) outside the sampled planning space")));
        }
        let m = self.cdfs[y * n + x].sample(rng);
        let c = match &self.realized {
            Some(r) => r.values[r.ids[y * n + x] * n + m][action.index()],
            None => self.cost.cost(self.kernel.space().probabilities(m), self.costs.estimate(x, y), action),
        };
        let observation = if action.is_collect() && rng.random::<f64>() < self.q {
            Observation::Data(self.cdfs[n + m].sample(rng))
        } else {
            Observation::Blank
        };
        Ok((c, observation))
    }
}

impl ExpectedEnvironment for ModelEnvironment<'_> {
    fn atoms(&self) -> usize {
        self.kernel.len()
    }

    fn expected_cost(&self, x: usize, y: usize, action: Action) -> f64 {
        self.costs.cost(x, y, action)
    }

    fn observation_law(&self, x: usize, y: usize, action: Action) -> Vec<(usize, f64)> {
        if !action.is_collect() {
            return Vec::new();
        }
        let p = self.kernel.power(y + 1);
        p.row(x).iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(m, &v)| (m, self.q * v)).collect()
    }
}

/// Data carried by a trace row.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceData {
    Counts(Vec<u32>),
    Vector(Vec<f64>),
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub data: TraceData,
    pub action: Action,
    /// Whether the observation delivered after this step was blank.
    pub blank: bool,
    pub x_index: Option<usize>,
    pub y: usize,
    pub cost: f64,
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], mut w: W) -> Result<()> {
    writeln!(w, "t,m,a,o_blank,x_index,y,cost")?;
    for r in records {
        let m = match &r.data {
            TraceData::Counts(c) => c.iter().map(u32::to_string).collect::<Vec<_>>().join(":"),
            TraceData::Vector(v) => v.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        };
        let x = r.x_index.map(|x| x.to_string()).unwrap_or_default();
        writeln!(w, "{},{m},{},{},{x},{},{}", r.t, r.action, u8::from(r.blank), r.y, r.cost)?;
    }
    Ok(())
}

pub fn read_trace_csv<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("t,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("trace line {}: expected 7 fields", i + 1)));
        }
        let bad = |what: &str| Error::Parse(format!("trace line {}: bad {what}", i + 1));
        let data = if f[1].contains(';') || f[1].contains('.') || f[1].contains('e') {
            TraceData::Vector(f[1].split(';').map(|v| v.parse().map_err(|_| bad("m"))).collect::<Result<_>>()?)
        } else {
            TraceData::Counts(f[1].split(':').map(|v| v.parse().map_err(|_| bad("m"))).collect::<Result<_>>()?)
        };
        out.push(TraceRecord {
            t: f[0].parse().map_err(|_| bad("t"))?,
            data,
            action: f[2].parse::<usize>().ok().and_then(Action::from_index).ok_or_else(|| bad("a"))?,
            blank: match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("o_blank")),
            },
            x_index: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad("x_index"))?) },
            y: f[5].parse().map_err(|_| bad("y"))?,
            cost: f[6].parse().map_err(|_| bad("cost"))?,
        });
    }
    Ok(out)
}

/// Runs a chain world under a policy and logs every step.
pub fn record_chain_trace(
    spec: &ChainWorldSpec,
    policy: &SamplingPolicy,
    estimates: &KernelEstimates<'_>,
    cost: &dyn CostModel,
    steps: usize,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    let mut world = ChainWorld::new(spec.clone(), seed, 0)?;
    let mut policy_rng = stream_rng(seed ^ 0x9e37_79b9_7f4a_7c15, 0);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let state = world.state();
        let action = policy.decide(world.time(), state, &mut policy_rng);
        let est = estimates.estimate(state)?;
        let m = world.current();
        let c = cost.cost(spec.space.probabilities(m), &est, action);
        let t = world.time();
        let obs = world.step(action)?;
        out.push(TraceRecord {
            t,
            data: TraceData::Counts(spec.space.atom(m).counts().to_vec()),
            action,
            blank: obs.is_blank(),
            x_index: Some(state.last),
            y: state.elapsed,
            cost: c,
        });
    }
    Ok(out)
}

/// Offline environment replaying logged `(cost, next observation)` pairs.
/// Elapsed times beyond `k` are folded onto `k`.
pub struct LoggedEnvironment {
    atoms: usize,
    k: usize,
    samples: HashMap<(usize, usize, Action), Vec<(f64, Observation)>>,
}

impl LoggedEnvironment {
    pub fn from_trace(records: &[TraceRecord], atoms: usize, k: usize) -> Result<Self> {
        let mut samples: HashMap<_, Vec<_>> = HashMap::new();
        for pair in records.windows(2) {
            let (now, next) = (&pair[0], &pair[1]);
            let x = now.x_index.ok_or_else(|| Error::Parse("trace rows need x_index for offline learning".into()))?;
            let x_next = next.x_index.ok_or_else(|| Error::Parse("trace rows need x_index for offline learning".into()))?;
            if x >= atoms || x_next >= atoms {
                return Err(Error::Parse(format!("x_index out of range for {atoms} atoms")));
            }
            let obs = if now.blank { Observation::Blank } else { Observation::Data(x_next) };
            samples.entry((x, now.y.min(k), now.action)).or_default().push((now.cost, obs));
        }
        Ok(Self { atoms, k, samples })
    }

    /// Fraction of `(x, y, a)` triples with at least one logged sample.
    pub fn coverage(&self) -> f64 {
        self.samples.len() as f64 / (self.atoms * (self.k + 1) * 2) as f64
    }
}

impl SampleEnvironment for LoggedEnvironment {
    fn atoms(&self) -> usize {
        self.atoms
    }

    fn sample(&self, x: usize, y: usize, action: Action, rng: &mut SimRng) -> Result<(f64, Observation)> {
        let list = self
            .samples
            .get(&(x, y.min(self.k), action))
            .ok_or_else(|| Error::invalid(format!("no logged transition for ({x}, {y}, {action})")))?;
        Ok(list[rng.random_range(0..list.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_kernel_exact;
    use crate::planning::{MapEstimator, PlanningModel, SupNormFeeCost, TableCost};
    use approx::assert_abs_diff_eq;

    fn binary_spec(n: u32, q: f64, delay: usize) -> (ChainWorldSpec, LocalKernel) {
        let s = StateSpace::new(vec![0.0, 1.0]).unwrap();
        let space = Arc::new(EmpiricalSpace::new(n, &s).unwrap());
        let local = LocalKernel::decoupled(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8])).unwrap();
        let spec = ChainWorldSpec {
            space,
            dynamics: Arc::new(KernelDynamics(local.clone())),
            initial_nodes: (0..n as usize).map(|i| i % 2).collect(),
            q,
            delay,
        };
        (spec, local)
    }

    #[test]
    fn channel_cases() {
        let (spec, _) = binary_spec(3, 1.0, 0);
        let mut w = ChainWorld::new(spec.clone(), 1, 0).unwrap();
        let s0 = w.state();
        assert_eq!(w.step(Action::Estimate).unwrap(), Observation::Blank);
        assert_eq!(w.state(), PlanningState::new(s0.last, 1));
        let o = w.step(Action::Collect).unwrap();
        assert_eq!(o, Observation::Data(w.current()));
        assert_eq!(w.state(), PlanningState::new(w.current(), 0));
        let (never, _) = binary_spec(3, 0.0, 0);
        let mut w = ChainWorld::new(never, 1, 0).unwrap();
        for _ in 0..20 {
            assert!(w.step(Action::Collect).unwrap().is_blank());
        }
    }

    #[test]
    fn empirical_distribution_tracks_nodes() {
        let (spec, _) = binary_spec(5, 0.5, 0);
        let mut w = ChainWorld::new(spec.clone(), 3, 0).unwrap();
        for t in 0..200 {
            w.step(if t % 3 == 0 { Action::Collect } else { Action::Estimate }).unwrap();
            let atom = EmpiricalDistribution::from_node_states(w.nodes(), 2);
            assert_eq!(spec.space.index_of(&atom), Some(w.current()));
        }
    }

    #[test]
    fn pathwise_transitions_match_kernel() {
        let (spec, local) = binary_spec(3, 1.0, 0);
        let kernel = build_kernel_exact(&local, spec.space.clone()).unwrap();
        let mut rng = stream_rng(11, 0);
        let from = spec.space.atom(1).clone();
        let trials = 100_000;
        let mut freq = vec![0.0; spec.space.len()];
        for _ in 0..trials {
            let next = pathwise_step(spec.dynamics.as_ref(), &from, &mut rng).unwrap();
            freq[spec.space.index_of(&next).unwrap()] += 1.0 / trials as f64;
        }
        let tv: f64 = freq.iter().enumerate().map(|(j, f)| (f - kernel.matrix()[(1, j)]).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.02, "tv {tv}");
    }

    #[test]
    fn credibility_fraction() {
        let (spec, _) = binary_spec(2, 0.7, 0);
        let mut w = ChainWorld::new(spec, 5, 0).unwrap();
        let trials = 100_000;
        let hits = (0..trials).filter(|_| !w.step(Action::Collect).unwrap().is_blank()).count();
        let frac = hits as f64 / trials as f64;
        assert!((frac - 0.7).abs() <= 3.0 * (0.7f64 * 0.3 / trials as f64).sqrt());
    }

    #[test]
    fn elapsed_time_counts_blanks() {
        let (spec, _) = binary_spec(4, 0.6, 0);
        let mut w = ChainWorld::new(spec, 9, 0).unwrap();
        let mut blanks = 0;
        let mut policy_rng = stream_rng(2, 0);
        for _ in 0..500 {
            let a = SamplingPolicy::Bernoulli(0.5).decide(w.time(), w.state(), &mut policy_rng);
            if w.step(a).unwrap().is_blank() {
                blanks += 1;
            } else {
                blanks = 0;
            }
            assert_eq!(w.state().elapsed, blanks);
        }
    }

    #[test]
    fn delay_shifts_elapsed_time() {
        let tau = 3;
        let (plain, _) = binary_spec(4, 0.8, 0);
        let (delayed, _) = binary_spec(4, 0.8, tau);
        let mut a = ChainWorld::new(plain, 21, 0).unwrap();
        let mut b = ChainWorld::new(delayed, 21, 0).unwrap();
        let mut history = vec![a.state()];
        for t in 0..300 {
            let act = if t % 4 == 1 { Action::Collect } else { Action::Estimate };
            a.step(act).unwrap();
            b.step(act).unwrap();
            history.push(a.state());
            let i = history.len() - 1;
            // once the first delivery has arrived, the delayed state lags by tau
            if i >= tau && history[i - tau] != history[0] && b.state().last != history[0].last {
                let lagged = history[i - tau];
                assert_eq!(b.state(), PlanningState::new(lagged.last, lagged.elapsed + tau));
            }
        }
    }

    #[test]
    fn evaluation_reference_cases() {
        let (spec, local) = binary_spec(2, 1.0, 0);
        let kernel = build_kernel_exact(&local, spec.space.clone()).unwrap();
        let est = KernelEstimates::new(&kernel, &MapEstimator);
        let zero = TableCost::from_fn((*spec.space).clone(), |_, _, _| 0.0).unwrap();
        let r = evaluate_strategy(&spec, &SamplingPolicy::Never, &est, &zero, 0.9, 50, 20, 1).unwrap();
        assert_eq!(r.mean, 0.0);
        // with q = 1 and perfect data every step only the fee is paid
        let (still, _) = {
            let s = StateSpace::new(vec![0.0, 1.0]).unwrap();
            let space = Arc::new(EmpiricalSpace::new(2, &s).unwrap());
            let local = LocalKernel::decoupled(DMatrix::identity(2, 2)).unwrap();
            (ChainWorldSpec { space, dynamics: Arc::new(KernelDynamics(local.clone())), initial_nodes: vec![0, 1], q: 1.0, delay: 0 }, local)
        };
        let id = build_kernel_exact(&LocalKernel::decoupled(DMatrix::identity(2, 2)).unwrap(), still.space.clone()).unwrap();
        let est = KernelEstimates::new(&id, &MapEstimator);
        let fee = SupNormFeeCost::new(0.5);
        let h = horizon_for_tail(0.9, 1e-6).unwrap();
        let r = evaluate_strategy(&still, &SamplingPolicy::Always, &est, &fee, 0.9, h, 10, 1).unwrap();
        assert!((r.mean - 0.5 / 0.1).abs() <= r.tail_bound + 1e-12);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let (spec, local) = binary_spec(3, 0.8, 0);
        let kernel = build_kernel_exact(&local, spec.space.clone()).unwrap();
        let est = KernelEstimates::new(&kernel, &MapEstimator);
        let cost = SupNormFeeCost::new(0.1);
        let a = evaluate_strategy(&spec, &SamplingPolicy::Periodic(3), &est, &cost, 0.9, 40, 50, 8).unwrap();
        let b = evaluate_strategy(&spec, &SamplingPolicy::Periodic(3), &est, &cost, 0.9, 40, 50, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_world_cases() {
        let m = LinearNetworkModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), 1.0, 0.9, 0.0).unwrap();
        let m1 = DVector::from_row_slice(&[1.0, -2.0]);
        let mut w = LinearWorld::new(&m, ModeNoise::Direct(NoiseFamily::Gaussian), m1.clone(), 1, 0).unwrap();
        for _ in 0..10 {
            w.step(Action::Estimate).unwrap();
        }
        assert_eq!(w.modes(), &m1);
        let s = LinearNetworkModel::new(DMatrix::from_element(1, 1, 0.9), DMatrix::zeros(1, 1), 1.0, 0.9, 0.0).unwrap();
        let mut w = LinearWorld::new(&s, ModeNoise::Direct(NoiseFamily::Uniform), DVector::from_element(1, 1.0), 1, 0).unwrap();
        for t in 2..=12 {
            w.step(Action::Estimate).unwrap();
            assert_abs_diff_eq!(w.modes()[0], 0.9f64.powi(t - 1), epsilon = 1e-14);
            assert_abs_diff_eq!(w.estimate()[0], w.modes()[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn node_noise_variance_matches_mode_covariance() {
        use crate::linear::{spectral_vectorize, star_graph, GraphSpec};
        let n = 6;
        let g = GraphSpec::new(star_graph(n), vec![0.0, 0.8 / 5.0], 2).unwrap();
        let modes = spectral_vectorize(&g).unwrap();
        let model = LinearNetworkModel::from_modes(&modes, 6.0, 0.9, 0.85, 0.4).unwrap();
        let weights = DMatrix::from_fn(n, 2, |i, d| modes[d].weights[i]);
        for family in [NoiseFamily::Gaussian, NoiseFamily::Uniform, NoiseFamily::CenteredExponential] {
            let noise = ModeNoise::Nodes { family, variance: 6.0, weights: weights.clone() };
            let mut w = LinearWorld::new(&model, noise, DVector::zeros(2), 4, 0).unwrap();
            let trials = 50_000;
            let draws: Vec<f64> = (0..trials).map(|_| w.draw_noise()[0].powi(2)).collect();
            let mean = draws.iter().sum::<f64>() / trials as f64;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0)).sqrt();
            let se = sd / (trials as f64).sqrt();
            assert!((mean - 1.0).abs() <= 3.0 * se, "{family:?}: {mean} vs 1.0 (se {se})");
        }
    }

    #[test]
    fn environments_agree_in_expectation() {
        let (spec, local) = binary_spec(2, 0.7, 0);
        let kernel = build_kernel_exact(&local, spec.space.clone()).unwrap();
        let cost = SupNormFeeCost::new(0.3);
        let model = PlanningModel { kernel: &kernel, cost: &cost, estimator: &MapEstimator, q: 0.7, gamma: 0.9 };
        let table = StepCostTable::compute(&model, 4).unwrap();
        let env = ModelEnvironment::new(&kernel, &table, &cost, 0.7).unwrap();
        let mut rng = stream_rng(3, 0);
        let trials = 40_000;
        let (x, y) = (0, 2);
        let mut mean_cost = 0.0;
        let mut freq = vec![0.0; 3];
        for _ in 0..trials {
            let (c, o) = env.sample(x, y, Action::Collect, &mut rng).unwrap();
            mean_cost += c / trials as f64;
            if let Observation::Data(m) = o {
                freq[m] += 1.0 / trials as f64;
            }
        }
        assert!((mean_cost - env.expected_cost(x, y, Action::Collect)).abs() < 0.01);
        for (m, p) in env.observation_law(x, y, Action::Collect) {
            assert!((freq[m] - p).abs() < 0.01);
        }
    }

    #[test]
    fn trace_round_trip_and_replay() {
        let (spec, local) = binary_spec(2, 0.8, 0);
        let kernel = build_kernel_exact(&local, spec.space.clone()).unwrap();
        let est = KernelEstimates::new(&kernel, &MapEstimator);
        let cost = SupNormFeeCost::new(0.3);
        let trace = record_chain_trace(&spec, &SamplingPolicy::Bernoulli(0.5), &est, &cost, 300, 4).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), trace);
        // replayed y equals the count of blanks since the last delivery
        let mut y = 0;
        for pair in trace.windows(2) {
            y = if pair[0].blank { y + 1 } else { 0 };
            assert_eq!(pair[1].y, y);
        }
        let env = LoggedEnvironment::from_trace(&trace, 3, 3).unwrap();
        assert!(env.coverage() > 0.5);
    }
}
