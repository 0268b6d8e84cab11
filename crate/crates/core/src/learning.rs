//! Model-free solution of the truncated problem by synchronized Q-learning on
//! the virtual MDP.
//!
//! The learner only sees sampled costs and observations; the virtual
//! transition [`virtual_step`] is pure bookkeeping on `(x, y)` and never looks
//! at a kernel. Environments are supplied through [`SampleEnvironment`] (one
//! sample per call) or [`ExpectedEnvironment`] (exact expectations, used to
//! check convergence against planning).

use std::io::{BufRead, Write};

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::{stream_rng, Action, Error, Observation, PlanningState, Result, SimRng};

/// Truncation and wrap-around of the virtual MDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualMdpConfig {
    pub k: usize,
    /// Atom the virtual state jumps to after a blank at `y = k`.
    pub anchor: usize,
    pub q: f64,
    pub gamma: f64,
}

impl VirtualMdpConfig {
    pub fn validate(&self, atoms: usize) -> Result<()> {
        if self.anchor >= atoms {
            return Err(Error::invalid(format!("anchor {} out of range for {atoms} atoms", self.anchor)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("discount must lie in (0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::invalid(format!("credibility must lie in [0, 1], got {}", self.q)));
        }
        Ok(())
    }
}

/// Blank below `k` adds one to `y`, blank at `k` wraps to `(m*, 0)`, data
/// resets to `(o, 0)`.
pub fn virtual_step(state: PlanningState, observation: Observation, cfg: &VirtualMdpConfig) -> PlanningState {
    match observation {
        Observation::Data(m) => PlanningState::new(m, 0),
        Observation::Blank if state.elapsed >= cfg.k => PlanningState::new(cfg.anchor, 0),
        Observation::Blank => PlanningState::new(state.last, state.elapsed + 1),
    }
}

/// Default step size `1 / visits`.
pub fn learning_rate(visits: u64) -> f64 {
    LearningRate::Harmonic.rate(visits)
}

/// Step-size schedules; all start at 1 and satisfy the Robbins-Monro conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    /// `1 / visits`.
    Harmonic,
    /// `kappa / (kappa + visits - 1)`: still inversely proportional to the
    /// visit count, but forgets the zero initialization faster.
    Rescaled { kappa: f64 },
    /// `visits^-exponent`, `exponent` in `(1/2, 1]`.
    Polynomial { exponent: f64 },
}

impl LearningRate {
    pub fn rate(&self, visits: u64) -> f64 {
        let v = visits.max(1) as f64;
        match *self {
            LearningRate::Harmonic => 1.0 / v,
            LearningRate::Rescaled { kappa } => kappa / (kappa + v - 1.0),
            LearningRate::Polynomial { exponent } => v.powf(-exponent),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LearningRate::Harmonic => Ok(()),
            LearningRate::Rescaled { kappa } if kappa > 0.0 => Ok(()),
            LearningRate::Polynomial { exponent } if exponent > 0.5 && exponent <= 1.0 => Ok(()),
            other => Err(Error::invalid(format!("invalid learning-rate schedule {other:?}"))),
        }
    }
}

/// `Q(x, y, a)` with visit counts over `M(n) x {0..k} x {0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    atoms: usize,
    k: usize,
    values: Vec<[f64; 2]>,
    visits: Vec<[u64; 2]>,
}

impl QTable {
    pub fn zeros(atoms: usize, k: usize) -> Self {
        let len = atoms * (k + 1);
        Self { atoms, k, values: vec![[0.0; 2]; len], visits: vec![[0; 2]; len] }
    }

    fn at(&self, x: usize, y: usize) -> usize {
        assert!(x < self.atoms && y <= self.k, "({x}, {y}) outside the Q table");
        y * self.atoms + x
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, x: usize, y: usize, a: Action) -> f64 {
        self.values[self.at(x, y)][a.index()]
    }

    pub fn set(&mut self, x: usize, y: usize, a: Action, value: f64) {
        let i = self.at(x, y);
        self.values[i][a.index()] = value;
    }

    pub fn visits(&self, x: usize, y: usize, a: Action) -> u64 {
        self.visits[self.at(x, y)][a.index()]
    }

    pub fn min_q(&self, x: usize, y: usize) -> f64 {
        let v = self.values[self.at(x, y)];
        v[0].min(v[1])
    }

    /// `argmin_a Q(x, y, a)`, estimating on ties.
    pub fn greedy(&self, x: usize, y: usize) -> Action {
        let v = self.values[self.at(x, y)];
        if v[1] < v[0] {
            Action::Collect
        } else {
            Action::Estimate
        }
    }

    /// Largest absolute entrywise difference.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().map(|v| v[0].max(v[1])).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().map(|v| v[0].min(v[1])).fold(f64::INFINITY, f64::min)
    }

    /// Checkpoint CSV: `x_index,y,a,Q,visits`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x_index,y,a,Q,visits")?;
        for y in 0..=self.k {
            for x in 0..self.atoms {
                for a in Action::ALL {
                    writeln!(w, "{x},{y},{a},{:.17e},{}", self.get(x, y, a), self.visits(x, y, a))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(atoms: usize, k: usize, r: R) -> Result<Self> {
        let mut table = Self::zeros(atoms, k);
        let mut seen = 0usize;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("line {}: expected 5 fields", lineno + 1)));
            }
            let bad = |s: &str| Error::Parse(format!("line {}: cannot parse {s:?}", lineno + 1));
            let x: usize = f[0].parse().map_err(|_| bad(f[0]))?;
            let y: usize = f[1].parse().map_err(|_| bad(f[1]))?;
            let a = f[2].parse().ok().and_then(Action::from_index).ok_or_else(|| bad(f[2]))?;
            if x >= atoms || y > k {
                return Err(Error::Parse(format!("line {}: ({x}, {y}) outside the table", lineno + 1)));
            }
            let i = table.at(x, y);
            table.values[i][a.index()] = f[3].parse().map_err(|_| bad(f[3]))?;
            table.visits[i][a.index()] = f[4].parse().map_err(|_| bad(f[4]))?;
            seen += 1;
        }
        if seen != atoms * (k + 1) * 2 {
            return Err(Error::Parse(format!("checkpoint has {seen} entries, expected {}", atoms * (k + 1) * 2)));
        }
        Ok(table)
    }
}

/// `(1 - alpha) q + alpha (c + gamma * next_min)`.
pub fn q_target(q: f64, c_obs: f64, next_min: f64, alpha: f64, gamma: f64) -> f64 {
    (1.0 - alpha) * q + alpha * (c_obs + gamma * next_min)
}

/// One asynchronous update of `Q(x, y, a)` towards the observed cost and the
/// greedy value of `next`.
pub fn q_update(
    table: &mut QTable,
    state: PlanningState,
    action: Action,
    c_obs: f64,
    next: PlanningState,
    alpha: f64,
    gamma: f64,
) {
    let next_min = table.min_q(next.last, next.elapsed);
    let q = table.get(state.last, state.elapsed, action);
    table.set(state.last, state.elapsed, action, q_target(q, c_obs, next_min, alpha, gamma));
}

/// Source of one sampled `(cost, observation)` per query, drawn from the law
/// induced by taking `action` at `(x, y)`.
pub trait SampleEnvironment: Sync {
    fn atoms(&self) -> usize;

    fn sample(&self, x: usize, y: usize, action: Action, rng: &mut SimRng) -> Result<(f64, Observation)>;
}

/// Exact expected cost and observation law at `(x, y)`.
pub trait ExpectedEnvironment: Sync {
    fn atoms(&self) -> usize;

    fn expected_cost(&self, x: usize, y: usize, action: Action) -> f64;

    /// Probabilities of each credible observation; the blank gets the rest.
    fn observation_law(&self, x: usize, y: usize, action: Action) -> Vec<(usize, f64)>;
}

/// Budget, stopping rule and step sizes for [`train_synchronized`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub sweeps: usize,
    pub rate: LearningRate,
    /// Training stops once every sweep in the last `drift_window` changed the
    /// table by less than this in sup norm.
    pub drift_threshold: f64,
    pub drift_window: usize,
    /// States whose `min_a Q` is recorded after every `record_every` sweeps.
    pub probes: Vec<PlanningState>,
    pub record_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            sweeps: 10_000,
            rate: LearningRate::Harmonic,
            drift_threshold: 1e-4,
            drift_window: 100,
            probes: Vec::new(),
            record_every: 1,
        }
    }
}

/// Learned table plus training diagnostics.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub table: QTable,
    pub sweeps: usize,
    /// Sup-norm change made by the last sweep.
    pub last_drift: f64,
    /// True when the budget ran out before the drift criterion was met.
    pub budget_exhausted: bool,
    /// `(sweep, min_a Q at each probe)`.
    pub curve: Vec<(usize, Vec<f64>)>,
}

impl TrainingOutcome {
    /// Learning curve CSV: `sweep,probe_0,probe_1,..`.
    pub fn write_curve_csv<W: Write>(&self, probes: &[PlanningState], mut w: W) -> Result<()> {
        let names: Vec<String> = probes.iter().map(|p| format!("q_min_x{}_y{}", p.last, p.elapsed)).collect();
        writeln!(w, "sweep,{}", names.join(","))?;
        for (sweep, values) in &self.curve {
            let vals: Vec<String> = values.iter().map(|v| format!("{v:.10}")).collect();
            writeln!(w, "{sweep},{}", vals.join(","))?;
        }
        Ok(())
    }
}

fn check_probes(probes: &[PlanningState], atoms: usize, k: usize) -> Result<()> {
    match probes.iter().find(|p| p.last >= atoms || p.elapsed > k) {
        Some(p) => Err(Error::invalid(format!("probe ({}, {}) outside the table", p.last, p.elapsed))),
        None => Ok(()),
    }
}

/// Drift bookkeeping shared by both trainers.
struct DriftMonitor {
    window: usize,
    threshold: f64,
    calm: usize,
}

impl DriftMonitor {
    fn record(&mut self, drift: f64) -> bool {
        if drift < self.threshold {
            self.calm += 1;
        } else {
            self.calm = 0;
        }
        self.calm >= self.window.max(1)
    }
}

/// Synchronized Q-learning: every sweep updates every `(x, y, a)` once from
/// the frozen previous table, each pair drawing from its own random stream.
pub fn train_synchronized(
    env: &dyn SampleEnvironment,
    cfg: &VirtualMdpConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainingOutcome> {
    let atoms = env.atoms();
    cfg.validate(atoms)?;
    opts.rate.validate()?;
    check_probes(&opts.probes, atoms, cfg.k)?;
    let pairs = atoms * (cfg.k + 1);
    let mut rngs: Vec<SimRng> = (0..pairs * 2).map(|i| stream_rng(seed, i as u64)).collect();
    let mut table = QTable::zeros(atoms, cfg.k);
    let mut monitor = DriftMonitor { window: opts.drift_window, threshold: opts.drift_threshold, calm: 0 };
    let mut curve = Vec::new();
    let mut last_drift = f64::INFINITY;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.sweeps {
        sweeps += 1;
        let frozen = &table;
        let updated: Vec<Result<[f64; 2]>> = rngs
            .par_chunks_mut(2)
            .enumerate()
            .map(|(i, pair_rngs)| {
                let state = PlanningState::new(i % atoms, i / atoms);
                let mut out = [0.0; 2];
                for (a, rng) in Action::ALL.into_iter().zip(pair_rngs.iter_mut()) {
                    let (c, obs) = env.sample(state.last, state.elapsed, a, rng)?;
                    let next = virtual_step(state, obs, cfg);
                    let alpha = opts.rate.rate(frozen.visits[i][a.index()] + 1);
                    out[a.index()] = q_target(
                        frozen.values[i][a.index()],
                        c,
                        frozen.min_q(next.last, next.elapsed),
                        alpha,
                        cfg.gamma,
                    );
                }
                Ok(out)
            })
            .collect();
        last_drift = 0.0;
        for (i, v) in updated.into_iter().enumerate() {
            let v = v?;
            let old = table.values[i];
            last_drift = last_drift.max((v[0] - old[0]).abs()).max((v[1] - old[1]).abs());
            table.values[i] = v;
            table.visits[i][0] += 1;
            table.visits[i][1] += 1;
        }
        record_probes(&table, opts, sweeps, &mut curve);
        if monitor.record(last_drift) {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("Q-learning budget of {} sweeps exhausted (last drift {last_drift:e})", opts.sweeps);
    }
    debug!("synchronized Q-learning ran {sweeps} sweeps");
    Ok(TrainingOutcome { table, sweeps, last_drift, budget_exhausted: !converged, curve })
}

/// Synchronized updates with the sampled cost and next state replaced by
/// their exact expectations.
pub fn train_expected(
    env: &dyn ExpectedEnvironment,
    cfg: &VirtualMdpConfig,
    opts: &TrainOptions,
) -> Result<TrainingOutcome> {
    let atoms = env.atoms();
    cfg.validate(atoms)?;
    opts.rate.validate()?;
    check_probes(&opts.probes, atoms, cfg.k)?;
    let pairs = atoms * (cfg.k + 1);
    let laws: Vec<[(f64, Vec<(usize, f64)>); 2]> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % atoms, i / atoms);
            Action::ALL.map(|a| (env.expected_cost(x, y, a), env.observation_law(x, y, a)))
        })
        .collect();
    let mut table = QTable::zeros(atoms, cfg.k);
    let mut monitor = DriftMonitor { window: opts.drift_window, threshold: opts.drift_threshold, calm: 0 };
    let mut curve = Vec::new();
    let mut last_drift = f64::INFINITY;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.sweeps {
        sweeps += 1;
        let frozen = &table;
        let updated: Vec<[f64; 2]> = (0..pairs)
            .into_par_iter()
            .map(|i| {
                let state = PlanningState::new(i % atoms, i / atoms);
                let mut out = [0.0; 2];
                for a in Action::ALL {
                    let (c, law) = &laws[i][a.index()];
                    let mut blank = 1.0;
                    let mut next_value = 0.0;
                    for &(m, p) in law {
                        blank -= p;
                        next_value += p * frozen.min_q(m, 0);
                    }
                    let after_blank = virtual_step(state, Observation::Blank, cfg);
                    next_value += blank.max(0.0) * frozen.min_q(after_blank.last, after_blank.elapsed);
                    let alpha = opts.rate.rate(frozen.visits[i][a.index()] + 1);
                    out[a.index()] = q_target(frozen.values[i][a.index()], *c, next_value, alpha, cfg.gamma);
                }
                out
            })
            .collect();
        last_drift = 0.0;
        for (i, v) in updated.into_iter().enumerate() {
            let old = table.values[i];
            last_drift = last_drift.max((v[0] - old[0]).abs()).max((v[1] - old[1]).abs());
            table.values[i] = v;
            table.visits[i][0] += 1;
            table.visits[i][1] += 1;
        }
        record_probes(&table, opts, sweeps, &mut curve);
        if monitor.record(last_drift) {
            converged = true;
            break;
        }
    }
    Ok(TrainingOutcome { table, sweeps, last_drift, budget_exhausted: !converged, curve })
}

fn record_probes(table: &QTable, opts: &TrainOptions, sweep: usize, curve: &mut Vec<(usize, Vec<f64>)>) {
    if !opts.probes.is_empty() && sweep.is_multiple_of(opts.record_every.max(1)) {
        curve.push((sweep, opts.probes.iter().map(|p| table.min_q(p.last, p.elapsed)).collect()));
    }
}

/// Count-based model estimate for decoupled dynamics: node transitions
/// `s -> s'` and the outcomes of collection attempts.
#[derive(Debug, Clone)]
pub struct CountModel {
    transitions: DMatrix<f64>,
    attempts: u64,
    credible: u64,
}

impl CountModel {
    pub fn new(states: usize) -> Self {
        Self { transitions: DMatrix::zeros(states, states), attempts: 0, credible: 0 }
    }

    pub fn observe_transition(&mut self, from: usize, to: usize) {
        self.transitions[(from, to)] += 1.0;
    }

    pub fn observe_collection(&mut self, credible: bool) {
        self.attempts += 1;
        if credible {
            self.credible += 1;
        }
    }

    /// Row-normalized transition counts; states never left are absorbing.
    pub fn transition_estimate(&self) -> DMatrix<f64> {
        let mut t = self.transitions.clone();
        for r in 0..t.nrows() {
            let total = t.row(r).sum();
            if total > 0.0 {
                t.row_mut(r).scale_mut(1.0 / total);
            } else {
                t[(r, r)] = 1.0;
            }
        }
        t
    }

    /// Fraction of credible collections, or `None` before any attempt.
    pub fn credibility_estimate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.credible as f64 / self.attempts as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> VirtualMdpConfig {
        VirtualMdpConfig { k: 10, anchor: 0, q: 0.9, gamma: 0.9 }
    }

    #[test]
    fn virtual_step_cases() {
        let c = cfg();
        assert_eq!(virtual_step(PlanningState::new(2, 3), Observation::Blank, &c), PlanningState::new(2, 4));
        assert_eq!(virtual_step(PlanningState::new(2, 10), Observation::Blank, &c), PlanningState::new(0, 0));
        assert_eq!(virtual_step(PlanningState::new(2, 7), Observation::Data(5), &c), PlanningState::new(5, 0));
    }

    #[test]
    fn q_update_arithmetic() {
        let mut t = QTable::zeros(2, 3);
        let s = PlanningState::new(0, 1);
        q_update(&mut t, s, Action::Collect, 2.0, PlanningState::new(1, 0), 1.0, 0.9);
        assert_eq!(t.get(0, 1, Action::Collect), 2.0);
        let before = t.clone();
        q_update(&mut t, s, Action::Collect, 7.0, PlanningState::new(1, 0), 0.0, 0.9);
        assert_eq!(t, before);
        t.set(0, 1, Action::Estimate, 4.0);
        t.set(1, 0, Action::Estimate, 1.0);
        t.set(1, 0, Action::Collect, 3.0);
        q_update(&mut t, s, Action::Estimate, 2.0, PlanningState::new(1, 0), 0.5, 0.9);
        assert_abs_diff_eq!(t.get(0, 1, Action::Estimate), 3.45, epsilon = 1e-15);
    }

    #[test]
    fn harmonic_schedule_series() {
        assert_eq!(learning_rate(1), 1.0);
        assert_eq!(learning_rate(4), 0.25);
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in 1..=10_000u64 {
            let a = learning_rate(v);
            s1 += a;
            s2 += a * a;
        }
        assert!(s1 > (10_000f64).ln() && s1 < (10_000f64).ln() + 1.0);
        assert!(s2 < std::f64::consts::PI.powi(2) / 6.0);
        assert_eq!(LearningRate::Rescaled { kappa: 10.0 }.rate(1), 1.0);
        assert!(LearningRate::Polynomial { exponent: 0.4 }.validate().is_err());
    }

    struct ZeroEnv;

    impl SampleEnvironment for ZeroEnv {
        fn atoms(&self) -> usize {
            3
        }

        fn sample(&self, x: usize, _y: usize, a: Action, _rng: &mut SimRng) -> Result<(f64, Observation)> {
            Ok((0.0, if a.is_collect() { Observation::Data((x + 1) % 3) } else { Observation::Blank }))
        }
    }

    #[test]
    fn zero_cost_env_stays_zero() {
        let opts = TrainOptions { sweeps: 1, ..Default::default() };
        let out = train_synchronized(&ZeroEnv, &cfg(), &opts, 1).unwrap();
        assert_eq!(out.table.max_value(), 0.0);
        assert_eq!(out.sweeps, 1);
        assert!(out.budget_exhausted);
    }

    #[test]
    fn drift_window_stops_training() {
        let opts = TrainOptions { sweeps: 1_000, drift_window: 5, ..Default::default() };
        let out = train_synchronized(&ZeroEnv, &cfg(), &opts, 1).unwrap();
        assert_eq!(out.sweeps, 5);
        assert!(!out.budget_exhausted);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut t = QTable::zeros(3, 2);
        t.set(1, 2, Action::Collect, 0.125);
        t.visits[5][1] = 9;
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(QTable::read_csv(3, 2, buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn count_model_estimates() {
        let mut m = CountModel::new(3);
        for _ in 0..3 {
            m.observe_transition(0, 1);
        }
        m.observe_transition(0, 0);
        m.observe_collection(true);
        m.observe_collection(false);
        let t = m.transition_estimate();
        assert_eq!(t[(0, 1)], 0.75);
        assert_eq!(t[(2, 2)], 1.0);
        assert_eq!(m.credibility_estimate(), Some(0.5));
    }

    #[test]
    fn learner_is_independent_of_kernels() {
        let src = include_str!("learning.rs");
        let forbidden = format!("crate::{}", "chain");
        assert!(!src.contains(&forbidden));
        assert!(!src.contains(&format!("{}Kernel", "Transition")));
    }
}
