//! Planning on the `(x, y)` space: expected step costs, the truncated Bellman
//! equation and the strategies it yields.
//!
//! With `P = T_m` the value functions over `x in M(n)`, `y in {0..k}` are
//!
//! ```text
//! V0(x,y) = c(x,y,0) + g * C(x,y)
//! V1(x,y) = c(x,y,1) + (1-q) g * C(x,y) + q g * sum_m' P^{y+1}(x,m') V(m',0)
//! C(x,y)  = V(x,y+1) for y < k, V(m*,0) for y = k
//! ```
//!
//! where `c(x,y,a) = sum_m c(m, h(P^y(x,.)), a) P^y(x,m)`.

mod cost;
mod estimator;
mod oracle;

use std::io::{BufRead, Write};
use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;

use crate::chain::{EmpiricalSpace, TransitionKernel};
use crate::{Action, Error, Result};

pub use cost::{
    cost_bound, exhaustive_cost_bound, CostModel, KlFeeCost, QuadraticFeeCost, SupNormFeeCost, TableCost,
    WeightedAbsCost,
};
pub use estimator::{
    map_estimator, EstimateInput, Estimator, InfinitePopulationEstimator, LastObservationEstimator, MapEstimator,
    MeanEstimator,
};
pub use oracle::{bellman_oracle_small, ORACLE_MAX_DIM, ORACLE_MAX_HORIZON, ORACLE_MAX_POPULATION};

/// Smallest `k` with `k >= log((1 - g) eps / (2 c_max)) / log g`.
///
/// Returns 0 (with a warning) when `eps >= 2 c_max / (1 - g)`.
pub fn truncation_index(epsilon: f64, gamma: f64, c_max: f64) -> Result<usize> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    check_discount(gamma)?;
    if !(c_max > 0.0) || !c_max.is_finite() {
        return Err(Error::invalid(format!("c_max must be positive and finite, got {c_max}")));
    }
    if epsilon >= 2.0 * c_max / (1.0 - gamma) {
        warn!("epsilon {epsilon} already exceeds 2 c_max / (1 - gamma); truncating at k = 0");
        return Ok(0);
    }
    let raw = ((1.0 - gamma) * epsilon / (2.0 * c_max)).ln() / gamma.ln();
    let k = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    Ok(k.max(0.0) as usize)
}

fn check_discount(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("discount must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

fn check_probability(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("credibility must lie in [0, 1], got {q}")));
    }
    Ok(())
}

/// Model the planner works with.
#[derive(Clone, Copy)]
pub struct PlanningModel<'a> {
    pub kernel: &'a TransitionKernel,
    pub cost: &'a dyn CostModel,
    pub estimator: &'a dyn Estimator,
    pub q: f64,
    pub gamma: f64,
}

impl PlanningModel<'_> {
    pub fn validate(&self) -> Result<()> {
        check_discount(self.gamma)?;
        check_probability(self.q)
    }

    pub fn space(&self) -> &Arc<EmpiricalSpace> {
        self.kernel.space()
    }
}

/// `c(x, y, a)` as the posterior-weighted sum of per-step costs.
pub fn expected_step_cost(
    kernel: &TransitionKernel,
    x: usize,
    y: usize,
    action: Action,
    cost: &dyn CostModel,
    estimator: &dyn Estimator,
) -> Result<f64> {
    let space = kernel.space();
    let power = kernel.power(y);
    let posterior: Vec<f64> = power.row(x).iter().copied().collect();
    let estimate = estimator.estimate(&EstimateInput { space, last: x, elapsed: y, posterior: &posterior })?;
    Ok(weighted_cost(space, &posterior, &estimate, action, cost))
}

fn weighted_cost(space: &EmpiricalSpace, posterior: &[f64], estimate: &[f64], action: Action, cost: &dyn CostModel) -> f64 {
    posterior
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(m, &w)| w * cost.cost(space.probabilities(m), estimate, action))
        .sum()
}

/// Estimates `h(P^y(x, .))` and expected step costs for every `(x, y <= k)`.
#[derive(Debug, Clone)]
pub struct StepCostTable {
    atoms: usize,
    k: usize,
    estimates: Vec<Vec<f64>>,
    costs: Vec<[f64; 2]>,
}

impl StepCostTable {
    pub fn compute(model: &PlanningModel<'_>, k: usize) -> Result<Self> {
        let space = model.space().clone();
        let n = space.len();
        model.kernel.precompute(k);
        let rows: Vec<Vec<(Vec<f64>, [f64; 2])>> = (0..=k)
            .into_par_iter()
            .map(|y| {
                let power = model.kernel.power(y);
                (0..n)
                    .map(|x| {
                        let posterior: Vec<f64> = power.row(x).iter().copied().collect();
                        let input = EstimateInput { space: &space, last: x, elapsed: y, posterior: &posterior };
                        let est = model.estimator.estimate(&input)?;
                        let c = Action::ALL.map(|a| weighted_cost(&space, &posterior, &est, a, model.cost));
                        Ok((est, c))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut estimates = Vec::with_capacity(n * (k + 1));
        let mut costs = Vec::with_capacity(n * (k + 1));
        for row in rows {
            for (e, c) in row {
                estimates.push(e);
                costs.push(c);
            }
        }
        Ok(Self { atoms: n, k, estimates, costs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn cost(&self, x: usize, y: usize, action: Action) -> f64 {
        self.costs[y * self.atoms + x][action.index()]
    }

    pub fn estimate(&self, x: usize, y: usize) -> &[f64] {
        &self.estimates[y * self.atoms + x]
    }

    pub fn max_cost(&self) -> f64 {
        self.costs.iter().flat_map(|c| c.iter()).cloned().fold(0.0, f64::max)
    }
}

/// Stopping rule and wrap-around anchor for [`value_iteration`].
#[derive(Debug, Clone, Copy)]
pub struct ValueIterationOptions {
    /// Sup-norm change between sweeps at which iteration stops.
    pub tol: f64,
    /// Atom `m*` the virtual model jumps to after a blank at `y = k`;
    /// defaults to the atom nearest the uniform distribution.
    pub anchor: Option<usize>,
}

impl Default for ValueIterationOptions {
    fn default() -> Self {
        Self { tol: 1e-9, anchor: None }
    }
}

/// Sweep budget: the contraction bound for `tol`, plus margin.
fn iteration_budget(tol: f64, gamma: f64, c_max: f64) -> usize {
    if c_max <= 0.0 {
        return 2;
    }
    let raw = (tol * (1.0 - gamma) / c_max).ln() / gamma.ln();
    let base = raw.max(0.0).ceil() as usize;
    base + base / 10 + 10
}

/// Solves the truncated Bellman equation by Jacobi value iteration.
pub fn value_iteration(model: &PlanningModel<'_>, k: usize, opts: &ValueIterationOptions) -> Result<ValueTable> {
    model.validate()?;
    let costs = StepCostTable::compute(model, k)?;
    value_iteration_with_costs(model, &costs, opts)
}

/// [`value_iteration`] with precomputed step costs.
pub fn value_iteration_with_costs(
    model: &PlanningModel<'_>,
    costs: &StepCostTable,
    opts: &ValueIterationOptions,
) -> Result<ValueTable> {
    model.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let space = model.space().clone();
    let n = space.len();
    let k = costs.k();
    if costs.atoms() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: costs.atoms() });
    }
    let anchor = opts.anchor.unwrap_or_else(|| space.nearest_to_uniform());
    if anchor >= n {
        return Err(Error::invalid(format!("anchor {anchor} out of range for {n} atoms")));
    }
    let (gamma, q) = (model.gamma, model.q);
    model.kernel.precompute(k + 1);
    let powers: Vec<_> = (1..=k + 1).map(|y| model.kernel.power(y)).collect();
    let budget = iteration_budget(opts.tol, gamma, costs.max_cost());

    let mut v = vec![0.0; n * (k + 1)];
    let mut v0 = vec![0.0; n * (k + 1)];
    let mut v1 = vec![0.0; n * (k + 1)];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let reset_values = nalgebra::DVector::from_column_slice(&v[..n]);
        let anchor_value = v[anchor];
        let prev = &v;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..=k)
            .into_par_iter()
            .map(|y| {
                let reset = powers[y].as_ref() * &reset_values;
                let mut r0 = Vec::with_capacity(n);
                let mut r1 = Vec::with_capacity(n);
                for x in 0..n {
                    let cont = if y < k { prev[(y + 1) * n + x] } else { anchor_value };
                    r0.push(costs.cost(x, y, Action::Estimate) + gamma * cont);
                    r1.push(costs.cost(x, y, Action::Collect) + (1.0 - q) * gamma * cont + q * gamma * reset[x]);
                }
                (r0, r1)
            })
            .collect();
        residual = 0.0;
        for (y, (r0, r1)) in rows.into_iter().enumerate() {
            for x in 0..n {
                let i = y * n + x;
                let next = r0[x].min(r1[x]);
                residual = residual.max((next - v[i]).abs());
                v[i] = next;
                v0[i] = r0[x];
                v1[i] = r1[x];
            }
        }
        if residual < opts.tol {
            break;
        }
    }
    if residual >= opts.tol {
        return Err(Error::NonConvergence { iterations, residual });
    }
    debug!("value iteration converged after {iterations} sweeps (residual {residual:e})");
    Ok(ValueTable { space, k, gamma, q, anchor, iterations, residual, v0, v1 })
}

/// Converged `V0`, `V1` over `M(n) x {0..k}`.
#[derive(Debug, Clone)]
pub struct ValueTable {
    space: Arc<EmpiricalSpace>,
    k: usize,
    gamma: f64,
    q: f64,
    anchor: usize,
    iterations: usize,
    residual: f64,
    v0: Vec<f64>,
    v1: Vec<f64>,
}

impl ValueTable {
    fn at(&self, x: usize, y: usize) -> usize {
        assert!(y <= self.k, "elapsed time {y} beyond truncation {}", self.k);
        y * self.space.len() + x
    }

    pub fn space(&self) -> &Arc<EmpiricalSpace> {
        &self.space
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn v0(&self, x: usize, y: usize) -> f64 {
        self.v0[self.at(x, y)]
    }

    pub fn v1(&self, x: usize, y: usize) -> f64 {
        self.v1[self.at(x, y)]
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.v0(x, y).min(self.v1(x, y))
    }

    /// Greedy action; ties go to estimating.
    pub fn action(&self, x: usize, y: usize) -> Action {
        if self.v1(x, y) < self.v0(x, y) {
            Action::Collect
        } else {
            Action::Estimate
        }
    }

    pub fn max_value(&self) -> f64 {
        self.v0.iter().zip(&self.v1).map(|(a, b)| a.min(*b)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.v0.iter().zip(&self.v1).map(|(a, b)| a.min(*b)).fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns `x_index,x_counts,y,V0,V1,V,action`, `y` outermost.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x_index,x_counts,y,V0,V1,V,action")?;
        for y in 0..=self.k {
            for x in 0..self.space.len() {
                writeln!(
                    w,
                    "{x},{},{y},{:.12},{:.12},{:.12},{}",
                    self.space.atom(x),
                    self.v0(x, y),
                    self.v1(x, y),
                    self.value(x, y),
                    self.action(x, y)
                )?;
            }
        }
        Ok(())
    }
}

/// Deterministic map `(x, y) -> a`; elapsed times beyond `k` use row `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    atoms: usize,
    k: usize,
    actions: Vec<Action>,
}

/// Greedy strategy of a value table (estimate on ties).
pub fn extract_strategy(table: &ValueTable) -> Strategy {
    let n = table.space.len();
    let actions = (0..=table.k).flat_map(|y| (0..n).map(move |x| (x, y))).map(|(x, y)| table.action(x, y)).collect();
    Strategy { atoms: n, k: table.k, actions }
}

impl Strategy {
    pub fn from_fn(atoms: usize, k: usize, f: impl Fn(usize, usize) -> Action) -> Self {
        let actions = (0..=k).flat_map(|y| (0..atoms).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { atoms, k, actions }
    }

    pub fn constant(atoms: usize, k: usize, action: Action) -> Self {
        Self::from_fn(atoms, k, |_, _| action)
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn action(&self, x: usize, y: usize) -> Action {
        self.actions[y.min(self.k) * self.atoms + x]
    }

    /// Smallest elapsed time at which the strategy collects from `x`.
    pub fn first_collect(&self, x: usize) -> Option<usize> {
        (0..=self.k).find(|&y| self.action(x, y).is_collect())
    }

    /// Strategy restricted to `y <= k`.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.k);
        Self { atoms: self.atoms, k, actions: self.actions[..(k + 1) * self.atoms].to_vec() }
    }

    pub fn write_csv<W: Write>(&self, space: &EmpiricalSpace, mut w: W) -> Result<()> {
        writeln!(w, "x_index,x_counts,y,action")?;
        for y in 0..=self.k {
            for x in 0..self.atoms {
                writeln!(w, "{x},{},{y},{}", space.atom(x), self.action(x, y))?;
            }
        }
        Ok(())
    }

    /// Reads any CSV with `x_index`, `y` and `action` columns, including the
    /// value-table format. Lines starting with `#` are skipped.
    pub fn read_csv<R: BufRead>(atoms: usize, r: R) -> Result<Self> {
        let mut lines = r.lines().filter(|l| !matches!(l, Ok(s) if s.starts_with('#') || s.trim().is_empty()));
        let header = lines.next().ok_or_else(|| Error::Parse("empty strategy CSV".into()))??;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| {
            cols.iter().position(|c| *c == name).ok_or_else(|| Error::Parse(format!("missing column {name}")))
        };
        let (cx, cy, ca) = (find("x_index")?, find("y")?, find("action")?);
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            let get = |i: usize| -> Result<usize> {
                let s = fields.get(i).ok_or_else(|| Error::Parse(format!("short row: {line}")))?.trim();
                s.parse().map_err(|_| Error::Parse(format!("bad integer {s:?}")))
            };
            let a = Action::from_index(get(ca)?).ok_or_else(|| Error::Parse("action must be 0 or 1".into()))?;
            entries.push((get(cx)?, get(cy)?, a));
        }
        let k = entries.iter().map(|e| e.1).max().ok_or_else(|| Error::Parse("strategy CSV has no rows".into()))?;
        let mut actions = vec![None; atoms * (k + 1)];
        for (x, y, a) in entries {
            if x >= atoms {
                return Err(Error::Parse(format!("x_index {x} out of range")));
            }
            actions[y * atoms + x] = Some(a);
        }
        let actions = actions
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Parse("strategy CSV does not cover every (x, y)".into()))?;
        Ok(Self { atoms, k, actions })
    }
}

/// Exact `H`-step optimal cost from `(x, 0)` for every `x`, by backward
/// recursion on `(x, y)` without truncation.
pub fn finite_horizon_values(model: &PlanningModel<'_>, horizon: usize) -> Result<Vec<f64>> {
    model.validate()?;
    let n = model.space().len();
    if horizon == 0 {
        return Ok(vec![0.0; n]);
    }
    let costs = StepCostTable::compute(model, horizon)?;
    let powers: Vec<_> = (0..=horizon + 1).map(|y| model.kernel.power(y)).collect();
    let (gamma, q) = (model.gamma, model.q);
    // w[y * n + x] holds W_{h-1}; y ranges over 0..=horizon
    let mut w = vec![0.0; n * (horizon + 1)];
    for h in 1..=horizon {
        let prev_zero = nalgebra::DVector::from_column_slice(&w[..n]);
        let mut next = vec![0.0; n * (horizon + 1)];
        for y in 0..=horizon - h {
            let reset = powers[y + 1].as_ref() * &prev_zero;
            for x in 0..n {
                let cont = w[(y + 1) * n + x];
                let a0 = costs.cost(x, y, Action::Estimate) + gamma * cont;
                let a1 = costs.cost(x, y, Action::Collect) + (1.0 - q) * gamma * cont + q * gamma * reset[x];
                next[y * n + x] = a0.min(a1);
            }
        }
        w = next;
    }
    w.truncate(n);
    Ok(w)
}
