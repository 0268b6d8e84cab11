//! Linear network dynamics: spectral modes of a graph polynomial, the
//! Kalman-like estimator `A^y x`, the elapsed-time-only dynamic program and
//! the Riccati recursion for noisy Gaussian observations.

use std::collections::HashMap;
use std::io::BufRead;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Action, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Largest horizon accepted by [`finite_horizon_schedule`].
pub const MAX_SCHEDULE_HORIZON: usize = 22;

/// Undirected weighted graph with a polynomial filter `sum_l alpha(l) A^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    adjacency: DMatrix<f64>,
    alpha: Vec<f64>,
    modes: usize,
}

impl GraphSpec {
    pub fn new(adjacency: DMatrix<f64>, alpha: Vec<f64>, modes: usize) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 || adjacency.ncols() != n {
            return Err(Error::invalid("adjacency must be a nonempty square matrix"));
        }
        if (&adjacency - adjacency.transpose()).amax() > SYMMETRY_TOL {
            return Err(Error::invalid("adjacency must be symmetric"));
        }
        if modes == 0 || modes > n {
            return Err(Error::invalid(format!("mode count must lie in 1..={n}, got {modes}")));
        }
        if alpha.is_empty() {
            return Err(Error::invalid("polynomial needs at least one coefficient"));
        }
        Ok(Self { adjacency, alpha, modes })
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Dense adjacency from CSV rows of numbers.
    pub fn read_dense_csv<R: BufRead>(r: R) -> Result<DMatrix<f64>> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number {f:?}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parse("dense adjacency CSV must be square".into()));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Adjacency from `i,j[,weight]` lines (0-based, undirected). Header
    /// lines that do not parse as integers are skipped.
    pub fn read_edge_list_csv<R: BufRead>(nodes: usize, r: R) -> Result<DMatrix<f64>> {
        let mut adj = DMatrix::zeros(nodes, nodes);
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (Ok(i), Ok(j)) = (f[0].parse::<usize>(), f.get(1).unwrap_or(&"").parse::<usize>()) else {
                if lineno == 0 {
                    continue;
                }
                return Err(Error::Parse(format!("line {}: bad edge {line:?}", lineno + 1)));
            };
            let w = match f.get(2) {
                Some(s) => s.parse::<f64>().map_err(|_| Error::Parse(format!("bad weight {s:?}")))?,
                None => 1.0,
            };
            if i >= nodes || j >= nodes {
                return Err(Error::Parse(format!("edge ({i}, {j}) outside {nodes} nodes")));
            }
            adj[(i, j)] = w;
            adj[(j, i)] = w;
        }
        Ok(adj)
    }
}

/// Complete graph `K_n` adjacency.
pub fn complete_graph(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Star graph adjacency with node 0 at the center.
pub fn star_graph(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i != j && (i == 0 || j == 0) { 1.0 } else { 0.0 })
}

/// One dominant mode: eigenvalue, filtered coefficient `A_d` and eigenvector
/// scaled so that `(1/n) sum_i v_i^2 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMode {
    pub eigenvalue: f64,
    pub coefficient: f64,
    pub weights: DVector<f64>,
}

/// Top modes by `|lambda|`; equal magnitudes put the positive eigenvalue
/// first. Each eigenvector's largest-magnitude entry is made positive.
pub fn spectral_vectorize(g: &GraphSpec) -> Result<Vec<SpectralMode>> {
    let n = g.nodes();
    let eig = SymmetricEigen::try_new(g.adjacency.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::invalid("symmetric eigensolver did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    let tol = 1e-9 * eig.eigenvalues.amax().max(1.0);
    order.sort_by(|&i, &j| {
        let (a, b) = (eig.eigenvalues[i], eig.eigenvalues[j]);
        if (a.abs() - b.abs()).abs() > tol {
            b.abs().total_cmp(&a.abs())
        } else {
            b.total_cmp(&a)
        }
    });
    let scale = (n as f64).sqrt();
    Ok(order
        .into_iter()
        .take(g.modes)
        .map(|i| {
            let lambda = eig.eigenvalues[i];
            let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
            let norm = v.norm();
            v *= scale / norm;
            let lead = v.iamax();
            // break magnitude ties on the lowest index so the sign is stable
            let lead = (0..n).find(|&k| (v[k].abs() - v[lead].abs()).abs() <= 1e-9).unwrap_or(lead);
            if v[lead] < 0.0 {
                v = -v;
            }
            let coefficient = g.alpha.iter().enumerate().map(|(l, a)| a * lambda.powi(l as i32)).sum();
            SpectralMode { eigenvalue: lambda, coefficient, weights: v }
        })
        .collect())
}

/// `m_{t+1} = A m_t + w_bar_t` with mode noise covariance `Sigma_bar_w`,
/// credibility `q`, discount `gamma` and collection fee `ell`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNetworkModel {
    a: DMatrix<f64>,
    sigma_w: DMatrix<f64>,
    pub q: f64,
    pub gamma: f64,
    pub ell: f64,
}

impl LinearNetworkModel {
    pub fn new(a: DMatrix<f64>, sigma_w: DMatrix<f64>, q: f64, gamma: f64, ell: f64) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::invalid("A must be a nonempty square matrix"));
        }
        if sigma_w.nrows() != d || sigma_w.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: sigma_w.nrows() });
        }
        if (&sigma_w - sigma_w.transpose()).amax() > 1e-10 {
            return Err(Error::invalid("noise covariance must be symmetric"));
        }
        let min_eig = SymmetricEigen::new(sigma_w.clone()).eigenvalues.min();
        if min_eig < -1e-10 {
            return Err(Error::invalid(format!("noise covariance is not positive semidefinite (eigenvalue {min_eig})")));
        }
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("credibility must lie in [0, 1], got {q}")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount must lie in (0, 1), got {gamma}")));
        }
        if ell < 0.0 {
            return Err(Error::invalid("collection fee must be nonnegative"));
        }
        Ok(Self { a, sigma_w, q, gamma, ell })
    }

    /// Scalar node states on a graph: `A = diag(A_d)` and
    /// `Sigma_bar_w[d, d'] = (sigma^2 / n^2) sum_i v_i^d v_i^d'`.
    pub fn from_modes(modes: &[SpectralMode], node_variance: f64, q: f64, gamma: f64, ell: f64) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::invalid("need at least one mode"));
        }
        if node_variance < 0.0 {
            return Err(Error::invalid("node noise variance must be nonnegative"));
        }
        let n = modes[0].weights.len() as f64;
        let d = modes.len();
        let a = DMatrix::from_fn(d, d, |i, j| if i == j { modes[i].coefficient } else { 0.0 });
        let sigma = DMatrix::from_fn(d, d, |i, j| node_variance / (n * n) * modes[i].weights.dot(&modes[j].weights));
        Self::new(a, sigma, q, gamma, ell)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    /// Symmetric with every eigenvalue strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        (&self.a - self.a.transpose()).amax() <= SYMMETRY_TOL
            && SymmetricEigen::new(self.a.clone()).eigenvalues.amax() < 1.0
    }
}

/// Fresh credible data replaces the estimate; otherwise it is propagated
/// through `A`.
pub fn kalman_like_update(
    estimate: &DVector<f64>,
    observation: Option<&DVector<f64>>,
    elapsed_next: usize,
    a: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if a.ncols() != estimate.len() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), actual: estimate.len() });
    }
    if elapsed_next == 0 {
        let x = observation.ok_or_else(|| Error::invalid("elapsed time 0 requires a fresh observation"))?;
        if x.len() != estimate.len() {
            return Err(Error::DimensionMismatch { expected: estimate.len(), actual: x.len() });
        }
        Ok(x.clone())
    } else {
        Ok(a * estimate)
    }
}

/// `Tr(sum_{tau=1}^{y} (A'A)^{tau-1} Sigma_bar_w) + ell a`.
pub fn elapsed_cost_finite_sum(y: usize, action: Action, model: &LinearNetworkModel) -> f64 {
    let b = model.a.transpose() * &model.a;
    let mut term = model.sigma_w.clone();
    let mut total = 0.0;
    for _ in 0..y {
        total += term.trace();
        term = &b * term;
    }
    total + model.ell * action.as_f64()
}

/// `Tr((I - A'A)^{-1} (I - (A'A)^y) Sigma_bar_w) + ell a`; `None` when
/// `I - A'A` is singular.
pub fn elapsed_cost_closed_form(y: usize, action: Action, model: &LinearNetworkModel) -> Option<f64> {
    let d = model.dim();
    let b = model.a.transpose() * &model.a;
    let inv = (DMatrix::identity(d, d) - &b).try_inverse()?;
    let by = b.pow(y as u32);
    let m = inv * (DMatrix::identity(d, d) - by) * &model.sigma_w;
    Some(m.trace() + model.ell * action.as_f64())
}

/// `c(y, a)`: closed form when the model is stable, finite sum otherwise.
pub fn elapsed_cost(y: usize, action: Action, model: &LinearNetworkModel) -> f64 {
    if model.is_stable() {
        if let Some(c) = elapsed_cost_closed_form(y, action, model) {
            return c;
        }
    }
    elapsed_cost_finite_sum(y, action, model)
}

/// `c(y, a)` for `y in {0..k}`, optionally shifted by a fixed delivery delay.
#[derive(Debug, Clone, PartialEq)]
pub struct ElapsedCostTable {
    costs: Vec<[f64; 2]>,
}

impl ElapsedCostTable {
    pub fn compute(model: &LinearNetworkModel, k: usize) -> Self {
        Self::compute_delayed(model, k, 0)
    }

    /// Costs seen by a decision maker whose data arrive `delay` steps late:
    /// its elapsed time `y` corresponds to `y + delay` steps of drift.
    pub fn compute_delayed(model: &LinearNetworkModel, k: usize, delay: usize) -> Self {
        let b = model.a.transpose() * &model.a;
        let mut term = model.sigma_w.clone();
        let mut running = 0.0;
        let mut sums = Vec::with_capacity(k + delay + 1);
        for _ in 0..=k + delay {
            sums.push(running);
            running += term.trace();
            term = &b * term;
        }
        let stable = model.is_stable();
        let costs = (0..=k)
            .map(|y| {
                let e = if stable {
                    elapsed_cost_closed_form(y + delay, Action::Estimate, model).unwrap_or(sums[y + delay])
                } else {
                    sums[y + delay]
                };
                [e, e + model.ell]
            })
            .collect();
        Self { costs }
    }

    pub fn from_costs(costs: Vec<[f64; 2]>) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::invalid("cost table needs at least one row"));
        }
        Ok(Self { costs })
    }

    pub fn k(&self) -> usize {
        self.costs.len() - 1
    }

    pub fn cost(&self, y: usize, action: Action) -> f64 {
        self.costs[y][action.index()]
    }

    /// `c(k, 1)`, the bound used to size `k`.
    pub fn c_max(&self) -> f64 {
        self.costs.iter().map(|c| c[1]).fold(0.0, f64::max)
    }
}

/// Solution of the elapsed-time dynamic program.
#[derive(Debug, Clone, PartialEq)]
pub struct ElapsedTimeSolution {
    pub v0: Vec<f64>,
    pub v1: Vec<f64>,
    pub iterations: usize,
}

impl ElapsedTimeSolution {
    pub fn value(&self, y: usize) -> f64 {
        self.v0[y].min(self.v1[y])
    }

    /// Collect when strictly cheaper; estimate on ties.
    pub fn action(&self, y: usize) -> Action {
        let y = y.min(self.v0.len() - 1);
        if self.v1[y] < self.v0[y] {
            Action::Collect
        } else {
            Action::Estimate
        }
    }

    pub fn strategy(&self) -> Vec<Action> {
        (0..self.v0.len()).map(|y| self.action(y)).collect()
    }

    /// First elapsed time at which data are collected.
    pub fn threshold(&self) -> Option<usize> {
        (0..self.v0.len()).find(|&y| self.action(y).is_collect())
    }
}

/// Value iteration on `y in {0..k}`:
/// `V0(y) = c(y,0) + g C(y)`, `V1(y) = c(y,1) + (1-q) g C(y) + q g V(0)` with
/// `C(y) = V(y+1)` below `k` and `V(0)` at `k`.
pub fn y_space_value_iteration(costs: &ElapsedCostTable, q: f64, gamma: f64, tol: f64) -> Result<ElapsedTimeSolution> {
    if !(gamma > 0.0 && gamma < 1.0) || !(0.0..=1.0).contains(&q) || !(tol > 0.0) {
        return Err(Error::invalid("need 0 < gamma < 1, 0 <= q <= 1 and tol > 0"));
    }
    let k = costs.k();
    let c_max = costs.c_max();
    let budget = if c_max > 0.0 {
        let raw = (tol * (1.0 - gamma) / c_max).ln() / gamma.ln();
        raw.max(0.0).ceil() as usize * 11 / 10 + 10
    } else {
        2
    };
    let mut v = vec![0.0; k + 1];
    let mut v0 = vec![0.0; k + 1];
    let mut v1 = vec![0.0; k + 1];
    for it in 1..=budget {
        let mut residual: f64 = 0.0;
        let mut next = vec![0.0; k + 1];
        for y in 0..=k {
            let cont = if y < k { v[y + 1] } else { v[0] };
            v0[y] = costs.cost(y, Action::Estimate) + gamma * cont;
            v1[y] = costs.cost(y, Action::Collect) + (1.0 - q) * gamma * cont + q * gamma * v[0];
            next[y] = v0[y].min(v1[y]);
            residual = residual.max((next[y] - v[y]).abs());
        }
        v = next;
        if residual < tol {
            return Ok(ElapsedTimeSolution { v0, v1, iterations: it });
        }
    }
    Err(Error::NonConvergence { iterations: budget, residual: f64::NAN })
}

/// Estimator-only discounted cost from a fresh observation,
/// `sum_y g^y c(y, 0)`, truncated once `g^y` drops below `1e-16`.
pub fn estimator_only_cost(model: &LinearNetworkModel) -> f64 {
    let b = model.a.transpose() * &model.a;
    let mut term = model.sigma_w.clone();
    let (mut running, mut total, mut discount) = (0.0, 0.0, 1.0);
    while discount > 1e-16 {
        total += discount * running;
        running += term.trace();
        term = &b * term;
        discount *= model.gamma;
    }
    total
}

/// Noisy measurement `o = C m + xi` with `xi ~ N(0, Sigma_bar_xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub c: DMatrix<f64>,
    pub sigma_xi: DMatrix<f64>,
}

/// One covariance step. Without collection `P' = A P A' + Sigma_bar_w`;
/// with it the measurement term `A P C' (C P C' + Sigma_xi)^{-1} C P A'` is
/// subtracted. The result is symmetrized.
pub fn riccati_step(
    p: &DMatrix<f64>,
    action: Action,
    model: &LinearNetworkModel,
    obs: &ObservationModel,
) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if p.nrows() != d || p.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: p.nrows() });
    }
    let a = &model.a;
    let mut next = a * p * a.transpose() + &model.sigma_w;
    if action.is_collect() {
        if obs.c.ncols() != d || obs.sigma_xi.nrows() != obs.c.nrows() {
            return Err(Error::DimensionMismatch { expected: d, actual: obs.c.ncols() });
        }
        let innovation = &obs.c * p * obs.c.transpose() + &obs.sigma_xi;
        let inv = match innovation.clone().try_inverse() {
            Some(inv) => inv,
            None => {
                warn!("singular innovation covariance; using the pseudo-inverse");
                innovation.pseudo_inverse(1e-12).map_err(|e| Error::invalid(e.to_string()))?
            }
        };
        let cross = a * p * obs.c.transpose();
        next -= &cross * inv * cross.transpose();
    }
    Ok((&next + next.transpose()) * 0.5)
}

/// Optimal binary schedule and its objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub actions: Vec<Action>,
    pub objective: f64,
}

/// Objective `sum_t g^{t-1} (Tr P_{t+1} + ell a_t)` of a schedule from `P_1 = 0`.
pub fn schedule_objective(actions: &[Action], model: &LinearNetworkModel, obs: &ObservationModel) -> Result<f64> {
    let d = model.dim();
    let mut p = DMatrix::zeros(d, d);
    let (mut total, mut discount) = (0.0, 1.0);
    for &a in actions {
        p = riccati_step(&p, a, model, obs)?;
        total += discount * (p.trace() + model.ell * a.as_f64());
        discount *= model.gamma;
    }
    Ok(total)
}

fn ties_to_collect(collect: f64, estimate: f64) -> bool {
    collect <= estimate + 1e-12 * estimate.abs().max(collect.abs()).max(1.0)
}

/// Globally optimal schedule over `H <= 22` steps by exhaustive search,
/// memoized on `(t, P)` with `P` rounded to 12 significant digits. Ties
/// go to collecting.
pub fn finite_horizon_schedule(model: &LinearNetworkModel, obs: &ObservationModel, horizon: usize) -> Result<Schedule> {
    if horizon > MAX_SCHEDULE_HORIZON {
        return Err(Error::SizeCap(format!(
            "exhaustive scheduling is limited to H <= {MAX_SCHEDULE_HORIZON}; larger horizons need a heuristic search"
        )));
    }
    let d = model.dim();
    let mut memo: HashMap<(usize, Vec<i64>), (f64, Action)> = HashMap::new();
    let p0 = DMatrix::zeros(d, d);
    let objective = search(model, obs, horizon, 0, &p0, &mut memo)?;
    let mut actions = Vec::with_capacity(horizon);
    let mut p = p0;
    for t in 0..horizon {
        let (_, a) = memo[&(t, key(&p))];
        actions.push(a);
        p = riccati_step(&p, a, model, obs)?;
    }
    Ok(Schedule { actions, objective })
}

fn key(p: &DMatrix<f64>) -> Vec<i64> {
    p.iter()
        .map(|v| {
            if *v == 0.0 {
                return 0;
            }
            let exp = v.abs().log10().floor() as i32;
            let mant = (v / 10f64.powi(exp - 11)).round() as i64;
            mant.wrapping_mul(1000).wrapping_add(exp as i64)
        })
        .collect()
}

fn search(
    model: &LinearNetworkModel,
    obs: &ObservationModel,
    horizon: usize,
    t: usize,
    p: &DMatrix<f64>,
    memo: &mut HashMap<(usize, Vec<i64>), (f64, Action)>,
) -> Result<f64> {
    if t == horizon {
        return Ok(0.0);
    }
    let k = (t, key(p));
    if let Some(&(v, _)) = memo.get(&k) {
        return Ok(v);
    }
    let mut branch = [0.0; 2];
    for a in Action::ALL {
        let next = riccati_step(p, a, model, obs)?;
        let stage = next.trace() + model.ell * a.as_f64();
        branch[a.index()] = stage + model.gamma * search(model, obs, horizon, t + 1, &next, memo)?;
    }
    let best = if ties_to_collect(branch[1], branch[0]) { (branch[1], Action::Collect) } else { (branch[0], Action::Estimate) };
    memo.insert(k, best);
    Ok(best.0)
}
