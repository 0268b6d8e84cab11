//! Per-step cost models `c(m, m_hat, a)` on probability vectors.

use crate::chain::EmpiricalSpace;
use crate::Action;

/// Nonnegative per-step cost with a declared upper bound.
pub trait CostModel: Send + Sync {
    /// Cost of true data `m` estimated as `estimate` under `action`.
    fn cost(&self, m: &[f64], estimate: &[f64], action: Action) -> f64;

    /// Analytic upper bound `c_max`, if one is known.
    fn upper_bound(&self) -> Option<f64> {
        None
    }

    fn name(&self) -> &str;
}

/// `max c` over `M(n) x M(n) x {0, 1}`, i.e. with point estimates.
pub fn exhaustive_cost_bound(cost: &dyn CostModel, space: &EmpiricalSpace) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..space.len() {
        for j in 0..space.len() {
            for a in Action::ALL {
                best = best.max(cost.cost(space.probabilities(i), space.probabilities(j), a));
            }
        }
    }
    best
}

/// `c_max` for planning: the analytic bound when declared, else the
/// exhaustive maximum.
pub fn cost_bound(cost: &dyn CostModel, space: &EmpiricalSpace) -> f64 {
    cost.upper_bound().unwrap_or_else(|| exhaustive_cost_bound(cost, space))
}

fn mean_label(labels: &[f64], p: &[f64]) -> f64 {
    labels.iter().zip(p).map(|(l, q)| l * q).sum()
}

/// `|s| |s - s_hat| + fee * a` where `s`, `s_hat` are mean labels; for a
/// single node this is the battery cost on the node state.
#[derive(Debug, Clone)]
pub struct WeightedAbsCost {
    labels: Vec<f64>,
    fee: f64,
}

impl WeightedAbsCost {
    pub fn new(labels: Vec<f64>, fee: f64) -> Self {
        Self { labels, fee }
    }
}

impl CostModel for WeightedAbsCost {
    fn cost(&self, m: &[f64], estimate: &[f64], action: Action) -> f64 {
        let s = mean_label(&self.labels, m);
        let s_hat = mean_label(&self.labels, estimate);
        s.abs() * (s - s_hat).abs() + self.fee * action.as_f64()
    }

    fn upper_bound(&self) -> Option<f64> {
        let max_abs = self.labels.iter().fold(0.0f64, |a, l| a.max(l.abs()));
        let lo = self.labels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(max_abs * (hi - lo) + self.fee.max(0.0))
    }

    fn name(&self) -> &str {
        "weighted_abs"
    }
}

/// `KL(m || m_hat) + fee * a` in nats, with `0 log 0 = 0`.
///
/// Estimate entries below `floor` (default `1 / (10 n)`) are raised to it and
/// the estimate renormalized, which keeps the cost finite.
#[derive(Debug, Clone)]
pub struct KlFeeCost {
    fee: f64,
    floor: f64,
}

impl KlFeeCost {
    pub fn new(population: u32, fee: f64) -> Self {
        Self { fee, floor: 1.0 / (10.0 * population as f64) }
    }

    pub fn with_floor(floor: f64, fee: f64) -> Self {
        Self { fee, floor }
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

impl CostModel for KlFeeCost {
    fn cost(&self, m: &[f64], estimate: &[f64], action: Action) -> f64 {
        let needs_floor = estimate.iter().any(|&v| v < self.floor);
        let total: f64 = if needs_floor { estimate.iter().map(|&v| v.max(self.floor)).sum() } else { 1.0 };
        let mut kl = 0.0;
        for (&p, &e) in m.iter().zip(estimate) {
            if p > 0.0 {
                let e = if needs_floor { e.max(self.floor) / total } else { e };
                kl += p * (p / e).ln();
            }
        }
        kl.max(0.0) + self.fee * action.as_f64()
    }

    fn name(&self) -> &str {
        "kl_plus_fee"
    }
}

/// `weight * ||m - m_hat||_2^2 + fee * a`.
#[derive(Debug, Clone)]
pub struct QuadraticFeeCost {
    weight: f64,
    fee: f64,
}

impl QuadraticFeeCost {
    pub fn new(weight: f64, fee: f64) -> Self {
        Self { weight, fee }
    }
}

impl CostModel for QuadraticFeeCost {
    fn cost(&self, m: &[f64], estimate: &[f64], action: Action) -> f64 {
        let err: f64 = m.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
        self.weight * err + self.fee * action.as_f64()
    }

    fn upper_bound(&self) -> Option<f64> {
        Some(2.0 * self.weight.max(0.0) + self.fee.max(0.0))
    }

    fn name(&self) -> &str {
        "quadratic_fee"
    }
}

/// `||m - m_hat||_inf + fee * a`.
#[derive(Debug, Clone)]
pub struct SupNormFeeCost {
    fee: f64,
}

impl SupNormFeeCost {
    pub fn new(fee: f64) -> Self {
        Self { fee }
    }
}

impl CostModel for SupNormFeeCost {
    fn cost(&self, m: &[f64], estimate: &[f64], action: Action) -> f64 {
        let err = m.iter().zip(estimate).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        err + self.fee * action.as_f64()
    }

    fn upper_bound(&self) -> Option<f64> {
        Some(1.0 + self.fee.max(0.0))
    }

    fn name(&self) -> &str {
        "sup_norm_fee"
    }
}

/// User-supplied table `c(m_index, m_hat_index, a)` over atoms of `M(n)`.
/// Estimates that are not atoms are snapped to the nearest atom in L1.
#[derive(Debug, Clone)]
pub struct TableCost {
    space: EmpiricalSpace,
    /// `values[(i * len + j) * 2 + a]`
    values: Vec<f64>,
}

impl TableCost {
    pub fn new(space: EmpiricalSpace, values: Vec<f64>) -> crate::Result<Self> {
        let expected = space.len() * space.len() * 2;
        if values.len() != expected {
            return Err(crate::Error::DimensionMismatch { expected, actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(crate::Error::invalid("cost table entries must be finite and nonnegative"));
        }
        Ok(Self { space, values })
    }

    pub fn from_fn(space: EmpiricalSpace, f: impl Fn(usize, usize, Action) -> f64) -> crate::Result<Self> {
        let n = space.len();
        let mut values = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                for a in Action::ALL {
                    values.push(f(i, j, a));
                }
            }
        }
        Self::new(space, values)
    }

    fn nearest(&self, p: &[f64]) -> usize {
        if let Some(i) = self.space.index_of_probabilities(p) {
            return i;
        }
        (0..self.space.len())
            .map(|i| {
                let d: f64 = self.space.probabilities(i).iter().zip(p).map(|(a, b)| (a - b).abs()).sum();
                (i, d)
            })
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0
    }
}

impl CostModel for TableCost {
    fn cost(&self, m: &[f64], estimate: &[f64], action: Action) -> f64 {
        let (i, j) = (self.nearest(m), self.nearest(estimate));
        self.values[(i * self.space.len() + j) * 2 + action.index()]
    }

    fn upper_bound(&self) -> Option<f64> {
        Some(self.values.iter().cloned().fold(0.0, f64::max))
    }

    fn name(&self) -> &str {
        "custom_table"
    }
}
