//! Large-population behaviour: the mean-field operator, the infinite-population
//! estimator and the certainty threshold above which estimating forever beats
//! any collection.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::chain::{
    enumerate_empirical_distributions, sample_next_counts, EmpiricalDistribution, LocalKernel, StateSpace,
};
use crate::planning::CostModel;
use crate::{stream_rng, Action, Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| *v < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("vector is not a pmf (sum = {sum})")));
    }
    Ok(())
}

/// `Tbar(p)(s') = sum_s p(s) T(s' | s, p)`. The output is not renormalized.
pub fn mean_field_step(p: &[f64], local: &LocalKernel) -> Result<Vec<f64>> {
    if p.len() != local.dim() {
        return Err(Error::DimensionMismatch { expected: local.dim(), actual: p.len() });
    }
    check_simplex(p)?;
    let t = local.matrix_at(p)?;
    Ok((0..p.len()).map(|j| p.iter().enumerate().map(|(s, w)| w * t[(s, j)]).sum()).collect())
}

/// `Tbar` applied `t - 1` times to `m_1`.
pub fn infinite_population_estimate(m1: &[f64], t: usize, local: &LocalKernel) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::invalid("time index starts at 1"));
    }
    check_simplex(m1)?;
    let mut p = m1.to_vec();
    for _ in 1..t {
        p = mean_field_step(&p, local)?;
    }
    Ok(p)
}

/// The mean-field map of a local kernel.
#[derive(Debug, Clone)]
pub struct MeanFieldOperator {
    local: LocalKernel,
}

impl MeanFieldOperator {
    pub fn new(local: LocalKernel) -> Self {
        Self { local }
    }

    pub fn local(&self) -> &LocalKernel {
        &self.local
    }

    pub fn step(&self, p: &[f64]) -> Result<Vec<f64>> {
        mean_field_step(p, &self.local)
    }

    pub fn estimate(&self, m1: &[f64], t: usize) -> Result<Vec<f64>> {
        infinite_population_estimate(m1, t, &self.local)
    }
}

/// `g K_c / ((1 - g)(1 - g K_p)) * noise_term`, where `noise_term` is the
/// `C / sqrt(n)` fluctuation coefficient.
pub fn certainty_threshold(k_c: f64, k_p: f64, gamma: f64, noise_term: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("discount must lie in (0, 1), got {gamma}")));
    }
    if k_c < 0.0 || k_p < 0.0 || noise_term < 0.0 {
        return Err(Error::invalid("constants and noise term must be nonnegative"));
    }
    if gamma * k_p >= 1.0 {
        return Err(Error::AssumptionViolated(format!(
            "gamma * K_p = {} >= 1, the mean-field map is not a discounted contraction",
            gamma * k_p
        )));
    }
    Ok(gamma * k_c / ((1.0 - gamma) * (1.0 - gamma * k_p)) * noise_term)
}

/// Advisory decision: estimate forever when collecting costs more than the
/// threshold.
pub fn recommend_estimate_only(threshold: f64, collection_cost: f64) -> bool {
    collection_cost > threshold
}

/// Largest finite-difference ratios over a simplex grid: lower bounds on the
/// true Lipschitz constants (sup norm throughout).
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub k_t: f64,
    pub k_c: f64,
    pub k_p: f64,
    pub grid_resolution: u32,
    pub grid_points: usize,
}

/// Largest grid size accepted by [`estimate_lipschitz_constants`].
pub const LIPSCHITZ_GRID_CAP: usize = 5_000;

/// Scans all pairs of grid points `{0, 1/r, .., 1}^|S|` on the simplex.
pub fn estimate_lipschitz_constants(
    local: &LocalKernel,
    cost: &dyn CostModel,
    resolution: u32,
) -> Result<LipschitzEstimate> {
    let dim = local.dim();
    let labels = StateSpace::new((0..dim).map(|i| i as f64).collect())?;
    let grid: Vec<Vec<f64>> = enumerate_empirical_distributions(resolution, &labels, LIPSCHITZ_GRID_CAP as u64)?
        .iter()
        .map(EmpiricalDistribution::probabilities)
        .collect();
    let kernels: Vec<DMatrix<f64>> = grid.iter().map(|p| local.matrix_at(p).map(|m| m.into_owned())).collect::<Result<_>>()?;
    let images: Vec<Vec<f64>> = grid.iter().map(|p| mean_field_step(p, local)).collect::<Result<_>>()?;
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));

    let (k_t, k_c, k_p) = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = (0.0f64, 0.0f64, 0.0f64);
            for j in 0..grid.len() {
                if i == j {
                    continue;
                }
                let d = sup(&grid[i], &grid[j]);
                let dk = (&kernels[i] - &kernels[j]).amax();
                acc.0 = acc.0.max(dk / d);
                acc.1 = acc.1.max(cost.cost(&grid[i], &grid[j], Action::Estimate) / d);
                acc.2 = acc.2.max(sup(&images[i], &images[j]) / d);
            }
            acc
        })
        .reduce(|| (0.0, 0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)));
    Ok(LipschitzEstimate { k_t, k_c, k_p, grid_resolution: resolution, grid_points: grid.len() })
}

/// Monte-Carlo summary of the estimator-only strategy at one population size.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOnlyReport {
    pub population: u32,
    /// Mean discounted cost of never collecting.
    pub mean_cost: f64,
    pub std_err: f64,
    /// `sqrt(n)` times the mean one-step fluctuation `E ||m_{t+1} - Tbar(m_t)||_inf`.
    pub c_fit: f64,
    pub paths: usize,
    pub horizon: usize,
}

/// Simulates the population from `initial` and scores the infinite-population
/// estimate `Tbar^{t-1}(m_1)` against the realized data at every step.
pub fn estimator_only_monte_carlo(
    local: &LocalKernel,
    cost: &dyn CostModel,
    initial: &EmpiricalDistribution,
    gamma: f64,
    horizon: usize,
    paths: usize,
    seed: u64,
) -> Result<EstimatorOnlyReport> {
    if paths < 2 || horizon == 0 {
        return Err(Error::invalid("need at least two paths and a positive horizon"));
    }
    let n = initial.population();
    let mut estimates = vec![initial.probabilities()];
    for _ in 1..horizon {
        let next = mean_field_step(estimates.last().unwrap(), local)?;
        estimates.push(next);
    }
    let per_path: Vec<(f64, f64)> = (0..paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = stream_rng(seed, path as u64);
            let mut m = initial.clone();
            let (mut total, mut discount, mut fluct) = (0.0, 1.0, 0.0);
            for est in estimates.iter() {
                let p = m.probabilities();
                total += discount * cost.cost(&p, est, Action::Estimate);
                discount *= gamma;
                let predicted = mean_field_step(&p, local)?;
                m = sample_next_counts(&m, local, &mut rng)?;
                let realized = m.probabilities();
                fluct += realized.iter().zip(&predicted).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            }
            Ok((total, fluct / horizon as f64))
        })
        .collect::<Result<_>>()?;
    let mean = per_path.iter().map(|p| p.0).sum::<f64>() / paths as f64;
    let var = per_path.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
    let fluct = per_path.iter().map(|p| p.1).sum::<f64>() / paths as f64;
    Ok(EstimatorOnlyReport {
        population: n,
        mean_cost: mean,
        std_err: (var / paths as f64).sqrt(),
        c_fit: fluct * (n as f64).sqrt(),
        paths,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::SupNormFeeCost;
    use approx::assert_abs_diff_eq;

    fn flip() -> LocalKernel {
        LocalKernel::decoupled(DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.3, 0.7])).unwrap()
    }

    /// `T(. | s, p)`: stay with prob 0.5 + 0.4 p(s), otherwise switch.
    fn herding() -> LocalKernel {
        LocalKernel::coupled(2, |p: &[f64]| {
            let a = 0.5 + 0.4 * p[0];
            let b = 0.5 + 0.4 * p[1];
            DMatrix::from_row_slice(2, 2, &[a, 1.0 - a, 1.0 - b, b])
        })
    }

    #[test]
    fn identity_kernel_fixes_every_pmf() {
        let id = LocalKernel::decoupled(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(mean_field_step(&[0.2, 0.3, 0.5], &id).unwrap(), vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn decoupled_step_is_matrix_product() {
        let out = mean_field_step(&[1.0, 0.0], &flip()).unwrap();
        assert_abs_diff_eq!(out[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn coupled_step_hand_expansion() {
        let p = [0.25, 0.75];
        // p0 * a + p1 * (1 - b) with a = 0.6, b = 0.8
        let expected0 = 0.25 * 0.6 + 0.75 * 0.2;
        let out = mean_field_step(&p, &herding()).unwrap();
        assert_abs_diff_eq!(out[0], expected0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 1.0 - expected0, epsilon = 1e-15);
    }

    #[test]
    fn infinite_population_estimate_iterates() {
        let m1 = [0.9, 0.1];
        assert_eq!(infinite_population_estimate(&m1, 1, &herding()).unwrap(), m1.to_vec());
        let mut p = m1.to_vec();
        for _ in 0..3 {
            p = mean_field_step(&p, &herding()).unwrap();
        }
        assert_eq!(infinite_population_estimate(&m1, 4, &herding()).unwrap(), p);
        let t = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.3, 0.7]);
        let direct = nalgebra::RowDVector::from_row_slice(&m1) * t.pow(4);
        let got = infinite_population_estimate(&m1, 5, &flip()).unwrap();
        assert_abs_diff_eq!(got[0], direct[0], epsilon = 1e-14);
    }

    #[test]
    fn threshold_formula_and_scaling() {
        assert_eq!(certainty_threshold(1.0, 1.0, 0.8, 0.0).unwrap(), 0.0);
        let t = |n: f64| certainty_threshold(2.0, 1.0, 0.8, 1.5 / n.sqrt()).unwrap();
        assert_abs_diff_eq!(t(100.0), 0.8 * 2.0 / (0.2 * 0.2) * 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(t(400.0), t(100.0) / 2.0, epsilon = 1e-12);
        assert!(matches!(certainty_threshold(1.0, 1.25, 0.8, 0.1), Err(Error::AssumptionViolated(_))));
        assert!(recommend_estimate_only(0.1, 0.2));
        assert!(!recommend_estimate_only(0.3, 0.2));
    }

    #[test]
    fn lipschitz_scan_known_cases() {
        let est = estimate_lipschitz_constants(&flip(), &SupNormFeeCost::new(0.0), 20).unwrap();
        assert_eq!(est.k_t, 0.0);
        assert_abs_diff_eq!(est.k_c, 1.0, epsilon = 1e-12);
        // binary decoupled: |Tbar(p) - Tbar(p')| = |T00 - T10| |p - p'|
        assert_abs_diff_eq!(est.k_p, 0.4, epsilon = 1e-12);
        assert!(est.k_p <= 1.0 + 1e-9);
        let coupled = estimate_lipschitz_constants(&herding(), &SupNormFeeCost::new(0.0), 20).unwrap();
        assert_abs_diff_eq!(coupled.k_t, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn estimator_only_cost_shrinks_with_population() {
        let cost = SupNormFeeCost::new(0.0);
        let run = |n: u32| {
            let init = EmpiricalDistribution::new(vec![n, 0]).unwrap();
            estimator_only_monte_carlo(&flip(), &cost, &init, 0.8, 40, 2_000, 3).unwrap()
        };
        let (small, large) = (run(16), run(256));
        assert!(large.mean_cost < small.mean_cost);
        assert!((large.c_fit / small.c_fit - 1.0).abs() < 0.25);
    }
}
