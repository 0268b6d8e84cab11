//! Estimators `h` mapping what the decision maker knows to a point estimate.

use crate::asymptotics::mean_field_step;
use crate::chain::{EmpiricalSpace, LocalKernel};
use crate::Result;

/// Everything an estimator may look at: the last credible atom, the elapsed
/// time and the posterior over `M(n)` (the row `T_m^y(x, .)`).
#[derive(Debug, Clone, Copy)]
pub struct EstimateInput<'a> {
    pub space: &'a EmpiricalSpace,
    pub last: usize,
    pub elapsed: usize,
    pub posterior: &'a [f64],
}

/// Deterministic map to a probability vector over `S`.
pub trait Estimator: Send + Sync {
    fn estimate(&self, input: &EstimateInput<'_>) -> Result<Vec<f64>>;

    fn name(&self) -> &str;
}

/// Index of the most probable atom; ties go to the lowest canonical index.
pub fn map_estimator(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Maximum a posteriori atom.
#[derive(Debug, Clone, Copy, Default)]
pub struct MapEstimator;

impl Estimator for MapEstimator {
    fn estimate(&self, input: &EstimateInput<'_>) -> Result<Vec<f64>> {
        Ok(input.space.probabilities(map_estimator(input.posterior)).to_vec())
    }

    fn name(&self) -> &str {
        "map"
    }
}

/// Posterior mean of the probability vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanEstimator;

impl Estimator for MeanEstimator {
    fn estimate(&self, input: &EstimateInput<'_>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; input.space.dim()];
        for (i, &w) in input.posterior.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(input.space.probabilities(i)) {
                *o += w * p;
            }
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "mean"
    }
}

/// The last credible observation, unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct LastObservationEstimator;

impl Estimator for LastObservationEstimator {
    fn estimate(&self, input: &EstimateInput<'_>) -> Result<Vec<f64>> {
        Ok(input.space.probabilities(input.last).to_vec())
    }

    fn name(&self) -> &str {
        "identity"
    }
}

/// Mean-field prediction: the last observation pushed `elapsed` times
/// through the mean-field operator of the local kernel.
#[derive(Debug, Clone)]
pub struct InfinitePopulationEstimator {
    local: LocalKernel,
}

impl InfinitePopulationEstimator {
    pub fn new(local: LocalKernel) -> Self {
        Self { local }
    }
}

impl Estimator for InfinitePopulationEstimator {
    fn estimate(&self, input: &EstimateInput<'_>) -> Result<Vec<f64>> {
        let mut p = input.space.probabilities(input.last).to_vec();
        for _ in 0..input.elapsed {
            p = mean_field_step(&p, &self.local)?;
        }
        Ok(p)
    }

    fn name(&self) -> &str {
        "infinite_population"
    }
}
