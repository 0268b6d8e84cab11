//! Brute-force optimum over observation histories for tiny instances.
//!
//! The recursion carries the full belief over `M(n)`, propagated one step at
//! a time through the one-step kernel, and branches on every observation a
//! history can produce. It never forms kernel powers or the `(x, y)` state,
//! so it checks the planner independently.

use super::{EstimateInput, PlanningModel};
use crate::{Action, Error, Result};

pub const ORACLE_MAX_DIM: usize = 2;
pub const ORACLE_MAX_POPULATION: u32 = 3;
pub const ORACLE_MAX_HORIZON: usize = 6;

/// Optimal `H`-step discounted cost over history-dependent strategies,
/// starting from the observed atom `initial`.
pub fn bellman_oracle_small(model: &PlanningModel<'_>, initial: usize, horizon: usize) -> Result<f64> {
    model.validate()?;
    let space = model.space();
    if space.dim() > ORACLE_MAX_DIM || space.population() > ORACLE_MAX_POPULATION || horizon > ORACLE_MAX_HORIZON {
        return Err(Error::SizeCap(format!(
            "oracle limited to |S| <= {ORACLE_MAX_DIM}, n <= {ORACLE_MAX_POPULATION}, H <= {ORACLE_MAX_HORIZON}"
        )));
    }
    if initial >= space.len() {
        return Err(Error::invalid(format!("initial atom {initial} out of range")));
    }
    let mut belief = vec![0.0; space.len()];
    belief[initial] = 1.0;
    expand(model, &belief, initial, 0, horizon)
}

fn expand(model: &PlanningModel<'_>, belief: &[f64], last: usize, elapsed: usize, remaining: usize) -> Result<f64> {
    if remaining == 0 {
        return Ok(0.0);
    }
    let space = model.space();
    let input = EstimateInput { space, last, elapsed, posterior: belief };
    let estimate = model.estimator.estimate(&input)?;
    let t = model.kernel.matrix();
    let n = space.len();
    let predicted: Vec<f64> = (0..n).map(|j| (0..n).map(|i| belief[i] * t[(i, j)]).sum()).collect();

    let blank_future = expand(model, &predicted, last, elapsed + 1, remaining - 1)?;
    let mut best = f64::INFINITY;
    for action in Action::ALL {
        let stage: f64 = belief
            .iter()
            .enumerate()
            .map(|(m, &w)| w * model.cost.cost(space.probabilities(m), &estimate, action))
            .sum();
        let future = match action {
            Action::Estimate => blank_future,
            Action::Collect => {
                let mut credible = 0.0;
                for (m, &p) in predicted.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let mut point = vec![0.0; n];
                    point[m] = 1.0;
                    credible += p * expand(model, &point, m, 0, remaining - 1)?;
                }
                (1.0 - model.q) * blank_future + model.q * credible
            }
        };
        best = best.min(stage + model.gamma * future);
    }
    Ok(best)
}
