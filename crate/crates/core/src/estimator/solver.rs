//! Levenberg-damped Gauss-Newton over iteratively reweighted normal equations.

use super::{EstimatorError, SolverConfig};

/// Robust cost split by factor type.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
    pub reprojection: f64,
    pub normal: f64,
    /// Number of normal factors that contributed to `normal`.
    pub normal_factors: usize,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.reprojection + self.normal
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveSummary {
    pub initial: CostBreakdown,
    pub last: CostBreakdown,
    pub iterations: usize,
    pub accepted_steps: usize,
}

/// A robust least-squares problem the damped driver can iterate on.
pub(crate) trait DampedProblem {
    /// Robust cost at the current estimate.
    fn cost(&self) -> CostBreakdown;
    /// Builds the reweighted normal equations at the current estimate.
    fn linearize(&mut self);
    /// Solves `(H + μI) δ = −g` and returns `|δ|`, or `None` if the system is
    /// not positive definite.
    fn solve_step(&mut self, damping: f64) -> Option<f64>;
    /// Moves the estimate by the last solved step, remembering the old one.
    fn apply_step(&mut self);
    /// Restores the estimate saved by the last `apply_step`.
    fn revert_step(&mut self);
}

pub(crate) fn minimize<P: DampedProblem>(
    problem: &mut P,
    cfg: &SolverConfig,
    max_iterations: usize,
) -> Result<SolveSummary, EstimatorError> {
    let mut cost = problem.cost();
    let mut summary = SolveSummary { initial: cost, last: cost, iterations: 0, accepted_steps: 0 };
    let mut damping = cfg.initial_damping;
    'outer: while summary.iterations < max_iterations {
        summary.iterations += 1;
        problem.linearize();
        loop {
            let Some(step_norm) = problem.solve_step(damping) else {
                damping *= cfg.damping_increase;
                if damping > cfg.max_damping {
                    return Err(EstimatorError::SolverDiverged { damping });
                }
                continue;
            };
            if step_norm < cfg.step_tolerance {
                break 'outer;
            }
            problem.apply_step();
            let trial = problem.cost();
            log::trace!(
                "iteration {}: damping {damping:.1e}, step {step_norm:.3e}, cost {:.6e} -> {:.6e}",
                summary.iterations,
                cost.total(),
                trial.total()
            );
            if trial.total() < cost.total() {
                let relative = (cost.total() - trial.total()) / cost.total();
                cost = trial;
                summary.accepted_steps += 1;
                damping = (damping / cfg.damping_decrease).max(1e-12);
                if relative < cfg.cost_tolerance {
                    break 'outer;
                }
                break;
            }
            problem.revert_step();
            damping *= cfg.damping_increase;
            if damping > cfg.max_damping {
                return Err(EstimatorError::SolverDiverged { damping });
            }
        }
    }
    summary.last = cost;
    Ok(summary)
}
