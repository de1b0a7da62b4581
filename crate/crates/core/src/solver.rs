//! Iterative nonlinear least-squares over rotation-only, translation-only,
//! and full SE(3) variables with Mahalanobis-weighted residual blocks.
//!
//! Rotation-valued variables are updated through a 3-vector axis-angle
//! increment applied by left multiplication, so iterates stay on the
//! manifold. Jacobians default to central finite differences; blocks may
//! supply analytic ones.

use crate::geometry::{RigidTransform, Rotation};
use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use thiserror::Error;

/// Added to information matrices (after symmetrization) before use.
pub const INFORMATION_FLOOR: f64 = 1e-6;

const FD_STEP: f64 = 1e-6;
const LM_DAMPING_CAP: f64 = 1e32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("normal equations singular beyond damping recovery")]
    NumericalFailure,
}

/// An optimization variable living on a (product of) manifold(s).
pub trait Variable: Clone + Send + Sync {
    fn dof(&self) -> usize;
    /// Applies a local increment of length `dof()`.
    fn retract(&self, delta: &[f64]) -> Self;
}

impl Variable for f64 {
    fn dof(&self) -> usize {
        1
    }
    fn retract(&self, delta: &[f64]) -> Self {
        self + delta[0]
    }
}

impl Variable for Vector3<f64> {
    fn dof(&self) -> usize {
        3
    }
    fn retract(&self, delta: &[f64]) -> Self {
        self + Vector3::new(delta[0], delta[1], delta[2])
    }
}

impl Variable for Rotation {
    fn dof(&self) -> usize {
        3
    }
    fn retract(&self, delta: &[f64]) -> Self {
        Rotation::exp(Vector3::new(delta[0], delta[1], delta[2])) * *self
    }
}

impl Variable for RigidTransform {
    fn dof(&self) -> usize {
        6
    }
    fn retract(&self, delta: &[f64]) -> Self {
        RigidTransform {
            rotation: Rotation::exp(Vector3::new(delta[0], delta[1], delta[2])) * self.rotation,
            translation: self.translation + Vector3::new(delta[3], delta[4], delta[5]),
        }
    }
}

type ResidualFn<V> = Box<dyn Fn(&V) -> DVector<f64> + Send + Sync>;
type JacobianFn<V> = Box<dyn Fn(&V) -> DMatrix<f64> + Send + Sync>;

/// One Mahalanobis-weighted residual term: cost contribution
/// `r(v)ᵀ · W · r(v)` with `W` playing the Ω⁻¹ role.
pub struct ResidualBlock<V> {
    residual: ResidualFn<V>,
    jacobian: Option<JacobianFn<V>>,
    information: DMatrix<f64>,
    dim: usize,
}

impl<V: Variable> ResidualBlock<V> {
    /// `information` is symmetrized and floored before use.
    pub fn new(
        dim: usize,
        information: DMatrix<f64>,
        residual: impl Fn(&V) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        ResidualBlock {
            residual: Box::new(residual),
            jacobian: None,
            information: condition_information(information),
            dim,
        }
    }

    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(&V) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Box::new(jacobian));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn information(&self) -> &DMatrix<f64> {
        &self.information
    }

    pub fn residual_at(&self, v: &V) -> DVector<f64> {
        (self.residual)(v)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    /// Analytic Jacobian if supplied, otherwise central finite differences.
    pub fn jacobian_at(&self, v: &V) -> DMatrix<f64> {
        match &self.jacobian {
            Some(j) => j(v),
            None => self.fd_jacobian_at(v),
        }
    }

    /// Central finite-difference Jacobian of the residual w.r.t. the local
    /// increment.
    pub fn fd_jacobian_at(&self, v: &V) -> DMatrix<f64> {
        let dof = v.dof();
        let mut jac = DMatrix::zeros(self.dim, dof);
        let mut delta = vec![0.0; dof];
        for k in 0..dof {
            delta[k] = FD_STEP;
            let plus = (self.residual)(&v.retract(&delta));
            delta[k] = -FD_STEP;
            let minus = (self.residual)(&v.retract(&delta));
            delta[k] = 0.0;
            let col = (plus - minus) / (2.0 * FD_STEP);
            jac.set_column(k, &col);
        }
        jac
    }

    fn cost_at(&self, v: &V) -> f64 {
        let r = (self.residual)(v);
        (r.transpose() * &self.information * r)[(0, 0)]
    }
}

fn condition_information(w: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&w + w.transpose()) * 0.5;
    let n = sym.nrows();
    sym + DMatrix::identity(n, n) * INFORMATION_FLOOR
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    GaussNewton,
    #[default]
    LevenbergMarquardt,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub param_tolerance: f64,
    pub cost_tolerance: f64,
    pub method: Method,
    pub lm_initial_damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 50,
            param_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            method: Method::LevenbergMarquardt,
            lm_initial_damping: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ParamTol,
    CostTol,
    MaxIter,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Cost after every accepted step, starting at the initial cost.
    pub accepted_costs: Vec<f64>,
}

fn total_cost<V: Variable>(blocks: &[ResidualBlock<V>], v: &V) -> f64 {
    if blocks.len() < 64 {
        blocks.iter().map(|b| b.cost_at(v)).sum()
    } else {
        // Chunked ordered reduction keeps the sum schedule-independent.
        let partials: Vec<f64> = blocks
            .par_chunks(256)
            .map(|chunk| chunk.iter().map(|b| b.cost_at(v)).sum::<f64>())
            .collect();
        partials.iter().sum()
    }
}

fn normal_equations<V: Variable>(
    blocks: &[ResidualBlock<V>],
    v: &V,
    dof: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let fold_chunk = |chunk: &[ResidualBlock<V>]| {
        let mut h = DMatrix::zeros(dof, dof);
        let mut g = DVector::zeros(dof);
        for b in chunk {
            let r = b.residual_at(v);
            let j = b.jacobian_at(v);
            let wj = &b.information * &j;
            h += j.transpose() * &wj;
            g += wj.transpose() * r;
        }
        (h, g)
    };
    if blocks.len() < 64 {
        fold_chunk(blocks)
    } else {
        let partials: Vec<(DMatrix<f64>, DVector<f64>)> = blocks
            .par_chunks(256)
            .map(fold_chunk)
            .collect();
        partials.into_iter().fold(
            (DMatrix::zeros(dof, dof), DVector::zeros(dof)),
            |(h, g), (ph, pg)| (h + ph, g + pg),
        )
    }
}

/// Minimizes `Σ rᵢ(v)ᵀ Wᵢ rᵢ(v)` over the variable's manifold.
///
/// Gauss-Newton terminates with a `NumericalFailure` report if a step would
/// increase the cost; Levenberg-Marquardt only ever accepts non-increasing
/// steps. A hard `Err` is returned when the normal equations stay singular
/// beyond damping recovery.
pub fn minimize<V: Variable>(
    blocks: &[ResidualBlock<V>],
    initial: &V,
    cfg: &SolverConfig,
) -> Result<(V, SolveReport), SolverError> {
    let dof = initial.dof();
    let mut v = initial.clone();
    let mut cost = total_cost(blocks, &v);
    let mut accepted_costs = vec![cost];

    if cost <= 0.0 || blocks.is_empty() || dof == 0 {
        return Ok((
            v,
            SolveReport {
                final_cost: cost,
                iterations: 0,
                converged: true,
                termination: Termination::CostTol,
                accepted_costs,
            },
        ));
    }

    let mut damping = cfg.lm_initial_damping;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let (h, g) = normal_equations(blocks, &v, dof);

        if g.norm() == 0.0 {
            return Ok((
                v,
                SolveReport {
                    final_cost: cost,
                    iterations,
                    converged: true,
                    termination: Termination::ParamTol,
                    accepted_costs,
                },
            ));
        }

        let step = match cfg.method {
            Method::GaussNewton => h
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&(-&g)))
                .ok_or(SolverError::NumericalFailure)?,
            Method::LevenbergMarquardt => {
                // Marquardt scaling keeps the step invariant under a uniform
                // rescale of all information matrices.
                let max_diag = (0..dof).map(|i| h[(i, i)]).fold(0.0f64, f64::max);
                let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);
                loop {
                    let mut damped = h.clone();
                    for i in 0..dof {
                        damped[(i, i)] += damping * h[(i, i)].max(floor);
                    }
                    match damped.cholesky() {
                        Some(ch) => break ch.solve(&(-&g)),
                        None => {
                            damping *= 10.0;
                            if damping > LM_DAMPING_CAP {
                                return Err(SolverError::NumericalFailure);
                            }
                        }
                    }
                }
            }
        };

        let candidate = v.retract(step.as_slice());
        let candidate_cost = total_cost(blocks, &candidate);

        match cfg.method {
            Method::GaussNewton => {
                if candidate_cost > cost {
                    return Ok((
                        v,
                        SolveReport {
                            final_cost: cost,
                            iterations,
                            converged: false,
                            termination: Termination::NumericalFailure,
                            accepted_costs,
                        },
                    ));
                }
                let drop = cost - candidate_cost;
                v = candidate;
                cost = candidate_cost;
                accepted_costs.push(cost);
                if step.norm() <= cfg.param_tolerance {
                    return Ok((
                        v,
                        SolveReport {
                            final_cost: cost,
                            iterations,
                            converged: true,
                            termination: Termination::ParamTol,
                            accepted_costs,
                        },
                    ));
                }
                if drop <= cfg.cost_tolerance * cost.max(1e-30) {
                    return Ok((
                        v,
                        SolveReport {
                            final_cost: cost,
                            iterations,
                            converged: true,
                            termination: Termination::CostTol,
                            accepted_costs,
                        },
                    ));
                }
            }
            Method::LevenbergMarquardt => {
                if candidate_cost <= cost {
                    let drop = cost - candidate_cost;
                    v = candidate;
                    cost = candidate_cost;
                    accepted_costs.push(cost);
                    damping = (damping / 10.0).max(1e-15);
                    if step.norm() <= cfg.param_tolerance {
                        return Ok((
                            v,
                            SolveReport {
                                final_cost: cost,
                                iterations,
                                converged: true,
                                termination: Termination::ParamTol,
                                accepted_costs,
                            },
                        ));
                    }
                    if drop <= cfg.cost_tolerance * cost.max(1e-30) {
                        return Ok((
                            v,
                            SolveReport {
                                final_cost: cost,
                                iterations,
                                converged: true,
                                termination: Termination::CostTol,
                                accepted_costs,
                            },
                        ));
                    }
                } else {
                    damping *= 10.0;
                    if damping > LM_DAMPING_CAP {
                        return Err(SolverError::NumericalFailure);
                    }
                }
            }
        }
    }

    Ok((
        v,
        SolveReport {
            final_cost: cost,
            iterations,
            converged: false,
            termination: Termination::MaxIter,
            accepted_costs,
        },
    ))
}
