//! Damped Newton method for smooth convex per-phase losses.

use nalgebra::{DMatrix, DVector};

use super::{basis_len, basis_table, dirichlet_weights, PeriodicParam, SmoothFit, SmoothLoss};
use crate::error::{Error, Result};

/// `L(C) + lambda D(C)` as a function of the flat coefficient vector, with
/// analytic gradient and Hessian.
///
/// Coefficient `c[r * m + a]` multiplies basis function `r` in component `a`.
pub struct SmoothObjective<'a> {
    loss: &'a dyn SmoothLoss,
    lambda: f64,
    harmonics: usize,
    basis: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> SmoothObjective<'a> {
    pub fn new(loss: &'a dyn SmoothLoss, lambda: f64, harmonics: usize) -> Self {
        let period = loss.period();
        Self {
            loss,
            lambda,
            harmonics,
            basis: basis_table(harmonics, period),
            weights: dirichlet_weights(harmonics, period),
        }
    }

    pub fn len(&self) -> usize {
        basis_len(self.harmonics) * self.loss.dim()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn theta(&self, phase: usize, c: &[f64], out: &mut [f64]) {
        let (m, nb) = (self.loss.dim(), basis_len(self.harmonics));
        let b = &self.basis[phase * nb..(phase + 1) * nb];
        out.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..nb {
            for a in 0..m {
                out[a] += b[r] * c[r * m + a];
            }
        }
    }

    fn penalty(&self, c: &[f64]) -> f64 {
        let m = self.loss.dim();
        c.iter()
            .enumerate()
            .map(|(k, x)| self.weights[k / m] * x * x)
            .sum::<f64>()
            * self.lambda
    }

    /// Whether every grid phase lies in the loss domain.
    pub fn in_domain(&self, c: &[f64]) -> bool {
        let mut theta = vec![0.0; self.loss.dim()];
        (0..self.loss.period()).all(|p| {
            self.theta(p, c, &mut theta);
            self.loss.in_domain(&theta)
        })
    }

    /// Objective value; `+inf` outside the domain.
    pub fn value(&self, c: &[f64]) -> f64 {
        let mut theta = vec![0.0; self.loss.dim()];
        let mut f = self.penalty(c);
        for p in 0..self.loss.period() {
            self.theta(p, c, &mut theta);
            if !self.loss.in_domain(&theta) {
                return f64::INFINITY;
            }
            f += self.loss.phase_value(p, &theta);
        }
        f
    }

    /// Value, gradient and Hessian at `c` (assumed inside the domain).
    pub fn derivatives(&self, c: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (m, nb) = (self.loss.dim(), basis_len(self.harmonics));
        let n = nb * m;
        let mut grad = DVector::<f64>::zeros(n);
        let mut hess = DMatrix::<f64>::zeros(n, n);
        let mut theta = vec![0.0; m];
        let mut g = vec![0.0; m];
        let mut h = vec![0.0; m * m];
        let mut f = self.penalty(c);
        for p in 0..self.loss.period() {
            self.theta(p, c, &mut theta);
            f += self.loss.phase_derivatives(p, &theta, &mut g, &mut h);
            let b = &self.basis[p * nb..(p + 1) * nb];
            for r in 0..nb {
                for a in 0..m {
                    grad[r * m + a] += b[r] * g[a];
                }
            }
            for a in 0..m {
                for bb in 0..m {
                    let hab = h[a * m + bb];
                    if hab == 0.0 {
                        continue;
                    }
                    for r in 0..nb {
                        let br = b[r] * hab;
                        for s in 0..nb {
                            hess[(r * m + a, s * m + bb)] += br * b[s];
                        }
                    }
                }
            }
        }
        for k in 0..n {
            let w = 2.0 * self.lambda * self.weights[k / m];
            grad[k] += w * c[k];
            hess[(k, k)] += w;
        }
        (f, grad, hess)
    }

    pub fn gradient(&self, c: &[f64]) -> Vec<f64> {
        self.derivatives(c).1.as_slice().to_vec()
    }
}

pub(super) fn solve(
    loss: &dyn SmoothLoss,
    lambda: f64,
    start: PeriodicParam,
    settings: &super::SolverSettings,
) -> Result<SmoothFit> {
    let (m, harmonics, period) = (start.dim(), start.harmonics(), start.period());
    let objective = SmoothObjective::new(loss, lambda, harmonics);
    let max_iter = settings.max_iter.unwrap_or(200);
    let mut c = start.coeffs().to_vec();
    if !objective.in_domain(&c) {
        return Err(Error::Domain(
            "initial point is outside the loss domain".into(),
        ));
    }
    let mut grad_norm = f64::INFINITY;
    for iter in 1..=max_iter {
        let (f, grad, hess) = objective.derivatives(&c);
        grad_norm = grad.norm();
        if !f.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Convergence {
                message: "non-finite objective or gradient".into(),
                iterations: iter,
                primal_residual: 0.0,
                dual_residual: grad_norm,
            });
        }
        if grad_norm <= settings.tol {
            return finish(m, harmonics, period, c, f, iter, grad_norm);
        }

        // Newton direction, with diagonal damping if the Hessian is not numerically PD.
        let mut shift = 0.0;
        let step = loop {
            let mut a = hess.clone();
            if shift > 0.0 {
                for k in 0..a.nrows() {
                    a[(k, k)] += shift;
                }
            }
            if let Some(ch) = a.cholesky() {
                break ch.solve(&(-&grad));
            }
            shift = if shift == 0.0 {
                1e-10 * (1.0 + hess.diagonal().amax())
            } else {
                shift * 10.0
            };
            if shift > 1e12 {
                return Err(Error::Convergence {
                    message: "Hessian could not be regularized".into(),
                    iterations: iter,
                    primal_residual: 0.0,
                    dual_residual: grad_norm,
                });
            }
        };
        let slope = grad.dot(&step);
        if -slope <= 1e-12 * (1.0 + f.abs()) {
            // Objective changes are below rounding; take the full step only
            // if it still shrinks the gradient.
            let trial: Vec<f64> = c.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if objective.in_domain(&trial) {
                let g = objective.gradient(&trial);
                if g.iter().map(|x| x * x).sum::<f64>().sqrt() < grad_norm {
                    c = trial;
                    continue;
                }
            }
            return finish(m, harmonics, period, c, f, iter, grad_norm);
        }

        // Backtracking line search; rejects steps that leave the domain.
        let mut t = 1.0;
        let mut trial = c.clone();
        loop {
            for k in 0..c.len() {
                trial[k] = c[k] + t * step[k];
            }
            let ft = objective.value(&trial);
            if ft.is_finite() && ft <= f + 0.25 * t * slope {
                break;
            }
            t *= 0.5;
            if t < 1e-14 {
                return Err(Error::Convergence {
                    message: "line search could not stay inside the domain".into(),
                    iterations: iter,
                    primal_residual: 0.0,
                    dual_residual: grad_norm,
                });
            }
        }
        c.copy_from_slice(&trial);
    }
    Err(Error::Convergence {
        message: "iteration cap reached".into(),
        iterations: max_iter,
        primal_residual: 0.0,
        dual_residual: grad_norm,
    })
}

fn finish(
    m: usize,
    harmonics: usize,
    period: usize,
    c: Vec<f64>,
    f: f64,
    iterations: usize,
    grad_norm: f64,
) -> Result<SmoothFit> {
    Ok(SmoothFit {
        param: PeriodicParam::from_coeffs(m, harmonics, period, c)?,
        objective: f,
        iterations,
        primal_residual: 0.0,
        dual_residual: grad_norm,
    })
}
