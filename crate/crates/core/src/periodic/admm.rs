//! Operator splitting for separable (possibly nonsmooth) losses.
//!
//! Splits the grid values `U = B C` from the Fourier coefficients `C`:
//!
//! ```text
//! minimize  lambda D(C) + sum_p [loss_p(U_p) + I_Theta(U_p)]
//! subject to B C = U
//! ```
//!
//! The `C` step is a small linear solve with `rho B'B + 2 lambda diag(w)`, the
//! `U` step is a per-phase proximal step (pool-adjacent-violators for the
//! ordering constraint).

use nalgebra::DMatrix;

use super::{
    basis_len, basis_table, dirichlet_weights, Constraint, PeriodicParam, SeparableLoss, SmoothFit,
    FEASIBILITY_TOL,
};
use crate::error::{Error, Result};

const RELAXATION: f64 = 1.6;
const ADAPT_EVERY: usize = 25;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Proximal step for one phase: `argmin_u loss_p(u) + I_Theta(u) + rho/2 |u - v|^2`.
fn phase_prox(
    loss: &dyn SeparableLoss,
    constraint: &Constraint,
    phase: usize,
    v: &[f64],
    rho: f64,
    out: &mut [f64],
) {
    let m = v.len();
    match constraint {
        Constraint::Unconstrained => {
            for j in 0..m {
                out[j] = loss.block_prox(phase, j..j + 1, &v[j..j + 1], rho);
            }
        }
        Constraint::Bounds { lower, upper } => {
            for j in 0..m {
                out[j] = loss
                    .block_prox(phase, j..j + 1, &v[j..j + 1], rho)
                    .clamp(lower[j], upper[j]);
            }
        }
        Constraint::Ordered => {
            // Pool adjacent violators; valid for any separable convex objective.
            let mut blocks: Vec<(usize, usize, f64)> = Vec::with_capacity(m);
            for j in 0..m {
                let mut block = (
                    j,
                    j + 1,
                    loss.block_prox(phase, j..j + 1, &v[j..j + 1], rho),
                );
                while let Some(&(start, _, prev)) = blocks.last() {
                    if prev <= block.2 {
                        break;
                    }
                    blocks.pop();
                    let range = start..block.1;
                    block = (
                        start,
                        block.1,
                        loss.block_prox(phase, range.clone(), &v[range], rho),
                    );
                }
                blocks.push(block);
            }
            for (start, end, value) in blocks {
                out[start..end].iter_mut().for_each(|o| *o = value);
            }
        }
    }
}

/// Shifts constant terms so that tiny residual violations at the grid vanish.
pub(super) fn polish(param: &mut PeriodicParam, constraint: &Constraint) {
    let m = param.dim();
    match constraint {
        Constraint::Unconstrained => {}
        Constraint::Ordered => {
            for j in 0..m.saturating_sub(1) {
                let grid = param.eval_grid();
                let worst = grid
                    .chunks(m)
                    .map(|th| th[j] - th[j + 1])
                    .fold(0.0, f64::max);
                if worst > 0.0 {
                    // the constant basis function is 1 at every phase
                    param.alpha_mut(0)[j + 1] += worst * (1.0 + 1e-12) + f64::MIN_POSITIVE;
                }
            }
        }
        Constraint::Bounds { lower, upper } => {
            let grid = param.eval_grid();
            for j in 0..m {
                let lo = grid
                    .chunks(m)
                    .map(|th| lower[j] - th[j])
                    .fold(0.0, f64::max);
                let hi = grid
                    .chunks(m)
                    .map(|th| th[j] - upper[j])
                    .fold(0.0, f64::max);
                if lo > 0.0 && hi == 0.0 {
                    param.alpha_mut(0)[j] += lo;
                } else if hi > 0.0 && lo == 0.0 {
                    param.alpha_mut(0)[j] -= hi;
                }
            }
        }
    }
}

pub(super) fn solve(
    loss: &dyn SeparableLoss,
    constraint: &Constraint,
    lambda: f64,
    harmonics: usize,
    settings: &super::SolverSettings,
) -> Result<SmoothFit> {
    let m = loss.dim();
    let period = loss.period();
    let nb = basis_len(harmonics);
    let basis = basis_table(harmonics, period);
    let weights = dirichlet_weights(harmonics, period);
    let max_iter = settings.max_iter.unwrap_or(50_000);
    let tol = settings.tol;

    let mut gram = DMatrix::<f64>::zeros(nb, nb);
    for p in 0..period {
        let b = &basis[p * nb..(p + 1) * nb];
        for r in 0..nb {
            for s in 0..nb {
                gram[(r, s)] += b[r] * b[s];
            }
        }
    }
    let factorize = |rho: f64| {
        let mut a = gram.scale(rho);
        for r in 0..nb {
            a[(r, r)] += 2.0 * lambda * weights[r];
        }
        a.cholesky()
            .ok_or_else(|| Error::Fit("coefficient system is not positive definite".into()))
    };

    // B^T X for a P x m buffer X, as an nb x m matrix
    let bt = |x: &[f64]| {
        let mut out = DMatrix::<f64>::zeros(nb, m);
        for p in 0..period {
            let b = &basis[p * nb..(p + 1) * nb];
            let row = &x[p * m..(p + 1) * m];
            for r in 0..nb {
                for j in 0..m {
                    out[(r, j)] += b[r] * row[j];
                }
            }
        }
        out
    };

    let mut rho = settings.rho;
    let mut chol = factorize(rho)?;
    let mut u = vec![0.0; period * m];
    let mut w = vec![0.0; period * m];
    let mut bc = vec![0.0; period * m];
    let mut v = vec![0.0; period * m];
    let mut u_new = vec![0.0; period * m];
    let mut diff = vec![0.0; period * m];
    let mut target = vec![0.0; period * m];
    let (mut r_norm, mut s_norm) = (f64::INFINITY, f64::INFINITY);

    for iter in 1..=max_iter {
        for k in 0..target.len() {
            target[k] = u[k] - w[k];
        }
        let rhs = bt(&target).scale(rho);
        let coeffs = chol.solve(&rhs);

        for p in 0..period {
            let b = &basis[p * nb..(p + 1) * nb];
            for j in 0..m {
                bc[p * m + j] = (0..nb).map(|r| b[r] * coeffs[(r, j)]).sum();
            }
        }
        for k in 0..v.len() {
            let z = RELAXATION * bc[k] + (1.0 - RELAXATION) * u[k];
            v[k] = z + w[k];
        }
        for p in 0..period {
            phase_prox(
                loss,
                constraint,
                p,
                &v[p * m..(p + 1) * m],
                rho,
                &mut u_new[p * m..(p + 1) * m],
            );
        }
        for k in 0..w.len() {
            let z = RELAXATION * bc[k] + (1.0 - RELAXATION) * u[k];
            w[k] += z - u_new[k];
            diff[k] = u_new[k] - u[k];
        }
        std::mem::swap(&mut u, &mut u_new);

        r_norm = bc
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        s_norm = rho * bt(&diff).norm();
        let primal_scale = norm(&bc).max(norm(&u));
        let dual_scale = rho * bt(&w).norm();
        let eps_pri = ((period * m) as f64).sqrt() * tol + tol * primal_scale;
        let eps_dual = ((nb * m) as f64).sqrt() * tol + tol * dual_scale;
        if !r_norm.is_finite() || !s_norm.is_finite() {
            return Err(Error::Convergence {
                message: "non-finite iterate".into(),
                iterations: iter,
                primal_residual: r_norm,
                dual_residual: s_norm,
            });
        }
        if r_norm <= eps_pri && s_norm <= eps_dual {
            let mut param = PeriodicParam::from_coeffs(
                m,
                harmonics,
                period,
                coeffs.transpose().as_slice().to_vec(),
            )?;
            polish(&mut param, constraint);
            let worst = param
                .eval_grid()
                .chunks(m)
                .map(|th| constraint.violation(th))
                .fold(0.0, f64::max);
            if worst <= FEASIBILITY_TOL {
                let grid = param.eval_grid();
                let loss_value: f64 = (0..period)
                    .map(|p| {
                        (0..m)
                            .map(|j| loss.value(p, j, grid[p * m + j]))
                            .sum::<f64>()
                    })
                    .sum();
                return Ok(SmoothFit {
                    objective: loss_value + lambda * param.dirichlet_energy(),
                    param,
                    iterations: iter,
                    primal_residual: r_norm,
                    dual_residual: s_norm,
                });
            }
            // Residual violation larger than a constant shift can absorb:
            // keep iterating until the grid is feasible.
        }

        if iter % ADAPT_EVERY == 0 {
            let rel_r = r_norm / primal_scale.max(1e-300);
            let rel_s = s_norm / dual_scale.max(1e-300);
            let ratio = (rel_r / rel_s.max(1e-300)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                let new_rho = (rho * ratio).clamp(1e-8, 1e8);
                if new_rho != rho {
                    let scale = rho / new_rho;
                    w.iter_mut().for_each(|x| *x *= scale);
                    rho = new_rho;
                    chol = factorize(rho)?;
                }
            }
        }
    }
    Err(Error::Convergence {
        message: "iteration cap reached".into(),
        iterations: max_iter,
        primal_residual: r_norm,
        dual_residual: s_norm,
    })
}
