//! Primal-dual interior point method for check (pinball) losses.
//!
//! With `u_{p,j} = b_p' c_j`, each observation `y` at phase `p` contributes
//! `tau_j a + (1 - tau_j) b` where `a - b = y - u_{p,j}` and `a, b >= 0`.
//! Grid constraints become rows `g' c >= h`. Each Newton step reduces to one
//! dense symmetric system in the `(2K+1) m` Fourier coefficients, and
//! Mehrotra's predictor-corrector reuses its factorization.

use nalgebra::{DMatrix, DVector};

use super::admm::polish;
use super::{
    basis_len, basis_table, dirichlet_weights, CheckLossData, Constraint, PeriodicParam, SmoothFit,
    FEASIBILITY_TOL,
};
use crate::error::{Error, Result};

const STEP_FRACTION: f64 = 0.99;

/// Constraint row `sum_k coef_k u_{phase, j_k} >= h`.
struct Row {
    phase: usize,
    terms: Vec<(usize, f64)>,
    h: f64,
}

fn constraint_rows(constraint: &Constraint, m: usize, period: usize) -> Vec<Row> {
    let mut rows = Vec::new();
    for phase in 0..period {
        match constraint {
            Constraint::Unconstrained => {}
            Constraint::Ordered => {
                for j in 0..m.saturating_sub(1) {
                    rows.push(Row {
                        phase,
                        terms: vec![(j, -1.0), (j + 1, 1.0)],
                        h: 0.0,
                    });
                }
            }
            Constraint::Bounds { lower, upper } => {
                for j in 0..m {
                    if lower[j].is_finite() {
                        rows.push(Row {
                            phase,
                            terms: vec![(j, 1.0)],
                            h: lower[j],
                        });
                    }
                    if upper[j].is_finite() {
                        rows.push(Row {
                            phase,
                            terms: vec![(j, -1.0)],
                            h: -upper[j],
                        });
                    }
                }
            }
        }
    }
    rows
}

fn check(r: f64, tau: f64) -> f64 {
    (tau * r).max((tau - 1.0) * r)
}

/// Largest `alpha <= 1` keeping `x + alpha dx >= 0` for every pair.
fn max_step(x: &[f64], dx: &[f64]) -> f64 {
    x.iter()
        .zip(dx)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(1.0, f64::min)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(super) fn solve(
    data: CheckLossData<'_>,
    constraint: &Constraint,
    lambda: f64,
    harmonics: usize,
    settings: &super::SolverSettings,
) -> Result<SmoothFit> {
    let tau = data.levels;
    let m = tau.len();
    let period = data.obs.len();
    let nb = basis_len(harmonics);
    let n = nb * m;
    let basis = basis_table(harmonics, period);
    let weights = dirichlet_weights(harmonics, period);
    let brow = |p: usize| &basis[p * nb..(p + 1) * nb];
    let max_iter = settings.max_iter.unwrap_or(200);
    let eps = settings.tol * 1e-3;

    // observation-major, level-minor: entry (k, j) at k * m + j
    let mut obs_phase = Vec::new();
    let mut y = Vec::new();
    for (p, ys) in data.obs.iter().enumerate() {
        for &v in ys {
            obs_phase.push(p);
            y.push(v);
        }
    }
    let n_obs = y.len();
    let big_n = n_obs * m;
    let rows = constraint_rows(constraint, m, period);
    let n_rows = rows.len();
    let y_scale = 1.0 + inf_norm(&y);

    // state: c[j * nb + r], a, b, pi per (obs, level); s, nu per row
    let mut c = DVector::<f64>::zeros(n);
    let mut a = vec![0.0; big_n];
    let mut b = vec![0.0; big_n];
    let mut pi = vec![0.0; big_n];
    for k in 0..n_obs {
        for j in 0..m {
            let i = k * m + j;
            a[i] = y[k].max(0.0) + 1.0;
            b[i] = (-y[k]).max(0.0) + 1.0;
            pi[i] = tau[j] - 0.5;
        }
    }
    let mut s = vec![1.0; n_rows];
    let mut nu = vec![1.0; n_rows];

    let grid_of = |c: &DVector<f64>| {
        let mut u = vec![0.0; period * m];
        for p in 0..period {
            let bp = brow(p);
            for j in 0..m {
                u[p * m + j] = (0..nb).map(|r| bp[r] * c[j * nb + r]).sum();
            }
        }
        u
    };
    let row_value = |row: &Row, u: &[f64]| -> f64 {
        row.terms
            .iter()
            .map(|&(j, coef)| coef * u[row.phase * m + j])
            .sum()
    };
    // adds coef * b_p into block j of `out`
    let add_b = |out: &mut DVector<f64>, p: usize, j: usize, coef: f64| {
        let bp = brow(p);
        for r in 0..nb {
            out[j * nb + r] += coef * bp[r];
        }
    };

    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for iter in 1..=max_iter {
        let u = grid_of(&c);
        let za: Vec<f64> = (0..big_n).map(|i| tau[i % m] - pi[i]).collect();
        let zb: Vec<f64> = (0..big_n).map(|i| 1.0 - tau[i % m] + pi[i]).collect();

        let r_y: Vec<f64> = (0..big_n)
            .map(|i| {
                let (k, j) = (i / m, i % m);
                u[obs_phase[k] * m + j] + a[i] - b[i] - y[k]
            })
            .collect();
        let r_h: Vec<f64> = rows
            .iter()
            .zip(s.iter())
            .map(|(row, &si)| row_value(row, &u) - si - row.h)
            .collect();
        let mut r_c = DVector::<f64>::zeros(n);
        for j in 0..m {
            for r in 0..nb {
                r_c[j * nb + r] = 2.0 * lambda * weights[r] * c[j * nb + r];
            }
        }
        for i in 0..big_n {
            add_b(&mut r_c, obs_phase[i / m], i % m, -pi[i]);
        }
        for (row, &v) in rows.iter().zip(&nu) {
            for &(j, coef) in &row.terms {
                add_b(&mut r_c, row.phase, j, -coef * v);
            }
        }

        let gap: f64 = (0..big_n).map(|i| a[i] * za[i] + b[i] * zb[i]).sum::<f64>()
            + s.iter().zip(&nu).map(|(x, z)| x * z).sum::<f64>();
        let primal_obj: f64 = (0..big_n)
            .map(|i| tau[i % m] * a[i] + (1.0 - tau[i % m]) * b[i])
            .sum::<f64>()
            + lambda
                * (0..m)
                    .map(|j| (0..nb).map(|r| weights[r] * c[j * nb + r].powi(2)).sum::<f64>())
                    .sum::<f64>();
        let rel_p = (inf_norm(&r_y) / y_scale).max(inf_norm(&r_h) / y_scale);
        let rel_d = r_c.amax() / (1.0 + n_obs as f64);
        let rel_gap = gap / (1.0 + primal_obj.abs());
        last = (rel_p, rel_d, rel_gap);
        if !(rel_p.is_finite() && rel_d.is_finite() && rel_gap.is_finite()) {
            return Err(Error::Convergence {
                message: "non-finite interior point iterate".into(),
                iterations: iter,
                primal_residual: rel_p,
                dual_residual: rel_d,
            });
        }
        if rel_p <= eps && rel_d <= eps && rel_gap <= eps {
            let mut coeffs = vec![0.0; n];
            for r in 0..nb {
                for j in 0..m {
                    coeffs[r * m + j] = c[j * nb + r];
                }
            }
            let mut param = PeriodicParam::from_coeffs(m, harmonics, period, coeffs)?;
            polish(&mut param, constraint);
            let grid = param.eval_grid();
            let worst = grid
                .chunks(m)
                .map(|th| constraint.violation(th))
                .fold(0.0, f64::max);
            if worst > FEASIBILITY_TOL {
                return Err(Error::Convergence {
                    message: format!("grid constraint violated by {worst:.3e} after polishing"),
                    iterations: iter,
                    primal_residual: rel_p,
                    dual_residual: rel_d,
                });
            }
            let loss_value: f64 = (0..n_obs)
                .map(|k| {
                    (0..m)
                        .map(|j| check(y[k] - grid[obs_phase[k] * m + j], tau[j]))
                        .sum::<f64>()
                })
                .sum();
            return Ok(SmoothFit {
                objective: loss_value + lambda * param.dirichlet_energy(),
                param,
                iterations: iter,
                primal_residual: rel_p,
                dual_residual: rel_d,
            });
        }

        // reduced Newton matrix
        let theta_inv: Vec<f64> = (0..big_n).map(|i| 1.0 / (a[i] / za[i] + b[i] / zb[i])).collect();
        let mut mat = DMatrix::<f64>::zeros(n, n);
        for j in 0..m {
            for r in 0..nb {
                mat[(j * nb + r, j * nb + r)] += 2.0 * lambda * weights[r];
            }
        }
        let mut wsum = vec![0.0; period * m];
        for i in 0..big_n {
            wsum[obs_phase[i / m] * m + i % m] += theta_inv[i];
        }
        for p in 0..period {
            let bp = brow(p);
            for j in 0..m {
                let w = wsum[p * m + j];
                if w == 0.0 {
                    continue;
                }
                for r in 0..nb {
                    for q in 0..nb {
                        mat[(j * nb + r, j * nb + q)] += w * bp[r] * bp[q];
                    }
                }
            }
        }
        for (row, (&si, &vi)) in rows.iter().zip(s.iter().zip(&nu)) {
            let w = vi / si;
            let bp = brow(row.phase);
            for &(j1, c1) in &row.terms {
                for &(j2, c2) in &row.terms {
                    for r in 0..nb {
                        for q in 0..nb {
                            mat[(j1 * nb + r, j2 * nb + q)] += w * c1 * c2 * bp[r] * bp[q];
                        }
                    }
                }
            }
        }
        let factor = mat.clone().cholesky();
        let lu = if factor.is_none() { Some(mat.lu()) } else { None };
        let solve_mat = |rhs: &DVector<f64>| -> Result<DVector<f64>> {
            match (&factor, &lu) {
                (Some(ch), _) => Ok(ch.solve(rhs)),
                (None, Some(lu)) => lu
                    .solve(rhs)
                    .ok_or_else(|| Error::Fit("interior point system is singular".into())),
                _ => unreachable!(),
            }
        };

        // direction for complementarity targets (sa, sb, ss)
        let direction = |sa: &[f64], sb: &[f64], ss: &[f64]| -> Result<Direction> {
            let q: Vec<f64> = (0..big_n)
                .map(|i| r_y[i] + sa[i] / za[i] - sb[i] / zb[i])
                .collect();
            let mut rhs = -r_c.clone();
            let mut acc = vec![0.0; period * m];
            for i in 0..big_n {
                acc[obs_phase[i / m] * m + i % m] += theta_inv[i] * q[i];
            }
            for p in 0..period {
                for j in 0..m {
                    if acc[p * m + j] != 0.0 {
                        add_b(&mut rhs, p, j, -acc[p * m + j]);
                    }
                }
            }
            for (k, row) in rows.iter().enumerate() {
                let coef = (ss[k] - nu[k] * r_h[k]) / s[k];
                for &(j, cj) in &row.terms {
                    add_b(&mut rhs, row.phase, j, cj * coef);
                }
            }
            let dc = solve_mat(&rhs)?;
            let du = grid_of(&dc);
            let dpi: Vec<f64> = (0..big_n)
                .map(|i| -(q[i] + du[obs_phase[i / m] * m + i % m]) * theta_inv[i])
                .collect();
            let da: Vec<f64> = (0..big_n).map(|i| (sa[i] + a[i] * dpi[i]) / za[i]).collect();
            let db: Vec<f64> = (0..big_n).map(|i| (sb[i] - b[i] * dpi[i]) / zb[i]).collect();
            let ds: Vec<f64> = rows
                .iter()
                .enumerate()
                .map(|(k, row)| row_value(row, &du) + r_h[k])
                .collect();
            let dnu: Vec<f64> = (0..n_rows).map(|k| (ss[k] - nu[k] * ds[k]) / s[k]).collect();
            let dza: Vec<f64> = dpi.iter().map(|d| -d).collect();
            let primal = max_step(&a, &da).min(max_step(&b, &db)).min(max_step(&s, &ds));
            let dual = max_step(&za, &dza).min(max_step(&zb, &dpi)).min(max_step(&nu, &dnu));
            Ok(Direction {
                dc,
                da,
                db,
                dpi,
                ds,
                dnu,
                alpha: primal.min(dual),
            })
        };

        let count = (2 * big_n + n_rows) as f64;
        let mu = gap / count;
        let neg = |x: &[f64], z: &[f64]| -> Vec<f64> { x.iter().zip(z).map(|(p, q)| -p * q).collect() };
        let aff = direction(&neg(&a, &za), &neg(&b, &zb), &neg(&s, &nu))?;
        let al = aff.alpha;
        let mut mu_aff = 0.0;
        for i in 0..big_n {
            mu_aff += (a[i] + al * aff.da[i]) * (za[i] - al * aff.dpi[i]);
            mu_aff += (b[i] + al * aff.db[i]) * (zb[i] + al * aff.dpi[i]);
        }
        for k in 0..n_rows {
            mu_aff += (s[k] + al * aff.ds[k]) * (nu[k] + al * aff.dnu[k]);
        }
        mu_aff /= count;
        let sigma = (mu_aff / mu).powi(3).min(1.0);
        let target = sigma * mu;
        let sa: Vec<f64> = (0..big_n)
            .map(|i| target - a[i] * za[i] + aff.da[i] * aff.dpi[i])
            .collect();
        let sb: Vec<f64> = (0..big_n)
            .map(|i| target - b[i] * zb[i] - aff.db[i] * aff.dpi[i])
            .collect();
        let ss: Vec<f64> = (0..n_rows)
            .map(|k| target - s[k] * nu[k] - aff.ds[k] * aff.dnu[k])
            .collect();
        let step = direction(&sa, &sb, &ss)?;
        let alpha = (STEP_FRACTION * step.alpha).min(1.0);

        c += step.dc.scale(alpha);
        for i in 0..big_n {
            a[i] += alpha * step.da[i];
            b[i] += alpha * step.db[i];
            pi[i] += alpha * step.dpi[i];
        }
        for k in 0..n_rows {
            s[k] += alpha * step.ds[k];
            nu[k] += alpha * step.dnu[k];
        }
    }
    Err(Error::Convergence {
        message: format!("interior point iteration cap reached (gap {:.3e})", last.2),
        iterations: max_iter,
        primal_residual: last.0,
        dual_residual: last.1,
    })
}

struct Direction {
    dc: DVector<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    dpi: Vec<f64>,
    ds: Vec<f64>,
    dnu: Vec<f64>,
    alpha: f64,
}
