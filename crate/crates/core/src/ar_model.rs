//! Constant-coefficient vector autoregression on the Gaussianized series.
//!
//! `x_t = A_1 x_{t-1} + ... + A_M x_{t-M} + v_t`, fitted by ridge-regularized
//! least squares on the rows where `x_t` and all `M` lags are fully observed.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet_data::GaussianizedSeries;

/// Residual series `v`; same container as the latent series.
pub type ResidualSeries = GaussianizedSeries;

/// AR coefficient matrices `A_1..A_M`, each `d x d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArCoefficients {
    dim: usize,
    mats: Vec<Vec<f64>>,
}

impl ArCoefficients {
    pub fn new(dim: usize, mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut rows = Vec::with_capacity(mats.len());
        for (m, a) in mats.iter().enumerate() {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::Validation(format!(
                    "A_{} is {}x{}, expected {dim}x{dim}",
                    m + 1,
                    a.nrows(),
                    a.ncols()
                )));
            }
            rows.push(a.transpose().as_slice().to_vec());
        }
        let out = Self { dim, mats: rows };
        out.validate()?;
        Ok(out)
    }

    /// No autoregression: `v_t = x_t`.
    pub fn zero_memory(dim: usize) -> Self {
        Self {
            dim,
            mats: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("AR dimension must be positive".into()));
        }
        for (m, a) in self.mats.iter().enumerate() {
            if a.len() != self.dim * self.dim {
                return Err(Error::Validation(format!("A_{} has wrong size", m + 1)));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "A_{} has non-finite entries",
                    m + 1
                )));
            }
        }
        Ok(())
    }

    pub fn memory(&self) -> usize {
        self.mats.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry `(i, j)` of `A_{lag}`, `lag` in `1..=M`.
    pub fn get(&self, lag: usize, i: usize, j: usize) -> f64 {
        self.mats[lag - 1][i * self.dim + j]
    }

    /// `A_{lag}` as a matrix, `lag` in `1..=M`.
    pub fn matrix(&self, lag: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.mats[lag - 1])
    }

    pub fn max_abs(&self) -> f64 {
        self.mats
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `sum_m A_m x_{t-m}` where `lags[m-1]` is `x_{t-m}`; accumulates into `out`.
    pub fn predict_into(&self, lags: &[&[f64]], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (a, x) in self.mats.iter().zip(lags) {
            for i in 0..d {
                out[i] += (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>();
            }
        }
    }
}

/// Rows `t` for which `x_t, ..., x_{t-M}` are all fully observed.
pub fn usable_rows(x: &GaussianizedSeries, memory: usize) -> Vec<usize> {
    (memory..x.len())
        .filter(|&t| (t - memory..=t).all(|s| x.row_complete(s)))
        .collect()
}

/// Empirical moments of the ridge problem, in the layout `vec(A)` with
/// `A = [A_1 ... A_M]` (`d x Md`).
#[derive(Debug, Clone)]
pub struct NormalEquations {
    /// Mean of `r_t r_t'` over usable rows, `Md x Md`; `r_t` stacks the lags.
    pub gram: DMatrix<f64>,
    /// Mean of `r_t x_t'`, `Md x d`.
    pub cross: DMatrix<f64>,
    pub rows: usize,
}

/// Assembles the normal equations for memory `M`.
pub fn normal_equations(x: &GaussianizedSeries, memory: usize) -> NormalEquations {
    let d = x.dim();
    let n = memory * d;
    let rows = usable_rows(x, memory);
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut cross = DMatrix::<f64>::zeros(n, d);
    let mut r = vec![0.0; n];
    for &t in &rows {
        for m in 1..=memory {
            r[(m - 1) * d..m * d].copy_from_slice(x.row(t - m));
        }
        let xt = x.row(t);
        for a in 0..n {
            for b in 0..n {
                gram[(a, b)] += r[a] * r[b];
            }
            for i in 0..d {
                cross[(a, i)] += r[a] * xt[i];
            }
        }
    }
    if !rows.is_empty() {
        let inv = 1.0 / rows.len() as f64;
        gram *= inv;
        cross *= inv;
    }
    NormalEquations {
        gram,
        cross,
        rows: rows.len(),
    }
}

/// Fits `A_1..A_M` by ridge-regularized least squares.
///
/// Minimizes the mean of `|x_t - sum_m A_m x_{t-m}|^2` over usable rows plus
/// `lambda_ridge * sum_m |A_m|_F^2`.
pub fn fit_ar(x: &GaussianizedSeries, memory: usize, lambda_ridge: f64) -> Result<ArCoefficients> {
    if !(lambda_ridge >= 0.0) || !lambda_ridge.is_finite() {
        return Err(Error::Domain(format!(
            "ridge weight must be finite and >= 0, got {lambda_ridge}"
        )));
    }
    let d = x.dim();
    if memory == 0 {
        return Ok(ArCoefficients::zero_memory(d));
    }
    let ne = normal_equations(x, memory);
    if ne.rows < d * memory + 1 {
        return Err(Error::Fit(format!(
            "{} usable rows for memory {memory}, need at least {}",
            ne.rows,
            d * memory + 1
        )));
    }
    let mut lhs = ne.gram.clone();
    for k in 0..lhs.nrows() {
        lhs[(k, k)] += lambda_ridge;
    }
    // (G + lambda I) A' = H, one right-hand side per output system
    let at = match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&ne.cross),
        None => lhs
            .lu()
            .solve(&ne.cross)
            .ok_or_else(|| Error::Fit("AR normal equations are singular".into()))?,
    };
    let a = at.transpose();
    let mats = (0..memory)
        .map(|m| a.columns(m * d, d).into_owned())
        .collect();
    ArCoefficients::new(d, mats)
}

/// AR residuals `v_t = x_t - sum_m A_m x_{t-m}`.
///
/// Entry `(t, i)` is defined when `x_{t,i}` is observed and rows
/// `t-1..t-M` are fully observed; with `M = 0` the residual is `x` itself.
pub fn residuals(x: &GaussianizedSeries, coeffs: &ArCoefficients) -> Result<ResidualSeries> {
    let d = x.dim();
    if coeffs.dim() != d {
        return Err(Error::Validation(format!(
            "series has {d} systems, AR model has {}",
            coeffs.dim()
        )));
    }
    let memory = coeffs.memory();
    let mut values = vec![0.0; x.len() * d];
    let mut mask = vec![false; x.len() * d];
    let mut pred = vec![0.0; d];
    for t in 0..x.len() {
        if t < memory || !(t - memory..t).all(|s| x.row_complete(s)) {
            continue;
        }
        let lags: Vec<&[f64]> = (1..=memory).map(|m| x.row(t - m)).collect();
        coeffs.predict_into(&lags, &mut pred);
        for i in 0..d {
            if x.is_observed(t, i) {
                values[t * d + i] = x.row(t)[i] - pred[i];
                mask[t * d + i] = true;
            }
        }
    }
    x.with_contents(values, mask)
}

/// Mean squared one-step prediction error at `entries`, using only rows
/// whose lags are fully observed in `x`.
pub fn one_step_error(
    x: &GaussianizedSeries,
    coeffs: &ArCoefficients,
    entries: &[(usize, usize)],
) -> Option<f64> {
    let v = residuals(x, coeffs).ok()?;
    let errs: Vec<f64> = entries
        .iter()
        .filter_map(|&(t, i)| v.get(t, i))
        .map(|e| e * e)
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Relative residual `|(G + lambda I) A' - H| / |H|` of the normal equations.
pub fn normal_equation_residual(ne: &NormalEquations, coeffs: &ArCoefficients, lambda: f64) -> f64 {
    let d = coeffs.dim();
    let memory = coeffs.memory();
    let mut at = DMatrix::<f64>::zeros(memory * d, d);
    for m in 0..memory {
        for i in 0..d {
            for j in 0..d {
                at[(m * d + j, i)] = coeffs.get(m + 1, i, j);
            }
        }
    }
    let mut lhs = ne.gram.clone();
    for k in 0..lhs.nrows() {
        lhs[(k, k)] += lambda;
    }
    let r = &lhs * &at - &ne.cross;
    r.norm() / ne.cross.norm().max(f64::MIN_POSITIVE)
}

/// Spectral-radius proxy: largest |eigenvalue| of the companion matrix.
pub fn companion_radius(coeffs: &ArCoefficients) -> f64 {
    let (d, memory) = (coeffs.dim(), coeffs.memory());
    if memory == 0 {
        return 0.0;
    }
    let n = d * memory;
    let mut c = DMatrix::<f64>::zeros(n, n);
    for m in 0..memory {
        c.view_mut((0, m * d), (d, d))
            .copy_from(&coeffs.matrix(m + 1));
    }
    for k in d..n {
        c[(k, k - d)] = 1.0;
    }
    c.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet_data::FleetSeries;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn series(values: Vec<f64>, d: usize) -> GaussianizedSeries {
        let mask = vec![true; values.len()];
        let names = (0..d).map(|i| format!("s{i}")).collect();
        FleetSeries::from_parts(values, mask, d, 4, 0, names).unwrap()
    }

    fn ar1_scalar(a: f64, n: usize, noise: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![1.0];
        for _ in 1..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push(a * x.last().unwrap() + noise * e);
        }
        x
    }

    #[test]
    fn recovers_noise_free_ar1() {
        let x = series(ar1_scalar(0.5, 50, 0.0, 0), 1);
        let fit = fit_ar(&x, 1, 0.0).unwrap();
        assert!((fit.get(1, 0, 0) - 0.5).abs() < 1e-10);
        let v = residuals(&x, &fit).unwrap();
        for t in 1..50 {
            assert!(v.get(t, 0).unwrap().abs() < 1e-12);
        }
        assert_eq!(v.get(0, 0), None);
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let x = series(ar1_scalar(0.8, 400, 1.0, 1), 1);
        let fit = fit_ar(&x, 3, 1e12).unwrap();
        assert!(fit.max_abs() <= 1e-6);
    }

    #[test]
    fn white_noise_gives_small_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..20_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let x = series(values, 2);
        let fit = fit_ar(&x, 2, 1e-3).unwrap();
        assert!(fit.max_abs() <= 0.05, "{}", fit.max_abs());
    }

    #[test]
    fn zero_memory_residual_is_identity() {
        let mut x = series(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2);
        x = x
            .with_contents(
                x.values().to_vec(),
                vec![true, false, true, true, false, true],
            )
            .unwrap();
        let fit = fit_ar(&x, 0, 1e-3).unwrap();
        assert_eq!(fit.memory(), 0);
        let v = residuals(&x, &fit).unwrap();
        assert_eq!(v, x);
    }

    #[test]
    fn missing_lag_masks_residual() {
        let mut values = ar1_scalar(0.5, 20, 0.0, 0);
        values[5] = f64::NAN;
        let mask: Vec<bool> = values.iter().map(|v| v.is_finite()).collect();
        let values: Vec<f64> = values
            .iter()
            .map(|v| if v.is_finite() { *v } else { 0.0 })
            .collect();
        let x = FleetSeries::from_parts(values, mask, 1, 4, 0, vec!["a".into()]).unwrap();
        let fit = ArCoefficients::new(1, vec![DMatrix::from_element(1, 1, 0.5)]).unwrap();
        let v = residuals(&x, &fit).unwrap();
        assert_eq!(v.get(5, 0), None);
        assert_eq!(v.get(6, 0), None);
        assert!(v.get(7, 0).is_some());
        assert_eq!(usable_rows(&x, 1).len(), 17);
    }

    #[test]
    fn errors() {
        let x = series(vec![1.0, 2.0, 3.0], 1);
        assert!(matches!(fit_ar(&x, 1, -1.0), Err(Error::Domain(_))));
        assert!(matches!(fit_ar(&x, 3, 0.0), Err(Error::Fit(_))));
        let two = series(vec![1.0; 6], 2);
        let fit = ArCoefficients::zero_memory(1);
        assert!(matches!(residuals(&two, &fit), Err(Error::Validation(_))));
    }

    fn var2_sample(n: usize, seed: u64) -> GaussianizedSeries {
        let a1 = [0.5, 0.1, -0.2, 0.3];
        let a2 = [0.1, 0.0, 0.05, -0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; 2 * n];
        for t in 2..n {
            for i in 0..2 {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[2 * t + i] = (0..2)
                    .map(|j| {
                        a1[2 * i + j] * x[2 * (t - 1) + j] + a2[2 * i + j] * x[2 * (t - 2) + j]
                    })
                    .sum::<f64>()
                    + e;
            }
        }
        series(x, 2)
    }

    #[test]
    fn satisfies_normal_equations() {
        let x = var2_sample(3000, 4);
        for lambda in [0.0, 1e-3, 1.0] {
            let fit = fit_ar(&x, 2, lambda).unwrap();
            let ne = normal_equations(&x, 2);
            assert!(normal_equation_residual(&ne, &fit, lambda) <= 1e-10);
        }
    }

    #[test]
    fn residuals_orthogonal_to_regressors_without_ridge() {
        let x = var2_sample(3000, 5);
        let fit = fit_ar(&x, 2, 0.0).unwrap();
        let v = residuals(&x, &fit).unwrap();
        let rows = usable_rows(&x, 2);
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        // the fit has no intercept, so orthogonality is in raw moments
        for i in 0..2 {
            let vi: Vec<f64> = rows.iter().map(|&t| v.get(t, i).unwrap()).collect();
            for lag in 1..=2 {
                for j in 0..2 {
                    let r: Vec<f64> = rows.iter().map(|&t| x.row(t - lag)[j]).collect();
                    let raw: f64 = vi.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
                        / (vi.iter().map(|a| a * a).sum::<f64>()
                            * r.iter().map(|b| b * b).sum::<f64>())
                        .sqrt();
                    assert!(raw.abs() <= 1e-8, "raw moment {raw}");
                    assert!(corr(&vi, &r).abs() <= 0.05);
                }
            }
        }
    }

    #[test]
    fn residual_variance_is_smaller() {
        let x = series(ar1_scalar(0.9, 5000, 0.3, 6), 1);
        let fit = fit_ar(&x, 3, 1e-3).unwrap();
        let v = residuals(&x, &fit).unwrap();
        let mean_sq = |s: &GaussianizedSeries| {
            let vals: Vec<f64> = (0..s.len()).filter_map(|t| s.get(t, 0)).collect();
            vals.iter().map(|a| a * a).sum::<f64>() / vals.len() as f64
        };
        assert!(mean_sq(&v) <= mean_sq(&x));
        assert!(companion_radius(&fit) < 1.0);
    }
}
