//! Smooth periodic Gaussian model of the AR residual.
//!
//! At each phase the residual is `N(mu_t, Sigma_t)` with
//! `Sigma_t^-1 = L_t L_t'` (`L_t` lower triangular, positive diagonal) and
//! `nu_t = L_t' mu_t`. In `(L_t, nu_t)` the negative log-likelihood
//!
//! ```text
//! (d/2) log(2 pi) - sum_j log L_jj + |L' v - nu|^2 / 2
//! ```
//!
//! is convex, and both are linear in the Fourier coefficients. Whitening is
//! `z_t = L_t' v_t - nu_t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ar_model::ResidualSeries;
use crate::error::{Error, Result};
use crate::fleet_data::FleetSeries;
use crate::periodic::{
    fit_smooth_periodic_from, Constraint, FitLoss, PeriodicParam, SmoothFitProblem, SmoothLoss,
    SolverSettings,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Number of free entries of a `d x d` lower-triangular matrix.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Parameter dimension `d(d+1)/2 + d`.
pub fn param_dim(d: usize) -> usize {
    tri_len(d) + d
}

/// Position of `L_ij` (`i >= j`) in the column-major packed triangle.
pub fn tri_index(i: usize, j: usize, d: usize) -> usize {
    debug_assert!(i >= j);
    j * d - j * j.saturating_sub(1) / 2 + (i - j)
}

/// Residual dimension implied by a parameter dimension, if any.
fn dim_from_param(m: usize) -> Option<usize> {
    (1..=m).find(|&d| param_dim(d) == m)
}

/// Unpacks `theta` into `(L, nu)`.
pub fn unpack(theta: &[f64], d: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        for i in j..d {
            l[(i, j)] = theta[tri_index(i, j, d)];
        }
    }
    (l, DVector::from_column_slice(&theta[tri_len(d)..]))
}

/// Packs `(L, nu)` into `theta`; the strict upper triangle of `L` is ignored.
pub fn pack(l: &DMatrix<f64>, nu: &DVector<f64>) -> Vec<f64> {
    let d = l.nrows();
    let mut theta = vec![0.0; param_dim(d)];
    for j in 0..d {
        for i in j..d {
            theta[tri_index(i, j, d)] = l[(i, j)];
        }
    }
    theta[tri_len(d)..].copy_from_slice(nu.as_slice());
    theta
}

/// Negative log-likelihood of one residual vector.
pub fn nll_term(l: &DMatrix<f64>, nu: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    let d = l.nrows();
    if (0..d).any(|j| !(l[(j, j)] > 0.0)) {
        return Err(Error::Domain(
            "Cholesky factor needs a positive diagonal".into(),
        ));
    }
    let log_diag: f64 = (0..d).map(|j| l[(j, j)].ln()).sum();
    let r = l.tr_mul(v) - nu;
    Ok(0.5 * d as f64 * LN_2PI - log_diag + 0.5 * r.norm_squared())
}

/// Per-phase sufficient statistics of fully observed residual vectors.
#[derive(Debug, Clone)]
pub struct ResidualGaussianLoss {
    dim: usize,
    period: usize,
    count: Vec<f64>,
    /// Per phase: sum of `v`.
    s1: Vec<DVector<f64>>,
    /// Per phase: sum of `v v'`.
    s2: Vec<DMatrix<f64>>,
}

impl ResidualGaussianLoss {
    pub fn new(
        dim: usize,
        period: usize,
        vectors: impl IntoIterator<Item = (usize, Vec<f64>)>,
    ) -> Self {
        let mut count = vec![0.0; period];
        let mut s1 = vec![DVector::zeros(dim); period];
        let mut s2 = vec![DMatrix::zeros(dim, dim); period];
        for (p, v) in vectors {
            let p = p % period;
            let v = DVector::from_vec(v);
            count[p] += 1.0;
            s1[p] += &v;
            s2[p] += &v * v.transpose();
        }
        Self {
            dim,
            period,
            count,
            s1,
            s2,
        }
    }

    /// Uses every fully observed row of `v`.
    pub fn from_series(v: &ResidualSeries) -> Self {
        Self::new(
            v.dim(),
            v.period(),
            (0..v.len())
                .filter(|&t| v.row_complete(t))
                .map(|t| (v.phase(t), v.row(t).to_vec())),
        )
    }

    pub fn vectors(&self) -> usize {
        self.count.iter().sum::<f64>() as usize
    }

    /// Gives every phase without data one pseudo-observation with zero mean
    /// and identity second moment. Without it the likelihood does not bound
    /// `diag(L)` away from zero at those phases, and small smoothing weights
    /// have no minimizer.
    pub fn with_empty_phase_prior(mut self) -> Self {
        for p in 0..self.period {
            if self.count[p] == 0.0 {
                self.count[p] = 1.0;
                self.s2[p] = DMatrix::identity(self.dim, self.dim);
            }
        }
        self
    }

    /// Pooled maximum-likelihood `(L, nu)` ignoring phase.
    pub fn pooled_mle(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let d = self.dim;
        let n: f64 = self.count.iter().sum();
        let mean = self.s1.iter().fold(DVector::zeros(d), |a, b| a + b) / n;
        let second = self.s2.iter().fold(DMatrix::zeros(d, d), |a, b| a + b) / n;
        let cov = second - &mean * mean.transpose();
        let precision = cov
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Fit("pooled residual covariance is singular".into()))?;
        let l = precision
            .cholesky()
            .ok_or_else(|| Error::Fit("pooled residual precision is singular".into()))?
            .unpack();
        let nu = l.tr_mul(&mean);
        Ok((l, nu))
    }
}

impl SmoothLoss for ResidualGaussianLoss {
    fn dim(&self) -> usize {
        param_dim(self.dim)
    }

    fn period(&self) -> usize {
        self.period
    }

    fn has_data(&self) -> bool {
        self.count.iter().any(|&n| n > 0.0)
    }

    fn in_domain(&self, theta: &[f64]) -> bool {
        (0..self.dim).all(|j| theta[tri_index(j, j, self.dim)] > 0.0)
    }

    fn phase_value(&self, phase: usize, theta: &[f64]) -> f64 {
        let n = self.count[phase];
        if n == 0.0 {
            return 0.0;
        }
        let d = self.dim;
        let (l, nu) = unpack(theta, d);
        let log_diag: f64 = (0..d).map(|j| l[(j, j)].ln()).sum();
        let sl = &self.s2[phase] * &l;
        let quad = l.component_mul(&sl).sum();
        let cross = nu.dot(&l.tr_mul(&self.s1[phase]));
        n * (0.5 * d as f64 * LN_2PI - log_diag) + 0.5 * quad - cross + 0.5 * n * nu.norm_squared()
    }

    fn phase_derivatives(
        &self,
        phase: usize,
        theta: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> f64 {
        let d = self.dim;
        let m = param_dim(d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        let n = self.count[phase];
        if n == 0.0 {
            return 0.0;
        }
        let (s1, s2) = (&self.s1[phase], &self.s2[phase]);
        let (l, nu) = unpack(theta, d);
        let sl = s2 * &l;
        let lts1 = l.tr_mul(s1);
        let nt = tri_len(d);

        for j in 0..d {
            for i in j..d {
                let a = tri_index(i, j, d);
                grad[a] = sl[(i, j)] - s1[i] * nu[j];
                if i == j {
                    grad[a] -= n / l[(j, j)];
                    hess[a * m + a] += n / (l[(j, j)] * l[(j, j)]);
                }
                // d^2 / dL_ij dL_kj = S2_ik
                for k in j..d {
                    hess[a * m + tri_index(k, j, d)] += s2[(i, k)];
                }
                // d^2 / dL_ij dnu_j = -S1_i
                hess[a * m + nt + j] = -s1[i];
                hess[(nt + j) * m + a] = -s1[i];
            }
        }
        for j in 0..d {
            grad[nt + j] = n * nu[j] - lts1[j];
            hess[(nt + j) * m + nt + j] = n;
        }
        let log_diag: f64 = (0..d).map(|j| l[(j, j)].ln()).sum();
        n * (0.5 * d as f64 * LN_2PI - log_diag) + 0.5 * l.component_mul(&sl).sum() - nu.dot(&lts1)
            + 0.5 * n * nu.norm_squared()
    }
}

/// Moments and factors of the residual law at one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGaussian {
    /// Cholesky factor of the precision.
    pub l: DMatrix<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl PhaseGaussian {
    fn new(theta: &[f64], d: usize) -> Self {
        let (l, nu) = unpack(theta, d);
        let lt = l.transpose();
        // mu = L^-T nu
        let mu = lt.solve_upper_triangular(&nu).expect("positive diagonal");
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("positive diagonal");
        let sigma = linv.tr_mul(&linv);
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        Self { l, nu, mu, sigma }
    }

    /// `L' v - nu`.
    pub fn whiten(&self, v: &[f64]) -> DVector<f64> {
        self.l.tr_mul(&DVector::from_column_slice(v)) - &self.nu
    }

    /// `L^-T (z + nu)`.
    pub fn unwhiten(&self, z: &[f64]) -> DVector<f64> {
        let rhs = DVector::from_column_slice(z) + &self.nu;
        self.l
            .transpose()
            .solve_upper_triangular(&rhs)
            .expect("positive diagonal")
    }

    /// Log-determinant of the precision, `2 sum_j log L_jj`.
    pub fn log_det_precision(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    pub fn nll(&self, v: &[f64]) -> f64 {
        nll_term(&self.l, &self.nu, &DVector::from_column_slice(v)).expect("positive diagonal")
    }
}

/// Fitted residual model: Fourier coefficients plus per-phase caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PeriodicParam", into = "PeriodicParam")]
pub struct ResidualGaussian {
    dim: usize,
    param: PeriodicParam,
    phases: Vec<PhaseGaussian>,
}

impl TryFrom<PeriodicParam> for ResidualGaussian {
    type Error = Error;

    fn try_from(param: PeriodicParam) -> Result<Self> {
        Self::from_param(param)
    }
}

impl From<ResidualGaussian> for PeriodicParam {
    fn from(r: ResidualGaussian) -> Self {
        r.param
    }
}

impl ResidualGaussian {
    /// Builds the model from coefficients; fails unless `diag(L) > 0` at every phase.
    pub fn from_param(param: PeriodicParam) -> Result<Self> {
        let d = dim_from_param(param.dim()).ok_or_else(|| {
            Error::Validation(format!(
                "parameter dimension {} is not d(d+1)/2 + d",
                param.dim()
            ))
        })?;
        let grid = param.eval_grid();
        let m = param.dim();
        let mut phases = Vec::with_capacity(param.period());
        for (p, theta) in grid.chunks(m).enumerate() {
            if let Some(j) = (0..d).find(|&j| !(theta[tri_index(j, j, d)] > 0.0)) {
                return Err(Error::Domain(format!(
                    "diag(L) > 0 fails at phase {p}, entry {j}: {}",
                    theta[tri_index(j, j, d)]
                )));
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite parameter at phase {p}")));
            }
            phases.push(PhaseGaussian::new(theta, d));
        }
        Ok(Self {
            dim: d,
            param,
            phases,
        })
    }

    /// Phase-constant model with the given `(L, nu)`.
    pub fn constant(
        l: &DMatrix<f64>,
        nu: &DVector<f64>,
        harmonics: usize,
        period: usize,
    ) -> Result<Self> {
        Self::from_param(PeriodicParam::constant(&pack(l, nu), harmonics, period)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> usize {
        self.param.period()
    }

    pub fn param(&self) -> &PeriodicParam {
        &self.param
    }

    pub fn phase(&self, phase: usize) -> &PhaseGaussian {
        &self.phases[phase % self.phases.len()]
    }

    /// `(mu, Sigma)` at `phase`.
    pub fn moments(&self, phase: usize) -> (DVector<f64>, DMatrix<f64>) {
        let g = self.phase(phase);
        (g.mu.clone(), g.sigma.clone())
    }

    /// Smallest diagonal entry of `L_t` over all phases.
    pub fn min_cholesky_diagonal(&self) -> f64 {
        self.phases
            .iter()
            .flat_map(|g| g.l.diagonal().iter().copied().collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest `|mu_t|` over all phases.
    pub fn max_mean_norm(&self) -> f64 {
        self.phases.iter().map(|g| g.mu.norm()).fold(0.0, f64::max)
    }

    /// `z_t = L_t' v_t - nu_t` on fully observed rows; other rows are masked.
    pub fn whiten(&self, v: &ResidualSeries) -> Result<FleetSeries> {
        self.map_rows(v, |g, row| g.whiten(row))
    }

    /// `v_t = L_t^-T (z_t + nu_t)` on fully observed rows.
    pub fn unwhiten(&self, z: &FleetSeries) -> Result<ResidualSeries> {
        self.map_rows(z, |g, row| g.unwhiten(row))
    }

    fn map_rows(
        &self,
        s: &FleetSeries,
        f: impl Fn(&PhaseGaussian, &[f64]) -> DVector<f64>,
    ) -> Result<FleetSeries> {
        let d = self.dim;
        if s.dim() != d || s.period() != self.period() {
            return Err(Error::Validation(format!(
                "series has {} systems and period {}, residual model has {d} and {}",
                s.dim(),
                s.period(),
                self.period()
            )));
        }
        let mut values = vec![0.0; s.len() * d];
        let mut mask = vec![false; s.len() * d];
        for t in 0..s.len() {
            if s.row_complete(t) {
                let out = f(self.phase(s.phase(t)), s.row(t));
                values[t * d..(t + 1) * d].copy_from_slice(out.as_slice());
                mask[t * d..(t + 1) * d].iter_mut().for_each(|m| *m = true);
            }
        }
        s.with_contents(values, mask)
    }

    /// Mean negative log-likelihood per fully observed row of `v`, or `None`
    /// if there is none.
    pub fn mean_nll(&self, v: &ResidualSeries) -> Option<f64> {
        let terms: Vec<f64> = (0..v.len())
            .filter(|&t| v.row_complete(t))
            .map(|t| self.phase(v.phase(t)).nll(v.row(t)))
            .collect();
        (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
    }
}

/// Fitted residual model with solver diagnostics.
#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub model: ResidualGaussian,
    pub objective: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Fits the smooth periodic residual Gaussian by damped Newton, starting from
/// the pooled maximum-likelihood fit with all harmonics zero.
pub fn fit_residual_gaussian(
    v: &ResidualSeries,
    lambda: f64,
    harmonics: usize,
    settings: &SolverSettings,
) -> Result<ResidualFit> {
    let d = v.dim();
    let loss = ResidualGaussianLoss::from_series(v);
    if loss.vectors() < d + 1 {
        return Err(Error::Fit(format!(
            "{} fully observed residual vectors, need at least {}",
            loss.vectors(),
            d + 1
        )));
    }
    let (l0, nu0) = loss.pooled_mle()?;
    let loss = loss.with_empty_phase_prior();
    let init = PeriodicParam::constant(&pack(&l0, &nu0), harmonics, v.period())?;
    let problem = SmoothFitProblem {
        loss: FitLoss::Smooth(&loss),
        constraint: Constraint::Unconstrained,
        lambda,
    };
    let fit = fit_smooth_periodic_from(&problem, harmonics, settings, Some(&init))?;
    Ok(ResidualFit {
        model: ResidualGaussian::from_param(fit.param)?,
        objective: fit.objective,
        iterations: fit.iterations,
        gradient_norm: fit.dual_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::periodic::SmoothObjective;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_lower(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                rng.random_range(0.3..2.0)
            } else if i > j {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        })
    }

    fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0))
    }

    /// Dense-form oracle `(1/2) log det(2 pi Sigma) + (1/2)(v-mu)' Sigma^-1 (v-mu)`.
    fn dense_nll(mu: &DVector<f64>, sigma: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
        let d = v.len() as f64;
        let ch = sigma.clone().cholesky().unwrap();
        let logdet = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let r = v - mu;
        0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet) + 0.5 * r.dot(&ch.solve(&r))
    }

    #[test]
    fn packing_layout() {
        assert_eq!(tri_index(0, 0, 3), 0);
        assert_eq!(tri_index(2, 0, 3), 2);
        assert_eq!(tri_index(1, 1, 3), 3);
        assert_eq!(tri_index(2, 1, 3), 4);
        assert_eq!(tri_index(2, 2, 3), 5);
        assert_eq!(param_dim(6), 27);
        assert_eq!(dim_from_param(27), Some(6));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, nu) = (random_lower(4, &mut rng), random_vec(4, &mut rng));
        let (l2, nu2) = unpack(&pack(&l, &nu), 4);
        assert_eq!((l, nu), (l2, nu2));
    }

    #[test]
    fn nll_simple_cases() {
        let one = DMatrix::identity(1, 1);
        let zero = DVector::zeros(1);
        let got = nll_term(&one, &zero, &zero).unwrap();
        assert!((got - 0.918_938_533_204_672_7).abs() < 1e-15);
        let l = DMatrix::identity(3, 3);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let got = nll_term(&l, &DVector::zeros(3), &v).unwrap();
        assert!((got - (1.5 * LN_2PI + 0.5 * v.norm_squared())).abs() < 1e-14);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            nll_term(&bad, &DVector::zeros(2), &DVector::zeros(2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn nll_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let d = rng.random_range(1..6);
            let (l, nu, v) = (
                random_lower(d, &mut rng),
                random_vec(d, &mut rng),
                random_vec(d, &mut rng),
            );
            let g = PhaseGaussian::new(&pack(&l, &nu), d);
            let want = dense_nll(&g.mu, &g.sigma, &v);
            assert!((nll_term(&l, &nu, &v).unwrap() - want).abs() <= 1e-10);
            // consistency of the two parameterizations
            let prod = &l * l.transpose() * &g.sigma;
            assert!((prod - DMatrix::<f64>::identity(d, d)).amax() <= 1e-8);
            assert!((l.tr_mul(&g.mu) - &nu).amax() <= 1e-8);
        }
    }

    #[test]
    fn moments_scalar_case() {
        let g = PhaseGaussian::new(&[2.0, 1.0], 1);
        assert!((g.sigma[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((g.mu[0] - 0.5).abs() < 1e-15);
        let id = PhaseGaussian::new(&[1.0, 0.0, 1.0, 0.0, 0.0], 2);
        assert_eq!(id.mu, DVector::zeros(2));
        assert_eq!(id.sigma, DMatrix::identity(2, 2));
    }

    proptest! {
        #[test]
        fn nll_is_midpoint_convex(seed in 0u64..10_000, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_vec(d, &mut rng);
            let (la, na) = (random_lower(d, &mut rng), random_vec(d, &mut rng));
            let (lb, nb) = (random_lower(d, &mut rng), random_vec(d, &mut rng));
            let mid = nll_term(&((&la + &lb) * 0.5), &((&na + &nb) * 0.5), &v).unwrap();
            let avg = 0.5 * (nll_term(&la, &na, &v).unwrap() + nll_term(&lb, &nb, &v).unwrap());
            prop_assert!(mid <= avg + 1e-12);
        }

        #[test]
        fn whiten_round_trip(seed in 0u64..10_000, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, nu, v) = (random_lower(d, &mut rng), random_vec(d, &mut rng), random_vec(d, &mut rng));
            let g = PhaseGaussian::new(&pack(&l, &nu), d);
            let back = g.unwhiten(g.whiten(v.as_slice()).as_slice());
            prop_assert!((back - &v).amax() <= 1e-10);
            prop_assert!(g.whiten(g.mu.as_slice()).amax() <= 1e-12);
        }
    }

    fn residual_series(values: Vec<f64>, d: usize, period: usize) -> ResidualSeries {
        let mask = vec![true; values.len()];
        let names = (0..d).map(|i| format!("s{i}")).collect();
        FleetSeries::from_parts(values, mask, d, period, 0, names).unwrap()
    }

    #[test]
    fn phases_without_data_stay_well_posed() {
        // half the phases never have a complete row
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (d, period) = (2, 24);
        let len = period * 60;
        let values: Vec<f64> = (0..d * len)
            .map(|k| {
                let phase = (k / d) % period;
                let s: f64 = StandardNormal.sample(&mut rng);
                s * (1.0 + (phase as f64 / 4.0).sin().abs())
            })
            .collect();
        let mask: Vec<bool> = (0..d * len).map(|k| (k / d) % period < period / 2).collect();
        let v = FleetSeries::from_parts(values, mask, d, period, 0, vec!["a".into(), "b".into()]).unwrap();
        for lambda in [1e-3, 1e-2, 1.0] {
            let fit = fit_residual_gaussian(&v, lambda, 8, &SolverSettings::default()).unwrap();
            assert!(fit.model.min_cholesky_diagonal() > 0.0);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, period, k) = (2, 12, 2);
        let values: Vec<f64> = (0..d * 240)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let loss = ResidualGaussianLoss::from_series(&residual_series(values, d, period));
        let objective = SmoothObjective::new(&loss, 0.7, k);
        for _ in 0..20 {
            let mut c: Vec<f64> = (0..objective.len())
                .map(|_| rng.random_range(-0.1..0.1))
                .collect();
            for j in 0..d {
                c[tri_index(j, j, d)] = rng.random_range(0.8..1.5);
            }
            let g = objective.gradient(&c);
            for a in 0..c.len() {
                let h = 1e-6;
                let (mut cp, mut cm) = (c.clone(), c.clone());
                cp[a] += h;
                cm[a] -= h;
                let fd = (objective.value(&cp) - objective.value(&cm)) / (2.0 * h);
                assert!(
                    (fd - g[a]).abs() <= 1e-5 * g[a].abs().max(1.0),
                    "{a}: {fd} vs {}",
                    g[a]
                );
            }
        }
    }

    #[test]
    fn analytic_hessian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, period, k) = (3, 8, 1);
        let values: Vec<f64> = (0..d * 80)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let loss = ResidualGaussianLoss::from_series(&residual_series(values, d, period));
        let objective = SmoothObjective::new(&loss, 0.3, k);
        let mut c: Vec<f64> = (0..objective.len())
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        for j in 0..d {
            c[tri_index(j, j, d)] = 1.0;
        }
        let (_, _, hess) = objective.derivatives(&c);
        let h = 1e-6;
        for a in 0..c.len() {
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp[a] += h;
            cm[a] -= h;
            let gp = objective.gradient(&cp);
            let gm = objective.gradient(&cm);
            for b in 0..c.len() {
                let fd = (gp[b] - gm[b]) / (2.0 * h);
                assert!((fd - hess[(b, a)]).abs() <= 1e-4 * hess[(b, a)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn recovers_identity_from_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, period, n) = (2, 24, 12_000);
        let values: Vec<f64> = (0..d * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let fit = fit_residual_gaussian(
            &residual_series(values, d, period),
            1e3,
            3,
            &SolverSettings::default(),
        )
        .unwrap();
        assert!(fit.gradient_norm <= 1e-6);
        for p in 0..period {
            let (mu, sigma) = fit.model.moments(p);
            assert!((sigma - DMatrix::<f64>::identity(d, d)).amax() <= 0.1);
            assert!(mu.norm() <= 0.05, "phase {p}: |mu| = {}", mu.norm());
        }
    }

    #[test]
    fn recovers_phase_varying_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (period, n) = (24, 24 * 400);
        let sigma =
            |p: usize| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * p as f64 / period as f64).sin();
        let values: Vec<f64> = (0..n)
            .map(|t| sigma(t % period) * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let fit = fit_residual_gaussian(
            &residual_series(values, 1, period),
            1.0,
            3,
            &SolverSettings::default(),
        )
        .unwrap();
        for p in 0..period {
            let std = fit.model.moments(p).1[(0, 0)].sqrt();
            assert!(
                (std / sigma(p) - 1.0).abs() <= 0.1,
                "phase {p}: {std} vs {}",
                sigma(p)
            );
        }
    }

    #[test]
    fn huge_smoothing_gives_pooled_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d, period, n) = (2, 12, 1200);
        let values: Vec<f64> = (0..d * n)
            .map(|k| {
                let t = k / d;
                let e: f64 = StandardNormal.sample(&mut rng);
                0.3 + (1.0 + 0.5 * ((t % period) as f64).cos()) * e
            })
            .collect();
        let series = residual_series(values.clone(), d, period);
        let fit = fit_residual_gaussian(&series, 1e8, 2, &SolverSettings::default()).unwrap();
        // closed-form pooled sample mean and covariance
        let mut mean = DVector::zeros(d);
        for t in 0..n {
            mean += DVector::from_column_slice(&values[t * d..(t + 1) * d]);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for t in 0..n {
            let r = DVector::from_column_slice(&values[t * d..(t + 1) * d]) - &mean;
            cov += &r * r.transpose();
        }
        cov /= n as f64;
        for p in 0..period {
            let (mu, sigma) = fit.model.moments(p);
            assert!((mu - &mean).amax() <= 1e-3);
            assert!((sigma - &cov).amax() <= 1e-3);
        }
    }

    #[test]
    fn whitened_model_data_is_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, period) = (2, 6);
        let mut param = PeriodicParam::zeros(param_dim(d), 1, period).unwrap();
        param
            .alpha_mut(0)
            .copy_from_slice(&[1.2, -0.4, 0.8, 0.1, -0.2]);
        param
            .alpha_mut(1)
            .copy_from_slice(&[0.3, 0.1, 0.1, 0.0, 0.1]);
        param
            .beta_mut(1)
            .copy_from_slice(&[0.0, 0.2, -0.2, 0.05, 0.0]);
        let model = ResidualGaussian::from_param(param).unwrap();
        let n_per_phase = 20_000;
        let rows = n_per_phase * period;
        let mut values = Vec::with_capacity(rows * d);
        for t in 0..rows {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            values.extend(model.phase(t % period).unwhiten(&z).iter());
        }
        let v = residual_series(values, d, period);
        let z = model.whiten(&v).unwrap();
        let n = n_per_phase as f64;
        for p in 0..period {
            let rows: Vec<&[f64]> = (p..z.len()).step_by(period).map(|t| z.row(t)).collect();
            for i in 0..d {
                let mean = rows.iter().map(|r| r[i]).sum::<f64>() / n;
                assert!(mean.abs() <= 4.0 / n.sqrt());
                for j in 0..d {
                    let c = rows.iter().map(|r| r[i] * r[j]).sum::<f64>() / n;
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((c - target).abs() <= 5.0 / n.sqrt(), "phase {p}: cov {c}");
                }
            }
        }
        let back = model.unwhiten(&z).unwrap();
        for (a, b) in back.values().iter().zip(v.values()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut param = PeriodicParam::zeros(param_dim(2), 1, 4).unwrap();
        param
            .alpha_mut(0)
            .copy_from_slice(&[1.0, 0.0, -1.0, 0.0, 0.0]);
        let err = ResidualGaussian::from_param(param).unwrap_err();
        assert!(err.to_string().contains("diag(L) > 0"));
        let few = residual_series(vec![1.0, 2.0, 3.0, 4.0], 2, 4);
        assert!(matches!(
            fit_residual_gaussian(&few, 1.0, 1, &SolverSettings::default()),
            Err(Error::Fit(_))
        ));
    }
}
