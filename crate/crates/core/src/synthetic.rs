//! Reference models with known parameters, for recovery tests and demos.
//!
//! [`solar_like`] mimics a fleet of solar systems: readings are exactly zero
//! for the first and last quarter of each period and follow a smooth daily
//! bump in between. The latent process is stationary with unit marginal
//! variance, so the quantile knots are the true marginal quantiles.

use nalgebra::{DMatrix, DVector};

use crate::applications::CopulaModel;
use crate::ar_model::ArCoefficients;
use crate::error::{Error, Result};
use crate::periodic::PeriodicParam;
use crate::pipeline::{FitDiagnostics, Hyperparameters};
use crate::quantile_model::{QuantileLevels, QuantileSurface};
use crate::residual_model::{pack, ResidualGaussian};

/// Daily profile in `[0, 1]`: zero on the night band, `sin^2` bump by day.
pub fn day_profile(phase: usize, period: usize) -> f64 {
    let u = (phase % period) as f64 / period as f64;
    if u <= 0.25 || u >= 0.75 {
        return 0.0;
    }
    (std::f64::consts::PI * (u - 0.25) * 2.0).sin().powi(2)
}

/// Whether `phase` lies in the exact-zero band.
pub fn is_night(phase: usize, period: usize) -> bool {
    day_profile(phase, period) == 0.0
}

/// Latent correlation between systems at `phase`.
fn correlation(phase: usize, period: usize) -> f64 {
    0.3 + 0.2 * (2.0 * std::f64::consts::PI * phase as f64 / period as f64).cos()
}

fn correlation_matrix(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho })
}

/// Knobs of the reference model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarConfig {
    pub systems: usize,
    pub period: usize,
    /// Harmonics of the stored Fourier parameters.
    pub harmonics: usize,
    /// Diagonal of `A_1`; larger values leave less residual variance.
    pub persistence: f64,
    /// `A_1` coupling of each system to the next one.
    pub coupling: f64,
    /// Diagonal of `A_2`.
    pub second_lag: f64,
    /// Night level as a fraction of the daily peak; 0 gives exact zeros.
    pub night_floor: f64,
}

impl Default for SolarConfig {
    fn default() -> Self {
        Self {
            systems: 3,
            period: 96,
            harmonics: 10,
            persistence: 0.5,
            coupling: 0.15,
            second_lag: -0.15,
            night_floor: 0.0,
        }
    }
}

impl SolarConfig {
    /// `A_1` and `A_2`.
    pub fn ar_matrices(&self) -> [DMatrix<f64>; 2] {
        let d = self.systems;
        let a1 = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                self.persistence
            } else if j == (i + 1) % d {
                self.coupling
            } else {
                0.0
            }
        });
        [a1, DMatrix::identity(d, d) * self.second_lag]
    }

    /// True per-phase residual covariances.
    ///
    /// The latent process is held at the periodic correlation `R_p` (unit
    /// diagonal). The lag-one cross-covariance `C_p = Cov(x_p, x_{p-1})`
    /// obeys `C_p = A_1 R_{p-1} + A_2 C_{p-1}'`, iterated to its periodic
    /// fixed point, and `Sigma_p` is whatever is left of `R_p` after the AR
    /// prediction.
    pub fn residual_covariances(&self) -> Vec<DMatrix<f64>> {
        let (d, period) = (self.systems, self.period);
        let [a1, a2] = self.ar_matrices();
        let r: Vec<DMatrix<f64>> = (0..period)
            .map(|p| correlation_matrix(d, correlation(p, period)))
            .collect();
        let prev = |p: usize, k: usize| (p + k * period - k) % period;
        let mut c = vec![DMatrix::<f64>::zeros(d, d); period];
        for _ in 0..200 {
            for p in 0..period {
                c[p] = &a1 * &r[prev(p, 1)] + &a2 * c[prev(p, 1)].transpose();
            }
        }
        (0..period)
            .map(|p| {
                let (r1, r2, c1) = (&r[prev(p, 1)], &r[prev(p, 2)], &c[prev(p, 1)]);
                let pred = &a1 * r1 * a1.transpose()
                    + &a1 * c1 * a2.transpose()
                    + &a2 * c1.transpose() * a1.transpose()
                    + &a2 * r2 * a2.transpose();
                &r[p] - pred
            })
            .collect()
    }
}

/// Reference solar-like model; see the module docs.
pub fn solar_like(config: &SolarConfig) -> Result<CopulaModel> {
    let SolarConfig {
        systems: d,
        period,
        harmonics,
        ..
    } = *config;
    if d < 2 || period < 8 {
        return Err(Error::Config("need at least 2 systems and period >= 8".into()));
    }
    let floor = config.night_floor;
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::Config(format!("night floor must lie in [0, 1), got {floor}")));
    }
    let levels = QuantileLevels::default();
    let eta = levels.as_slice();
    let r = eta.len();
    let surfaces = (0..d)
        .map(|i| {
            let capacity = 1.0 + 0.5 * i as f64;
            let grid: Vec<Vec<f64>> = (0..period)
                .map(|p| {
                    let s = floor + (1.0 - floor) * day_profile(p, period);
                    eta.iter().map(|e| capacity * s * e.powf(0.7)).collect()
                })
                .collect();
            let flat: Vec<f64> = grid.iter().flatten().copied().collect();
            let param = PeriodicParam::project(&flat, r, harmonics, period)?;
            let scale = flat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Ok(QuantileSurface {
                system: i,
                levels: levels.clone(),
                param,
                grid,
                scale,
                degenerate_phases: (0..period)
                    .filter(|&p| floor == 0.0 && is_night(p, period))
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ar = ArCoefficients::new(d, config.ar_matrices().to_vec())?;

    let mut theta = Vec::new();
    for (p, cov) in config.residual_covariances().into_iter().enumerate() {
        let l = cov
            .try_inverse()
            .and_then(|precision| precision.cholesky())
            .ok_or_else(|| {
                Error::Config(format!("residual covariance at phase {p} is not positive definite"))
            })?
            .l();
        theta.extend(pack(&l, &DVector::zeros(d)));
    }
    let m = theta.len() / period;
    let residual = ResidualGaussian::from_param(PeriodicParam::project(&theta, m, harmonics, period)?)?;

    CopulaModel::new(
        (0..d).map(|i| format!("system_{i}")).collect(),
        levels,
        surfaces,
        ar,
        residual,
        Hyperparameters {
            period,
            harmonics,
            memory: 2,
            lambda_quantile: vec![0.0; d],
            lambda_ridge: 0.0,
            lambda_residual: 0.0,
        },
        FitDiagnostics::default(),
    )
}
