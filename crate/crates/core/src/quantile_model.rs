//! Smooth periodic quantile curves per system, fitted by pinball-loss
//! regression with an ordering constraint across levels.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet_data::FleetSeries;
use crate::periodic::{
    fit_smooth_periodic, CheckLossData, Constraint, FitLoss, PeriodicParam, SeparableLoss, SmoothFitProblem,
    SolverSettings,
};

/// Strictly increasing quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.len() < 2 {
            return Err(Error::Config("need at least two quantile levels".into()));
        }
        if eta.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::Config("quantile levels must lie in (0, 1)".into()));
        }
        if eta.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "quantile levels must be strictly increasing".into(),
            ));
        }
        Ok(Self(eta))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// 2nd percentile, the nine deciles, 98th percentile.
impl Default for QuantileLevels {
    fn default() -> Self {
        let mut eta = vec![0.02];
        eta.extend((1..=9).map(|k| k as f64 / 10.0));
        eta.push(0.98);
        Self(eta)
    }
}

impl TryFrom<Vec<f64>> for QuantileLevels {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevels> for Vec<f64> {
    fn from(l: QuantileLevels) -> Self {
        l.0
    }
}

/// Pinball loss `max{tau u, (tau - 1) u}`.
pub fn pinball(u: f64, tau: f64) -> f64 {
    (tau * u).max((tau - 1.0) * u)
}

/// Sum over observations and levels of `pinball(y - q_j; eta_j)`, grouped by phase.
pub struct PinballLoss {
    levels: Vec<f64>,
    period: usize,
    /// Sorted observations per phase.
    obs: Vec<Vec<f64>>,
}

impl PinballLoss {
    pub fn new(
        levels: &QuantileLevels,
        period: usize,
        obs: impl IntoIterator<Item = (usize, f64)>,
    ) -> Self {
        let mut by_phase = vec![Vec::new(); period];
        for (p, y) in obs {
            by_phase[p % period].push(y);
        }
        for v in &mut by_phase {
            v.sort_by(f64::total_cmp);
        }
        Self {
            levels: levels.as_slice().to_vec(),
            period,
            obs: by_phase,
        }
    }

    pub fn total(&self) -> usize {
        self.obs.iter().map(Vec::len).sum()
    }
}

impl SeparableLoss for PinballLoss {
    fn dim(&self) -> usize {
        self.levels.len()
    }

    fn period(&self) -> usize {
        self.period
    }

    fn has_data(&self) -> bool {
        self.obs.iter().any(|v| !v.is_empty())
    }

    fn value(&self, phase: usize, component: usize, value: f64) -> f64 {
        let tau = self.levels[component];
        self.obs[phase]
            .iter()
            .map(|y| pinball(y - value, tau))
            .sum()
    }

    fn check_form(&self) -> Option<CheckLossData<'_>> {
        Some(CheckLossData {
            levels: &self.levels,
            obs: &self.obs,
        })
    }

    fn block_prox(&self, phase: usize, components: Range<usize>, targets: &[f64], rho: f64) -> f64 {
        // Subgradient in u of the block objective is
        //   nb rho u - rho S + nb #{y <= u} - H n    (right derivative)
        //   nb rho u - rho S + nb #{y <  u} - H n    (left derivative)
        let ys = &self.obs[phase];
        let n = ys.len() as f64;
        let nb = components.len() as f64;
        let s: f64 = targets.iter().sum();
        let h: f64 = self.levels[components].iter().sum();
        let base = -rho * s - h * n;
        let right = |u: f64| nb * rho * u + base + nb * ys.partition_point(|&y| y <= u) as f64;
        let left = |u: f64| nb * rho * u + base + nb * ys.partition_point(|&y| y < u) as f64;
        let k = {
            let (mut lo, mut hi) = (0usize, ys.len());
            while lo < hi {
                let mid = (lo + hi) / 2;
                if right(ys[mid]) >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            lo
        };
        if k < ys.len() && left(ys[k]) <= 0.0 {
            return ys[k];
        }
        // Interior of (ys[k-1], ys[k]), where #{y <= u} = k.
        (rho * s + h * n - nb * k as f64) / (nb * rho)
    }
}

/// Smooth periodic quantile curves for one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSurface {
    pub system: usize,
    pub levels: QuantileLevels,
    pub param: PeriodicParam,
    /// `P x r` quantile values per phase, nondecreasing along each row.
    pub grid: Vec<Vec<f64>>,
    /// Largest absolute observed value (at least a tiny positive floor).
    pub scale: f64,
    /// Phases whose observations were all identical; their quantiles are
    /// pinned to that value instead of the Fourier evaluation.
    pub degenerate_phases: Vec<usize>,
}

impl QuantileSurface {
    pub fn period(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, phase: usize) -> &[f64] {
        &self.grid[phase]
    }

    /// Checks grid shape, finiteness and ordering.
    pub fn validate(&self) -> Result<()> {
        let r = self.levels.len();
        if self.param.dim() != r || self.param.period() != self.grid.len() {
            return Err(Error::Validation("quantile surface shape mismatch".into()));
        }
        for (p, row) in self.grid.iter().enumerate() {
            if row.len() != r || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("bad quantile row at phase {p}")));
            }
            if row.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Validation(format!(
                    "quantiles cross at phase {p} (q_1 <= ... <= q_r)"
                )));
            }
        }
        Ok(())
    }
}

/// Least-squares projection of `row` onto nondecreasing vectors
/// (pool adjacent violators).
pub fn isotonic_row(row: &mut [f64]) {
    let mut blocks: Vec<(usize, f64, usize)> = Vec::with_capacity(row.len()); // (start, mean, len)
    for (j, &v) in row.iter().enumerate() {
        let mut b = (j, v, 1usize);
        while let Some(&(start, mean, len)) = blocks.last() {
            if mean <= b.1 {
                break;
            }
            blocks.pop();
            let total = len + b.2;
            b = (
                start,
                (mean * len as f64 + b.1 * b.2 as f64) / total as f64,
                total,
            );
        }
        blocks.push(b);
    }
    for (start, mean, len) in blocks {
        row[start..start + len].iter_mut().for_each(|v| *v = mean);
    }
}

/// Removes residual numerical crossings, phase by phase. Idempotent.
pub fn crossing_cleanup(mut surface: QuantileSurface) -> QuantileSurface {
    for row in &mut surface.grid {
        isotonic_row(row);
    }
    surface
}

/// Observation scale of one system: max |y|, floored at 1e-12.
pub fn system_scale(series: &FleetSeries, system: usize) -> f64 {
    (0..series.len())
        .filter_map(|t| series.get(t, system))
        .fold(0.0f64, |m, y| m.max(y.abs()))
        .max(1e-12)
}

/// Fits smooth, periodic, ordered quantile curves for one system.
///
/// Data are divided by the system scale before solving, so `lambda` acts on
/// unit-scale readings.
pub fn fit_quantiles(
    series: &FleetSeries,
    system: usize,
    levels: &QuantileLevels,
    lambda: f64,
    harmonics: usize,
    settings: &SolverSettings,
) -> Result<QuantileSurface> {
    if system >= series.dim() {
        return Err(Error::Validation(format!("no system {system}")));
    }
    let period = series.period();
    let obs: Vec<(usize, f64)> = (0..series.len())
        .filter_map(|t| series.get(t, system).map(|y| (series.phase(t), y)))
        .collect();
    if obs.len() < levels.len() {
        return Err(Error::Fit(format!(
            "system {system} has {} observations, need at least {}",
            obs.len(),
            levels.len()
        )));
    }
    let scale = system_scale(series, system);
    let loss = PinballLoss::new(levels, period, obs.iter().map(|&(p, y)| (p, y / scale)));
    let problem = SmoothFitProblem {
        loss: FitLoss::Separable(&loss),
        constraint: Constraint::Ordered,
        lambda,
    };
    let fit = fit_smooth_periodic(&problem, harmonics, settings)?;
    let mut param = fit.param;
    param.coeffs_mut().iter_mut().for_each(|c| *c *= scale);

    let r = levels.len();
    let flat = param.eval_grid();
    let mut grid: Vec<Vec<f64>> = flat.chunks(r).map(<[f64]>::to_vec).collect();

    // Phases where every observation is identical (night-time zeros).
    let mut per_phase: Vec<Vec<f64>> = vec![Vec::new(); period];
    for &(p, y) in &obs {
        per_phase[p].push(y);
    }
    let mut degenerate_phases = Vec::new();
    for (p, ys) in per_phase.iter().enumerate() {
        if ys.len() >= 3 && ys.iter().all(|&y| y == ys[0]) {
            grid[p].iter_mut().for_each(|q| *q = ys[0]);
            degenerate_phases.push(p);
        }
    }

    let surface = QuantileSurface {
        system,
        levels: levels.clone(),
        param,
        grid,
        scale,
        degenerate_phases,
    };
    Ok(crossing_cleanup(surface))
}

/// Pinball loss of a surface on held-out `(phase, y)` pairs, summed over levels.
pub fn pinball_score(surface: &QuantileSurface, held_out: &[(usize, f64)]) -> f64 {
    let eta = surface.levels.as_slice();
    held_out
        .iter()
        .map(|&(p, y)| {
            surface.grid[p]
                .iter()
                .zip(eta)
                .map(|(&q, &tau)| pinball(y - q, tau))
                .sum::<f64>()
        })
        .sum()
}
