//! Piecewise-linear Gaussianizing maps built from quantile surfaces.
//!
//! For system `i` at phase `p` the map sends the quantile knot `q_j` to
//! `Phi^-1(eta_j)`, interpolates linearly between knots and extends linearly
//! beyond the outer knots. Knots closer than `1e-9 * scale` are merged into a
//! single steep segment of that width centred on the run, so the map stays
//! strictly increasing; its inverse sends the whole merged output interval
//! back to the run centre.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fleet_data::{FleetSeries, GaussianizedSeries};
use crate::quantile_model::{QuantileLevels, QuantileSurface};

/// Relative gap below which adjacent knots are merged.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Relative floor on every slope of the map.
pub const MIN_SLOPE: f64 = 1e-6;

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile needs 0 < p < 1, got {p}"
        )));
    }
    Ok(standard_normal().inverse_cdf(p))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Knot outputs `Phi^-1(eta_j)`, made exactly antisymmetric for level pairs
/// summing to one.
pub fn gaussian_levels(levels: &QuantileLevels) -> Result<Vec<f64>> {
    let eta = levels.as_slice();
    let mut g = eta
        .iter()
        .map(|&e| normal_quantile(e))
        .collect::<Result<Vec<_>>>()?;
    let r = eta.len();
    for j in 0..r / 2 {
        if eta[j] + eta[r - 1 - j] == 1.0 {
            g[r - 1 - j] = -g[j];
        }
    }
    if r % 2 == 1 && eta[r / 2] == 0.5 {
        g[r / 2] = 0.0;
    }
    Ok(g)
}

/// A run of tied knots: inputs collapse to `center`, outputs span `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRun {
    pub center: f64,
    pub lo: f64,
    pub hi: f64,
}

/// The map for one system at one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    /// Breakpoint inputs, strictly increasing.
    inputs: Vec<f64>,
    /// Breakpoint outputs, strictly increasing.
    outputs: Vec<f64>,
    left_slope: f64,
    right_slope: f64,
    merged: Vec<MergedRun>,
}

impl PhaseMap {
    /// Builds the map from ordered knots `q` and Gaussian outputs `g`.
    pub fn new(q: &[f64], g: &[f64], scale: f64) -> Self {
        debug_assert_eq!(q.len(), g.len());
        let r = q.len();
        let tie = TIE_TOLERANCE * scale;
        let mut inputs = Vec::with_capacity(r + 1);
        let mut outputs = Vec::with_capacity(r + 1);
        // per segment: did it come from a merged run?
        let mut steep = Vec::with_capacity(r);
        let mut merged = Vec::new();
        let mut a = 0;
        while a < r {
            let mut b = a;
            while b + 1 < r && q[b + 1] - q[b] < tie {
                b += 1;
            }
            if !inputs.is_empty() {
                steep.push(false);
            }
            if b == a {
                inputs.push(q[a]);
                outputs.push(g[a]);
            } else {
                let center = 0.5 * (q[a] + q[b]);
                inputs.push(center - 0.5 * tie);
                outputs.push(g[a]);
                inputs.push(center + 0.5 * tie);
                outputs.push(g[b]);
                steep.push(true);
                merged.push(MergedRun {
                    center,
                    lo: g[a],
                    hi: g[b],
                });
            }
            a = b + 1;
        }

        let floor = MIN_SLOPE / scale;
        let span = q[r - 1] - q[0];
        let fallback = if r > 1 && span >= tie {
            (g[r - 1] - g[0]) / span
        } else {
            1.0
        };
        let n = inputs.len();
        let slope = |k: usize| (outputs[k + 1] - outputs[k]) / (inputs[k + 1] - inputs[k]);
        let (left, right) = if n < 2 {
            (fallback, fallback)
        } else {
            (
                if steep[0] { fallback } else { slope(0) },
                if steep[n - 2] { fallback } else { slope(n - 2) },
            )
        };
        Self {
            inputs,
            outputs,
            left_slope: left.max(floor),
            right_slope: right.max(floor),
            merged,
        }
    }

    /// Index `k` of the segment `[inputs[k], inputs[k+1])` holding `y`, or
    /// `None` for the tails.
    fn segment(points: &[f64], y: f64) -> Option<usize> {
        let n = points.len();
        if n < 2 || y < points[0] || y >= points[n - 1] {
            return None;
        }
        Some(points.partition_point(|&u| u <= y) - 1)
    }

    pub fn forward(&self, y: f64) -> f64 {
        let (u, v) = (&self.inputs, &self.outputs);
        let n = u.len();
        if y < u[0] {
            return v[0] + self.left_slope * (y - u[0]);
        }
        match Self::segment(u, y) {
            Some(k) => v[k] + (y - u[k]) * (v[k + 1] - v[k]) / (u[k + 1] - u[k]),
            None => v[n - 1] + self.right_slope * (y - u[n - 1]),
        }
    }

    /// The merged run whose output interval contains `x`.
    pub fn run_containing(&self, x: f64) -> Option<&MergedRun> {
        self.merged.iter().find(|m| m.lo <= x && x <= m.hi)
    }

    pub fn inverse(&self, x: f64) -> f64 {
        if let Some(run) = self.run_containing(x) {
            return run.center;
        }
        let (u, v) = (&self.inputs, &self.outputs);
        let n = u.len();
        if x < v[0] {
            return u[0] + (x - v[0]) / self.left_slope;
        }
        match Self::segment(v, x) {
            Some(k) => u[k] + (x - v[k]) * (u[k + 1] - u[k]) / (v[k + 1] - v[k]),
            None => u[n - 1] + (x - v[n - 1]) / self.right_slope,
        }
    }

    /// Local slope `d forward / dy` (right derivative at breakpoints).
    pub fn slope(&self, y: f64) -> f64 {
        let (u, v) = (&self.inputs, &self.outputs);
        if y < u[0] {
            return self.left_slope;
        }
        match Self::segment(u, y) {
            Some(k) => (v[k + 1] - v[k]) / (u[k + 1] - u[k]),
            None => self.right_slope,
        }
    }

    /// All knots merged into one run (for example night-time zeros).
    pub fn degenerate_value(&self) -> Option<f64> {
        match self.merged.as_slice() {
            [run] if self.inputs.len() == 2 => Some(run.center),
            _ => None,
        }
    }

    pub fn merged_runs(&self) -> &[MergedRun] {
        &self.merged
    }

    pub fn tail_slopes(&self) -> (f64, f64) {
        (self.left_slope, self.right_slope)
    }
}

/// Gaussianizing maps for every system and phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTransform {
    period: usize,
    /// `maps[i][p]`
    maps: Vec<Vec<PhaseMap>>,
}

/// Builds the map for one system from its cleaned quantile surface.
pub fn build_transform(
    surface: &QuantileSurface,
    levels: &QuantileLevels,
) -> Result<Vec<PhaseMap>> {
    let g = gaussian_levels(levels)?;
    if surface.levels.len() != g.len() {
        return Err(Error::Validation(
            "surface and levels disagree on the number of quantiles".into(),
        ));
    }
    Ok(surface
        .grid
        .iter()
        .map(|row| PhaseMap::new(row, &g, surface.scale))
        .collect())
}

impl MarginalTransform {
    /// Builds maps for all systems; `surfaces[i]` belongs to system `i`.
    pub fn new(surfaces: &[QuantileSurface], levels: &QuantileLevels) -> Result<Self> {
        let period = surfaces
            .first()
            .ok_or_else(|| Error::Validation("no quantile surfaces".into()))?
            .period();
        let maps = surfaces
            .iter()
            .map(|s| {
                if s.period() != period {
                    return Err(Error::Validation("surfaces disagree on the period".into()));
                }
                build_transform(s, levels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { period, maps })
    }

    pub fn dim(&self) -> usize {
        self.maps.len()
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn map(&self, system: usize, phase: usize) -> &PhaseMap {
        &self.maps[system][phase % self.period]
    }

    pub fn forward(&self, y: f64, system: usize, phase: usize) -> f64 {
        self.map(system, phase).forward(y)
    }

    pub fn inverse(&self, x: f64, system: usize, phase: usize) -> f64 {
        self.map(system, phase).inverse(x)
    }

    /// Maps a latent value back to data units, returning the merged value
    /// exactly at fully degenerate phases.
    pub fn to_data(&self, x: f64, system: usize, phase: usize) -> f64 {
        let map = self.map(system, phase);
        map.degenerate_value().unwrap_or_else(|| map.inverse(x))
    }

    pub fn log_jacobian(&self, y: f64, system: usize, phase: usize) -> f64 {
        self.map(system, phase).slope(y).ln()
    }

    /// Applies the forward map entrywise; the mask is unchanged.
    pub fn transform_series(&self, series: &FleetSeries) -> Result<GaussianizedSeries> {
        self.check_dims(series)?;
        let d = series.dim();
        let mut values = series.values().to_vec();
        for t in 0..series.len() {
            let p = series.phase(t);
            for i in 0..d {
                if series.is_observed(t, i) {
                    values[t * d + i] = self.forward(values[t * d + i], i, p);
                }
            }
        }
        series.with_contents(values, series.mask().to_vec())
    }

    /// Whether every knot of the map for `(system, phase)` is merged.
    pub fn is_degenerate(&self, system: usize, phase: usize) -> bool {
        self.map(system, phase).degenerate_value().is_some()
    }

    /// Forward transform with entries at fully degenerate phases marked
    /// missing. Those readings only say the latent value lies somewhere in
    /// the merged output interval, so they are left out of fitting and
    /// conditioning.
    pub fn informative_series(&self, series: &FleetSeries) -> Result<GaussianizedSeries> {
        let x = self.transform_series(series)?;
        let d = series.dim();
        let hide = (0..series.len())
            .flat_map(|t| (0..d).map(move |i| (t, i)))
            .filter(|&(t, i)| self.is_degenerate(i, series.phase(t)));
        Ok(x.masked(hide.collect::<Vec<_>>()))
    }

    /// Applies [`Self::to_data`] entrywise.
    pub fn inverse_series(&self, latent: &GaussianizedSeries) -> Result<FleetSeries> {
        self.check_dims(latent)?;
        let d = latent.dim();
        let mut values = latent.values().to_vec();
        for t in 0..latent.len() {
            let p = latent.phase(t);
            for i in 0..d {
                if latent.is_observed(t, i) {
                    values[t * d + i] = self.to_data(values[t * d + i], i, p);
                }
            }
        }
        latent.with_contents(values, latent.mask().to_vec())
    }

    fn check_dims(&self, series: &FleetSeries) -> Result<()> {
        if series.dim() != self.dim() || series.period() != self.period {
            return Err(Error::Validation(format!(
                "series has {} systems and period {}, transform has {} and {}",
                series.dim(),
                series.period(),
                self.dim(),
                self.period
            )));
        }
        Ok(())
    }
}
