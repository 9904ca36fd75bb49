//! Simulation, imputation, anomaly detection, forecasting and density
//! evaluation with a fitted copula model.
//!
//! Conditioning-based operations work on blocks of at most `2P` query rows,
//! each embedded in a window with up to `P` rows of context on either side.
//! Known entries outside the window are ignored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar_model::{residuals, ArCoefficients};
use crate::error::{Error, Result};
use crate::fleet_data::{FleetSeries, GaussianizedSeries};
use crate::joint_gaussian::{
    assemble_window, log_density_recursive, simulate_recursive, ConditionalGaussian,
    JointGaussianWindow,
};
use crate::marginal_transform::{normal_cdf, normal_quantile, MarginalTransform};
use crate::pipeline::{FitDiagnostics, Hyperparameters};
use crate::quantile_model::{QuantileLevels, QuantileSurface};
use crate::residual_model::ResidualGaussian;

/// Default probabilities of imputation and forecast bands.
pub const DEFAULT_BAND: [f64; 3] = [0.1, 0.5, 0.9];
/// Default anomaly threshold.
pub const DEFAULT_EPSILON: f64 = 0.01;
/// Conditional quantiles of anomaly scores are clipped to `[Q_MIN, 1 - Q_MIN]`.
pub const Q_MIN: f64 = 1e-4;

/// Fitted three-stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct CopulaModel {
    system_names: Vec<String>,
    levels: QuantileLevels,
    surfaces: Vec<QuantileSurface>,
    transform: MarginalTransform,
    ar: ArCoefficients,
    residual: ResidualGaussian,
    hyperparameters: Hyperparameters,
    diagnostics: FitDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    system_names: Vec<String>,
    levels: QuantileLevels,
    surfaces: Vec<QuantileSurface>,
    ar: ArCoefficients,
    residual: ResidualGaussian,
    hyperparameters: Hyperparameters,
    diagnostics: FitDiagnostics,
}

impl TryFrom<ModelRepr> for CopulaModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        CopulaModel::new(
            r.system_names,
            r.levels,
            r.surfaces,
            r.ar,
            r.residual,
            r.hyperparameters,
            r.diagnostics,
        )
    }
}

impl From<CopulaModel> for ModelRepr {
    fn from(m: CopulaModel) -> Self {
        ModelRepr {
            system_names: m.system_names,
            levels: m.levels,
            surfaces: m.surfaces,
            ar: m.ar,
            residual: m.residual,
            hyperparameters: m.hyperparameters,
            diagnostics: m.diagnostics,
        }
    }
}

impl CopulaModel {
    /// Bundles fitted components; checks that they agree on `d` and `P`.
    pub fn new(
        system_names: Vec<String>,
        levels: QuantileLevels,
        surfaces: Vec<QuantileSurface>,
        ar: ArCoefficients,
        residual: ResidualGaussian,
        hyperparameters: Hyperparameters,
        diagnostics: FitDiagnostics,
    ) -> Result<Self> {
        let d = system_names.len();
        if surfaces.len() != d || ar.dim() != d || residual.dim() != d {
            return Err(Error::Validation(format!(
                "{d} systems but {} quantile surfaces, AR dimension {}, residual dimension {}",
                surfaces.len(),
                ar.dim(),
                residual.dim()
            )));
        }
        let period = residual.period();
        if hyperparameters.period != period {
            return Err(Error::Validation(format!(
                "hyperparameters record period {}, residual model has {period}",
                hyperparameters.period
            )));
        }
        for (i, s) in surfaces.iter().enumerate() {
            if s.system != i || s.period() != period || s.levels != levels {
                return Err(Error::Validation(format!(
                    "quantile surface {i} does not match the model"
                )));
            }
            s.validate()?;
        }
        ar.validate()?;
        let transform = MarginalTransform::new(&surfaces, &levels)?;
        Ok(Self {
            system_names,
            levels,
            surfaces,
            transform,
            ar,
            residual,
            hyperparameters,
            diagnostics,
        })
    }

    pub fn dim(&self) -> usize {
        self.system_names.len()
    }

    pub fn period(&self) -> usize {
        self.residual.period()
    }

    pub fn system_names(&self) -> &[String] {
        &self.system_names
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn surfaces(&self) -> &[QuantileSurface] {
        &self.surfaces
    }

    pub fn transform(&self) -> &MarginalTransform {
        &self.transform
    }

    pub fn ar(&self) -> &ArCoefficients {
        &self.ar
    }

    pub fn residual(&self) -> &ResidualGaussian {
        &self.residual
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyperparameters
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    fn check_series(&self, series: &FleetSeries) -> Result<()> {
        if series.dim() != self.dim() || series.period() != self.period() {
            return Err(Error::Validation(format!(
                "series has {} systems and period {}, model has {} and {}",
                series.dim(),
                series.period(),
                self.dim(),
                self.period()
            )));
        }
        Ok(())
    }

    /// Latent window law over rows `[start, start + len)` of `series`.
    fn window(&self, series: &FleetSeries, start: usize, len: usize) -> Result<JointGaussianWindow> {
        assemble_window(&self.ar, &self.residual, series.phase(start), len)
    }
}

/// Forward pipeline output: latent `x`, AR residual `v` and whitened `z`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub x: GaussianizedSeries,
    pub v: GaussianizedSeries,
    pub z: GaussianizedSeries,
}

/// Applies the three forward transformations.
pub fn encode(model: &CopulaModel, series: &FleetSeries) -> Result<Encoded> {
    model.check_series(series)?;
    let x = model.transform.transform_series(series)?;
    let v = residuals(&x, &model.ar)?;
    let z = model.residual.whiten(&v)?;
    Ok(Encoded { x, v, z })
}

/// Inverts [`encode`] on a fully observed stretch: rebuilds `y` from the
/// whitened series `z` (rows `M..`) and the first `M` latent rows.
pub fn decode(model: &CopulaModel, z: &GaussianizedSeries, x_initial: &[f64]) -> Result<FleetSeries> {
    model.check_series(z)?;
    let (d, memory) = (model.dim(), model.ar.memory());
    if x_initial.len() != memory * d || z.len() < memory {
        return Err(Error::Validation(format!(
            "need {memory} initial latent rows and at least as many rows of z"
        )));
    }
    let mut x = vec![0.0; z.len() * d];
    x[..memory * d].copy_from_slice(x_initial);
    let mut pred = vec![0.0; d];
    for t in memory..z.len() {
        if !z.row_complete(t) {
            return Err(Error::Validation(format!("row {t} of z is incomplete")));
        }
        let v = model.residual.phase(z.phase(t)).unwhiten(z.row(t));
        let (past, current) = x.split_at_mut(t * d);
        let lags: Vec<&[f64]> = (1..=memory).map(|m| &past[(t - m) * d..(t - m + 1) * d]).collect();
        model.ar.predict_into(&lags, &mut pred);
        for i in 0..d {
            current[i] = pred[i] + v[i];
        }
    }
    let latent = z.with_contents(x, vec![true; z.len() * d])?;
    let mut y = latent.values().to_vec();
    for t in 0..latent.len() {
        for i in 0..d {
            y[t * d + i] = model.transform.inverse(y[t * d + i], i, latent.phase(t));
        }
    }
    latent.with_contents(y, vec![true; z.len() * d])
}

fn output_series(
    model: &CopulaModel,
    values: Vec<f64>,
    start_phase: usize,
    first_index: i64,
) -> Result<FleetSeries> {
    let mask = vec![true; values.len()];
    Ok(FleetSeries::from_parts(
        values,
        mask,
        model.dim(),
        model.period(),
        start_phase,
        model.system_names.clone(),
    )?
    .with_first_index(first_index))
}

/// `n` synthetic series of `len` rows starting at phase `start_phase`.
///
/// Latent paths are drawn from the window law (boundary steps `N(0, I)`) and
/// mapped through the inverse marginal maps; fully degenerate phases return
/// their merged value exactly.
pub fn simulate(
    model: &CopulaModel,
    start_phase: usize,
    len: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<FleetSeries>> {
    if len == 0 {
        return Err(Error::Validation("simulation length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, period) = (model.dim(), model.period());
    (0..n)
        .map(|_| {
            let mut x = simulate_recursive(&model.ar, &model.residual, start_phase, len, &mut rng);
            for (k, v) in x.iter_mut().enumerate() {
                let (s, i) = (k / d, k % d);
                *v = model.transform.to_data(*v, i, (start_phase + s) % period);
            }
            output_series(model, x, start_phase, 0)
        })
        .collect()
}

/// Quantiles of one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    /// Row index within the input series (may exceed its length for forecasts).
    pub t: usize,
    pub system: usize,
    /// Values at the band probabilities, nondecreasing.
    pub values: Vec<f64>,
}

/// Conditional marginal quantile bands in data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    pub probabilities: Vec<f64>,
    pub rows: Vec<BandRow>,
}

impl QuantileBand {
    /// Rows for one system, in time order.
    pub fn system_rows(&self, system: usize) -> impl Iterator<Item = &BandRow> {
        self.rows.iter().filter(move |r| r.system == system)
    }

    pub fn get(&self, t: usize, system: usize) -> Option<&BandRow> {
        self.rows.iter().find(|r| r.t == t && r.system == system)
    }
}

fn check_probabilities(probs: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::Config("band needs at least one probability".into()));
    }
    if probs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("band probabilities must increase".into()));
    }
    probs.iter().map(|&p| normal_quantile(p)).collect()
}

/// Query blocks of at most `2P` rows covering `range`, each with its window.
fn blocks(range: std::ops::Range<usize>, period: usize, len: usize) -> Vec<(usize, usize, usize, usize)> {
    let step = 2 * period;
    let mut out = Vec::new();
    let mut a = range.start;
    while a < range.end {
        let b = (a + step).min(range.end);
        let lo = a.saturating_sub(period);
        let hi = (b + period).min(len);
        out.push((a, b, lo, hi));
        a = b;
    }
    out
}

/// Known latent entries of rows `[lo, hi)`, as window indices. Readings at
/// fully degenerate phases are left out.
fn known_entries(model: &CopulaModel, series: &FleetSeries, lo: usize, hi: usize) -> Vec<(usize, f64)> {
    let d = model.dim();
    let mut known = Vec::new();
    for t in lo..hi {
        for i in 0..d {
            if model.transform.is_degenerate(i, series.phase(t)) {
                continue;
            }
            if let Some(y) = series.get(t, i) {
                known.push(((t - lo) * d + i, model.transform.forward(y, i, series.phase(t))));
            }
        }
    }
    known
}

fn band_rows(
    model: &CopulaModel,
    series: &FleetSeries,
    cond: &ConditionalGaussian,
    lo: usize,
    entries: impl Iterator<Item = (usize, usize)>,
    z: &[f64],
) -> Result<Vec<BandRow>> {
    let d = model.dim();
    entries
        .map(|(t, i)| {
            let r = cond.position((t - lo) * d + i)?;
            let (m, s) = (cond.mean[r], cond.variances[r].sqrt());
            let phase = series.phase(t);
            let values = z
                .iter()
                .map(|zq| model.transform.to_data(m + zq * s, i, phase))
                .collect();
            Ok(BandRow {
                t,
                system: i,
                values,
            })
        })
        .collect()
}

/// Conditional quantile bands for every missing entry of `series`.
pub fn impute(model: &CopulaModel, series: &FleetSeries, probabilities: &[f64]) -> Result<QuantileBand> {
    model.check_series(series)?;
    let z = check_probabilities(probabilities)?;
    let d = model.dim();
    let parts: Vec<Result<Vec<BandRow>>> = blocks(0..series.len(), model.period(), series.len())
        .into_par_iter()
        .map(|(a, b, lo, hi)| {
            let missing: Vec<(usize, usize)> = (a..b)
                .flat_map(|t| (0..d).map(move |i| (t, i)))
                .filter(|&(t, i)| !series.is_observed(t, i))
                .collect();
            if missing.is_empty() {
                return Ok(Vec::new());
            }
            let window = model.window(series, lo, hi - lo)?;
            let cond = window.condition(&known_entries(model, series, lo, hi))?;
            band_rows(model, series, &cond, lo, missing.into_iter(), &z)
        })
        .collect();
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    Ok(QuantileBand {
        probabilities: probabilities.to_vec(),
        rows,
    })
}

/// Marginal quantile bands for rows `[from, from + horizon)` given every
/// observed entry before `from` (within `P` rows of context).
pub fn forecast(
    model: &CopulaModel,
    series: &FleetSeries,
    from: usize,
    horizon: usize,
    probabilities: &[f64],
) -> Result<QuantileBand> {
    let z = check_probabilities(probabilities)?;
    let (cond, lo) = forecast_conditional(model, series, from, horizon)?;
    let d = model.dim();
    let entries = (from..from + horizon).flat_map(|t| (0..d).map(move |i| (t, i)));
    Ok(QuantileBand {
        probabilities: probabilities.to_vec(),
        rows: band_rows(model, series, &cond, lo, entries, &z)?,
    })
}

fn forecast_conditional(
    model: &CopulaModel,
    series: &FleetSeries,
    from: usize,
    horizon: usize,
) -> Result<(ConditionalGaussian, usize)> {
    model.check_series(series)?;
    if horizon == 0 {
        return Err(Error::Validation("forecast horizon must be positive".into()));
    }
    if from > series.len() {
        return Err(Error::Validation(format!(
            "forecast origin {from} is past the end of a {}-row series",
            series.len()
        )));
    }
    let lo = from.saturating_sub(model.period());
    let window = model.window(series, lo, from + horizon - lo)?;
    let known = known_entries(model, series, lo, from);
    Ok((window.condition(&known)?, lo))
}

/// `n` joint sample paths over rows `[from, from + horizon)`.
pub fn forecast_samples(
    model: &CopulaModel,
    series: &FleetSeries,
    from: usize,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<FleetSeries>> {
    let (cond, lo) = forecast_conditional(model, series, from, horizon)?;
    let d = model.dim();
    let offset = (from - lo) * d;
    cond.sample(n, seed)
        .into_iter()
        .map(|draw| {
            // unknowns are exactly the horizon entries, in time-major order
            let values = (0..horizon * d)
                .map(|k| {
                    let (s, i) = (k / d, k % d);
                    let pos = cond.position(offset + k)?;
                    Ok(model.transform.to_data(draw[pos], i, series.phase(from + s)))
                })
                .collect::<Result<Vec<f64>>>()?;
            output_series(
                model,
                values,
                series.phase(from),
                series.first_index() + from as i64,
            )
        })
        .collect()
}

/// Conditional quantile score of one observed entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRow {
    pub t: usize,
    pub system: usize,
    pub y: f64,
    /// Conditional CDF value of `y` given all other known entries, clipped to
    /// `[Q_MIN, 1 - Q_MIN]`.
    pub q: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub epsilon: f64,
    pub rows: Vec<AnomalyRow>,
}

impl AnomalyReport {
    pub fn flagged(&self) -> impl Iterator<Item = &AnomalyRow> {
        self.rows.iter().filter(|r| r.flag)
    }

    pub fn flag_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.flagged().count() as f64 / self.rows.len() as f64
    }
}

/// Scores every observed entry by its leave-one-out conditional quantile.
///
/// Entries whose value sits on a merged knot (for example a night-time
/// zero) correspond to a whole latent interval; they get the midpoint of the
/// conditional probabilities of that interval's ends. Readings at fully
/// degenerate phases are scored but never conditioned on.
pub fn detect_anomalies(model: &CopulaModel, series: &FleetSeries, epsilon: f64) -> Result<AnomalyReport> {
    model.check_series(series)?;
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Domain(format!(
            "epsilon must lie in (0, 0.5), got {epsilon}"
        )));
    }
    let d = model.dim();
    let parts: Vec<Result<Vec<AnomalyRow>>> = blocks(0..series.len(), model.period(), series.len())
        .into_par_iter()
        .map(|(a, b, lo, hi)| {
            let window = model.window(series, lo, hi - lo)?;
            let known = known_entries(model, series, lo, hi);
            let loo = window.leave_one_out(&known)?;
            // (entry, latent value or None at degenerate phases, conditional mean, variance)
            let mut scored: Vec<(usize, Option<f64>, f64, f64)> = known
                .iter()
                .zip(&loo)
                .map(|(&(k, x), &(m, var))| (k, Some(x), m, var))
                .collect();
            let degenerate: Vec<usize> = (a..b)
                .flat_map(|t| (0..d).map(move |i| (t, i)))
                .filter(|&(t, i)| {
                    series.is_observed(t, i) && model.transform.is_degenerate(i, series.phase(t))
                })
                .map(|(t, i)| (t - lo) * d + i)
                .collect();
            if !degenerate.is_empty() {
                let cond = window.condition(&known)?;
                for k in degenerate {
                    let r = cond.position(k)?;
                    scored.push((k, None, cond.mean[r], cond.variances[r]));
                }
                scored.sort_by_key(|s| s.0);
            }
            let mut rows = Vec::new();
            for (k, x, m, var) in scored {
                let (t, i) = (lo + k / d, k % d);
                if t < a || t >= b {
                    continue;
                }
                let s = var.sqrt();
                let map = model.transform.map(i, series.phase(t));
                let run = match x {
                    Some(x) => map.run_containing(x),
                    None => map.merged_runs().first(),
                };
                let q = match (run, x) {
                    (Some(run), _) => {
                        0.5 * (normal_cdf((run.lo - m) / s) + normal_cdf((run.hi - m) / s))
                    }
                    (None, Some(x)) => normal_cdf((x - m) / s),
                    (None, None) => unreachable!("degenerate maps have a merged run"),
                };
                let q = q.clamp(Q_MIN, 1.0 - Q_MIN);
                rows.push(AnomalyRow {
                    t,
                    system: i,
                    y: series.get(t, i).expect("scored entries are observed"),
                    q,
                    flag: q < epsilon || q > 1.0 - epsilon,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    Ok(AnomalyReport { epsilon, rows })
}

/// Log-density of a fully observed series under the model, treating its
/// first `M` rows as the window boundary.
pub fn log_density_y(model: &CopulaModel, series: &FleetSeries) -> Result<f64> {
    model.check_series(series)?;
    if series.observed_count() != series.len() * series.dim() {
        return Err(Error::Validation("density needs a fully observed series".into()));
    }
    let x = model.transform.transform_series(series)?;
    let log_x = log_density_recursive(&model.ar, &model.residual, series.start_phase(), x.values())?;
    let d = model.dim();
    let mut log_jac = 0.0;
    for t in 0..series.len() {
        for i in 0..d {
            log_jac += model
                .transform
                .log_jacobian(series.row(t)[i], i, series.phase(t));
        }
    }
    Ok(log_x + log_jac)
}

/// Dense-window log-density of a fully observed series; same value as
/// [`log_density_y`], for short series.
pub fn log_density_y_dense(model: &CopulaModel, series: &FleetSeries) -> Result<f64> {
    model.check_series(series)?;
    let x = model.transform.transform_series(series)?;
    let window = model.window(series, 0, series.len())?;
    let d = model.dim();
    let log_jac: f64 = (0..series.len())
        .flat_map(|t| (0..d).map(move |i| (t, i)))
        .map(|(t, i)| model.transform.log_jacobian(series.row(t)[i], i, series.phase(t)))
        .sum();
    Ok(window.log_density(x.values())? + log_jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{solar_like, SolarConfig};

    fn small(night_floor: f64) -> CopulaModel {
        solar_like(&SolarConfig {
            period: 16,
            harmonics: 7,
            night_floor,
            ..SolarConfig::default()
        })
        .unwrap()
    }

    fn sample(model: &CopulaModel, len: usize, seed: u64) -> FleetSeries {
        simulate(model, 0, len, 1, seed).unwrap().remove(0)
    }

    #[test]
    fn simulation_is_seeded() {
        let m = small(0.0);
        assert_eq!(simulate(&m, 3, 40, 2, 9).unwrap(), simulate(&m, 3, 40, 2, 9).unwrap());
        assert_ne!(sample(&m, 40, 9), sample(&m, 40, 10));
        let s = sample(&m, 64, 1);
        for t in 0..64 {
            for i in 0..3 {
                let y = s.get(t, i).unwrap();
                if m.transform().is_degenerate(i, s.phase(t)) {
                    assert_eq!(y, 0.0);
                }
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let m = small(0.2);
        let y = sample(&m, 80, 2);
        let enc = encode(&m, &y).unwrap();
        let x0 = &enc.x.values()[..2 * 3];
        let back = decode(&m, &enc.z, x0).unwrap();
        for (a, b) in y.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn imputation_covers_missing_entries_only() {
        let m = small(0.0);
        let y = sample(&m, 70, 3);
        let hidden: Vec<(usize, usize)> = (20..30).map(|t| (t, t % 3)).collect();
        let band = impute(&m, &y.masked(hidden.iter().copied()), &DEFAULT_BAND).unwrap();
        assert_eq!(band.rows.len(), hidden.len());
        for &(t, i) in &hidden {
            let r = band.get(t, i).unwrap();
            assert!(r.values.windows(2).all(|w| w[0] <= w[1]));
            if m.transform().is_degenerate(i, y.phase(t)) {
                assert_eq!(r.values, vec![0.0; 3]);
            }
        }
        assert!(impute(&m, &y, &[0.9, 0.1]).is_err());
    }

    #[test]
    fn anomaly_scores_are_bounded_and_flag_outliers() {
        let m = small(0.0);
        let y = sample(&m, 64, 4);
        for eps in [0.0, 0.5, f64::NAN, -0.1] {
            assert!(matches!(detect_anomalies(&m, &y, eps), Err(Error::Domain(_))));
        }
        let report = detect_anomalies(&m, &y, 0.01).unwrap();
        assert_eq!(report.rows.len(), 64 * 3);
        assert!(report.rows.iter().all(|r| (Q_MIN..=1.0 - Q_MIN).contains(&r.q)));
        // a midday reading far above the top knot
        let t = 8 + 16;
        let mut values = y.values().to_vec();
        values[t * 3 + 1] = 50.0;
        let spiked = y.with_contents(values, y.mask().to_vec()).unwrap();
        let report = detect_anomalies(&m, &spiked, 0.01).unwrap();
        let row = report.rows.iter().find(|r| r.t == t && r.system == 1).unwrap();
        assert!(row.flag && row.q == 1.0 - Q_MIN);
    }

    #[test]
    fn forecast_bands_collapse_at_night() {
        let m = small(0.0);
        let y = sample(&m, 48, 5);
        let band = forecast(&m, &y, 40, 16, &DEFAULT_BAND).unwrap();
        assert_eq!(band.rows.len(), 16 * 3);
        for r in &band.rows {
            assert!(r.values.windows(2).all(|w| w[0] <= w[1]));
            if m.transform().is_degenerate(r.system, (r.t) % 16) {
                assert_eq!(r.values, vec![0.0; 3]);
            } else {
                assert!(r.values[2] > r.values[0]);
            }
        }
        assert!(forecast(&m, &y, 40, 0, &DEFAULT_BAND).is_err());
        assert!(forecast(&m, &y, 49, 4, &DEFAULT_BAND).is_err());
    }

    #[test]
    fn forecast_samples_match_bands() {
        let m = small(0.2);
        let y = sample(&m, 48, 6);
        let band = forecast(&m, &y, 48, 2, &DEFAULT_BAND).unwrap();
        let paths = forecast_samples(&m, &y, 48, 2, 4000, 1).unwrap();
        for r in &band.rows {
            let mut v: Vec<f64> = paths.iter().map(|p| p.get(r.t - 48, r.system).unwrap()).collect();
            v.sort_by(f64::total_cmp);
            for (k, &p) in DEFAULT_BAND.iter().enumerate() {
                let empirical = v[(p * v.len() as f64) as usize];
                assert!((empirical - r.values[k]).abs() < 0.05, "{empirical} vs {}", r.values[k]);
            }
        }
        assert_eq!(paths[0].first_index(), 48);
    }

    #[test]
    fn density_routes_agree() {
        let m = small(0.2);
        let y = sample(&m, 40, 7);
        let a = log_density_y(&m, &y).unwrap();
        let b = log_density_y_dense(&m, &y).unwrap();
        assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        assert!(log_density_y(&m, &y.masked([(3, 1)])).is_err());
    }

    #[test]
    fn single_row_density_matches_finite_differences() {
        // a lone row is a boundary row, so x ~ N(0, I)
        let m = small(0.2);
        let y = sample(&m, 1, 8);
        let phase = y.phase(0);
        let mut oracle = 0.0;
        for i in 0..3 {
            let v = y.get(0, i).unwrap();
            let x = m.transform().forward(v, i, phase);
            let h = 1e-6;
            let slope = (m.transform().forward(v + h, i, phase) - m.transform().forward(v - h, i, phase)) / (2.0 * h);
            oracle += -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() + slope.ln();
        }
        let got = log_density_y(&m, &y).unwrap();
        assert!((got - oracle).abs() < 1e-5, "{got} vs {oracle}");
    }
}
