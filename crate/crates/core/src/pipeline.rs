//! Fitting pipeline with hold-out cross-validation, and model files.
//!
//! Stages run in a fixed order: per-system quantile fits, marginal maps,
//! AR fit on the latent series, residual Gaussian fit on the AR residuals.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::applications::CopulaModel;
use crate::ar_model::{companion_radius, fit_ar, residuals, usable_rows};
use crate::error::{Error, Result};
use crate::fleet_data::{FleetSeries, GaussianizedSeries};
use crate::marginal_transform::{MarginalTransform, MIN_SLOPE, TIE_TOLERANCE};
use crate::periodic::SolverSettings;
use crate::quantile_model::{fit_quantiles, pinball, QuantileLevels, QuantileSurface};
use crate::residual_model::fit_residual_gaussian;

/// Current model file format.
pub const FORMAT_VERSION: u32 = 1;

/// Stage labels attached to pipeline errors.
pub const STAGE_QUANTILES: &str = "quantile fit";
pub const STAGE_TRANSFORM: &str = "marginal transform";
pub const STAGE_AR: &str = "AR fit";
pub const STAGE_RESIDUAL: &str = "residual fit";

fn decades(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 10f64.powi(e)).collect()
}

/// Hyperparameters and search space of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Samples per period; must match the training series when set.
    pub period: Option<usize>,
    pub harmonics: usize,
    pub memory: usize,
    pub levels: QuantileLevels,
    pub lambda_quantile: Vec<f64>,
    pub lambda_ridge: Vec<f64>,
    pub lambda_residual: Vec<f64>,
    /// Fraction of observed entries (or rows) held out for scoring.
    pub holdout_fraction: f64,
    pub cv_seed: u64,
    /// A grid value is preferred over the best-scoring one when its mean
    /// paired loss excess is within this many standard errors.
    pub cv_tie_standard_errors: f64,
    pub solver: SolverSettings,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            period: None,
            harmonics: 10,
            memory: 3,
            levels: QuantileLevels::default(),
            lambda_quantile: decades(-2, 4),
            lambda_ridge: decades(-6, 2),
            lambda_residual: decades(-2, 4),
            holdout_fraction: 0.2,
            cv_seed: 0,
            cv_tie_standard_errors: 1.0,
            solver: SolverSettings::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, grid) in [
            ("lambda_quantile", &self.lambda_quantile),
            ("lambda_ridge", &self.lambda_ridge),
            ("lambda_residual", &self.lambda_residual),
        ] {
            if grid.is_empty() {
                return Err(Error::Config(format!("{name} grid is empty")));
            }
            if grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return Err(Error::Config(format!("{name} values must be finite and > 0")));
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "holdout fraction must lie in (0, 0.5], got {}",
                self.holdout_fraction
            )));
        }
        if !(self.cv_tie_standard_errors >= 0.0 && self.cv_tie_standard_errors.is_finite()) {
            return Err(Error::Config("cv_tie_standard_errors must be finite and >= 0".into()));
        }
        if self.period == Some(0) {
            return Err(Error::Config("period must be positive".into()));
        }
        Ok(())
    }
}

/// Hyperparameters used by a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub period: usize,
    pub harmonics: usize,
    pub memory: usize,
    /// One value per system.
    pub lambda_quantile: Vec<f64>,
    pub lambda_ridge: f64,
    pub lambda_residual: f64,
}

/// One grid point of a cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub lambda: f64,
    /// Mean held-out loss, `None` if the fit failed.
    pub score: Option<f64>,
    /// Standard error of the mean paired loss excess over the best grid value.
    pub excess_std_error: Option<f64>,
    pub failure: Option<String>,
}

/// Score table of one cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub stage: String,
    pub system: Option<usize>,
    pub held_out: usize,
    pub scores: Vec<CvScore>,
    pub chosen: f64,
}

/// Fit summaries stored with the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub training_rows: usize,
    pub observed_fraction: f64,
    /// Count of fully degenerate phases per system.
    pub degenerate_phases: Vec<usize>,
    pub ar_usable_rows: usize,
    pub ar_companion_radius: f64,
    pub residual_objective: f64,
    pub residual_iterations: usize,
    pub residual_gradient_norm: f64,
    pub min_cholesky_diagonal: f64,
    /// Largest per-phase `|mu|`; the residual mean is fitted, not fixed at 0.
    pub max_residual_mean_norm: f64,
    pub cross_validation: Vec<CvTable>,
}

/// Picks a grid value from per-unit held-out losses (one vector per grid
/// value, aligned across grid values). The winner is the largest `lambda`
/// whose mean paired excess over the best value is within `tie_se` standard
/// errors.
pub fn select_lambda(
    stage: &str,
    system: Option<usize>,
    grid: &[f64],
    losses: Vec<Result<Vec<f64>>>,
    tie_se: f64,
) -> Result<CvTable> {
    let mut held_out = 0;
    let mut valid: Vec<Option<(f64, Vec<f64>)>> = Vec::with_capacity(grid.len());
    let mut failures = Vec::new();
    for (&lambda, l) in grid.iter().zip(losses) {
        match l {
            Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => {
                held_out = v.len();
                valid.push(Some((v.iter().sum::<f64>() / v.len() as f64, v)));
            }
            Ok(v) if v.is_empty() => {
                failures.push((lambda, "no held-out entries to score".to_string()));
                valid.push(None);
            }
            Ok(_) => {
                failures.push((lambda, "non-finite held-out loss".to_string()));
                valid.push(None);
            }
            Err(e) => {
                failures.push((lambda, e.to_string()));
                valid.push(None);
            }
        }
    }
    let best = valid
        .iter()
        .enumerate()
        .filter_map(|(k, v)| v.as_ref().map(|(s, _)| (k, *s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .ok_or(Error::CrossValidation {
            failures: failures.clone(),
        })?;
    let best_losses = valid[best].as_ref().map(|(_, v)| v.clone()).unwrap_or_default();
    let mut scores = Vec::with_capacity(grid.len());
    let mut chosen = (grid[best], best);
    for (k, (&lambda, v)) in grid.iter().zip(&valid).enumerate() {
        let Some((score, l)) = v else {
            let failure = failures.iter().find(|f| f.0 == lambda).map(|f| f.1.clone());
            scores.push(CvScore {
                lambda,
                score: None,
                excess_std_error: None,
                failure,
            });
            continue;
        };
        let diffs: Vec<f64> = l.iter().zip(&best_losses).map(|(a, b)| a - b).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let se = (var / n).sqrt();
        if mean <= tie_se * se && lambda > chosen.0 {
            chosen = (lambda, k);
        }
        scores.push(CvScore {
            lambda,
            score: Some(*score),
            excess_std_error: Some(se),
            failure: None,
        });
    }
    Ok(CvTable {
        stage: stage.to_string(),
        system,
        held_out,
        scores,
        chosen: chosen.0,
    })
}

fn holdout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded random subset of `items` of size `round(fraction * len)`, at least one.
fn pick<T: Copy + Ord>(items: &[T], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.is_empty() {
        return Vec::new();
    }
    let k = ((fraction * items.len() as f64).round() as usize).clamp(1, items.len());
    let mut out: Vec<T> = sample(rng, items.len(), k).into_iter().map(|j| items[j]).collect();
    out.sort();
    out
}

/// Cross-validates and fits the quantile surface of one system.
pub fn cv_quantiles(
    series: &FleetSeries,
    system: usize,
    config: &FitConfig,
) -> Result<(QuantileSurface, CvTable)> {
    let grid = &config.lambda_quantile;
    let entries: Vec<usize> = (0..series.len()).filter(|&t| series.is_observed(t, system)).collect();
    let mut rng = holdout_rng(config.cv_seed, 1 + system as u64);
    let held: Vec<usize> = pick(&entries, config.holdout_fraction, &mut rng);
    let train = series.masked(held.iter().map(|&t| (t, system)));
    let eta = config.levels.as_slice();
    let losses: Vec<Result<Vec<f64>>> = grid
        .par_iter()
        .map(|&lambda| {
            let s = fit_quantiles(&train, system, &config.levels, lambda, config.harmonics, &config.solver)?;
            Ok(held
                .iter()
                .map(|&t| {
                    let y = series.get(t, system).expect("held-out entries are observed");
                    s.grid[series.phase(t)]
                        .iter()
                        .zip(eta)
                        .map(|(&q, &tau)| pinball(y - q, tau))
                        .sum()
                })
                .collect())
        })
        .collect();
    let table = select_lambda("quantile", Some(system), grid, losses, config.cv_tie_standard_errors)?;
    let surface = fit_quantiles(series, system, &config.levels, table.chosen, config.harmonics, &config.solver)?;
    Ok((surface, table))
}

/// Cross-validates the ridge weight on held-out rows and fits the AR model.
pub fn cv_ar(
    x: &GaussianizedSeries,
    config: &FitConfig,
) -> Result<(crate::ar_model::ArCoefficients, Option<CvTable>)> {
    let memory = config.memory;
    if memory == 0 {
        return Ok((fit_ar(x, 0, config.lambda_ridge[0])?, None));
    }
    let grid = &config.lambda_ridge;
    let d = x.dim();
    let rows = usable_rows(x, memory);
    let mut rng = holdout_rng(config.cv_seed, 0);
    let held = pick(&rows, config.holdout_fraction, &mut rng);
    let train = x.masked(held.iter().flat_map(|&t| (0..d).map(move |i| (t, i))));
    let losses: Vec<Result<Vec<f64>>> = grid
        .par_iter()
        .map(|&lambda| {
            let a = fit_ar(&train, memory, lambda)?;
            let v = residuals(x, &a)?;
            Ok(held
                .iter()
                .map(|&t| v.row(t).iter().map(|e| e * e).sum::<f64>() / d as f64)
                .collect())
        })
        .collect();
    let table = select_lambda("ridge", None, grid, losses, config.cv_tie_standard_errors)?;
    Ok((fit_ar(x, memory, table.chosen)?, Some(table)))
}

/// Cross-validates the residual smoothing weight on held-out rows and fits.
pub fn cv_residual(
    v: &GaussianizedSeries,
    config: &FitConfig,
) -> Result<(crate::residual_model::ResidualFit, CvTable)> {
    let grid = &config.lambda_residual;
    let d = v.dim();
    let rows: Vec<usize> = (0..v.len()).filter(|&t| v.row_complete(t)).collect();
    let mut rng = holdout_rng(config.cv_seed, u64::MAX);
    let held: BTreeSet<usize> = pick(&rows, config.holdout_fraction, &mut rng).into_iter().collect();
    let train = v.masked(held.iter().flat_map(|&t| (0..d).map(move |i| (t, i))));
    let losses: Vec<Result<Vec<f64>>> = grid
        .par_iter()
        .map(|&lambda| {
            let fit = fit_residual_gaussian(&train, lambda, config.harmonics, &config.solver)?;
            Ok(held
                .iter()
                .map(|&t| fit.model.phase(v.phase(t)).nll(v.row(t)) / d as f64)
                .collect())
        })
        .collect();
    let table = select_lambda("residual", None, grid, losses, config.cv_tie_standard_errors)?;
    let fit = fit_residual_gaussian(v, table.chosen, config.harmonics, &config.solver)?;
    Ok((fit, table))
}

/// Fits the full model on `train`.
pub fn fit_pipeline(train: &FleetSeries, config: &FitConfig) -> Result<CopulaModel> {
    config.validate()?;
    if train.is_empty() || train.observed_count() == 0 {
        return Err(Error::Validation("training series has no observations".into()));
    }
    if let Some(p) = config.period {
        if p != train.period() {
            return Err(Error::Config(format!(
                "configured period {p} differs from the series period {}",
                train.period()
            )));
        }
    }
    let d = train.dim();

    let fitted: Vec<Result<(QuantileSurface, CvTable)>> = (0..d)
        .into_par_iter()
        .map(|i| cv_quantiles(train, i, config))
        .collect();
    let mut surfaces = Vec::with_capacity(d);
    let mut tables = Vec::new();
    for f in fitted {
        let (s, t) = f.map_err(|e| e.in_stage(STAGE_QUANTILES))?;
        surfaces.push(s);
        tables.push(t);
    }
    let lambda_quantile = tables.iter().map(|t| t.chosen).collect();

    let transform =
        MarginalTransform::new(&surfaces, &config.levels).map_err(|e| e.in_stage(STAGE_TRANSFORM))?;
    let x = transform
        .informative_series(train)
        .map_err(|e| e.in_stage(STAGE_TRANSFORM))?;

    let (ar, ar_table) = cv_ar(&x, config).map_err(|e| e.in_stage(STAGE_AR))?;
    let lambda_ridge = ar_table.as_ref().map_or(config.lambda_ridge[0], |t| t.chosen);
    tables.extend(ar_table);
    let v = residuals(&x, &ar).map_err(|e| e.in_stage(STAGE_AR))?;

    let (res, res_table) = cv_residual(&v, config).map_err(|e| e.in_stage(STAGE_RESIDUAL))?;
    let lambda_residual = res_table.chosen;
    tables.push(res_table);

    let diagnostics = FitDiagnostics {
        training_rows: train.len(),
        observed_fraction: train.observed_count() as f64 / (train.len() * d) as f64,
        degenerate_phases: surfaces.iter().map(|s| s.degenerate_phases.len()).collect(),
        ar_usable_rows: usable_rows(&x, config.memory).len(),
        ar_companion_radius: companion_radius(&ar),
        residual_objective: res.objective,
        residual_iterations: res.iterations,
        residual_gradient_norm: res.gradient_norm,
        min_cholesky_diagonal: res.model.min_cholesky_diagonal(),
        max_residual_mean_norm: res.model.max_mean_norm(),
        cross_validation: tables,
    };
    let hyperparameters = Hyperparameters {
        period: train.period(),
        harmonics: config.harmonics,
        memory: config.memory,
        lambda_quantile,
        lambda_ridge,
        lambda_residual,
    };
    CopulaModel::new(
        train.system_names().to_vec(),
        config.levels.clone(),
        surfaces,
        ar,
        res.model,
        hyperparameters,
        diagnostics,
    )
}

/// Where the training data came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the input file, hex.
    pub input_sha256: Option<String>,
    pub first_timestamp: Option<String>,
    pub last_timestamp: Option<String>,
    pub rows: usize,
}

impl Provenance {
    pub fn from_series(series: &FleetSeries, input_sha256: Option<String>) -> Self {
        let n = series.len();
        Self {
            input_sha256,
            first_timestamp: (n > 0).then(|| series.row_label(0)),
            last_timestamp: (n > 0).then(|| series.row_label(n - 1)),
            rows: n,
        }
    }
}

/// Behaviour of the marginal maps outside what quantiles determine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConventions {
    pub tail_extrapolation: String,
    pub tied_knots: String,
    pub tie_tolerance_relative: f64,
    pub min_slope_relative: f64,
}

impl Default for TransformConventions {
    fn default() -> Self {
        Self {
            tail_extrapolation: "linear, slope of the adjacent unmerged segment, floored at min_slope_relative / scale"
                .into(),
            tied_knots: "knots closer than tie_tolerance_relative * scale merge; their input maps to the midpoint of the merged Gaussian outputs and the whole output interval maps back to it"
                .into(),
            tie_tolerance_relative: TIE_TOLERANCE,
            min_slope_relative: MIN_SLOPE,
        }
    }
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: FitConfig,
    pub provenance: Provenance,
    pub transform_conventions: TransformConventions,
    pub model: CopulaModel,
}

impl ModelFile {
    pub fn new(model: CopulaModel, config: FitConfig, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            provenance,
            transform_conventions: TransformConventions::default(),
            model,
        }
    }

    /// Canonical JSON text. Doubles are written in shortest round-trip form.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates a model document.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("format_version")
            .ok_or_else(|| Error::CorruptModel {
                invariant: "format_version present".into(),
                detail: "no format_version field".into(),
            })?;
        let found = version.as_u64().ok_or_else(|| Error::CorruptModel {
            invariant: "format_version present".into(),
            detail: format!("format_version is {version}"),
        })?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::UnsupportedVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                supported: FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| {
            let detail = e.to_string();
            Error::CorruptModel {
                invariant: violated_invariant(&detail).into(),
                detail,
            }
        })
    }
}

/// Names the model invariant a validation message refers to.
fn violated_invariant(detail: &str) -> &'static str {
    const KNOWN: [(&str, &str); 5] = [
        ("diag(L) > 0", "diag(L) > 0"),
        ("quantiles cross", "q_1 <= ... <= q_r"),
        ("non-finite", "finite coefficients"),
        ("levels", "strictly increasing levels in (0, 1)"),
        ("systems but", "consistent dimensions"),
    ];
    KNOWN
        .iter()
        .find(|(needle, _)| detail.contains(needle))
        .map_or("model structure", |(_, name)| name)
}

/// Writes `text` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: impl AsRef<Path>, text: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(text)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_model(file: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, file.to_json()?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    ModelFile::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::applications::simulate;
    use crate::synthetic::{solar_like, SolarConfig};
    use rand::Rng;

    fn one_system(values: Vec<f64>, period: usize) -> FleetSeries {
        let n = values.len();
        FleetSeries::from_parts(values, vec![true; n], 1, period, 0, vec!["a".into()]).unwrap()
    }

    fn small_model() -> CopulaModel {
        solar_like(&SolarConfig {
            period: 16,
            harmonics: 7,
            ..SolarConfig::default()
        })
        .unwrap()
    }

    fn model_file() -> ModelFile {
        ModelFile::new(small_model(), FitConfig::default(), Provenance::default())
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let bad = [
            FitConfig {
                lambda_ridge: vec![],
                ..FitConfig::default()
            },
            FitConfig {
                lambda_quantile: vec![1.0, -1.0],
                ..FitConfig::default()
            },
            FitConfig {
                holdout_fraction: 0.0,
                ..FitConfig::default()
            },
            FitConfig {
                holdout_fraction: 0.6,
                ..FitConfig::default()
            },
            FitConfig {
                period: Some(0),
                ..FitConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let parsed: std::result::Result<FitConfig, _> = serde_json::from_str(r#"{"memroy": 2}"#);
        assert!(parsed.is_err());
        let parsed: FitConfig = serde_json::from_str(r#"{"memory": 2}"#).unwrap();
        assert_eq!(parsed.memory, 2);
        assert_eq!(parsed.lambda_ridge.len(), 9);
    }

    #[test]
    fn selection_prefers_larger_lambda_on_ties() {
        let grid = [0.1, 1.0, 10.0];
        let same = vec![1.0, 2.0, 3.0, 4.0];
        let t = select_lambda("s", None, &grid, vec![Ok(same.clone()), Ok(same.clone()), Ok(same)], 1.0).unwrap();
        assert_eq!(t.chosen, 10.0);
        assert_eq!(t.scores.len(), 3);
        // a consistently worse large lambda loses
        let t = select_lambda(
            "s",
            None,
            &grid,
            vec![Ok(vec![1.0; 4]), Ok(vec![1.0; 4]), Ok(vec![1.5, 1.6, 1.5, 1.6])],
            1.0,
        )
        .unwrap();
        assert_eq!(t.chosen, 1.0);
    }

    #[test]
    fn selection_reports_failures() {
        let grid = [0.1, 1.0];
        let t = select_lambda(
            "s",
            Some(2),
            &grid,
            vec![Err(Error::Fit("boom".into())), Ok(vec![1.0, 2.0])],
            1.0,
        )
        .unwrap();
        assert_eq!(t.chosen, 1.0);
        assert!(t.scores[0].score.is_none());
        assert!(t.scores[0].failure.as_deref().unwrap().contains("boom"));
        let err = select_lambda(
            "s",
            None,
            &grid,
            vec![Err(Error::Fit("a".into())), Ok(vec![f64::NAN])],
            1.0,
        )
        .unwrap_err();
        match err {
            Error::CrossValidation { failures } => assert_eq!(failures.len(), 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn flat_process_picks_the_largest_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let series = one_system((0..24 * 40).map(|_| rng.random::<f64>()).collect(), 24);
        let config = FitConfig {
            harmonics: 4,
            ..FitConfig::default()
        };
        let (_, table) = cv_quantiles(&series, 0, &config).unwrap();
        assert_eq!(table.chosen, 1e4);
        assert!(table.scores.iter().all(|s| s.score.unwrap().is_finite()));
        assert_eq!(table.held_out, 192);
    }

    #[test]
    fn diurnal_process_picks_an_interior_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let series = one_system(
            (0..24 * 40)
                .map(|t| {
                    let u = (t % 24) as f64 / 24.0;
                    4.0 * (2.0 * std::f64::consts::PI * u).sin() + rng.random::<f64>()
                })
                .collect(),
            24,
        );
        let config = FitConfig {
            harmonics: 4,
            lambda_quantile: decades(-2, 4),
            ..FitConfig::default()
        };
        let (_, table) = cv_quantiles(&series, 0, &config).unwrap();
        assert!(table.chosen > 1e-2 && table.chosen < 1e4, "{}", table.chosen);
    }

    #[test]
    fn pipeline_errors_carry_stage_and_period_checks() {
        let series = one_system(vec![1.0; 8], 4);
        let config = FitConfig {
            period: Some(5),
            ..FitConfig::default()
        };
        assert!(matches!(fit_pipeline(&series, &config), Err(Error::Config(_))));
        let err = fit_pipeline(&series, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: STAGE_QUANTILES, .. }), "{err}");
    }

    #[test]
    fn small_fit_is_deterministic() {
        let truth = small_model();
        let y = simulate(&truth, 0, 16 * 30, 1, 3).unwrap().remove(0);
        let config = FitConfig {
            harmonics: 4,
            memory: 2,
            lambda_quantile: vec![1.0, 100.0],
            lambda_ridge: vec![1e-3, 1.0],
            lambda_residual: vec![1.0, 100.0],
            ..FitConfig::default()
        };
        let a = fit_pipeline(&y, &config).unwrap();
        let b = fit_pipeline(&y, &config).unwrap();
        let fa = ModelFile::new(a, config.clone(), Provenance::from_series(&y, None));
        let fb = ModelFile::new(b, config, Provenance::from_series(&y, None));
        assert_eq!(fa.to_json().unwrap(), fb.to_json().unwrap());
        let diag = fa.model.diagnostics();
        assert_eq!(diag.cross_validation.len(), 3 + 2);
        assert_eq!(diag.degenerate_phases.len(), 3);
        assert!(diag.degenerate_phases.iter().all(|&n| n > 0));
        assert!(diag.min_cholesky_diagonal > 0.0);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let file = model_file();
        save_model(&file, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, file);
        save_model(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let text = model_file().to_json().unwrap();
        assert!(matches!(
            ModelFile::from_json(&text[..text.len() / 2]),
            Err(Error::Json(_))
        ));

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["model"]["residual"]["alpha"][0][0] = serde_json::json!(-100.0);
        match ModelFile::from_json(&value.to_string()) {
            Err(Error::CorruptModel { invariant, .. }) => assert_eq!(invariant, "diag(L) > 0"),
            other => panic!("{other:?}"),
        }

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["format_version"] = serde_json::json!(2);
        assert!(matches!(
            ModelFile::from_json(&value.to_string()),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value.as_object_mut().unwrap().remove("format_version");
        assert!(matches!(ModelFile::from_json(&value.to_string()), Err(Error::CorruptModel { .. })));
    }

    #[test]
    fn invariant_names() {
        assert_eq!(violated_invariant("quantiles cross at phase 3"), "q_1 <= ... <= q_r");
        assert_eq!(violated_invariant("something else"), "model structure");
    }
}
