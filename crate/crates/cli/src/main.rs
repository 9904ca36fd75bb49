//! `pcopula`: fit smooth periodic copula models and query them.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data or model
//! errors. Output files are written to a temporary file and renamed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use periodic_copula::applications::{
    detect_anomalies, forecast, forecast_samples, impute, log_density_y, simulate, CopulaModel,
    QuantileBand, DEFAULT_BAND, DEFAULT_EPSILON,
};
use periodic_copula::error::Error;
use periodic_copula::fleet_data::{load_csv, FleetSeries, LoadConfig};
use periodic_copula::pipeline::{
    fit_pipeline, load_model, save_model, write_atomic, FitConfig, ModelFile, Provenance,
};
use periodic_copula::quantile_model::QuantileLevels;

#[derive(Parser)]
#[command(name = "pcopula", version)]
#[command(about = "Smooth periodic Gaussian copula models for multivariate periodic series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model with cross-validated smoothing weights
    Fit(FitArgs),
    /// Draw synthetic series from a model
    Simulate(SimulateArgs),
    /// Conditional quantile bands for the missing entries of a series
    Impute(ImputeArgs),
    /// Leave-one-out conditional quantile of every observed entry
    Anomalies(AnomalyArgs),
    /// Quantile bands or sample paths after a forecast origin
    Forecast(ForecastArgs),
    /// Log-density of a fully observed series
    Density(DensityArgs),
    /// Summarize a model file, or document the output CSV columns
    Inspect(InspectArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV: `timestamp,<system>,...`
    #[arg(long)]
    input: PathBuf,
    /// Model file to write
    #[arg(long)]
    output: PathBuf,
    /// JSON file overriding the default fit configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Samples per period; inferred from timestamps when omitted
    #[arg(long)]
    period: Option<usize>,
    /// Fourier harmonics of every smooth parameter
    #[arg(long)]
    harmonics: Option<usize>,
    /// AR memory
    #[arg(long)]
    memory: Option<usize>,
    /// Quantile levels, comma separated
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Seed of the cross-validation holdout
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Length in periods
    #[arg(long, default_value_t = 1)]
    days: usize,
    /// Number of independent series
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Phase of the first row
    #[arg(long, default_value_t = 0)]
    start_phase: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV to write; standard output when omitted
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SeriesArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with the model's systems as columns
    #[arg(long)]
    input: PathBuf,
    /// CSV to write; standard output when omitted
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    series: SeriesArgs,
    /// Band probabilities, comma separated
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
}

#[derive(Args)]
struct AnomalyArgs {
    #[command(flatten)]
    series: SeriesArgs,
    /// Entries with conditional quantile below this or above its complement are flagged
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    series: SeriesArgs,
    /// First forecast row; defaults to the row after the input
    #[arg(long)]
    from: Option<usize>,
    /// Rows to forecast; defaults to one period
    #[arg(long)]
    horizon: Option<usize>,
    /// Band probabilities, comma separated
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Write this many joint sample paths instead of bands
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    series: SeriesArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, required_unless_present = "schema")]
    model: Option<PathBuf>,
    /// Print the column layout of every CSV output
    #[arg(long)]
    schema: bool,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

const SCHEMA: &str = "\
simulate: sample,t,system,value
  sample  index of the simulated series, from 0
  t       row index, from 0
  system  system name
  value   simulated reading
impute: t,timestamp,system,q_<p>...
  t          row index in the input
  timestamp  row label from the input
  system     system name
  q_<p>      conditional quantile at probability p, one column per --levels value
anomalies: t,timestamp,system,y,q,flag
  y     observed reading
  q     conditional CDF value of y given the other entries, clipped to [1e-4, 1 - 1e-4]
  flag  true when q < epsilon or q > 1 - epsilon
forecast: t,timestamp,system,q_<p>...
  t          row index counted from the first input row
  timestamp  row label when t is inside the input, empty after it
forecast --n: sample,t,system,value
  one row per sample path, horizon row and system
";

fn sha256_hex(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn emit(output: Option<&Path>, bytes: Vec<u8>) -> Outcome {
    match output {
        Some(path) => write_atomic(path, &bytes)?,
        None => std::io::stdout().write_all(&bytes).map_err(Error::from)?,
    }
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Validation(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Validation(e.to_string()))
}

/// Loads `input` on the model's grid and checks its systems.
fn load_series(model: &CopulaModel, input: &Path) -> Result<FleetSeries, Error> {
    let series = load_csv(
        input,
        &LoadConfig {
            period: Some(model.period()),
            ..LoadConfig::default()
        },
    )?;
    if series.system_names() != model.system_names() {
        return Err(Error::Validation(format!(
            "input systems {:?} differ from the model's {:?}",
            series.system_names(),
            model.system_names()
        )));
    }
    Ok(series)
}

fn band_probabilities(levels: Option<Vec<f64>>) -> Result<Vec<f64>, Failure> {
    let p = levels.unwrap_or_else(|| DEFAULT_BAND.to_vec());
    if p.is_empty() || p.iter().any(|&v| !(v > 0.0 && v < 1.0)) || p.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Usage(
            "--levels must be increasing probabilities in (0, 1)".into(),
        ));
    }
    Ok(p)
}

fn band_csv(model: &CopulaModel, series: &FleetSeries, band: &QuantileBand) -> Result<Vec<u8>, Error> {
    let mut header: Vec<String> = ["t", "timestamp", "system"].map(String::from).to_vec();
    header.extend(band.probabilities.iter().map(|p| format!("q_{p}")));
    csv_bytes(
        &header,
        band.rows.iter().map(|r| {
            let label = if r.t < series.len() { series.row_label(r.t) } else { String::new() };
            let mut rec = vec![r.t.to_string(), label, model.system_names()[r.system].clone()];
            rec.extend(r.values.iter().map(f64::to_string));
            rec
        }),
    )
}

fn run_fit(a: FitArgs) -> Outcome {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<FitConfig>(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => FitConfig::default(),
    };
    if a.period.is_some() {
        config.period = a.period;
    }
    if let Some(k) = a.harmonics {
        config.harmonics = k;
    }
    if let Some(m) = a.memory {
        config.memory = m;
    }
    if let Some(levels) = a.levels {
        config.levels = QuantileLevels::new(levels).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = a.seed {
        config.cv_seed = s;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let series = load_csv(
        &a.input,
        &LoadConfig {
            period: config.period,
            ..LoadConfig::default()
        },
    )?;
    let model = fit_pipeline(&series, &config)?;
    let provenance = Provenance::from_series(&series, Some(sha256_hex(&a.input)?));
    let file = ModelFile::new(model, config, provenance);
    save_model(&file, &a.output)?;

    let m = &file.model;
    let h = m.hyperparameters();
    let diag = m.diagnostics();
    println!("wrote {}", a.output.display());
    println!(
        "rows {}, systems {}, period {}, harmonics {}, memory {}",
        series.len(),
        m.dim(),
        h.period,
        h.harmonics,
        h.memory
    );
    println!("observed fraction {:.4}", diag.observed_fraction);
    for (name, (lambda, degenerate)) in m
        .system_names()
        .iter()
        .zip(h.lambda_quantile.iter().zip(&diag.degenerate_phases))
    {
        println!("  {name}: lambda_quantile {lambda:e}, degenerate phases {degenerate}");
    }
    println!(
        "lambda_ridge {:e}, lambda_residual {:e}, AR companion radius {:.4}, min diag(L) {:.4}",
        h.lambda_ridge, h.lambda_residual, diag.ar_companion_radius, diag.min_cholesky_diagonal
    );
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Outcome {
    let file = load_model(&a.model)?;
    let m = &file.model;
    if a.days == 0 || a.n == 0 {
        return Err(Failure::Usage("--days and --n must be positive".into()));
    }
    let sims = simulate(m, a.start_phase % m.period(), a.days * m.period(), a.n, a.seed)?;
    let header = ["sample", "t", "system", "value"].map(String::from);
    let rows = sims.iter().enumerate().flat_map(|(k, s)| {
        (0..s.len()).flat_map(move |t| {
            (0..s.dim()).map(move |i| {
                vec![
                    k.to_string(),
                    t.to_string(),
                    m.system_names()[i].clone(),
                    s.row(t)[i].to_string(),
                ]
            })
        })
    });
    emit(a.output.as_deref(), csv_bytes(&header, rows)?)
}

fn run_impute(a: ImputeArgs) -> Outcome {
    let probs = band_probabilities(a.levels)?;
    let file = load_model(&a.series.model)?;
    let series = load_series(&file.model, &a.series.input)?;
    let band = impute(&file.model, &series, &probs)?;
    emit(a.series.output.as_deref(), band_csv(&file.model, &series, &band)?)
}

fn run_anomalies(a: AnomalyArgs) -> Outcome {
    if !(a.epsilon > 0.0 && a.epsilon < 0.5) {
        return Err(Failure::Usage(format!("--epsilon must lie in (0, 0.5), got {}", a.epsilon)));
    }
    let file = load_model(&a.series.model)?;
    let m = &file.model;
    let series = load_series(m, &a.series.input)?;
    let report = detect_anomalies(m, &series, a.epsilon)?;
    let header = ["t", "timestamp", "system", "y", "q", "flag"].map(String::from);
    let rows = report.rows.iter().map(|r| {
        vec![
            r.t.to_string(),
            series.row_label(r.t),
            m.system_names()[r.system].clone(),
            r.y.to_string(),
            r.q.to_string(),
            r.flag.to_string(),
        ]
    });
    let bytes = csv_bytes(&header, rows)?;
    eprintln!(
        "{} of {} entries flagged at epsilon {}",
        report.flagged().count(),
        report.rows.len(),
        a.epsilon
    );
    emit(a.series.output.as_deref(), bytes)
}

fn run_forecast(a: ForecastArgs) -> Outcome {
    let probs = band_probabilities(a.levels)?;
    let file = load_model(&a.series.model)?;
    let m = &file.model;
    let series = load_series(m, &a.series.input)?;
    let from = a.from.unwrap_or(series.len());
    let horizon = a.horizon.unwrap_or(m.period());
    if from > series.len() || horizon == 0 {
        return Err(Failure::Usage(format!(
            "--from must be at most {} and --horizon positive",
            series.len()
        )));
    }
    let bytes = match a.n {
        Some(0) => return Err(Failure::Usage("--n must be positive".into())),
        Some(n) => {
            let paths = forecast_samples(m, &series, from, horizon, n, a.seed)?;
            let header = ["sample", "t", "system", "value"].map(String::from);
            let rows = paths.iter().enumerate().flat_map(|(k, p)| {
                (0..p.len()).flat_map(move |s| {
                    (0..p.dim()).map(move |i| {
                        vec![
                            k.to_string(),
                            (from + s).to_string(),
                            m.system_names()[i].clone(),
                            p.row(s)[i].to_string(),
                        ]
                    })
                })
            });
            csv_bytes(&header, rows)?
        }
        None => band_csv(m, &series, &forecast(m, &series, from, horizon, &probs)?)?,
    };
    emit(a.series.output.as_deref(), bytes)
}

fn run_density(a: DensityArgs) -> Outcome {
    let file = load_model(&a.series.model)?;
    let series = load_series(&file.model, &a.series.input)?;
    let value = log_density_y(&file.model, &series)?;
    let doc = serde_json::json!({
        "log_density": value,
        "rows": series.len(),
        "systems": series.dim(),
        "per_entry": value / (series.len() * series.dim()) as f64,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    text.push('\n');
    emit(a.series.output.as_deref(), text.into_bytes())
}

fn run_inspect(a: InspectArgs) -> Outcome {
    if a.schema {
        print!("{SCHEMA}");
        return Ok(());
    }
    let path = a.model.expect("clap requires --model without --schema");
    let file = load_model(&path)?;
    let m = &file.model;
    let doc = serde_json::json!({
        "format_version": file.format_version,
        "systems": m.system_names(),
        "levels": m.levels(),
        "hyperparameters": m.hyperparameters(),
        "provenance": file.provenance,
        "diagnostics": m.diagnostics(),
    });
    let text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Impute(a) => run_impute(a),
        Command::Anomalies(a) => run_anomalies(a),
        Command::Forecast(a) => run_forecast(a),
        Command::Density(a) => run_density(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
