//! Multivariate periodic time series with missing values.
//!
//! A [`FleetSeries`] is a `T x d` matrix of readings (row-major, time-major)
//! with a boolean observation mask, a period `P` and the phase of the first
//! row. Indexing is 0-based: row `t` has phase `(start_phase + t) mod P`.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time series of `d` systems sampled on a regular grid with period `P`.
///
/// Immutable after construction. Values at unobserved positions are stored
/// as `0.0` and must never be read without consulting the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetSeries {
    values: Vec<f64>,
    mask: Vec<bool>,
    len: usize,
    dim: usize,
    period: usize,
    start_phase: usize,
    first_index: i64,
    timestamps: Option<Vec<String>>,
    system_names: Vec<String>,
}

/// Latent (marginally Gaussianized) series share the container type.
pub type GaussianizedSeries = FleetSeries;

impl FleetSeries {
    /// Builds a series from rows of optional readings.
    pub fn from_rows(
        rows: &[Vec<Option<f64>>],
        period: usize,
        start_phase: usize,
        system_names: Vec<String>,
    ) -> Result<Self> {
        let dim = system_names.len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        let mut mask = Vec::with_capacity(rows.len() * dim);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Validation(format!(
                    "row {t} has {} entries, expected {dim}",
                    row.len()
                )));
            }
            for v in row {
                match v {
                    Some(x) => {
                        values.push(*x);
                        mask.push(true);
                    }
                    None => {
                        values.push(0.0);
                        mask.push(false);
                    }
                }
            }
        }
        Self::from_parts(values, mask, dim, period, start_phase, system_names)
    }

    /// Builds a series from flat row-major buffers.
    pub fn from_parts(
        mut values: Vec<f64>,
        mask: Vec<bool>,
        dim: usize,
        period: usize,
        start_phase: usize,
        system_names: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("series needs at least one system".into()));
        }
        if period < 2 {
            return Err(Error::Validation(format!(
                "period must be >= 2, got {period}"
            )));
        }
        if values.len() != mask.len() || values.len() % dim != 0 {
            return Err(Error::Validation(format!(
                "buffer sizes inconsistent: {} values, {} mask entries, dimension {dim}",
                values.len(),
                mask.len()
            )));
        }
        let len = values.len() / dim;
        if len == 0 {
            return Err(Error::Validation(
                "series must have at least one row".into(),
            ));
        }
        if system_names.len() != dim {
            return Err(Error::Validation(format!(
                "{} system names for dimension {dim}",
                system_names.len()
            )));
        }
        for (k, (v, m)) in values.iter_mut().zip(&mask).enumerate() {
            if *m {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite observed value at row {}, system {}",
                        k / dim,
                        k % dim
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            values,
            mask,
            len,
            dim,
            period,
            start_phase: start_phase % period,
            first_index: 0,
            timestamps: None,
            system_names,
        })
    }

    /// Same shape, phase and labels with new contents.
    pub fn with_contents(&self, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let mut out = Self::from_parts(
            values,
            mask,
            self.dim,
            self.period,
            self.start_phase,
            self.system_names.clone(),
        )?;
        if out.len != self.len {
            return Err(Error::Validation(format!(
                "expected {} rows, got {}",
                self.len, out.len
            )));
        }
        out.first_index = self.first_index;
        out.timestamps = self.timestamps.clone();
        Ok(out)
    }

    /// Attaches row timestamps (one per row).
    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.len {
            return Err(Error::Validation(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                self.len
            )));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn with_first_index(mut self, first_index: i64) -> Self {
        self.first_index = first_index;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn start_phase(&self) -> usize {
        self.start_phase
    }

    pub fn first_index(&self) -> i64 {
        self.first_index
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn system_names(&self) -> &[String] {
        &self.system_names
    }

    /// Phase of row `t`; defined for every `t`, including rows past the end.
    pub fn phase(&self, t: usize) -> usize {
        (self.start_phase + t % self.period) % self.period
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        let k = t * self.dim + i;
        self.mask[k].then(|| self.values[k])
    }

    pub fn is_observed(&self, t: usize, i: usize) -> bool {
        self.mask[t * self.dim + i]
    }

    /// Row values; entries with a false mask are meaningless.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn mask_row(&self, t: usize) -> &[bool] {
        &self.mask[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_complete(&self, t: usize) -> bool {
        self.mask_row(t).iter().all(|&m| m)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Label of row `t` as written to CSV.
    pub fn row_label(&self, t: usize) -> String {
        match &self.timestamps {
            Some(ts) => ts[t].clone(),
            None => (self.first_index + t as i64).to_string(),
        }
    }

    /// Copy of the rows in `range`, with phase alignment preserved.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len {
            return Err(Error::Validation(format!(
                "row range {range:?} is empty or outside [0, {})",
                self.len
            )));
        }
        let lo = range.start * self.dim;
        let hi = range.end * self.dim;
        Ok(Self {
            values: self.values[lo..hi].to_vec(),
            mask: self.mask[lo..hi].to_vec(),
            len: range.end - range.start,
            dim: self.dim,
            period: self.period,
            start_phase: self.phase(range.start),
            first_index: self.first_index + range.start as i64,
            timestamps: self
                .timestamps
                .as_ref()
                .map(|ts| ts[range.clone()].to_vec()),
            system_names: self.system_names.clone(),
        })
    }

    /// Copy with the given entries additionally marked missing.
    pub fn masked(&self, hide: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut out = self.clone();
        for (t, i) in hide {
            let k = t * self.dim + i;
            out.mask[k] = false;
            out.values[k] = 0.0;
        }
        out
    }
}

/// Train/test row ranges, each half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_range: Range<usize>,
    pub test_range: Range<usize>,
}

pub fn split(series: &FleetSeries, spec: &SplitSpec) -> Result<(FleetSeries, FleetSeries)> {
    let (train, test) = (&spec.train_range, &spec.test_range);
    if train.start >= train.end {
        return Err(Error::Validation("training range is empty".into()));
    }
    if test.start >= test.end {
        return Err(Error::Validation("test range is empty".into()));
    }
    if train.end > series.len() || test.end > series.len() {
        return Err(Error::Validation(format!(
            "split ranges exceed series length {}",
            series.len()
        )));
    }
    if train.start < test.end && test.start < train.end {
        return Err(Error::Validation("training and test ranges overlap".into()));
    }
    Ok((series.slice(train.clone())?, series.slice(test.clone())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStats {
    /// Observed fraction per system.
    pub per_system: Vec<f64>,
    /// Observed fraction per phase, over all systems; 0 for phases with no rows.
    pub per_phase: Vec<f64>,
}

pub fn coverage_stats(series: &FleetSeries) -> CoverageStats {
    let (d, p) = (series.dim(), series.period());
    let mut sys_obs = vec![0usize; d];
    let mut phase_obs = vec![0usize; p];
    let mut phase_rows = vec![0usize; p];
    for t in 0..series.len() {
        let ph = series.phase(t);
        phase_rows[ph] += 1;
        for (i, &m) in series.mask_row(t).iter().enumerate() {
            if m {
                sys_obs[i] += 1;
                phase_obs[ph] += 1;
            }
        }
    }
    let per_system = sys_obs
        .iter()
        .map(|&n| n as f64 / series.len() as f64)
        .collect();
    let per_phase = phase_obs
        .iter()
        .zip(&phase_rows)
        .map(|(&n, &rows)| {
            if rows == 0 {
                0.0
            } else {
                n as f64 / (rows * d) as f64
            }
        })
        .collect();
    CoverageStats {
        per_system,
        per_phase,
    }
}

/// How to interpret a CSV file.
#[derive(Debug, Clone)]
pub struct LoadConfig {
    /// Samples per period; inferred from timestamps when `None`.
    pub period: Option<usize>,
    /// Length of one period when inferring `P` from timestamps.
    pub period_seconds: i64,
    /// Overrides the phase of the first row.
    pub start_phase: Option<usize>,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            period: None,
            period_seconds: 24 * 3600,
            start_phase: None,
        }
    }
}

enum RowKey {
    Index(i64),
    Time(NaiveDateTime),
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local());
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn load_csv(path: impl AsRef<Path>, config: &LoadConfig) -> Result<FleetSeries> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, config)
}

/// Parses CSV text with header `timestamp,<name1>,...,<named>`.
///
/// Missing cells are empty or `NaN`. Absent grid points between rows are
/// inserted as all-missing rows.
pub fn read_csv(reader: impl Read, config: &LoadConfig) -> Result<FleetSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            column: None,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Validation(
            "header needs a time column and at least one system column".into(),
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let d = names.len();

    let mut keys = Vec::new();
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut index_mode: Option<bool> = None;
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            column: None,
            message: e.to_string(),
        })?;
        if rec.len() != d + 1 {
            return Err(Error::Validation(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                d + 1
            )));
        }
        let key_text = &rec[0];
        let is_index = *index_mode.get_or_insert_with(|| key_text.parse::<i64>().is_ok());
        let key = if is_index {
            key_text.parse::<i64>().map(RowKey::Index).ok()
        } else {
            parse_timestamp(key_text).map(RowKey::Time)
        }
        .ok_or_else(|| Error::Parse {
            line,
            column: Some(headers[0].to_string()),
            message: format!("cannot parse row key '{key_text}'"),
        })?;
        keys.push(key);
        labels.push(key_text.to_string());
        let mut row = Vec::with_capacity(d);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                row.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                column: Some(names[j].clone()),
                message: format!("non-numeric value '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    column: Some(names[j].clone()),
                    message: format!("non-finite value '{cell}'"),
                });
            }
            row.push(Some(v));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation("no data rows".into()));
    }

    // Positions on the sampling grid, in units of the sampling interval.
    let raw: Vec<i64> = keys
        .iter()
        .map(|k| match k {
            RowKey::Index(i) => *i,
            RowKey::Time(t) => t.and_utc().timestamp(),
        })
        .collect();
    let mut interval = i64::MAX;
    for (k, w) in raw.windows(2).enumerate() {
        let step = w[1] - w[0];
        if step <= 0 {
            return Err(Error::Validation(format!(
                "row keys not strictly increasing at line {}",
                k + 3
            )));
        }
        interval = interval.min(step);
    }
    if raw.len() == 1 {
        interval = 1;
    }
    for (k, w) in raw.windows(2).enumerate() {
        if (w[1] - w[0]) % interval != 0 {
            return Err(Error::Validation(format!(
                "irregular sampling at line {}: step {} is not a multiple of {interval}",
                k + 3,
                w[1] - w[0]
            )));
        }
    }

    let is_time = matches!(keys[0], RowKey::Time(_));
    let period = match config.period {
        Some(p) => p,
        None if is_time && raw.len() > 1 => {
            if config.period_seconds % interval != 0 {
                return Err(Error::Validation(format!(
                    "period of {}s is not a multiple of the {interval}s sampling interval",
                    config.period_seconds
                )));
            }
            (config.period_seconds / interval) as usize
        }
        None => {
            return Err(Error::Config(
                "period cannot be inferred; pass it explicitly".into(),
            ))
        }
    };
    if period < 2 {
        return Err(Error::Validation(format!(
            "period must be >= 2, got {period}"
        )));
    }
    let start_phase = config.start_phase.unwrap_or_else(|| match &keys[0] {
        RowKey::Index(i) => i.rem_euclid(period as i64) as usize,
        RowKey::Time(t) if raw.len() > 1 => {
            let secs = t.num_seconds_from_midnight() as i64;
            ((secs / interval) % period as i64) as usize
        }
        RowKey::Time(_) => 0,
    });

    // Fill gaps with all-missing rows.
    let total = ((raw[raw.len() - 1] - raw[0]) / interval) as usize + 1;
    let mut full_rows = Vec::with_capacity(total);
    let mut full_labels = Vec::with_capacity(total);
    let mut next = 0usize;
    for g in 0..total {
        let pos = raw[0] + g as i64 * interval;
        if next < raw.len() && raw[next] == pos {
            full_rows.push(std::mem::take(&mut rows[next]));
            full_labels.push(std::mem::take(&mut labels[next]));
            next += 1;
        } else {
            full_rows.push(vec![None; d]);
            full_labels.push(match &keys[0] {
                RowKey::Index(_) => pos.to_string(),
                RowKey::Time(_) => DateTime::from_timestamp(pos, 0)
                    .map(|t| t.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string())
                    .unwrap_or_default(),
            });
        }
    }

    let series = FleetSeries::from_rows(&full_rows, period, start_phase, names)?;
    Ok(match keys[0] {
        RowKey::Index(i) => series.with_first_index(i),
        RowKey::Time(_) => series.with_timestamps(full_labels)?,
    })
}

/// Writes the series in the format accepted by [`read_csv`].
///
/// Values use the shortest decimal representation that parses back to the
/// same `f64`.
pub fn write_csv_to(series: &FleetSeries, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.system_names().iter().cloned());
    w.write_record(&header).map_err(io)?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(series.dim() + 1);
        rec.push(series.row_label(t));
        for i in 0..series.dim() {
            rec.push(series.get(t, i).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(series: &FleetSeries, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(series, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, period: Option<usize>) -> Result<FleetSeries> {
        read_csv(
            text.as_bytes(),
            &LoadConfig {
                period,
                ..Default::default()
            },
        )
    }

    #[test]
    fn one_empty_cell_gives_one_missing_entry() {
        let s = load("t,a,b\n0,1.0,2.0\n1,,3.5\n2,0.5,NaN\n", Some(4)).unwrap();
        assert_eq!((s.len(), s.dim()), (3, 2));
        assert_eq!(s.mask().iter().filter(|m| !**m).count(), 2);
        let s = load("t,a,b\n0,1.0,2.0\n1,,3.5\n2,0.5,1\n", Some(4)).unwrap();
        assert_eq!(s.mask().iter().filter(|m| !**m).count(), 1);
        assert_eq!(s.get(1, 0), None);
        assert_eq!(s.get(1, 1), Some(3.5));
    }

    #[test]
    fn alphabetic_cell_names_row_and_column() {
        let err = load("t,a,b\n0,1.0,2.0\n1,x1,3.5\n", Some(4)).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column.as_deref(), Some("a"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_columns_and_order_are_rejected() {
        assert!(matches!(
            load("t,a,b\n0,1.0\n", Some(4)),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            load("t,a\n1,1.0\n0,2.0\n", Some(4)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn timestamps_infer_period_and_phase() {
        let text = "timestamp,a\n\
            2017-04-01T00:30:00,1\n\
            2017-04-01T00:45:00,2\n\
            2017-04-01T01:15:00,3\n";
        let s = load(text, None).unwrap();
        assert_eq!(s.period(), 96);
        assert_eq!(s.start_phase(), 2);
        // The absent 01:00 slot becomes an all-missing row.
        assert_eq!(s.len(), 4);
        assert_eq!(s.get(2, 0), None);
        assert_eq!(s.get(3, 0), Some(3.0));
        assert_eq!(s.timestamps().unwrap()[2], "2017-04-01T01:00:00");
    }

    #[test]
    fn index_mode_requires_period() {
        assert!(matches!(
            load("t,a\n0,1\n1,2\n", None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip_preserves_content() {
        let text = "timestamp,a,b\n5,0.1,-2.25\n6,,1e-7\n7,3,\n";
        let s = load(text, Some(3)).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&s, &mut buf).unwrap();
        let back = load(std::str::from_utf8(&buf).unwrap(), Some(3)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.start_phase(), 5 % 3);
    }

    #[test]
    fn split_preserves_phase_alignment() {
        let rows: Vec<Vec<Option<f64>>> = (0..10).map(|t| vec![Some(t as f64)]).collect();
        let s = FleetSeries::from_rows(&rows, 4, 1, vec!["a".into()]).unwrap();
        let (train, test) = split(
            &s,
            &SplitSpec {
                train_range: 0..8,
                test_range: 8..10,
            },
        )
        .unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(test.start_phase(), (1 + 8) % 4);
        assert_eq!(test.get(0, 0), Some(8.0));
    }

    #[test]
    fn split_rejects_bad_ranges() {
        let rows: Vec<Vec<Option<f64>>> = (0..10).map(|t| vec![Some(t as f64)]).collect();
        let s = FleetSeries::from_rows(&rows, 4, 0, vec!["a".into()]).unwrap();
        let bad = |train: Range<usize>, test: Range<usize>| {
            split(
                &s,
                &SplitSpec {
                    train_range: train,
                    test_range: test,
                },
            )
            .is_err()
        };
        assert!(bad(0..0, 0..10));
        assert!(bad(0..6, 5..10));
        assert!(bad(0..6, 6..11));
    }

    #[test]
    fn paper_sized_split() {
        let days = 31 + 14;
        let rows: Vec<Vec<Option<f64>>> = (0..days * 96).map(|_| vec![Some(0.0); 6]).collect();
        let names = (1..=6).map(|i| format!("sys{i}")).collect();
        let s = FleetSeries::from_rows(&rows, 96, 0, names).unwrap();
        let (train, test) = split(
            &s,
            &SplitSpec {
                train_range: 0..31 * 96,
                test_range: 31 * 96..days * 96,
            },
        )
        .unwrap();
        assert_eq!(train.len(), 2976);
        assert_eq!(test.len(), 1344);
        assert_eq!(test.start_phase(), 0);
    }

    #[test]
    fn coverage_counts() {
        let mut rows = Vec::new();
        for t in 0..8 {
            // phase 0 rows are t = 0 and t = 4; hide both entries of t = 0
            let hide = t == 0;
            rows.push(vec![(!hide).then_some(1.0), (!hide).then_some(1.0), None]);
        }
        let s =
            FleetSeries::from_rows(&rows, 4, 0, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let c = coverage_stats(&s);
        assert_eq!(c.per_system[2], 0.0);
        assert_eq!(c.per_system[0], 7.0 / 8.0);
        // phase 0: 2 rows x 3 systems, observed 2 (row 4, systems a and b)
        assert!((c.per_phase[0] - 2.0 / 6.0).abs() < 1e-15);
        let full =
            FleetSeries::from_rows(&vec![vec![Some(1.0)]; 5], 2, 0, vec!["a".into()]).unwrap();
        let c = coverage_stats(&full);
        assert!(c.per_system.iter().chain(&c.per_phase).all(|&f| f == 1.0));
    }

    #[test]
    fn half_of_phase_zero_masked() {
        let rows: Vec<Vec<Option<f64>>> = (0..16)
            .map(|t| {
                vec![if t % 4 == 0 && t % 8 == 0 {
                    None
                } else {
                    Some(1.0)
                }]
            })
            .collect();
        let s = FleetSeries::from_rows(&rows, 4, 0, vec!["a".into()]).unwrap();
        assert_eq!(coverage_stats(&s).per_phase[0], 0.5);
    }

    #[test]
    fn phase_is_periodic() {
        let s = FleetSeries::from_rows(&vec![vec![Some(1.0)]; 3], 7, 5, vec!["a".into()]).unwrap();
        for t in 0..50 {
            assert_eq!(s.phase(t + 7), s.phase(t));
        }
    }
}
