//! CSV formats. Headers are fixed; readers locate columns by name, writers
//! emit them in the documented order. Missing values are empty fields and
//! floats are written in shortest round-trip form, so emit-then-load is
//! lossless.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downscaler::{Covariates, PredictiveEntry, PredictiveInput, COVARIATE_NAMES, N_COVARIATES};
use crate::ensemble::SiteWeight;
use crate::error::{FusionError, Result};
use crate::geo::{GridSpec, Location, SourceTag};
use crate::metrics::EvalReport;

pub const MONITORS_HEADER: [&str; 3] = ["site_id", "x_km", "y_km"];
pub const OBS_HEADER: [&str; 3] = ["site_id", "day", "pm25"];
pub const GRID_HEADER: [&str; 4] = ["day", "row", "col", "value"];
pub const COVARIATES_HEADER: [&str; 8] = ["site_id", "day", "elev", "forest", "road", "emis", "wind", "temp"];
pub const PREDICTIVE_HEADER: [&str; 5] = ["site_id", "day", "source", "mu", "var"];
pub const WEIGHTS_HEADER: [&str; 5] = ["site_id", "w_mean", "w_lo", "w_hi", "q_mean"];
pub const SURFACE_HEADER: [&str; 8] = ["day", "row", "col", "mean", "sd", "q025", "q975", "w"];
pub const EVAL_HEADER: [&str; 10] = [
    "method",
    "estimation",
    "input",
    "rmse",
    "coverage95",
    "avg_posterior_sd",
    "r2",
    "n",
    "seed",
    "config_hash",
];

/// A CSV file opened for reading with its required columns located.
struct Table {
    path: String,
    reader: csv::Reader<BufReader<File>>,
    cols: Vec<usize>,
}

struct Row<'a> {
    path: &'a str,
    line: u64,
    rec: &'a csv::StringRecord,
    cols: &'a [usize],
}

impl Row<'_> {
    fn err(&self, msg: String) -> FusionError {
        FusionError::Parse {
            path: self.path.to_string(),
            line: self.line,
            msg,
        }
    }

    fn str(&self, k: usize) -> &str {
        self.rec.get(self.cols[k]).unwrap_or("").trim()
    }

    fn string(&self, k: usize, name: &str) -> Result<String> {
        let s = self.str(k);
        if s.is_empty() {
            return Err(self.err(format!("empty `{name}`")));
        }
        Ok(s.to_string())
    }

    fn f64(&self, k: usize, name: &str) -> Result<f64> {
        self.opt_f64(k, name)?
            .ok_or_else(|| self.err(format!("missing `{name}`")))
    }

    fn opt_f64(&self, k: usize, name: &str) -> Result<Option<f64>> {
        let s = self.str(k);
        if s.is_empty() {
            return Ok(None);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(self.err(format!("`{name}` is not a finite number: `{s}`"))),
        }
    }

    fn opt_i64(&self, k: usize, name: &str) -> Result<Option<i64>> {
        let s = self.str(k);
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<i64>()
            .map(Some)
            .map_err(|_| self.err(format!("`{name}` is not an integer: `{s}`")))
    }

    fn i64(&self, k: usize, name: &str) -> Result<i64> {
        self.opt_i64(k, name)?
            .ok_or_else(|| self.err(format!("missing `{name}`")))
    }

    fn usize(&self, k: usize, name: &str) -> Result<usize> {
        let s = self.str(k);
        s.parse::<usize>()
            .map_err(|_| self.err(format!("`{name}` is not a non-negative integer: `{s}`")))
    }
}

impl Table {
    fn open(path: &Path, required: &[&str]) -> Result<Table> {
        let p = path.display().to_string();
        let file = File::open(path).map_err(|e| FusionError::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(BufReader::new(file));
        let headers = reader
            .headers()
            .map_err(|e| FusionError::Parse {
                path: p.clone(),
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        let cols = required
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == *name)
                    .ok_or_else(|| FusionError::Schema {
                        path: p.clone(),
                        column: name.to_string(),
                    })
            })
            .collect::<Result<_>>()?;
        Ok(Table { path: p, reader, cols })
    }

    fn for_each(mut self, mut f: impl FnMut(&Row) -> Result<()>) -> Result<()> {
        let mut rec = csv::StringRecord::new();
        loop {
            let line = self.reader.position().line();
            match self.reader.read_record(&mut rec) {
                Ok(false) => return Ok(()),
                Ok(true) => {
                    let line = rec.position().map_or(line, |p| p.line());
                    f(&Row {
                        path: &self.path,
                        line,
                        rec: &rec,
                        cols: &self.cols,
                    })?
                }
                Err(e) => {
                    let line = e.position().map_or(line, |p| p.line());
                    return Err(FusionError::Parse {
                        path: self.path.clone(),
                        line,
                        msg: e.to_string(),
                    });
                }
            }
        }
    }
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FusionError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| FusionError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| csv_write_err(path, e))?;
    Ok(w)
}

fn csv_write_err(path: &Path, e: csv::Error) -> FusionError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FusionError::io(path, io),
        other => FusionError::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| FusionError::io(path, e))?;
    let inner = w
        .into_inner()
        .map_err(|e| FusionError::io(path, std::io::Error::other(e.to_string())))?;
    inner
        .into_inner()
        .map_err(|e| FusionError::io(path, e.into_error()))?
        .flush()
        .map_err(|e| FusionError::io(path, e))
}

/// Shortest round-trip text; non-finite values become empty fields.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

// monitors -----------------------------------------------------------------

pub fn load_monitors(path: &Path) -> Result<Vec<Location>> {
    let mut out = Vec::new();
    Table::open(path, &MONITORS_HEADER)?.for_each(|r| {
        out.push(Location::new(
            r.string(0, "site_id")?,
            r.f64(1, "x_km")?,
            r.f64(2, "y_km")?,
        ));
        Ok(())
    })?;
    crate::geo::validate_locations(&out)?;
    Ok(out)
}

pub fn write_monitors(path: &Path, sites: &[Location]) -> Result<()> {
    let mut w = writer(path, &MONITORS_HEADER)?;
    for s in sites {
        w.write_record([s.id.clone(), fmt_f64(s.x), fmt_f64(s.y)])
            .map_err(|e| csv_write_err(path, e))?;
    }
    finish(w, path)
}

// observations -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub site_id: String,
    pub day: i64,
    pub pm25: f64,
}

/// Monitor readings; rows with an empty value are skipped.
pub fn load_obs(path: &Path) -> Result<Vec<ObsRow>> {
    let mut out = Vec::new();
    Table::open(path, &OBS_HEADER)?.for_each(|r| {
        if let Some(v) = r.opt_f64(2, "pm25")? {
            out.push(ObsRow {
                site_id: r.string(0, "site_id")?,
                day: r.i64(1, "day")?,
                pm25: v,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn write_obs(path: &Path, rows: &[ObsRow]) -> Result<()> {
    let mut w = writer(path, &OBS_HEADER)?;
    for r in rows {
        w.write_record([r.site_id.clone(), r.day.to_string(), fmt_f64(r.pm25)])
            .map_err(|e| csv_write_err(path, e))?;
    }
    finish(w, path)
}

// gridded sources ----------------------------------------------------------

/// Daily values of one gridded source, `[day][cell]`, `NaN` where missing.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    pub spec: GridSpec,
    pub first_day: i64,
    pub n_days: usize,
    pub values: Vec<f64>,
}

impl GridSeries {
    pub fn new(spec: GridSpec, first_day: i64, n_days: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_days * spec.n_cells() {
            return Err(FusionError::InvalidConfig(
                "grid values do not match days x cells".into(),
            ));
        }
        Ok(GridSeries {
            spec,
            first_day,
            n_days,
            values,
        })
    }

    pub fn get(&self, day: i64, cell: usize) -> Option<f64> {
        if day < self.first_day || day >= self.first_day + self.n_days as i64 {
            return None;
        }
        let v = self.values[(day - self.first_day) as usize * self.spec.n_cells() + cell];
        v.is_finite().then_some(v)
    }

    pub fn days(&self) -> impl Iterator<Item = i64> + '_ {
        self.first_day..self.first_day + self.n_days as i64
    }
}

/// Cells absent from the file are treated as missing.
pub fn load_grid(path: &Path, spec: GridSpec) -> Result<GridSeries> {
    spec.validate()?;
    let mut rows: Vec<(i64, usize, f64)> = Vec::new();
    Table::open(path, &GRID_HEADER)?.for_each(|r| {
        let day = r.i64(0, "day")?;
        let row = r.usize(1, "row")?;
        let col = r.usize(2, "col")?;
        if row >= spec.n_rows || col >= spec.n_cols {
            return Err(r.err(format!(
                "cell ({row}, {col}) outside the {}x{} grid",
                spec.n_rows, spec.n_cols
            )));
        }
        let v = r.opt_f64(3, "value")?.unwrap_or(f64::NAN);
        rows.push((day, spec.flat(row, col), v));
        Ok(())
    })?;
    if rows.is_empty() {
        return Err(FusionError::EmptyInput(format!("{} has no rows", path.display())));
    }
    let first = rows.iter().map(|r| r.0).min().unwrap_or(0);
    let last = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let n_days = (last - first + 1) as usize;
    let nc = spec.n_cells();
    let mut values = vec![f64::NAN; n_days * nc];
    for (d, c, v) in rows {
        values[(d - first) as usize * nc + c] = v;
    }
    GridSeries::new(spec, first, n_days, values)
}

pub fn write_grid(path: &Path, grid: &GridSeries) -> Result<()> {
    let mut w = writer(path, &GRID_HEADER)?;
    let nc = grid.spec.n_cells();
    for (t, day) in grid.days().enumerate() {
        let ds = day.to_string();
        for c in 0..nc {
            let (row, col) = (c / grid.spec.n_cols, c % grid.spec.n_cols);
            w.write_record([
                ds.as_str(),
                &row.to_string(),
                &col.to_string(),
                &fmt_f64(grid.values[t * nc + c]),
            ])
            .map_err(|e| csv_write_err(path, e))?;
        }
    }
    finish(w, path)
}

// covariates ---------------------------------------------------------------

/// Site covariates; a row with an empty `day` applies to every day.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateTable {
    pub fixed: HashMap<String, Covariates>,
    pub daily: HashMap<(String, i64), Covariates>,
}

impl CovariateTable {
    pub fn lookup(&self, site: &str, day: i64) -> Option<Covariates> {
        self.daily
            .get(&(site.to_string(), day))
            .or_else(|| self.fixed.get(site))
            .copied()
    }

    /// Static value, or the mean over the site's daily rows.
    pub fn site_level(&self, site: &str) -> Option<Covariates> {
        if let Some(z) = self.fixed.get(site) {
            return Some(*z);
        }
        let mut acc = [0.0; N_COVARIATES];
        let mut n = 0usize;
        for ((s, _), z) in &self.daily {
            if s == site {
                n += 1;
                for k in 0..N_COVARIATES {
                    acc[k] += z[k];
                }
            }
        }
        (n > 0).then(|| acc.map(|v| v / n as f64))
    }
}

pub fn load_covariates(path: &Path) -> Result<CovariateTable> {
    let mut t = CovariateTable::default();
    Table::open(path, &COVARIATES_HEADER)?.for_each(|r| {
        let site = r.string(0, "site_id")?;
        let mut z = [0.0; N_COVARIATES];
        for (k, name) in COVARIATE_NAMES.iter().enumerate() {
            z[k] = r.f64(2 + k, name)?;
        }
        let dup = match r.opt_i64(1, "day")? {
            Some(d) => t.daily.insert((site.clone(), d), z).is_some(),
            None => t.fixed.insert(site.clone(), z).is_some(),
        };
        if dup {
            return Err(r.err(format!("duplicate covariate row for `{site}`")));
        }
        Ok(())
    })?;
    Ok(t)
}

pub fn write_covariates(path: &Path, t: &CovariateTable) -> Result<()> {
    let mut w = writer(path, &COVARIATES_HEADER)?;
    let mut fixed: Vec<_> = t.fixed.iter().collect();
    fixed.sort_by(|a, b| a.0.cmp(b.0));
    let mut daily: Vec<_> = t.daily.iter().collect();
    daily.sort_by(|a, b| a.0.cmp(b.0));
    let rows = fixed
        .into_iter()
        .map(|(s, z)| (s.clone(), String::new(), z))
        .chain(daily.into_iter().map(|((s, d), z)| (s.clone(), d.to_string(), z)));
    for (s, d, z) in rows {
        let mut rec = vec![s, d];
        rec.extend(z.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(|e| csv_write_err(path, e))?;
    }
    finish(w, path)
}

// predictive tables --------------------------------------------------------

/// Unavailable entries are written with empty `mu` and `var`.
pub fn write_predictive(path: &Path, p: &PredictiveInput) -> Result<()> {
    let mut w = writer(path, &PREDICTIVE_HEADER)?;
    for e in &p.entries {
        let (mu, var) = if e.available {
            (fmt_f64(e.mu), fmt_f64(e.var))
        } else {
            (String::new(), String::new())
        };
        w.write_record([e.site_id.clone(), e.day.to_string(), e.source.to_string(), mu, var])
            .map_err(|e| csv_write_err(path, e))?;
    }
    finish(w, path)
}

pub fn load_predictive(path: &Path) -> Result<PredictiveInput> {
    let mut out = Vec::new();
    Table::open(path, &PREDICTIVE_HEADER)?.for_each(|r| {
        let site_id = r.string(0, "site_id")?;
        let day = r.i64(1, "day")?;
        let source: SourceTag = r.str(2).parse().map_err(|e: FusionError| r.err(e.to_string()))?;
        let mu = r.opt_f64(3, "mu")?;
        let var = r.opt_f64(4, "var")?;
        out.push(match (mu, var) {
            (Some(mu), Some(var)) => {
                if var <= 0.0 {
                    return Err(r.err(format!("non-positive variance {var}")));
                }
                PredictiveEntry {
                    site_id,
                    day,
                    source,
                    mu,
                    var,
                    available: true,
                }
            }
            (None, None) => PredictiveEntry::unavailable(site_id, day, source),
            _ => return Err(r.err("`mu` and `var` must both be present or both empty".into())),
        });
        Ok(())
    })?;
    Ok(PredictiveInput::new(out))
}

// weights ------------------------------------------------------------------

pub fn write_weights(path: &Path, ids: &[String], w: &[SiteWeight]) -> Result<()> {
    if ids.len() != w.len() {
        return Err(FusionError::InvalidConfig(
            "weight ids and summaries differ in length".into(),
        ));
    }
    let mut out = writer(path, &WEIGHTS_HEADER)?;
    for (id, s) in ids.iter().zip(w) {
        out.write_record([
            id.clone(),
            fmt_f64(s.w_mean),
            fmt_f64(s.w_lo),
            fmt_f64(s.w_hi),
            fmt_f64(s.q_mean),
        ])
        .map_err(|e| csv_write_err(path, e))?;
    }
    finish(out, path)
}

pub fn load_weights(path: &Path) -> Result<Vec<(String, SiteWeight)>> {
    let mut out = Vec::new();
    Table::open(path, &WEIGHTS_HEADER)?.for_each(|r| {
        out.push((
            r.string(0, "site_id")?,
            SiteWeight {
                w_mean: r.f64(1, "w_mean")?,
                w_lo: r.f64(2, "w_lo")?,
                w_hi: r.f64(3, "w_hi")?,
                q_mean: r.f64(4, "q_mean")?,
            },
        ));
        Ok(())
    })?;
    Ok(out)
}

// surfaces -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub day: i64,
    pub row: usize,
    pub col: usize,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub w: f64,
}

pub fn write_surface(path: &Path, rows: &[SurfaceRow]) -> Result<()> {
    let mut w = writer(path, &SURFACE_HEADER)?;
    for r in rows {
        w.write_record([
            r.day.to_string(),
            r.row.to_string(),
            r.col.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.sd),
            fmt_f64(r.q025),
            fmt_f64(r.q975),
            fmt_f64(r.w),
        ])
        .map_err(|e| csv_write_err(path, e))?;
    }
    finish(w, path)
}

pub fn load_surface(path: &Path) -> Result<Vec<SurfaceRow>> {
    let mut out = Vec::new();
    Table::open(path, &SURFACE_HEADER)?.for_each(|r| {
        out.push(SurfaceRow {
            day: r.i64(0, "day")?,
            row: r.usize(1, "row")?,
            col: r.usize(2, "col")?,
            mean: r.f64(3, "mean")?,
            sd: r.f64(4, "sd")?,
            q025: r.f64(5, "q025")?,
            q975: r.f64(6, "q975")?,
            w: r.f64(7, "w")?,
        });
        Ok(())
    })?;
    Ok(out)
}

// evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `ctm`, `sat` or `ensemble`.
    pub method: String,
    /// `downscaler`, `joint` or `two_stage`.
    pub estimation: String,
    /// How held-out inputs were derived: `kfold` or `spatial`.
    pub input: String,
    pub report: EvalReport,
}

pub fn write_eval(path: &Path, rows: &[EvalRow], seed: u64, config_hash: &str) -> Result<()> {
    let mut w = writer(path, &EVAL_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.estimation.clone(),
            r.input.clone(),
            fmt_f64(r.report.rmse),
            fmt_f64(r.report.coverage95),
            fmt_f64(r.report.avg_posterior_sd),
            fmt_f64(r.report.r2),
            r.report.n.to_string(),
            seed.to_string(),
            config_hash.to_string(),
        ])
        .map_err(|e| csv_write_err(path, e))?;
    }
    finish(w, path)
}

pub fn load_eval(path: &Path) -> Result<Vec<EvalRow>> {
    let mut out = Vec::new();
    Table::open(path, &EVAL_HEADER[..8])?.for_each(|r| {
        out.push(EvalRow {
            method: r.string(0, "method")?,
            estimation: r.string(1, "estimation")?,
            input: r.string(2, "input")?,
            report: EvalReport {
                rmse: r.f64(3, "rmse")?,
                coverage95: r.f64(4, "coverage95")?,
                avg_posterior_sd: r.f64(5, "avg_posterior_sd")?,
                r2: r.opt_f64(6, "r2")?.unwrap_or(f64::NAN),
                n: r.usize(7, "n")?,
            },
        });
        Ok(())
    })?;
    Ok(out)
}

/// Writes a serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FusionError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| FusionError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, v).map_err(|e| FusionError::io(path, e.into()))?;
    w.flush().map_err(|e| FusionError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| FusionError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| FusionError::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}
