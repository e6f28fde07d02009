//! Spatial primitives: monitor locations, regular grids and the
//! point-to-cell linkage used by every statistical module.
//!
//! Coordinates are planar kilometres (already projected).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Self {
        Location { id: id.into(), x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Ctm,
    Sat,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Ctm => "ctm",
            SourceTag::Sat => "sat",
        }
    }

    /// Component index in the mixture: 1 for the model simulation, 2 for
    /// the satellite retrieval.
    pub fn component(self) -> u8 {
        match self {
            SourceTag::Ctm => 1,
            SourceTag::Sat => 2,
        }
    }
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SourceTag {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ctm" | "cmaq" | "1" => Ok(SourceTag::Ctm),
            "sat" | "aod" | "2" => Ok(SourceTag::Sat),
            other => Err(FusionError::InvalidConfig(format!("unknown source `{other}`"))),
        }
    }
}

/// A regular axis-aligned grid. Cell `(row, col)` covers
/// `[origin_x + col*cell, origin_x + (col+1)*cell) x [origin_y + row*cell, ...)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub source_tag: SourceTag,
}

impl GridSpec {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
        source_tag: SourceTag,
    ) -> Result<Self> {
        let grid = GridSpec {
            origin_x,
            origin_y,
            cell_size,
            n_rows,
            n_cols,
            source_tag,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(FusionError::InvalidConfig(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(FusionError::InvalidConfig(
                "grid needs at least one row and column".into(),
            ));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(FusionError::InvalidConfig("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn width(&self) -> f64 {
        self.cell_size * self.n_cols as f64
    }

    pub fn height(&self) -> f64 {
        self.cell_size * self.n_rows as f64
    }

    /// Row-major flat index.
    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell centres as locations with ids `r{row}c{col}`, row-major.
    pub fn cell_locations(&self) -> Vec<Location> {
        let mut out = Vec::with_capacity(self.n_cells());
        for row in 0..self.n_rows {
            for col in 0..self.n_cols {
                let (x, y) = self.cell_center(row, col);
                out.push(Location::new(cell_id(row, col), x, y));
            }
        }
        out
    }

    pub fn locate(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let out = || FusionError::OutOfDomain {
            x,
            y,
            grid: self.source_tag.to_string(),
        };
        if !x.is_finite() || !y.is_finite() {
            return Err(out());
        }
        let fc = ((x - self.origin_x) / self.cell_size).floor();
        let fr = ((y - self.origin_y) / self.cell_size).floor();
        if fc < 0.0 || fr < 0.0 || fc >= self.n_cols as f64 || fr >= self.n_rows as f64 {
            return Err(out());
        }
        Ok((fr as usize, fc as usize))
    }
}

pub fn cell_id(row: usize, col: usize) -> String {
    format!("r{row}c{col}")
}

/// Returns the grid cell whose half-open extent contains the location.
pub fn link_point_to_cell(loc: &Location, grid: &GridSpec) -> Result<(usize, usize)> {
    grid.locate(loc.x, loc.y)
}

/// Location id to `(row, col)` cell, one map per source grid.
#[derive(Debug, Clone, Default)]
pub struct GridLink {
    pub ctm: Vec<(usize, usize)>,
    pub sat: Vec<(usize, usize)>,
}

impl GridLink {
    /// Links every location into both grids; the first out-of-domain
    /// location aborts the whole link.
    pub fn build(locs: &[Location], ctm: &GridSpec, sat: &GridSpec) -> Result<Self> {
        let ctm_cells = locs
            .iter()
            .map(|l| link_point_to_cell(l, ctm))
            .collect::<Result<Vec<_>>>()?;
        let sat_cells = locs
            .iter()
            .map(|l| link_point_to_cell(l, sat))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridLink {
            ctm: ctm_cells,
            sat: sat_cells,
        })
    }

    pub fn cell(&self, source: SourceTag, idx: usize) -> (usize, usize) {
        match source {
            SourceTag::Ctm => self.ctm[idx],
            SourceTag::Sat => self.sat[idx],
        }
    }
}

/// Symmetric Euclidean distance matrix in km.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub DMatrix<f64>);

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn distance_matrix(locs: &[Location]) -> DistanceMatrix {
    let n = locs.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = locs[i].distance(&locs[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    DistanceMatrix(d)
}

/// Rectangular distances between two location sets (rows: `a`, cols: `b`).
pub fn cross_distances(a: &[Location], b: &[Location]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].distance(&b[j]))
}

/// Ensures ids are unique and coordinates finite.
pub fn validate_locations(locs: &[Location]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for l in locs {
        if !l.x.is_finite() || !l.y.is_finite() {
            return Err(FusionError::InvalidConfig(format!(
                "location `{}` has non-finite coordinates",
                l.id
            )));
        }
        if !seen.insert(l.id.as_str()) {
            return Err(FusionError::InvalidConfig(format!("duplicate location id `{}`", l.id)));
        }
    }
    Ok(())
}
