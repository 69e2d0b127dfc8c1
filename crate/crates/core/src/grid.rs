//! Regular lattice geometry.
//!
//! Locations are stored row-major: index `iy * nx + ix` sits at
//! `origin + (ix, iy) * spacing`. Distances between lattice points depend only
//! on the integer offset `(dx, dy)`, so pair enumeration and distance binning
//! work on offsets and never compare floating-point distances between bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance, in units of the spacing, for exact-distance matching.
pub const DISTANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    nx: usize,
    ny: usize,
    spacing: f64,
    origin: (f64, f64),
}

/// Integer lattice offset between two locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Offset {
    pub dx: i64,
    pub dy: i64,
}

impl Offset {
    pub fn squared_steps(self) -> u64 {
        (self.dx * self.dx + self.dy * self.dy) as u64
    }
}

/// Build an `nx × ny` lattice with the given spacing, anchored at the origin.
pub fn build_regular_grid(nx: usize, ny: usize, spacing: f64) -> Result<SpatialGrid> {
    SpatialGrid::with_origin(nx, ny, spacing, (0.0, 0.0))
}

impl SpatialGrid {
    pub fn with_origin(nx: usize, ny: usize, spacing: f64, origin: (f64, f64)) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::domain(format!(
                "grid dimensions must be positive, got {nx}x{ny}"
            )));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::domain(format!(
                "grid spacing must be finite and positive, got {spacing}"
            )));
        }
        if !origin.0.is_finite() || !origin.1.is_finite() {
            return Err(Error::domain("grid origin must be finite"));
        }
        Ok(Self {
            nx,
            ny,
            spacing,
            origin,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    /// Number of locations N.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lattice coordinates `(ix, iy)` of location `i`.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i % self.nx, i / self.nx)
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn location(&self, i: usize) -> (f64, f64) {
        let (ix, iy) = self.cell(i);
        (
            self.origin.0 + ix as f64 * self.spacing,
            self.origin.1 + iy as f64 * self.spacing,
        )
    }

    pub fn locations(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.location(i)).collect()
    }

    pub fn offset(&self, from: usize, to: usize) -> Offset {
        let (ax, ay) = self.cell(from);
        let (bx, by) = self.cell(to);
        Offset {
            dx: bx as i64 - ax as i64,
            dy: by as i64 - ay as i64,
        }
    }

    /// Euclidean distance between locations `a` and `b`.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.steps_to_distance(self.offset(a, b).squared_steps())
    }

    pub fn steps_to_distance(&self, squared_steps: u64) -> f64 {
        self.spacing * (squared_steps as f64).sqrt()
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let dx = (self.nx - 1) as u64;
        let dy = (self.ny - 1) as u64;
        self.steps_to_distance(dx * dx + dy * dy)
    }

    /// Location reached from `i` by `offset`, if it lies on the grid.
    pub fn shift(&self, i: usize, offset: Offset) -> Option<usize> {
        let (ix, iy) = self.cell(i);
        let x = ix as i64 + offset.dx;
        let y = iy as i64 + offset.dy;
        if x < 0 || y < 0 || x >= self.nx as i64 || y >= self.ny as i64 {
            None
        } else {
            Some(self.index(x as usize, y as usize))
        }
    }

    /// Number of ordered location pairs `(i, i')` with `i' = i + offset`.
    pub fn offset_count(&self, offset: Offset) -> usize {
        let ax = offset.dx.unsigned_abs() as usize;
        let ay = offset.dy.unsigned_abs() as usize;
        if ax >= self.nx || ay >= self.ny {
            0
        } else {
            (self.nx - ax) * (self.ny - ay)
        }
    }

    /// Every nonzero offset realized by at least one pair, in (dx, dy) order.
    pub fn offsets(&self) -> impl Iterator<Item = Offset> + '_ {
        let mx = self.nx as i64 - 1;
        let my = self.ny as i64 - 1;
        (-mx..=mx)
            .flat_map(move |dx| (-my..=my).map(move |dy| Offset { dx, dy }))
            .filter(|o| o.dx != 0 || o.dy != 0)
    }
}

/// Ordered pairs of locations separated by a given lag.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    lag: f64,
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    /// Wrap an explicit pair list. The distance condition is not checked, which
    /// lets callers build special sets such as the self-pair set `{(i, i)}`.
    pub fn from_pairs(lag: f64, pairs: Vec<(usize, usize)>) -> Self {
        Self { lag, pairs }
    }

    pub fn lag(&self) -> f64 {
        self.lag
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// N_h, the number of ordered pairs.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// All ordered pairs `(i, i')` with `| |s_i − s_i'| − h | ≤ tol`, sorted
/// lexicographically. `tol` defaults to `1e-9 · spacing`.
pub fn lag_pairs(grid: &SpatialGrid, h: f64, tol: Option<f64>) -> Result<PairSet> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::domain(format!("lag must be finite and positive, got {h}")));
    }
    let tol = tol.unwrap_or(DISTANCE_TOLERANCE * grid.spacing());
    if !(tol >= 0.0) {
        return Err(Error::domain(format!("lag tolerance must be >= 0, got {tol}")));
    }
    let offsets: Vec<Offset> = grid
        .offsets()
        .filter(|o| (grid.steps_to_distance(o.squared_steps()) - h).abs() <= tol)
        .collect();
    let mut pairs = Vec::new();
    for i in 0..grid.len() {
        for &o in &offsets {
            if let Some(j) = grid.shift(i, o) {
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    Ok(PairSet { lag: h, pairs })
}

/// One distinct pairwise distance and its ordered-pair count N_d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceCount {
    pub distance: f64,
    /// dx² + dy² in lattice steps; identifies the distance exactly.
    pub squared_steps: u64,
    pub count: usize,
}

/// Distinct nonzero pairwise distances with ordered-pair counts, ascending.
/// Counts sum to N(N − 1).
pub fn distance_multiset(grid: &SpatialGrid) -> Vec<DistanceCount> {
    let mut by_steps = std::collections::BTreeMap::<u64, usize>::new();
    for o in grid.offsets() {
        *by_steps.entry(o.squared_steps()).or_default() += grid.offset_count(o);
    }
    by_steps
        .into_iter()
        .map(|(squared_steps, count)| DistanceCount {
            distance: grid.steps_to_distance(squared_steps),
            squared_steps,
            count,
        })
        .collect()
}
