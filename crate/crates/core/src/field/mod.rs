//! Observed functional fields and their covariance estimators.
//!
//! All estimators centre with the pooled sample mean μ̂(t) over every location;
//! the field is assumed to share one mean function in space.

mod io;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{PairSet, SpatialGrid};

pub use io::{load_field, write_field};

/// Relative tolerance for uniform time spacing.
pub const TIME_UNIFORMITY_TOLERANCE: f64 = 1e-9;
/// Relative tolerance for kernel symmetry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// X(s_i, t_j) on a lattice × uniform time grid. Rows are locations in grid
/// order, columns are time points.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalField {
    grid: SpatialGrid,
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl FunctionalField {
    pub fn new(grid: SpatialGrid, times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::domain(format!(
                "field has {} rows but the grid has {} locations",
                values.nrows(),
                grid.len()
            )));
        }
        if values.ncols() != times.len() {
            return Err(Error::domain(format!(
                "field has {} columns but {} time points",
                values.ncols(),
                times.len()
            )));
        }
        check_time_grid(&times)?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::domain(format!(
                "non-finite value at location {row}, time index {col}"
            )));
        }
        Ok(Self {
            grid,
            times,
            values,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Number of locations N.
    pub fn n_locations(&self) -> usize {
        self.values.nrows()
    }

    /// Number of time points T.
    pub fn n_times(&self) -> usize {
        self.values.ncols()
    }

    /// Time step Δt.
    pub fn dt(&self) -> f64 {
        time_step(&self.times)
    }

    /// A copy with the same grid and times but new values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), self.times.clone(), values)
    }
}

fn time_step(times: &[f64]) -> f64 {
    (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
}

pub(crate) fn check_time_grid(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::domain("a field needs at least two time points"));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::domain("time points must be finite"));
    }
    let dt = time_step(times);
    if !(dt > 0.0) {
        return Err(Error::domain("time points must be strictly increasing"));
    }
    for (j, w) in times.windows(2).enumerate() {
        let step = w[1] - w[0];
        if (step - dt).abs() > TIME_UNIFORMITY_TOLERANCE * dt.abs().max(w[1].abs()) {
            return Err(Error::domain(format!(
                "time grid is not uniform between points {} and {}",
                j + 1,
                j + 2
            )));
        }
    }
    Ok(())
}

/// A symmetric T × T covariance surface with its time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    values: DMatrix<f64>,
    dt: f64,
}

impl Kernel {
    pub fn new(values: DMatrix<f64>, dt: f64) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::domain("kernel must be square"));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::domain(format!("kernel time step must be positive, got {dt}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("kernel has non-finite entries"));
        }
        let scale = values.amax();
        let asym = (&values - values.transpose()).amax();
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::domain(format!(
                "kernel is not symmetric (max asymmetry {asym:e} vs scale {scale:e})"
            )));
        }
        Ok(Self { values, dt })
    }

    /// Symmetrize `(K + Kᵀ)/2` before validation.
    pub(crate) fn symmetrized(values: DMatrix<f64>, dt: f64) -> Result<Self> {
        let sym = (&values + values.transpose()) * 0.5;
        Self::new(sym, dt)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// μ̂(t_j) = N⁻¹ Σ_i X(s_i, t_j).
pub fn sample_mean(field: &FunctionalField) -> DVector<f64> {
    let n = field.n_locations() as f64;
    field.values().row_sum().transpose() / n
}

/// Field values minus the pooled mean, N × T.
pub(crate) fn centered(field: &FunctionalField, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut x = field.values().clone();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    x
}

/// Ĉ(t_a, t_b) = N⁻¹ Σ_i (X_i(t_a) − μ̂(t_a)) (X_i(t_b) − μ̂(t_b)).
pub fn sample_covariance(field: &FunctionalField) -> Result<Kernel> {
    if field.n_locations() < 2 {
        return Err(Error::domain("sample covariance needs at least two locations"));
    }
    let x = centered(field, &sample_mean(field));
    covariance_from_centered(&x, field.dt())
}

pub(crate) fn covariance_from_centered(x: &DMatrix<f64>, dt: f64) -> Result<Kernel> {
    let k = x.tr_mul(x) / x.nrows() as f64;
    Kernel::symmetrized(k, dt)
}

/// Ĉ^{(h)}(t_a, t_b) = N_h⁻¹ Σ_{(i,i')} (X_i(t_a) − μ̂(t_a)) (X_i'(t_b) − μ̂(t_b))
/// over the ordered pairs of `pairs`.
pub fn lag_covariance(field: &FunctionalField, pairs: &PairSet) -> Result<Kernel> {
    let x = centered(field, &sample_mean(field));
    lag_covariance_from_centered(&x, pairs, field.dt())
}

pub(crate) fn lag_covariance_from_centered(
    x: &DMatrix<f64>,
    pairs: &PairSet,
    dt: f64,
) -> Result<Kernel> {
    if pairs.is_empty() {
        return Err(Error::domain(format!("no pairs at lag {}", pairs.lag())));
    }
    let n = x.nrows();
    if let Some(&(i, j)) = pairs.pairs().iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::domain(format!("pair ({i}, {j}) is outside the field")));
    }
    // Σ_(i,i') x_i x_i'ᵀ = Xᵀ Y with Y_i = Σ_{i' : (i,i')} x_i'
    let mut partner_sums = DMatrix::<f64>::zeros(n, x.ncols());
    for &(i, j) in pairs.pairs() {
        let mut row = partner_sums.row_mut(i);
        row += x.row(j);
    }
    let k = x.tr_mul(&partner_sums) / pairs.len() as f64;
    Kernel::symmetrized(k, dt)
}

/// Epanechnikov kernel with bandwidth δ, κ_δ(u) = 0.75 (1 − (u/δ)²)₊ / δ.
pub fn epanechnikov(u: f64, bandwidth: f64) -> f64 {
    let z = u / bandwidth;
    if z.abs() < 1.0 {
        0.75 * (1.0 - z * z) / bandwidth
    } else {
        0.0
    }
}

/// Kernel-weighted lag covariance over all ordered pairs i ≠ i', with weights
/// κ_δ(h − |s_i − s_i'|), symmetrized as (K + Kᵀ)/2.
pub fn smoothed_lag_covariance(field: &FunctionalField, h: f64, bandwidth: f64) -> Result<Kernel> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::domain(format!("lag must be finite and positive, got {h}")));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::domain(format!(
            "bandwidth must be finite and positive, got {bandwidth}"
        )));
    }
    let grid = field.grid();
    let x = centered(field, &sample_mean(field));
    let n = x.nrows();
    let mut weighted = DMatrix::<f64>::zeros(n, x.ncols());
    let mut total_weight = 0.0;
    for o in grid.offsets() {
        let w = epanechnikov(h - grid.steps_to_distance(o.squared_steps()), bandwidth);
        if w == 0.0 {
            continue;
        }
        for i in 0..n {
            if let Some(j) = grid.shift(i, o) {
                for c in 0..x.ncols() {
                    weighted[(i, c)] += w * x[(j, c)];
                }
                total_weight += w;
            }
        }
    }
    if total_weight == 0.0 {
        return Err(Error::domain(format!(
            "no location pairs within bandwidth {bandwidth} of lag {h}"
        )));
    }
    let k = x.tr_mul(&weighted) / total_weight;
    Kernel::symmetrized(k, field.dt())
}
