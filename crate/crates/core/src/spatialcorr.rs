//! Spatial correlation of score fields: empirical correlogram and the
//! exponential and local-linear fits used to build score covariances.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{SpatialGrid, DISTANCE_TOLERANCE};

/// Component variances at or below this are treated as degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

const GOLDEN_TOLERANCE: f64 = 1e-8;
const COARSE_SCAN_POINTS: usize = 400;
const WIDEN_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelogramPoint {
    pub distance: f64,
    pub rho: f64,
    pub count: usize,
}

/// ρ̃(d) at each distinct distance up to a cutoff, with the pair counts N_d.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlogram {
    pub points: Vec<CorrelogramPoint>,
    pub omega: f64,
}

impl Correlogram {
    pub fn new(points: Vec<CorrelogramPoint>, omega: f64) -> Result<Self> {
        if points.windows(2).any(|w| w[1].distance <= w[0].distance) {
            return Err(Error::domain("correlogram distances must be strictly increasing"));
        }
        if points.iter().any(|p| p.count == 0 || !(p.distance > 0.0)) {
            return Err(Error::domain("correlogram points need positive distance and count"));
        }
        Ok(Self { points, omega })
    }
}

/// Half the grid diameter, but never less than one spacing.
pub fn default_max_distance(grid: &SpatialGrid) -> f64 {
    (0.5 * grid.diameter()).max(grid.spacing())
}

/// ρ̃(d) = (N_d⁻¹ Σ_{|s_i − s_i'| = d} ξ_i ξ_i') / ω over ordered pairs with d ≤ `max_distance`.
pub fn empirical_correlation(
    scores: &[f64],
    grid: &SpatialGrid,
    omega: f64,
    max_distance: f64,
) -> Result<Correlogram> {
    if scores.len() != grid.len() {
        return Err(Error::domain(format!(
            "{} scores for a grid of {} locations",
            scores.len(),
            grid.len()
        )));
    }
    if grid.len() < 2 {
        return Err(Error::domain("a correlogram needs at least two locations"));
    }
    if !(omega > DEGENERATE_VARIANCE) {
        return Err(Error::domain(format!("degenerate component variance ({omega:e})")));
    }
    let cutoff = max_distance + DISTANCE_TOLERANCE * grid.spacing();
    let mut bins = BTreeMap::<u64, (f64, usize)>::new();
    for o in grid.offsets() {
        let steps = o.squared_steps();
        if grid.steps_to_distance(steps) > cutoff {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..grid.len() {
            if let Some(j) = grid.shift(i, o) {
                sum += scores[i] * scores[j];
                count += 1;
            }
        }
        if count > 0 {
            let bin = bins.entry(steps).or_default();
            bin.0 += sum;
            bin.1 += count;
        }
    }
    let points = bins
        .into_iter()
        .map(|(steps, (sum, count))| CorrelogramPoint {
            distance: grid.steps_to_distance(steps),
            rho: sum / count as f64 / omega,
            count,
        })
        .collect();
    Ok(Correlogram { points, omega })
}

/// A fitted correlation function ρ(d).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorrelationModel {
    /// exp(−d/φ). `degenerate` marks a fit pinned to the lower bound because
    /// the correlogram had no positive values.
    Exponential {
        phi: f64,
        max_distance: f64,
        degenerate: bool,
    },
    /// Smoothed values tabulated at the correlogram distances.
    LocalLinear {
        distances: Vec<f64>,
        values: Vec<f64>,
        max_distance: f64,
        bandwidth: Option<f64>,
        widened: bool,
    },
}

impl CorrelationModel {
    /// Build a local-linear model directly from a table.
    pub fn local_linear_from_table(distances: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if distances.is_empty() || distances.len() != values.len() {
            return Err(Error::domain("table needs matching, non-empty distances and values"));
        }
        if distances[0] <= 0.0 || distances.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("table distances must be positive and increasing"));
        }
        let max_distance = *distances.last().unwrap();
        Ok(Self::LocalLinear {
            distances,
            values,
            max_distance,
            bandwidth: None,
            widened: false,
        })
    }

    pub fn is_flagged(&self) -> bool {
        match self {
            Self::Exponential { degenerate, .. } => *degenerate,
            Self::LocalLinear { widened, .. } => *widened,
        }
    }
}

/// ρ(d), equal to 1 at d = 0 and clamped to [−1, 1].
pub fn eval_correlation(model: &CorrelationModel, d: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let raw = match model {
        CorrelationModel::Exponential { phi, .. } => (-d / phi).exp(),
        CorrelationModel::LocalLinear {
            distances,
            values,
            max_distance,
            ..
        } => {
            let tol = DISTANCE_TOLERANCE * max_distance;
            if d > max_distance + tol {
                0.0
            } else if d >= *max_distance {
                *values.last().unwrap()
            } else {
                let k = distances.partition_point(|&x| x <= d);
                let (d0, v0) = if k == 0 { (0.0, 1.0) } else { (distances[k - 1], values[k - 1]) };
                let (d1, v1) = (distances[k], values[k]);
                v0 + (v1 - v0) * (d - d0) / (d1 - d0)
            }
        }
    };
    raw.clamp(-1.0, 1.0)
}

/// Covariances ω·ρ(d) over the absolute lattice offsets of a grid, indexed
/// `ax * ny + ay`, with exactly ω at offset zero.
pub fn lattice_table(model: &CorrelationModel, omega: f64, grid: &SpatialGrid) -> Vec<f64> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut tab = vec![0.0; nx * ny];
    for ax in 0..nx {
        for ay in 0..ny {
            let steps = (ax * ax + ay * ay) as u64;
            tab[ax * ny + ay] = if steps == 0 {
                omega
            } else {
                omega * eval_correlation(model, grid.steps_to_distance(steps))
            };
        }
    }
    tab
}

/// Turn a lattice covariance table into one whose implied N × N matrix is
/// positive semidefinite, keeping the value at offset zero.
///
/// The table is wrapped onto a (2nx) × (2ny) torus, negative parts of its
/// cosine spectrum are dropped and the result is rescaled to the original
/// variance. Any grid covariance built from the repaired table is a principal
/// submatrix of a nonnegative-spectrum block circulant. Offsets of exactly nx
/// or ny steps, which only exist on the torus, take `edge(ax, ay)`. Returns
/// whether anything changed.
pub fn repair_lattice_table(
    table: &mut [f64],
    nx: usize,
    ny: usize,
    edge: impl Fn(usize, usize) -> f64,
) -> bool {
    let (m, l) = (2 * nx, 2 * ny);
    let fold = |x: usize, n: usize| x.min(2 * n - x);
    let value = |x: usize, y: usize| {
        let (ax, ay) = (fold(x, nx), fold(y, ny));
        if ax < nx && ay < ny {
            table[ax * ny + ay]
        } else {
            edge(ax, ay)
        }
    };
    let cos_x: Vec<f64> = (0..m * m)
        .map(|i| (2.0 * std::f64::consts::PI * ((i / m) * (i % m) % m) as f64 / m as f64).cos())
        .collect();
    let cos_y: Vec<f64> = (0..l * l)
        .map(|i| (2.0 * std::f64::consts::PI * ((i / l) * (i % l) % l) as f64 / l as f64).cos())
        .collect();

    // separable cosine transform of the even torus function
    let mut half = vec![0.0; m * l];
    for k in 0..m {
        for y in 0..l {
            half[k * l + y] = (0..m).map(|x| value(x, y) * cos_x[k * m + x]).sum();
        }
    }
    let mut spectrum = vec![0.0; m * l];
    for k in 0..m {
        for q in 0..l {
            spectrum[k * l + q] = (0..l).map(|y| half[k * l + y] * cos_y[q * l + y]).sum();
        }
    }
    let scale = spectrum.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if spectrum.iter().all(|&v| v >= -1e-12 * scale) {
        return false;
    }
    for v in &mut spectrum {
        *v = v.max(0.0);
    }

    for x in 0..nx {
        for q in 0..l {
            half[x * l + q] = (0..m).map(|k| spectrum[k * l + q] * cos_x[k * m + x]).sum();
        }
    }
    let mut repaired = vec![0.0; nx * ny];
    for x in 0..nx {
        for y in 0..ny {
            repaired[x * ny + y] = (0..l).map(|q| half[x * l + q] * cos_y[q * l + y]).sum::<f64>() / (m * l) as f64;
        }
    }
    let target = table[0];
    let ratio = if repaired[0] > 0.0 { target / repaired[0] } else { 0.0 };
    for (t, r) in table.iter_mut().zip(repaired) {
        *t = r * ratio;
    }
    table[0] = target;
    true
}

/// d/du of the objective at φ = e^u.
fn wls_slope(points: &[CorrelogramPoint], u: f64) -> f64 {
    let phi = u.exp();
    points
        .iter()
        .map(|p| {
            let e = (-p.distance / phi).exp();
            -2.0 * p.count as f64 * (p.rho - e) * e * p.distance / phi
        })
        .sum()
}

fn wls_objective(points: &[CorrelogramPoint], phi: f64) -> f64 {
    points
        .iter()
        .map(|p| {
            let r = p.rho - (-p.distance / phi).exp();
            p.count as f64 * r * r
        })
        .sum()
}

/// Default search interval [1e-3·d_min, 10·d_max] for φ.
pub fn default_phi_bounds(correlogram: &Correlogram) -> Option<(f64, f64)> {
    let first = correlogram.points.first()?;
    let last = correlogram.points.last()?;
    Some((1e-3 * first.distance, 10.0 * last.distance))
}

/// Weighted least squares fit of exp(−d/φ) with weights N_d.
pub fn fit_exponential_wls(correlogram: &Correlogram) -> Result<CorrelationModel> {
    let (lo, hi) = default_phi_bounds(correlogram)
        .ok_or_else(|| Error::domain("exponential fit needs at least one correlogram point"))?;
    fit_exponential_wls_within(correlogram, lo, hi)
}

/// As [`fit_exponential_wls`] with an explicit search interval for φ.
pub fn fit_exponential_wls_within(correlogram: &Correlogram, lo: f64, hi: f64) -> Result<CorrelationModel> {
    let points = &correlogram.points;
    if points.is_empty() {
        return Err(Error::domain("exponential fit needs at least one correlogram point"));
    }
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::domain(format!("invalid range for the correlation scale: [{lo}, {hi}]")));
    }
    let max_distance = points.last().unwrap().distance;
    if points.iter().all(|p| p.rho <= 0.0) {
        return Ok(CorrelationModel::Exponential {
            phi: lo,
            max_distance,
            degenerate: true,
        });
    }
    let f = |u: f64| wls_objective(points, u.exp());
    let (a, b) = (lo.ln(), hi.ln());

    // coarse scan to bracket the global minimum, then golden section
    let step = (b - a) / (COARSE_SCAN_POINTS - 1) as f64;
    let mut best = 0;
    let mut best_value = f64::INFINITY;
    for k in 0..COARSE_SCAN_POINTS {
        let v = f(a + k as f64 * step);
        if v < best_value {
            best_value = v;
            best = k;
        }
    }
    let mut left = a + best.saturating_sub(1) as f64 * step;
    let mut right = (a + (best + 1) as f64 * step).min(b);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = right - inv_phi * (right - left);
    let mut x2 = left + inv_phi * (right - left);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while right - left > GOLDEN_TOLERANCE {
        if f1 <= f2 {
            right = x2;
            x2 = x1;
            f2 = f1;
            x1 = right - inv_phi * (right - left);
            f1 = f(x1);
        } else {
            left = x1;
            x1 = x2;
            f1 = f2;
            x2 = left + inv_phi * (right - left);
            f2 = f(x2);
        }
    }
    // polish on the slope so the optimum is resolved to rounding level
    let (mut lo_u, mut hi_u) = ((left - step).max(a), (right + step).min(b));
    let mut u = 0.5 * (left + right);
    if wls_slope(points, lo_u) < 0.0 && wls_slope(points, hi_u) > 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (lo_u + hi_u);
            if mid <= lo_u || mid >= hi_u {
                break;
            }
            if wls_slope(points, mid) < 0.0 {
                lo_u = mid;
            } else {
                hi_u = mid;
            }
        }
        u = 0.5 * (lo_u + hi_u);
    }
    // an interval end wins only by more than rounding noise
    let mut fu = f(u);
    for cand in [a, b] {
        let v = f(cand);
        if v < fu - 1e-12 * fu {
            u = cand;
            fu = v;
        }
    }
    Ok(CorrelationModel::Exponential {
        phi: u.exp().clamp(lo, hi),
        max_distance,
        degenerate: false,
    })
}

/// Local-linear intercept at `target` with weights N_d·K((d − target)/b).
fn local_linear_at(points: &[CorrelogramPoint], target: f64, bandwidth: f64) -> Option<f64> {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut support = 0;
    for p in points {
        let z = (p.distance - target) / bandwidth;
        if z.abs() >= 1.0 {
            continue;
        }
        let w = p.count as f64 * 0.75 * (1.0 - z * z);
        let dx = p.distance - target;
        s0 += w;
        s1 += w * dx;
        s2 += w * dx * dx;
        t0 += w * p.rho;
        t1 += w * dx * p.rho;
        support += 1;
    }
    if support < 2 {
        return None;
    }
    Some((s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1))
}

/// Local-linear smoother over the correlogram, tabulated at its distances.
/// Targets with fewer than two points inside the window get a locally widened
/// bandwidth and set the `widened` flag.
pub fn fit_local_linear(correlogram: &Correlogram, bandwidth: f64) -> Result<CorrelationModel> {
    let points = &correlogram.points;
    if points.len() < 2 {
        return Err(Error::domain("local-linear fit needs at least two correlogram points"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::domain(format!("bandwidth must be finite and positive, got {bandwidth}")));
    }
    let mut widened = false;
    let mut values = Vec::with_capacity(points.len());
    for p in points {
        let mut b = bandwidth;
        let value = loop {
            if let Some(v) = local_linear_at(points, p.distance, b) {
                break v;
            }
            widened = true;
            b *= WIDEN_FACTOR;
        };
        values.push(value);
    }
    let distances: Vec<f64> = points.iter().map(|p| p.distance).collect();
    let max_distance = *distances.last().unwrap();
    Ok(CorrelationModel::LocalLinear {
        distances,
        values,
        max_distance,
        bandwidth: Some(bandwidth),
        widened,
    })
}
