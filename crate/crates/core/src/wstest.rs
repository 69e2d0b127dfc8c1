//! The weak separability test.
//!
//! For a lag h the field is projected on the eigenfunctions of the lag
//! covariance. Under weak separability the cross products of different score
//! columns have mean zero; each pair (j, k) gives a statistic T_h(j, k) whose
//! Gaussian-case variance σ²_{j,k} is assembled from spatial correlation fits.
//! S_h = Σ (T/σ)² is compared with a χ² law on R(R − 1)/2 degrees of freedom.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result, StageExt};
use crate::field::{
    centered, covariance_from_centered, lag_covariance_from_centered, sample_mean, FunctionalField,
};
use crate::grid::{lag_pairs, PairSet, SpatialGrid};
use crate::numerics::chi_squared_sf;
use crate::spatialcorr::{
    default_max_distance, empirical_correlation, eval_correlation, fit_exponential_wls, fit_local_linear,
    lattice_table, repair_lattice_table, CorrelationModel,
};
use crate::spectral::{
    eigen_decompose, explained_fraction, match_eigenpairs, project_centered, select_truncation, EigenSystem,
    Matching,
};

/// Plain eigenvalues closer than this multiple of the largest one are tied.
pub const TIE_TOLERANCE: f64 = 1e-8;
/// Scale ratios outside this range draw a warning.
pub const RHO_WARNING_RANGE: (f64, f64) = (0.01, 100.0);
/// Nonpositive variances are floored at this multiple of ω_j ω_k.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// How the spatial correlation of each score field is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CorrelationMethod {
    /// Exponential model fitted by weighted least squares.
    #[serde(rename = "para")]
    Parametric,
    /// Local-linear smoother of the correlogram.
    #[serde(rename = "nonp")]
    Nonparametric,
}

impl CorrelationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parametric => "para",
            Self::Nonparametric => "nonp",
        }
    }
}

impl fmt::Display for CorrelationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorrelationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "para" => Ok(Self::Parametric),
            "nonp" => Ok(Self::Nonparametric),
            other => Err(Error::domain(format!("unknown correlation method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOptions {
    pub method: CorrelationMethod,
    /// Correlogram cutoff; defaults to half the grid diameter.
    pub max_distance: Option<f64>,
    /// Local-linear bandwidth; defaults to twice the grid spacing.
    pub bandwidth: Option<f64>,
    /// Absolute tolerance for matching pair distances to the lag.
    pub lag_tolerance: Option<f64>,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self::with_method(CorrelationMethod::Parametric)
    }
}

impl TestOptions {
    pub fn with_method(method: CorrelationMethod) -> Self {
        Self {
            method,
            max_distance: None,
            bandwidth: None,
            lag_tolerance: None,
        }
    }
}

fn check_pair(scores: &DMatrix<f64>, j: usize, k: usize) -> Result<()> {
    if j == k {
        return Err(Error::domain("pair statistic needs two distinct components"));
    }
    if j >= scores.ncols() || k >= scores.ncols() {
        return Err(Error::domain(format!(
            "component index out of range ({j}, {k}) for {} score columns",
            scores.ncols()
        )));
    }
    Ok(())
}

fn cross_sum(scores: &DMatrix<f64>, j: usize, k: usize) -> f64 {
    scores.column(j).dot(&scores.column(k)) / (scores.nrows() as f64).sqrt()
}

/// N^{-1/2} Σ_i ξ_ij ξ_ik for scores from the plain covariance's own
/// eigenfunctions. It vanishes identically; kept as a check.
pub fn naive_statistic(scores: &DMatrix<f64>, j: usize, k: usize) -> Result<f64> {
    check_pair(scores, j, k)?;
    Ok(cross_sum(scores, j, k))
}

/// T_h(j, k) = N^{-1/2} Σ_i ξ_ij ξ_ik for scores from lag eigenfunctions.
pub fn pair_statistic(scores: &DMatrix<f64>, j: usize, k: usize) -> Result<f64> {
    check_pair(scores, j, k)?;
    Ok(cross_sum(scores, j, k))
}

/// ρ̂_jk = (η_j − η_k)/(ω_j − ω_k). Errors when |ω_j − ω_k| ≤ `tolerance`.
pub fn rho_hat(omega_j: f64, omega_k: f64, eta_j: f64, eta_k: f64, tolerance: f64) -> Result<f64> {
    let gap = omega_j - omega_k;
    if gap.abs() <= tolerance {
        return Err(Error::domain(format!(
            "near-tied plain eigenvalues ({omega_j:e} and {omega_k:e})"
        )));
    }
    Ok((eta_j - eta_k) / gap)
}

/// Whether a scale ratio lies in [`RHO_WARNING_RANGE`].
pub fn rho_in_range(rho: f64) -> bool {
    rho >= RHO_WARNING_RANGE.0 && rho <= RHO_WARNING_RANGE.1
}

/// The three traces entering σ²_{j,k}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceProducts {
    /// tr(U_j U_k)
    pub uu: f64,
    /// tr(U_{j,1} U_{k,2})
    pub u1u2: f64,
    /// tr(V_{j,1} V_{k,2}ᵀ)
    pub v1v2t: f64,
}

/// Implied score covariances U_r[i, i'] = ω_r ρ_r(|s_i − s_i'|) over a grid,
/// restricted to a pair set where needed. Nothing N × N is ever stored: each
/// component keeps a lookup table indexed by the absolute lattice offset.
#[derive(Debug, Clone)]
pub struct ScoreCovarianceMachinery {
    omega: Vec<f64>,
    models: Vec<CorrelationModel>,
    pairs: PairSet,
    grid: SpatialGrid,
    tables: Vec<Vec<f64>>,
    repaired: Vec<bool>,
    endpoints: Vec<[(i64, i64); 2]>,
}

impl ScoreCovarianceMachinery {
    pub fn new(
        omega: Vec<f64>,
        models: Vec<CorrelationModel>,
        pairs: PairSet,
        grid: SpatialGrid,
    ) -> Result<Self> {
        if omega.len() != models.len() {
            return Err(Error::domain("one correlation model is needed per component"));
        }
        let n = grid.len();
        if pairs.pairs().iter().any(|&(i, j)| i >= n || j >= n) {
            return Err(Error::domain("pair set refers to locations outside the grid"));
        }
        let (nx, ny) = (grid.nx(), grid.ny());
        let mut repaired = Vec::with_capacity(omega.len());
        let tables = omega
            .iter()
            .zip(&models)
            .map(|(&w, model)| {
                let mut tab = lattice_table(model, w, &grid);
                // smoothed correlograms need not be valid covariances; the
                // exponential family always is
                let fixed = matches!(model, CorrelationModel::LocalLinear { .. })
                    && repair_lattice_table(&mut tab, nx, ny, |ax, ay| {
                        w * eval_correlation(model, grid.steps_to_distance((ax * ax + ay * ay) as u64))
                    });
                repaired.push(fixed);
                tab
            })
            .collect();
        let cell = |i: usize| {
            let (x, y) = grid.cell(i);
            (x as i64, y as i64)
        };
        let endpoints = pairs.pairs().iter().map(|&(i, j)| [cell(i), cell(j)]).collect();
        Ok(Self {
            omega,
            models,
            pairs,
            grid,
            tables,
            repaired,
            endpoints,
        })
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn models(&self) -> &[CorrelationModel] {
        &self.models
    }

    pub fn pairs(&self) -> &PairSet {
        &self.pairs
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Whether component `r`'s table had to be made positive semidefinite.
    pub fn repaired(&self, r: usize) -> bool {
        self.repaired[r]
    }

    /// U_r[a, b] as a function of two lattice cells.
    #[inline]
    fn entry(&self, r: usize, a: (i64, i64), b: (i64, i64)) -> f64 {
        let ax = (a.0 - b.0).unsigned_abs() as usize;
        let ay = (a.1 - b.1).unsigned_abs() as usize;
        self.tables[r][ax * self.grid.ny() + ay]
    }

    /// U_r[i, i'] for two location indices.
    pub fn covariance(&self, r: usize, i: usize, i2: usize) -> f64 {
        let (ax, ay) = self.grid.cell(i);
        let (bx, by) = self.grid.cell(i2);
        self.entry(r, (ax as i64, ay as i64), (bx as i64, by as i64))
    }

    pub fn trace_products(&self, j: usize, k: usize) -> Result<TraceProducts> {
        let m = self.omega.len();
        if j >= m || k >= m {
            return Err(Error::domain(format!("component index out of range for {m} components")));
        }
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let (tj, tk) = (&self.tables[j], &self.tables[k]);

        // tr(U_j U_k): group ordered pairs by absolute offset
        let mut uu = 0.0;
        for ax in 0..nx {
            for ay in 0..ny {
                let signs = match (ax > 0, ay > 0) {
                    (false, false) => 1,
                    (true, true) => 4,
                    _ => 2,
                };
                let count = (signs * (nx - ax) * (ny - ay)) as f64;
                let idx = ax * ny + ay;
                uu += count * tj[idx] * tk[idx];
            }
        }

        let ends = &self.endpoints;
        let partials: Vec<f64> = ends
            .par_iter()
            .map(|p| {
                let mut s = 0.0;
                for q in ends {
                    s += self.entry(j, p[0], q[0]) * self.entry(k, q[1], p[1]);
                }
                s
            })
            .collect();
        let u1u2 = partials.iter().sum();

        let mut v1v2t = 0.0;
        for i in 0..self.grid.len() {
            let (x, y) = self.grid.cell(i);
            let c = (x as i64, y as i64);
            for p in ends {
                v1v2t += self.entry(j, c, p[0]) * self.entry(k, c, p[1]);
            }
        }
        Ok(TraceProducts { uu, u1u2, v1v2t })
    }
}

/// σ²_{j,k} from the trace products. Returns the variance and whether the
/// floor `VARIANCE_FLOOR·ω_j·ω_k` was applied.
pub fn sigma_squared(
    traces: &TraceProducts,
    rho: f64,
    n: usize,
    n_h: usize,
    omega_j: f64,
    omega_k: f64,
) -> Result<(f64, bool)> {
    if rho == 0.0 || !rho.is_finite() {
        return Err(Error::domain(format!("scale ratio must be finite and nonzero, got {rho}")));
    }
    if n == 0 || n_h == 0 {
        return Err(Error::domain("variance needs at least one location and one pair"));
    }
    let (n, n_h) = (n as f64, n_h as f64);
    let scale = rho * n_h;
    let value = traces.uu / n + n / (scale * scale) * traces.u1u2 - 2.0 / scale * traces.v1v2t;
    let floor = VARIANCE_FLOOR * omega_j * omega_k;
    if value > floor && value.is_finite() {
        Ok((value, false))
    } else {
        Ok((floor.max(f64::MIN_POSITIVE), true))
    }
}

/// One entry of the per-pair table. `j` and `k` are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairStatistic {
    pub j: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub t: f64,
    pub rho_hat: f64,
    pub sigma: f64,
    pub standardized: f64,
}

/// S = Σ (T/σ)² and df = R(R − 1)/2.
pub fn test_statistic(pair_stats: &[PairStatistic], r: usize) -> Result<(f64, usize)> {
    if r < 2 {
        return Err(Error::domain("the test needs at least two components"));
    }
    let df = r * (r - 1) / 2;
    if pair_stats.len() != df {
        return Err(Error::domain(format!(
            "expected {df} pair statistics for R = {r}, got {}",
            pair_stats.len()
        )));
    }
    let mut s = 0.0;
    for p in pair_stats {
        if !(p.sigma > 0.0) {
            return Err(Error::domain(format!("nonpositive sigma for pair ({}, {})", p.j, p.k)));
        }
        let z = p.t / p.sigma;
        s += z * z;
    }
    Ok((s, df))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub method: CorrelationMethod,
    pub n_locations: usize,
    pub n_pairs: usize,
    pub matching: Matching,
    pub lag_eigenvalues: Vec<f64>,
    pub plain_eigenvalues: Vec<f64>,
    pub matched_omega: Vec<f64>,
    pub correlation_models: Vec<CorrelationModel>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub lag: f64,
    #[serde(rename = "R")]
    pub r: usize,
    pub fve_requested: f64,
    pub fve_achieved: f64,
    pub pair_stats: Vec<PairStatistic>,
    #[serde(rename = "S")]
    pub s: f64,
    pub df: usize,
    pub p_value: f64,
    pub diagnostics: Diagnostics,
}

/// Quantities shared by every lag of one field: the centred data and the
/// eigen-system of the sample covariance.
#[derive(Debug, Clone)]
pub struct FieldAnalysis {
    grid: SpatialGrid,
    centered: DMatrix<f64>,
    mean: DVector<f64>,
    plain: EigenSystem,
    dt: f64,
}

impl FieldAnalysis {
    pub fn new(field: &FunctionalField) -> Result<Self> {
        if field.n_locations() < 2 {
            return Err(Error::domain("the test needs at least two locations").in_stage("covariance"));
        }
        let mean = sample_mean(field);
        let x = centered(field, &mean);
        let dt = field.dt();
        let cov = covariance_from_centered(&x, dt).stage("covariance")?;
        let plain = eigen_decompose(&cov, cov.size()).stage("plain eigen-decomposition")?;
        Ok(Self {
            grid: field.grid().clone(),
            centered: x,
            mean,
            plain,
            dt,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn plain_system(&self) -> &EigenSystem {
        &self.plain
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Scores on arbitrary eigenfunctions (columns of a T × R matrix).
    pub fn scores(&self, eigenfunctions: &DMatrix<f64>) -> DMatrix<f64> {
        project_centered(&self.centered, eigenfunctions, self.dt)
    }

    /// Lag covariance and its eigen-system for lag `h`.
    pub fn lag(&self, h: f64, tolerance: Option<f64>) -> Result<LagAnalysis<'_>> {
        let pairs = lag_pairs(&self.grid, h, tolerance).stage("lag pairs")?;
        self.with_pairs(pairs)
    }

    /// As [`FieldAnalysis::lag`] with an explicit pair set.
    pub fn with_pairs(&self, pairs: PairSet) -> Result<LagAnalysis<'_>> {
        let kernel = lag_covariance_from_centered(&self.centered, &pairs, self.dt).stage("lag covariance")?;
        let system = eigen_decompose(&kernel, kernel.size()).stage("lag eigen-decomposition")?;
        Ok(LagAnalysis {
            field: self,
            pairs,
            system,
        })
    }
}

/// A field prepared for testing at one lag.
#[derive(Debug, Clone)]
pub struct LagAnalysis<'a> {
    field: &'a FieldAnalysis,
    pairs: PairSet,
    system: EigenSystem,
}

impl LagAnalysis<'_> {
    pub fn pairs(&self) -> &PairSet {
        &self.pairs
    }

    pub fn lag_system(&self) -> &EigenSystem {
        &self.system
    }

    /// Flip the sign of lag eigenfunction `r`.
    pub fn flip_lag_eigenfunction(&mut self, r: usize) {
        self.system.flip(r);
    }

    /// Truncation level for a requested FVE.
    pub fn truncation(&self, fve: f64) -> Result<usize> {
        select_truncation(&self.system, fve).stage("truncation")
    }

    pub fn test(&self, fve: f64, options: &TestOptions) -> Result<TestReport> {
        let field = self.field;
        let grid = &field.grid;
        let n = grid.len();
        let n_h = self.pairs.len();
        let mut warnings = Vec::new();

        let r = self.truncation(fve)?;
        let fve_achieved = explained_fraction(&self.system, r);
        let matching = match_eigenpairs(&self.system, &field.plain, r).stage("matching")?;
        let omega = matching.matched_eigenvalues.clone();
        let eta = &self.system.eigenvalues()[..r];
        let scores = field.scores(&self.system.leading(r));

        let max_distance = options.max_distance.unwrap_or_else(|| default_max_distance(grid));
        let bandwidth = options.bandwidth.unwrap_or(2.0 * grid.spacing());
        let mut models = Vec::with_capacity(r);
        for c in 0..r {
            let column: Vec<f64> = scores.column(c).iter().copied().collect();
            let model = empirical_correlation(&column, grid, omega[c], max_distance)
                .and_then(|cg| match options.method {
                    CorrelationMethod::Parametric => fit_exponential_wls(&cg),
                    CorrelationMethod::Nonparametric => fit_local_linear(&cg, bandwidth),
                })
                .map_err(|e| Error::domain(format!("component {}: {}", c + 1, e.root())))
                .stage("correlation")?;
            match &model {
                CorrelationModel::Exponential { degenerate: true, .. } => warnings.push(format!(
                    "component {}: no positive correlation, scale pinned to its lower bound",
                    c + 1
                )),
                CorrelationModel::LocalLinear { widened: true, .. } => warnings.push(format!(
                    "component {}: smoothing bandwidth widened locally",
                    c + 1
                )),
                _ => {}
            }
            models.push(model);
        }
        let machinery = ScoreCovarianceMachinery::new(omega.clone(), models, self.pairs.clone(), grid.clone())
            .stage("variance")?;

        let tie = TIE_TOLERANCE * field.plain.eigenvalues()[0].abs();
        let mut pair_stats = Vec::with_capacity(r * (r - 1) / 2);
        for j in 0..r {
            for k in j + 1..r {
                let rho = rho_hat(omega[j], omega[k], eta[j], eta[k], tie).stage("scale ratio")?;
                if !rho_in_range(rho) {
                    warnings.push(format!(
                        "pair ({}, {}): scale ratio {rho:.4e} outside [{}, {}]",
                        j + 1,
                        k + 1,
                        RHO_WARNING_RANGE.0,
                        RHO_WARNING_RANGE.1
                    ));
                }
                let traces = machinery.trace_products(j, k).stage("variance")?;
                let (var, floored) = sigma_squared(&traces, rho, n, n_h, omega[j], omega[k]).stage("variance")?;
                if floored {
                    warnings.push(format!("pair ({}, {}): nonpositive variance estimate floored", j + 1, k + 1));
                }
                let t = pair_statistic(&scores, j, k).stage("statistic")?;
                let sigma = var.sqrt();
                pair_stats.push(PairStatistic {
                    j: j + 1,
                    k: k + 1,
                    t,
                    rho_hat: rho,
                    sigma,
                    standardized: t / sigma,
                });
            }
        }
        let (s, df) = test_statistic(&pair_stats, r).stage("statistic")?;
        let p_value = chi_squared_sf(s, df).stage("statistic")?;

        Ok(TestReport {
            lag: self.pairs.lag(),
            r,
            fve_requested: fve,
            fve_achieved,
            pair_stats,
            s,
            df,
            p_value,
            diagnostics: Diagnostics {
                method: options.method,
                n_locations: n,
                n_pairs: n_h,
                matching,
                lag_eigenvalues: self.system.eigenvalues().to_vec(),
                plain_eigenvalues: field.plain.eigenvalues().to_vec(),
                matched_omega: omega,
                correlation_models: machinery.models,
                warnings,
            },
        })
    }
}

/// Run the full test at one lag.
pub fn run_test(field: &FunctionalField, lag: f64, fve: f64, options: &TestOptions) -> Result<TestReport> {
    FieldAnalysis::new(field)?.lag(lag, options.lag_tolerance)?.test(fve, options)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiLagReport {
    pub reports: Vec<TestReport>,
    /// min(1, L · min_l p_l) over the L lags that were tested.
    pub combined_p_value: f64,
    pub dropped_lags: Vec<f64>,
    pub warnings: Vec<String>,
}

/// min(1, L·min p).
pub fn bonferroni(p_values: &[f64]) -> Option<f64> {
    let min = p_values.iter().copied().reduce(f64::min)?;
    Some((p_values.len() as f64 * min).min(1.0))
}

/// Test several lags and combine them with a Bonferroni correction. Lags with
/// no location pairs are skipped with a warning.
pub fn multi_lag_test(
    field: &FunctionalField,
    lags: &[f64],
    fve: f64,
    options: &TestOptions,
) -> Result<MultiLagReport> {
    if lags.is_empty() {
        return Err(Error::domain("at least one lag is required"));
    }
    let analysis = FieldAnalysis::new(field)?;
    let mut reports = Vec::new();
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for &h in lags {
        let pairs = lag_pairs(analysis.grid(), h, options.lag_tolerance).stage("lag pairs")?;
        if pairs.is_empty() {
            warnings.push(format!("lag {h}: no location pairs, dropped"));
            dropped.push(h);
            continue;
        }
        let report = analysis
            .with_pairs(pairs)
            .and_then(|lag| lag.test(fve, options))
            .map_err(|e| Error::domain(format!("lag {h}: {e}")))?;
        reports.push(report);
    }
    let p: Vec<f64> = reports.iter().map(|r| r.p_value).collect();
    let combined_p_value = bonferroni(&p).ok_or_else(|| Error::domain("no lag admits any location pair"))?;
    Ok(MultiLagReport {
        reports,
        combined_p_value,
        dropped_lags: dropped,
        warnings,
    })
}
