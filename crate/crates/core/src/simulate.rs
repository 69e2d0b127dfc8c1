//! Synthetic spatial functional fields with Matérn score fields, and the
//! Monte Carlo driver for size and power studies.
//!
//! A generated field is X(s, t) = μ(t) + Σ_r ξ_r(s) ψ_r(t) with a fixed mean
//! μ(t) = 3 + 2t², a Fourier basis ψ_r and independent Gaussian score fields,
//! except that the first two may be coupled through a bivariate Matérn
//! cross-covariance. Coupling them breaks weak separability.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::FunctionalField;
use crate::grid::{build_regular_grid, SpatialGrid};
use crate::numerics::{bessel_k, ln_gamma, SeededRng};
use crate::wstest::{CorrelationMethod, FieldAnalysis, TestOptions};

const JITTER_START: f64 = 1e-10;
const JITTER_CAP: f64 = 1e-6;

/// Matérn correlation M(d; ν, φ) = 2^{1−ν}/Γ(ν) (d/φ)^ν K_ν(d/φ).
pub fn matern(d: f64, nu: f64, phi: f64) -> Result<f64> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::domain(format!("distance must be finite and nonnegative, got {d}")));
    }
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::domain(format!("smoothness must be finite and positive, got {nu}")));
    }
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::domain(format!("range must be finite and positive, got {phi}")));
    }
    if d == 0.0 {
        return Ok(1.0);
    }
    let z = d / phi;
    if nu == 0.5 {
        return Ok((-z).exp());
    }
    if z > 700.0 {
        return Ok(0.0);
    }
    let k = bessel_k(nu, z)?;
    if k == 0.0 {
        return Ok(0.0);
    }
    if !k.is_finite() {
        return Ok(1.0);
    }
    let log = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu)? + nu * z.ln() + k.ln();
    Ok(log.exp().min(1.0))
}

/// Marginal Matérn covariance ω·M(d; ν, φ); φ = 0 means no spatial correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaternParams {
    pub nu: f64,
    pub phi: f64,
    pub omega: f64,
}

impl MaternParams {
    pub fn new(nu: f64, phi: f64, omega: f64) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::domain(format!("smoothness must be positive, got {nu}")));
        }
        if !(phi >= 0.0) || !phi.is_finite() {
            return Err(Error::domain(format!("range must be nonnegative, got {phi}")));
        }
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(Error::domain(format!("variance must be positive, got {omega}")));
        }
        Ok(Self { nu, phi, omega })
    }

    /// Covariance at distance `d`.
    pub fn covariance(&self, d: f64) -> Result<f64> {
        if d == 0.0 {
            Ok(self.omega)
        } else if self.phi == 0.0 {
            Ok(0.0)
        } else {
            Ok(self.omega * matern(d, self.nu, self.phi)?)
        }
    }
}

/// Cross-covariance between the first two score fields,
/// c₁₂(d) = ρ₁₂ √(ω₁ω₂) M(d; ν₁₂, φ₁₂).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossParams {
    pub rho12: f64,
    pub nu12: f64,
    pub phi12: f64,
}

/// Fill an N × N matrix whose entries depend only on the lattice offset.
fn stationary_matrix(grid: &SpatialGrid, cov: impl Fn(f64) -> Result<f64>) -> Result<DMatrix<f64>> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut table = vec![0.0; nx * ny];
    for ax in 0..nx {
        for ay in 0..ny {
            table[ax * ny + ay] = cov(grid.steps_to_distance((ax * ax + ay * ay) as u64))?;
        }
    }
    let n = grid.len();
    let cells: Vec<(usize, usize)> = (0..n).map(|i| grid.cell(i)).collect();
    Ok(DMatrix::from_fn(n, n, |a, b| {
        let ax = cells[a].0.abs_diff(cells[b].0);
        let ay = cells[a].1.abs_diff(cells[b].1);
        table[ax * ny + ay]
    }))
}

pub fn build_covariance(grid: &SpatialGrid, params: &MaternParams) -> Result<DMatrix<f64>> {
    stationary_matrix(grid, |d| params.covariance(d))
}

/// The 2N × 2N joint covariance of the first two score fields.
pub fn build_bivariate_covariance(
    grid: &SpatialGrid,
    first: &MaternParams,
    second: &MaternParams,
    cross: &CrossParams,
) -> Result<DMatrix<f64>> {
    if !(cross.rho12.abs() < 1.0) {
        return Err(Error::domain(format!("cross correlation must lie in (-1, 1), got {}", cross.rho12)));
    }
    let n = grid.len();
    let c1 = build_covariance(grid, first)?;
    let c2 = build_covariance(grid, second)?;
    let scale = cross.rho12 * (first.omega * second.omega).sqrt();
    let c12 = if cross.rho12 == 0.0 {
        DMatrix::zeros(n, n)
    } else {
        stationary_matrix(grid, |d| Ok(scale * matern(d, cross.nu12, cross.phi12)?))?
    };
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&c1);
    out.view_mut((n, n), (n, n)).copy_from(&c2);
    out.view_mut((0, n), (n, n)).copy_from(&c12);
    out.view_mut((n, 0), (n, n)).copy_from(&c12.transpose());
    Ok(out)
}

/// Lower-triangular factor L with L·Lᵀ = cov + jitter·I.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    /// Factor `cov`, adding diagonal jitter 1e-10·mean(diag), ×10 per retry,
    /// up to 1e-6·mean(diag), if the plain factorization fails.
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() == 0 {
            return Err(Error::domain("covariance must be a non-empty square matrix"));
        }
        let scale = cov.diagonal().mean();
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::domain("covariance diagonal must be positive"));
        }
        let mut jitter = 0.0;
        loop {
            let mut m = cov.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(m) {
                return Ok(Self { lower: c.unpack(), jitter });
            }
            jitter = if jitter == 0.0 { JITTER_START * scale } else { jitter * 10.0 };
            if jitter > JITTER_CAP * scale * (1.0 + 1e-9) {
                return Err(Error::domain("covariance is not positive definite even with maximal jitter"));
            }
        }
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Diagonal jitter that was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// L·z for fresh standard normals z.
    pub fn sample(&self, rng: &mut SeededRng) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        rng.fill_standard_normal(z.as_mut_slice());
        &self.lower * z
    }
}

/// One draw from N(0, cov).
pub fn sample_field(cov: &DMatrix<f64>, rng: &mut SeededRng) -> Result<DVector<f64>> {
    Ok(CholeskyFactor::new(cov)?.sample(rng))
}

/// μ(t) = 3 + 2t².
pub fn mean_function(t: f64) -> f64 {
    3.0 + 2.0 * t * t
}

/// ψ_r(t) = √2 cos(rπt) for odd r and √2 sin((r − 1)πt) for even r (1-based),
/// as the columns of a T × p matrix.
pub fn fourier_basis(times: &[f64], p: usize) -> DMatrix<f64> {
    use std::f64::consts::{PI, SQRT_2};
    DMatrix::from_fn(times.len(), p, |j, c| {
        let r = c + 1;
        let t = times[j];
        if r % 2 == 1 {
            SQRT_2 * (r as f64 * PI * t).cos()
        } else {
            SQRT_2 * ((r - 1) as f64 * PI * t).sin()
        }
    })
}

/// Midpoints (j + ½)/T of T equal cells on [0, 1].
pub fn midpoint_times(n_times: usize) -> Vec<f64> {
    (0..n_times).map(|j| (j as f64 + 0.5) / n_times as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationConfig {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub n_times: usize,
    pub components: Vec<MaternParams>,
    pub cross: CrossParams,
    pub seed: u64,
}

/// Range parameters of the leading score fields; later ones are white noise.
const LEADING_RANGES: [f64; 4] = [0.2, 0.1, 0.15, 0.08];

fn standard_components(p: usize) -> Vec<MaternParams> {
    (1..=p)
        .map(|r| MaternParams {
            nu: if r == 1 { 1.0 } else { 0.5 },
            phi: LEADING_RANGES.get(r - 1).copied().unwrap_or(0.0),
            omega: 4.0 / (r * r) as f64,
        })
        .collect()
}

impl SimulationConfig {
    /// 20×20 grid, spacing 0.05, 50 time points, 6 components.
    pub fn desk(seed: u64) -> Self {
        Self::standard(20, 50, 6, seed)
    }

    /// 40×40 grid, spacing 0.05, 100 time points, 10 components.
    pub fn paper(seed: u64) -> Self {
        Self::standard(40, 100, 10, seed)
    }

    fn standard(side: usize, n_times: usize, p: usize, seed: u64) -> Self {
        Self {
            nx: side,
            ny: side,
            spacing: 0.05,
            n_times,
            components: standard_components(p),
            cross: CrossParams {
                rho12: 0.0,
                nu12: 0.8,
                phi12: 0.15,
            },
            seed,
        }
    }

    pub fn with_rho12(mut self, rho12: f64) -> Self {
        self.cross.rho12 = rho12;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Give every score field the same correlation function M(·; 1, 0.2), so
    /// the covariance factors into space × time. Removes any cross coupling.
    pub fn strongly_separable(mut self) -> Self {
        for c in &mut self.components {
            c.nu = 1.0;
            c.phi = 0.2;
        }
        self.cross.rho12 = 0.0;
        self
    }

    pub fn grid(&self) -> Result<SpatialGrid> {
        build_regular_grid(self.nx, self.ny, self.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_times < 2 {
            return Err(Error::domain("at least two time points are required"));
        }
        if self.components.is_empty() {
            return Err(Error::domain("at least one component is required"));
        }
        for c in &self.components {
            MaternParams::new(c.nu, c.phi, c.omega)?;
        }
        if !(self.cross.rho12.abs() < 1.0) {
            return Err(Error::domain(format!("rho12 must lie in (-1, 1), got {}", self.cross.rho12)));
        }
        if self.cross.rho12 != 0.0 {
            if self.components.len() < 2 {
                return Err(Error::domain("cross correlation needs at least two components"));
            }
            if !(self.cross.nu12 > 0.0) || !(self.cross.phi12 > 0.0) {
                return Err(Error::domain("cross smoothness and range must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Sampler {
    White(f64),
    Correlated(CholeskyFactor),
}

impl Sampler {
    fn new(grid: &SpatialGrid, params: &MaternParams) -> Result<Self> {
        if params.phi == 0.0 {
            Ok(Self::White(params.omega.sqrt()))
        } else {
            Ok(Self::Correlated(CholeskyFactor::new(&build_covariance(grid, params)?)?))
        }
    }

    fn sample(&self, n: usize, rng: &mut SeededRng) -> DVector<f64> {
        match self {
            Self::White(scale) => {
                let mut z = DVector::zeros(n);
                rng.fill_standard_normal(z.as_mut_slice());
                z * *scale
            }
            Self::Correlated(f) => f.sample(rng),
        }
    }
}

/// Factored covariances for a configuration, ready to produce replicates.
#[derive(Debug, Clone)]
pub struct FieldGenerator {
    config: SimulationConfig,
    grid: SpatialGrid,
    times: Vec<f64>,
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    joint: Option<CholeskyFactor>,
    samplers: Vec<Sampler>,
}

impl FieldGenerator {
    pub fn new(config: &SimulationConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let times = midpoint_times(config.n_times);
        let mean = DVector::from_iterator(times.len(), times.iter().map(|&t| mean_function(t)));
        let basis = fourier_basis(&times, config.components.len());
        let comps = &config.components;
        let (joint, first_single) = if config.cross.rho12 != 0.0 {
            let cov = build_bivariate_covariance(&grid, &comps[0], &comps[1], &config.cross)?;
            let factor = CholeskyFactor::new(&cov)
                .map_err(|_| Error::domain("invalid bivariate Matérn parameters"))?;
            (Some(factor), 2)
        } else {
            (None, 0)
        };
        let samplers = comps[first_single..]
            .iter()
            .map(|c| Sampler::new(&grid, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            grid,
            times,
            mean,
            basis,
            joint,
            samplers,
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Score fields ξ_r(s_i) for a replicate, N × p. Normals are drawn in
    /// component order from the stream numbered by the replicate.
    pub fn scores(&self, replicate: u64) -> DMatrix<f64> {
        let n = self.grid.len();
        let p = self.config.components.len();
        let mut rng = SeededRng::new(self.config.seed, replicate);
        let mut xi = DMatrix::zeros(n, p);
        let mut col = 0;
        if let Some(joint) = &self.joint {
            let v = joint.sample(&mut rng);
            xi.set_column(0, &v.rows(0, n));
            xi.set_column(1, &v.rows(n, n));
            col = 2;
        }
        for s in &self.samplers {
            xi.set_column(col, &s.sample(n, &mut rng));
            col += 1;
        }
        xi
    }

    pub fn generate(&self, replicate: u64) -> FunctionalField {
        let mut values = self.scores(replicate) * self.basis.transpose();
        for mut row in values.row_iter_mut() {
            row += self.mean.transpose();
        }
        FunctionalField::new(self.grid.clone(), self.times.clone(), values)
            .expect("generated field satisfies the field invariants")
    }
}

/// One replicate of a configuration.
pub fn generate_field(config: &SimulationConfig, replicate: u64) -> Result<FunctionalField> {
    Ok(FieldGenerator::new(config)?.generate(replicate))
}

/// What to test in a Monte Carlo study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyPlan {
    pub replicates: usize,
    /// Lags in distance units.
    pub lags: Vec<f64>,
    pub fve_levels: Vec<f64>,
    pub methods: Vec<CorrelationMethod>,
    pub alpha: f64,
}

impl StudyPlan {
    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::domain("at least one replicate is required"));
        }
        if self.lags.is_empty() || self.fve_levels.is_empty() || self.methods.is_empty() {
            return Err(Error::domain("a study needs at least one lag, FVE level and method"));
        }
        if let Some(f) = self.fve_levels.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::domain(format!("fve must lie in (0, 1], got {f}")));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Rejection rate for one (ρ₁₂, lag, FVE, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub rho12: f64,
    pub lag: f64,
    pub fve: f64,
    pub method: CorrelationMethod,
    pub rejections: usize,
    pub replicates: usize,
    /// rejections / (replicates − failures)
    pub rate: f64,
    pub failures: usize,
}

/// How often each truncation level was selected for a (lag, FVE) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationCount {
    pub lag: f64,
    pub fve: f64,
    pub r: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub rows: Vec<RateRow>,
    pub truncation: Vec<TruncationCount>,
    /// Messages from failed replicates, in replicate order.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
enum Outcome {
    Tested { p_value: f64 },
    Failed(String),
}

struct ReplicateOutcome {
    /// Indexed [lag][fve][method].
    cells: Vec<Outcome>,
    /// Indexed [lag][fve]; None when the truncation failed.
    truncation: Vec<Option<usize>>,
}

fn run_replicate(generator: &FieldGenerator, plan: &StudyPlan, replicate: u64) -> ReplicateOutcome {
    let (nl, nf, nm) = (plan.lags.len(), plan.fve_levels.len(), plan.methods.len());
    let field = generator.generate(replicate);
    let mut cells = Vec::with_capacity(nl * nf * nm);
    let mut truncation = Vec::with_capacity(nl * nf);
    let analysis = FieldAnalysis::new(&field);
    for &lag in &plan.lags {
        let prepared = analysis.as_ref().map_err(Error::to_string).and_then(|a| {
            a.lag(lag, None).map_err(|e| e.to_string())
        });
        for &fve in &plan.fve_levels {
            truncation.push(prepared.as_ref().ok().and_then(|l| l.truncation(fve).ok()));
            for &method in &plan.methods {
                let outcome = match &prepared {
                    Err(msg) => Outcome::Failed(msg.clone()),
                    Ok(l) => match l.test(fve, &TestOptions::with_method(method)) {
                        Ok(report) => Outcome::Tested {
                            p_value: report.p_value,
                        },
                        Err(e) => Outcome::Failed(e.to_string()),
                    },
                };
                cells.push(outcome);
            }
        }
    }
    ReplicateOutcome { cells, truncation }
}

/// Monte Carlo rejection rates. Replicates run in parallel; each uses its own
/// random stream and results are merged in replicate order, so the output
/// does not depend on scheduling.
pub fn power_study(config: &SimulationConfig, plan: &StudyPlan) -> Result<StudyResult> {
    plan.validate()?;
    let generator = FieldGenerator::new(config)?;
    let outcomes: Vec<ReplicateOutcome> = (0..plan.replicates as u64)
        .into_par_iter()
        .map(|rep| run_replicate(&generator, plan, rep))
        .collect();

    let (nf, nm) = (plan.fve_levels.len(), plan.methods.len());
    let mut rows = Vec::new();
    let mut truncation = Vec::new();
    let mut failures = Vec::new();
    for (li, &lag) in plan.lags.iter().enumerate() {
        for (fi, &fve) in plan.fve_levels.iter().enumerate() {
            let mut counts = std::collections::BTreeMap::<usize, usize>::new();
            for o in &outcomes {
                if let Some(r) = o.truncation[li * nf + fi] {
                    *counts.entry(r).or_default() += 1;
                }
            }
            truncation.extend(counts.into_iter().map(|(r, count)| TruncationCount { lag, fve, r, count }));
            for (mi, &method) in plan.methods.iter().enumerate() {
                let idx = (li * nf + fi) * nm + mi;
                let mut rejections = 0;
                let mut failed = 0;
                for (rep, o) in outcomes.iter().enumerate() {
                    match &o.cells[idx] {
                        Outcome::Tested { p_value } => rejections += usize::from(*p_value < plan.alpha),
                        Outcome::Failed(msg) => {
                            failed += 1;
                            failures.push(format!(
                                "replicate {rep}, lag {lag}, fve {fve}, {method}: {msg}"
                            ));
                        }
                    }
                }
                let tested = plan.replicates - failed;
                rows.push(RateRow {
                    rho12: config.cross.rho12,
                    lag,
                    fve,
                    method,
                    rejections,
                    replicates: plan.replicates,
                    rate: if tested > 0 { rejections as f64 / tested as f64 } else { f64::NAN },
                    failures: failed,
                });
            }
        }
    }
    Ok(StudyResult {
        rows,
        truncation,
        failures,
    })
}

pub const RATE_TABLE_HEADER: &str = "rho12,lag,fve,method,rejections,replicates,rate,failures";

/// Write rate rows as CSV with a header line.
pub fn write_rate_table<W: Write>(rows: &[RateRow], mut sink: W) -> Result<()> {
    writeln!(sink, "{RATE_TABLE_HEADER}")?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{},{},{},{},{}",
            r.rho12, r.lag, r.fve, r.method, r.rejections, r.replicates, r.rate, r.failures
        )?;
    }
    Ok(())
}
