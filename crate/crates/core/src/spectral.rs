//! Eigenanalysis of discretized covariance operators.
//!
//! A kernel K on a uniform time grid with step Δt defines the operator
//! f ↦ Δt·K·f. Eigenfunctions are normalized so that Δt·‖ψ‖² = 1.

use nalgebra::{DMatrix, DVector, DVectorView, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{centered, FunctionalField, Kernel};

/// Eigenpairs sorted by eigenvalue, largest first. Eigenfunctions are the
/// columns of a T × M matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    eigenvalues: Vec<f64>,
    eigenfunctions: DMatrix<f64>,
    dt: f64,
}

impl EigenSystem {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    pub fn eigenfunction(&self, r: usize) -> DVectorView<'_, f64> {
        self.eigenfunctions.column(r)
    }

    /// The first `count` eigenfunctions as columns.
    pub fn leading(&self, count: usize) -> DMatrix<f64> {
        self.eigenfunctions.columns(0, count).into_owned()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of stored components.
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Flip the sign of eigenfunction `r`.
    pub fn flip(&mut self, r: usize) {
        let mut col = self.eigenfunctions.column_mut(r);
        col.neg_mut();
    }

    /// Build from raw parts, normalizing and fixing signs. Mostly useful for
    /// constructing systems with known eigenfunctions.
    pub fn from_parts(eigenvalues: Vec<f64>, eigenfunctions: DMatrix<f64>, dt: f64) -> Result<Self> {
        if eigenvalues.len() != eigenfunctions.ncols() {
            return Err(Error::domain("eigenvalue and eigenfunction counts differ"));
        }
        if !(dt > 0.0) {
            return Err(Error::domain("time step must be positive"));
        }
        Ok(Self {
            eigenvalues,
            eigenfunctions,
            dt,
        })
    }
}

/// Eigenpairs of Δt·K, keeping the `max_components` largest eigenvalues.
pub fn eigen_decompose(kernel: &Kernel, max_components: usize) -> Result<EigenSystem> {
    let t = kernel.size();
    if max_components == 0 || max_components > t {
        return Err(Error::domain(format!(
            "requested {max_components} components from a kernel of size {t}"
        )));
    }
    let dt = kernel.dt();
    let eig = SymmetricEigen::new(kernel.values() * dt);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(max_components);

    let scale = 1.0 / dt.sqrt();
    let mut functions = DMatrix::<f64>::zeros(t, max_components);
    let mut values = Vec::with_capacity(max_components);
    for (c, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let v = eig.eigenvectors.column(src);
        let sign = if v[v.iamax()] < 0.0 { -scale } else { scale };
        functions.set_column(c, &(v * sign));
    }
    Ok(EigenSystem {
        eigenvalues: values,
        eigenfunctions: functions,
        dt,
    })
}

/// Smallest R whose leading positive eigenvalues explain at least `fve` of
/// the positive total, floored at 2 and capped at the number of stored
/// components.
pub fn select_truncation(eigs: &EigenSystem, fve: f64) -> Result<usize> {
    if !(fve > 0.0 && fve <= 1.0) {
        return Err(Error::domain(format!("fve must lie in (0, 1], got {fve}")));
    }
    let total = positive_total(eigs);
    if !(total > 0.0) {
        return Err(Error::domain("no positive eigenvalue"));
    }
    let mut cumulative = 0.0;
    let mut r = eigs.len();
    for (i, &l) in eigs.eigenvalues.iter().enumerate() {
        cumulative += l.max(0.0);
        if cumulative / total >= fve {
            r = i + 1;
            break;
        }
    }
    Ok(r.max(2).min(eigs.len()))
}

fn positive_total(eigs: &EigenSystem) -> f64 {
    eigs.eigenvalues.iter().map(|&l| l.max(0.0)).sum()
}

/// Share of the positive eigenvalue total carried by the first `r` components.
pub fn explained_fraction(eigs: &EigenSystem, r: usize) -> f64 {
    let total = positive_total(eigs);
    let head: f64 = eigs.eigenvalues.iter().take(r).map(|&l| l.max(0.0)).sum();
    if total > 0.0 {
        head / total
    } else {
        0.0
    }
}

/// Pairing of lag-system components with plain-system components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matching {
    /// `assignment[r]` is the plain index matched to lag index `r`.
    pub assignment: Vec<usize>,
    /// |Δt⟨ψ^h_r, ψ_assignment[r]⟩|.
    pub inner_products: Vec<f64>,
    /// Plain eigenvalues in lag order.
    pub matched_eigenvalues: Vec<f64>,
}

/// Greedy matching in lag order: each lag component takes the still-free plain
/// component with the largest absolute inner product (lowest index on ties).
pub fn match_eigenpairs(lag: &EigenSystem, plain: &EigenSystem, r: usize) -> Result<Matching> {
    if lag.len() < r || plain.len() < r {
        return Err(Error::domain(format!(
            "matching {r} components needs at least {r} in each system (lag has {}, plain has {})",
            lag.len(),
            plain.len()
        )));
    }
    if lag.eigenfunctions.nrows() != plain.eigenfunctions.nrows() {
        return Err(Error::domain("eigen-systems live on different time grids"));
    }
    let dt = plain.dt;
    let gram = lag.leading(r).tr_mul(&plain.eigenfunctions) * dt;
    let mut taken = vec![false; plain.len()];
    let mut assignment = Vec::with_capacity(r);
    let mut inner_products = Vec::with_capacity(r);
    for row in 0..r {
        let mut best: Option<(usize, f64)> = None;
        for (col, free) in taken.iter().enumerate() {
            if *free {
                continue;
            }
            let v = gram[(row, col)].abs();
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((col, v));
            }
        }
        let (col, v) = best.expect("at least r free plain components");
        taken[col] = true;
        assignment.push(col);
        inner_products.push(v);
    }
    let matched_eigenvalues = assignment.iter().map(|&c| plain.eigenvalues[c]).collect();
    Ok(Matching {
        assignment,
        inner_products,
        matched_eigenvalues,
    })
}

/// ξ̂_ir = Δt Σ_j (X_i(t_j) − μ̂(t_j)) ψ_r(t_j), an N × R table.
pub fn project_scores(
    field: &FunctionalField,
    mean: &DVector<f64>,
    eigenfunctions: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if mean.len() != field.n_times() || eigenfunctions.nrows() != field.n_times() {
        return Err(Error::domain(format!(
            "projection needs curves of length {}, got mean {} and eigenfunctions {}",
            field.n_times(),
            mean.len(),
            eigenfunctions.nrows()
        )));
    }
    Ok(project_centered(&centered(field, mean), eigenfunctions, field.dt()))
}

pub(crate) fn project_centered(x: &DMatrix<f64>, eigenfunctions: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    x * eigenfunctions * dt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{sample_covariance, sample_mean};
    use crate::grid::build_regular_grid;
    use crate::numerics::SeededRng;

    /// Cyclic Jacobi rotations; slow but independent of the library solver.
    fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        d.sort_by(|x, y| y.total_cmp(x));
        d
    }

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = SeededRng::new(seed, 0);
        let m = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
        (&m + m.transpose()) * 0.5
    }

    fn system(values: &[f64], functions: DMatrix<f64>, dt: f64) -> EigenSystem {
        EigenSystem::from_parts(values.to_vec(), functions, dt).unwrap()
    }

    #[test]
    fn zero_kernel() {
        let k = Kernel::new(DMatrix::zeros(5, 5), 0.2).unwrap();
        let e = eigen_decompose(&k, 5).unwrap();
        assert!(e.eigenvalues().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn rank_one_kernel() {
        let t = 10;
        let dt = 1.0 / t as f64;
        let psi = DVector::from_fn(t, |j, _| 2f64.sqrt() * (std::f64::consts::PI * (j as f64 + 0.5) * dt).cos());
        assert!((psi.norm_squared() * dt - 1.0).abs() < 1e-12);
        let k = Kernel::new(&psi * psi.transpose(), dt).unwrap();
        let e = eigen_decompose(&k, 3).unwrap();
        assert!((e.eigenvalues()[0] - 1.0).abs() < 1e-12);
        let inner = (e.eigenfunction(0).dot(&psi) * dt).abs();
        assert!((inner - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_jacobi_oracle() {
        let a = random_symmetric(8, 1);
        let dt = 0.125;
        let e = eigen_decompose(&Kernel::new(a.clone(), dt).unwrap(), 8).unwrap();
        let oracle = jacobi_eigenvalues(a.clone() * dt);
        for (x, y) in e.eigenvalues().iter().zip(oracle) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        for r in 0..8 {
            let psi = e.eigenfunction(r);
            let resid = (&a * psi * dt - psi * e.eigenvalues()[r]).norm();
            assert!(resid <= 1e-8 * (e.eigenvalues()[0].abs() + 1.0));
            for s in 0..8 {
                let ip = psi.dot(&e.eigenfunction(s)) * dt;
                let target = if r == s { 1.0 } else { 0.0 };
                assert!((ip - target).abs() < 1e-8);
            }
            let big = psi.iamax();
            assert!(psi[big] > 0.0);
        }
        let sum: f64 = e.eigenvalues().iter().sum();
        assert!((sum - dt * a.trace()).abs() <= 1e-10 * (dt * a.trace()).abs().max(1.0));
        assert!(e.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn truncation_cases() {
        let f = DMatrix::identity(4, 4);
        let e = system(&[4.0, 3.0, 2.0, 1.0], f.clone(), 1.0);
        assert_eq!(select_truncation(&e, 0.8).unwrap(), 3);
        assert_eq!(select_truncation(&e, 1.0).unwrap(), 4);
        assert_eq!(select_truncation(&e, 0.1).unwrap(), 2);
        assert!((explained_fraction(&e, 3) - 0.9).abs() < 1e-15);

        let neg = system(&[4.0, 3.0, -1.0, -2.0], f.clone(), 1.0);
        assert_eq!(select_truncation(&neg, 1.0).unwrap(), 2);
        let floor = system(&[5.0, 5e-12], DMatrix::identity(2, 2), 1.0);
        assert_eq!(select_truncation(&floor, 0.5).unwrap(), 2);

        let none = system(&[0.0, -1.0], DMatrix::identity(2, 2), 1.0);
        assert!(select_truncation(&none, 0.5).is_err());
        assert!(select_truncation(&e, 0.0).is_err());
        assert!(select_truncation(&e, 1.5).is_err());

        let mut last = 0;
        for i in 1..=100 {
            let r = select_truncation(&e, i as f64 / 100.0).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    fn orthonormal_pair(t: usize) -> (DMatrix<f64>, f64) {
        let dt = 1.0 / t as f64;
        let m = DMatrix::from_fn(t, 3, |j, r| {
            let x = (j as f64 + 0.5) * dt;
            2f64.sqrt() * (std::f64::consts::PI * (r + 1) as f64 * x).cos()
        });
        (m, dt)
    }

    #[test]
    fn matching_cases() {
        let (m, dt) = orthonormal_pair(20);
        let a = system(&[3.0, 2.0, 1.0], m.clone(), dt);
        let self_match = match_eigenpairs(&a, &a, 3).unwrap();
        assert_eq!(self_match.assignment, vec![0, 1, 2]);
        assert!(self_match.inner_products.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let mut swapped = m.clone();
        swapped.swap_columns(0, 1);
        let b = system(&[5.0, 4.0, 1.0], swapped, dt);
        let got = match_eigenpairs(&a, &b, 2).unwrap();
        assert_eq!(got.assignment, vec![1, 0]);
        assert_eq!(got.matched_eigenvalues, vec![4.0, 5.0]);

        let mut flipped = a.clone();
        flipped.flip(0);
        flipped.flip(2);
        let got = match_eigenpairs(&a, &flipped, 3).unwrap();
        assert_eq!(got.assignment, vec![0, 1, 2]);
        assert!(got.inner_products.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // both lag components prefer plain 0; the second falls back
        let (m, dt) = orthonormal_pair(20);
        let mixed = DMatrix::from_fn(20, 2, |j, r| {
            let w = if r == 0 { 0.9f64 } else { 0.8 };
            w * m[(j, 0)] + (1.0 - w * w).sqrt() * m[(j, 1 + r)]
        });
        let lag = system(&[2.0, 1.0], mixed, dt);
        let got = match_eigenpairs(&lag, &a, 2).unwrap();
        assert_eq!(got.assignment[0], 0);
        assert_ne!(got.assignment[1], 0);

        assert!(match_eigenpairs(&a, &a, 4).is_err());
    }

    #[test]
    fn scores_cases() {
        let t = 16;
        let (m, dt) = orthonormal_pair(t);
        let grid = build_regular_grid(4, 1, 1.0).unwrap();
        let times = (0..t).map(|j| (j as f64 + 0.5) * dt).collect();
        let c = [1.5, -0.5, -2.0, 1.0];
        let base = |j: usize| 3.0 + j as f64 * 0.1;
        let values = DMatrix::from_fn(4, t, |i, j| base(j) + c[i] * m[(j, 0)]);
        let f = FunctionalField::new(grid, times, values).unwrap();
        let mu = sample_mean(&f);
        let s = project_scores(&f, &mu, &m).unwrap();
        for i in 0..4 {
            assert!((s[(i, 0)] - c[i]).abs() < 1e-12);
            assert!(s[(i, 1)].abs() < 1e-12 && s[(i, 2)].abs() < 1e-12);
        }
        let neg = project_scores(&f, &mu, &(-&m)).unwrap();
        assert!((neg + &s).amax() < 1e-15);
        assert!(project_scores(&f, &mu, &m.rows(0, 5).into_owned()).is_err());
    }

    #[test]
    fn karhunen_loeve_reconstruction() {
        let t = 30;
        let (m, dt) = orthonormal_pair(t);
        let grid = build_regular_grid(5, 5, 1.0).unwrap();
        let times = (0..t).map(|j| (j as f64 + 0.5) * dt).collect();
        let mut rng = SeededRng::new(4, 0);
        let scores = DMatrix::from_fn(25, 3, |_, r| rng.standard_normal() / (r + 1) as f64);
        let mean = DVector::from_fn(t, |j, _| 3.0 + 2.0 * ((j as f64 + 0.5) * dt).powi(2));
        let mut values = &scores * m.transpose();
        for mut row in values.row_iter_mut() {
            row += mean.transpose();
        }
        let f = FunctionalField::new(grid, times, values).unwrap();
        let c = sample_covariance(&f).unwrap();
        let e = eigen_decompose(&c, t).unwrap();
        let top = e.eigenvalues()[0];
        let keep = e.eigenvalues().iter().take_while(|&&l| l > 1e-10 * top).count();
        assert_eq!(keep, 3);
        let mu = sample_mean(&f);
        let psi = e.leading(keep);
        let xi = project_scores(&f, &mu, &psi).unwrap();
        let mut rebuilt = &xi * psi.transpose();
        for mut row in rebuilt.row_iter_mut() {
            row += mu.transpose();
        }
        let err = (&rebuilt - f.values()).amax() / f.values().amax();
        assert!(err < 1e-6, "{err}");
    }
}
