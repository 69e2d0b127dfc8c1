//! Modified Bessel function of the second kind, K_ν(x), for real order.
//!
//! The order is reduced to ν = n + μ with |μ| ≤ ½. K_μ and K_{μ+1} come from
//! Temme's series when x ≤ 2 and from Steed's continued fraction (CF2) when
//! x > 2; forward recurrence, which is stable for K, then lifts the order to ν.
//! Half-integer orders use the elementary closed form.

use std::f64::consts::PI;

use super::gamma::reciprocal_gamma_parts;
use crate::error::{Error, Result};

const MAX_ITER: usize = 100_000;
const SERIES_LIMIT: f64 = 2.0;

/// K_ν(x) for real ν and x > 0. The order enters only through |ν|.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    if !nu.is_finite() {
        return Err(Error::domain(format!("bessel_k order must be finite, got {nu}")));
    }
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!(
            "bessel_k requires a finite argument x > 0, got {x}"
        )));
    }
    let nu = nu.abs();
    let n = (nu + 0.5).floor();
    let mu = nu - n;
    let steps = n as usize;

    let (mut k_mu, mut k_mu1) = if mu == -0.5 {
        half_integer_start(x)
    } else if x <= SERIES_LIMIT {
        temme_series(mu, x)?
    } else {
        steed_fraction(mu, x)?
    };

    let two_over_x = 2.0 / x;
    for i in 1..=steps {
        let next = (mu + i as f64) * two_over_x * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
    }
    Ok(k_mu)
}

/// (K_{-1/2}(x), K_{1/2}(x)); both equal √(π/2x)·e^{−x}.
fn half_integer_start(x: f64) -> (f64, f64) {
    let k = (PI / (2.0 * x)).sqrt() * (-x).exp();
    (k, k)
}

/// (K_μ(x), K_{μ+1}(x)) for |μ| ≤ ½ and 0 < x ≤ 2.
fn temme_series(mu: f64, x: f64) -> Result<(f64, f64)> {
    let half_x = 0.5 * x;
    let pi_mu = PI * mu;
    let fact = if pi_mu.abs() < f64::EPSILON {
        1.0
    } else {
        pi_mu / pi_mu.sin()
    };
    let d = -half_x.ln();
    let e = mu * d;
    let fact2 = if e.abs() < f64::EPSILON { 1.0 } else { e.sinh() / e };
    let (gamma1, gamma2, rg_plus, rg_minus) = reciprocal_gamma_parts(mu);

    let mut ff = fact * (gamma1 * e.cosh() + gamma2 * fact2 * d);
    let mut sum = ff;
    let e = e.exp();
    let mut p = 0.5 * e / rg_plus;
    let mut q = 0.5 / (e * rg_minus);
    let mut c = 1.0;
    let dd = half_x * half_x;
    let mut sum1 = p;
    for i in 1..MAX_ITER {
        let i = i as f64;
        ff = (i * ff + p + q) / (i * i - mu * mu);
        c *= dd / i;
        p /= i - mu;
        q /= i + mu;
        let del = c * ff;
        sum += del;
        let del1 = c * (p - i * ff);
        sum1 += del1;
        if del.abs() < sum.abs() * f64::EPSILON {
            return Ok((sum, sum1 * 2.0 / x));
        }
    }
    Err(Error::domain(format!(
        "bessel_k series did not converge for mu={mu}, x={x}"
    )))
}

/// (K_μ(x), K_{μ+1}(x)) for |μ| ≤ ½ and x > 2 (Steed's algorithm).
fn steed_fraction(mu: f64, x: f64) -> Result<(f64, f64)> {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25 - mu * mu;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            let h = a1 * h;
            let k_mu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
            let k_mu1 = k_mu * (mu + x + 0.5 - h) / x;
            return Ok((k_mu, k_mu1));
        }
    }
    Err(Error::domain(format!(
        "bessel_k continued fraction did not converge for mu={mu}, x={x}"
    )))
}
