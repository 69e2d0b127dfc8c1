//! Log-gamma, regularized incomplete gamma and the χ² survival function.

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the log-gamma recurrence shifts upward before applying
/// the Stirling series.
const STIRLING_MIN: f64 = 10.0;

/// B_{2k} / (2k (2k-1)) for k = 1..7.
const STIRLING_COEFFS: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
];

/// Taylor coefficients c_k of 1/Γ(z) = Σ_{k≥1} c_k z^k.
const RGAMMA_TAYLOR: [f64; 28] = [
    1.00000000000000000e+00,
    5.77215664901532866e-01,
    -6.55878071520253902e-01,
    -4.20026350340952370e-02,
    1.66538611382291479e-01,
    -4.21977345555443334e-02,
    -9.62197152787697303e-03,
    7.21894324666309990e-03,
    -1.16516759185906517e-03,
    -2.15241674114950975e-04,
    1.28050282388116196e-04,
    -2.01348547807882387e-05,
    -1.25049348214267063e-06,
    1.13302723198169593e-06,
    -2.05633841697760707e-07,
    6.11609510448141609e-09,
    5.00200764446922295e-09,
    -1.18127457048702004e-09,
    1.04342671169110054e-10,
    7.78226343990507081e-12,
    -3.69680561864220598e-12,
    5.10037028745447575e-13,
    -2.05832605356650664e-14,
    -5.34812253942301782e-15,
    1.22677862823826084e-15,
    -1.18125930169745883e-16,
    1.18669225475160037e-18,
    1.41238065531803186e-18,
];

const MAX_ITER: usize = 10_000;

/// The correction term of the Stirling series, ln Γ(x) − [(x−½)ln x − x + ln√(2π)].
pub(crate) fn stirling_tail(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut acc = 0.0;
    for c in STIRLING_COEFFS.iter().rev() {
        acc = acc * inv2 + c;
    }
    acc * inv
}

/// Natural logarithm of Γ(x) for finite x > 0.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::domain(format!(
            "ln_gamma requires a finite positive argument, got {x}"
        )));
    }
    // Γ(x) = Γ(x + n) / (x (x+1) ... (x+n-1))
    let mut shifted = x;
    let mut product = 1.0;
    while shifted < STIRLING_MIN {
        product *= shifted;
        shifted += 1.0;
    }
    let stirling = (shifted - 0.5) * shifted.ln() - shifted + LN_SQRT_2PI + stirling_tail(shifted);
    Ok(stirling - product.ln())
}

/// Returns (γ₁(u), γ₂(u), 1/Γ(1+u), 1/Γ(1−u)) for |u| ≤ ½, where
/// γ₁ = [1/Γ(1−u) − 1/Γ(1+u)] / (2u) and γ₂ = [1/Γ(1−u) + 1/Γ(1+u)] / 2.
///
/// Both are evaluated from the even/odd parts of the 1/Γ Taylor series so
/// there is no cancellation near u = 0.
pub(crate) fn reciprocal_gamma_parts(u: f64) -> (f64, f64, f64, f64) {
    debug_assert!(u.abs() <= 0.5 + 1e-12);
    // 1/Γ(1+z) = Σ_{k≥1} c_k z^{k-1}
    let u2 = u * u;
    let mut odd_sum = 0.0; // Σ_{k odd} c_k u^{k-1}  (even powers of u)
    let mut even_sum = 0.0; // Σ_{k even} c_k u^{k-2}
    for pair in RGAMMA_TAYLOR.chunks(2).rev() {
        odd_sum = odd_sum * u2 + pair[0];
        even_sum = even_sum * u2 + pair[1];
    }
    let gamma1 = -even_sum;
    let gamma2 = odd_sum;
    let rg_plus = odd_sum + u * even_sum;
    let rg_minus = odd_sum - u * even_sum;
    (gamma1, gamma2, rg_plus, rg_minus)
}

fn check_incomplete_args(s: f64, x: f64) -> Result<()> {
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::domain(format!(
            "incomplete gamma requires finite s > 0, got {s}"
        )));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(format!(
            "incomplete gamma requires x >= 0, got {x}"
        )));
    }
    Ok(())
}

/// exp(−x + s ln x − ln Γ(s)), the common prefactor of both expansions.
fn incomplete_prefactor(s: f64, x: f64) -> Result<f64> {
    Ok((-x + s * x.ln() - ln_gamma(s)?).exp())
}

/// Series Σ xⁿ / (s (s+1) ... (s+n)) for P(s, x), valid for x < s + 1.
fn lower_series(s: f64, x: f64) -> Result<f64> {
    let mut term = 1.0 / s;
    let mut sum = term;
    let mut denom = s;
    for _ in 0..MAX_ITER {
        denom += 1.0;
        term *= x / denom;
        sum += term;
        if term.abs() < sum.abs() * f64::EPSILON {
            return Ok(sum * incomplete_prefactor(s, x)?);
        }
    }
    Err(Error::domain(format!(
        "incomplete gamma series did not converge for s={s}, x={x}"
    )))
}

/// Modified Lentz continued fraction for Q(s, x), valid for x ≥ s + 1.
fn upper_fraction(s: f64, x: f64) -> Result<f64> {
    let tiny = 1e-300;
    let mut b = x + 1.0 - s;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let i = i as f64;
        let an = -i * (i - s);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < f64::EPSILON {
            return Ok(h * incomplete_prefactor(s, x)?);
        }
    }
    Err(Error::domain(format!(
        "incomplete gamma continued fraction did not converge for s={s}, x={x}"
    )))
}

/// Regularized lower incomplete gamma P(s, x) = γ(s, x) / Γ(s).
pub fn regularized_gamma_lower(s: f64, x: f64) -> Result<f64> {
    check_incomplete_args(s, x)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let p = if x < s + 1.0 {
        lower_series(s, x)?
    } else {
        1.0 - upper_fraction(s, x)?
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Regularized upper incomplete gamma Q(s, x) = 1 − P(s, x).
pub fn regularized_gamma_upper(s: f64, x: f64) -> Result<f64> {
    check_incomplete_args(s, x)?;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    let q = if x < s + 1.0 {
        1.0 - lower_series(s, x)?
    } else {
        upper_fraction(s, x)?
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Survival function of the χ² distribution with `df` degrees of freedom.
pub fn chi_squared_sf(x: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::domain("chi-squared degrees of freedom must be >= 1"));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(format!(
            "chi-squared statistic must be >= 0, got {x}"
        )));
    }
    regularized_gamma_upper(df as f64 / 2.0, x / 2.0)
}
