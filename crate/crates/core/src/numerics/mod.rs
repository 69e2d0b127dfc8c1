//! Special functions and random-number infrastructure.

mod bessel;
mod gamma;
mod rng;

pub use bessel::bessel_k;
pub use gamma::{chi_squared_sf, ln_gamma, regularized_gamma_lower, regularized_gamma_upper};
pub use rng::SeededRng;
