//! Closed-form scale of the Pearson-loss gradient as a function of its
//! exponent, `h(gamma, C) = gamma (1 - C)^(gamma - 1)`.

use crate::error::{DdclError, Result};

fn check_c_bar(c_bar: f64, lo: f64) -> Result<()> {
    if !(c_bar >= lo && c_bar <= 1.0) {
        return Err(DdclError::Numeric(format!(
            "mean correlation {c_bar} outside [{lo}, 1]"
        )));
    }
    Ok(())
}

pub fn h_gamma(gamma: f64, c_bar: f64) -> Result<f64> {
    check_c_bar(c_bar, -1.0)?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DdclError::config("gamma", "must be positive and finite"));
    }
    if c_bar == 1.0 && gamma < 1.0 {
        return Err(DdclError::Numeric(
            "h diverges at C = 1 for gamma < 1".into(),
        ));
    }
    Ok(gamma * (1.0 - c_bar).powf(gamma - 1.0))
}

/// `dh/dgamma = [1 + gamma ln(1 - C)] (1 - C)^(gamma - 1)`.
pub fn h_gamma_derivative(gamma: f64, c_bar: f64) -> Result<f64> {
    check_c_bar(c_bar, -1.0)?;
    if c_bar == 1.0 {
        return Err(DdclError::Numeric("ln(1 - C) undefined at C = 1".into()));
    }
    let p = 1.0 - c_bar;
    Ok((1.0 + gamma * p.ln()) * p.powf(gamma - 1.0))
}

/// `-1 / ln(1 - C)`: below it `h` increases with gamma, above it `h` decreases.
/// Returns `+inf` at `C = 0`.
pub fn stability_threshold(c_bar: f64) -> Result<f64> {
    check_c_bar(c_bar, 0.0)?;
    if c_bar == 1.0 {
        return Err(DdclError::Numeric("threshold undefined at C = 1".into()));
    }
    if c_bar == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-1.0 / (1.0 - c_bar).ln())
}
