use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares line through `(ln x, ln y)`: `ln y ≈ log_intercept + exponent · ln x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub log_intercept: f64,
    pub r_squared: f64,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.log_intercept + self.exponent * x.ln()).exp()
    }
}

pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<PowerLawFit> {
    if let Some(bad) = xs.iter().chain(ys).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "power-law fit requires strictly positive finite values, got {bad}"
        )));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_line(&lx, &ly)
}

/// Ordinary least squares `y ≈ log_intercept + exponent · x` on raw values.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<PowerLawFit> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "fit needs at least 3 points, got {}",
            xs.len()
        )));
    }
    if let Some(bad) = xs.iter().chain(ys).find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("fit requires finite values, got {bad}")));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("fit needs at least two distinct xs".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let exponent = sxy / sxx;
    let log_intercept = my - exponent * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - log_intercept - exponent * x).powi(2))
        .sum();
    // A constant series is fitted perfectly by a flat line.
    let r_squared = if syy <= f64::EPSILON * f64::EPSILON * n {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(PowerLawFit {
        exponent,
        log_intercept,
        r_squared,
    })
}
