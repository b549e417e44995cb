use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Periodic Hann window, `w[k] = 0.5 (1 - cos(2πk/n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect())
}
