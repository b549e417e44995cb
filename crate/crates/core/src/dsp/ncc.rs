use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::AudioClip;
use crate::error::{Error, Result};

/// Maximum over lags within ±0.5 s of the zero-mean cross-correlation,
/// normalized by the full-length energies of both (truncated) signals.
pub fn normalized_cross_correlation(a: &AudioClip, b: &AudioClip) -> Result<f64> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {}",
            a.sample_rate, b.sample_rate
        )));
    }
    let len = a.len().min(b.len());
    if len == 0 {
        return Err(Error::UndefinedCorrelation("empty signal".into()));
    }
    let x = centered(&a.samples[..len]);
    let y = centered(&b.samples[..len]);
    let ex: f64 = x.iter().map(|v| v * v).sum();
    let ey: f64 = y.iter().map(|v| v * v).sum();
    // A constant signal leaves only rounding residue after mean removal.
    let floor = 1e-24 * len as f64;
    if ex <= floor || ey <= floor {
        return Err(Error::UndefinedCorrelation(
            "zero-energy input after mean removal".into(),
        ));
    }
    let max_lag = ((a.sample_rate / 2) as usize).min(len - 1);
    let corr = cross_correlation(&x, &y);
    let n = corr.len();
    let denom = (ex * ey).sqrt();
    // corr[l] = Σ x[i] y[i + l] for l ≥ 0, and wraps to the end for negative lags.
    let mut best = f64::NEG_INFINITY;
    for lag in 0..=max_lag {
        best = best.max(corr[lag]);
        if lag > 0 {
            best = best.max(corr[n - lag]);
        }
    }
    Ok((best / denom).clamp(-1.0, 1.0))
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn cross_correlation(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = (2 * x.len()).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f64]| {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for (d, &s) in v.iter_mut().zip(s) {
            d.re = s;
        }
        v
    };
    let mut fx = pad(x);
    let mut fy = pad(y);
    fwd.process(&mut fx);
    fwd.process(&mut fy);
    let mut prod: Vec<Complex64> = fx.iter().zip(&fy).map(|(a, b)| a.conj() * b).collect();
    inv.process(&mut prod);
    prod.iter().map(|c| c.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, 8000).unwrap()
    }

    fn noise(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn self_and_scaled_copy() {
        let x = noise(1);
        let half: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        assert!((normalized_cross_correlation(&clip(x.clone()), &clip(x.clone())).unwrap() - 1.0).abs() < 1e-9);
        assert!((normalized_cross_correlation(&clip(x), &clip(half)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sin_vs_cos_peaks_near_one() {
        let f = 100.0;
        let s: Vec<f64> = (0..8000).map(|n| (2.0 * PI * f * n as f64 / 8000.0).sin()).collect();
        let c: Vec<f64> = (0..8000).map(|n| (2.0 * PI * f * n as f64 / 8000.0).cos()).collect();
        // Closed form at the quarter-period lag of 20 samples: overlap fraction (N - 20) / N.
        let expect = (8000.0 - 20.0) / 8000.0;
        let got = normalized_cross_correlation(&clip(s), &clip(c)).unwrap();
        assert!((got - expect).abs() < 2e-3, "{got} vs {expect}");
    }

    #[test]
    fn direct_lag_search_agrees() {
        let x = noise(2);
        let y = noise(3);
        let fast = normalized_cross_correlation(&clip(x.clone()), &clip(y.clone())).unwrap();
        let (xc, yc) = (centered(&x), centered(&y));
        let ex: f64 = xc.iter().map(|v| v * v).sum();
        let ey: f64 = yc.iter().map(|v| v * v).sum();
        let mut best = f64::NEG_INFINITY;
        for lag in -3999i64..=3999 {
            let mut acc = 0.0;
            for i in 0..4000i64 {
                let j = i + lag;
                if (0..4000).contains(&j) {
                    acc += xc[i as usize] * yc[j as usize];
                }
            }
            best = best.max(acc / (ex * ey).sqrt());
        }
        assert!((fast - best).abs() < 1e-9);
    }

    #[test]
    fn zero_energy_is_an_error() {
        let x = noise(4);
        let err = normalized_cross_correlation(&clip(x), &clip(vec![0.3; 4000]));
        assert!(matches!(err, Err(Error::UndefinedCorrelation(_))));
    }
}
