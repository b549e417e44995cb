use rustfft::num_complex::Complex64;

use super::stft::{SpectrogramMode, StftEngine};
use super::{AudioClip, Spectrogram, Stft, StftParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// `errors[i]` is the consistency error after iteration `i + 1`.
    pub errors: Vec<f64>,
    /// Two-sided norm of the target magnitude.
    pub target_norm: f64,
}

impl GriffinLimOutput {
    /// Consistency errors divided by the target norm (zero for a silent target).
    pub fn relative_errors(&self) -> Vec<f64> {
        self.errors
            .iter()
            .map(|e| {
                if self.target_norm > 0.0 {
                    e / self.target_norm
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Phase recovery from a magnitude spectrogram, starting from zero phase.
///
/// The consistency error is the Frobenius distance between `|STFT(x_i)|` and the
/// target over the full two-sided spectrum, i.e. interior bins count twice. In
/// that norm the overlap-add inverse is the exact least-squares inverse, so the
/// sequence is non-increasing.
pub fn griffin_lim(mag: &Spectrogram, params: StftParams, iterations: usize) -> Result<GriffinLimOutput> {
    if iterations == 0 {
        return Err(Error::invalid("griffin-lim needs at least one iteration"));
    }
    if mag.mode != SpectrogramMode::Magnitude {
        return Err(Error::invalid("griffin-lim expects a magnitude spectrogram"));
    }
    if let Some(v) = mag.frames.as_slice().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("negative magnitude entry {v}")));
    }
    if mag.num_bins() != params.num_bins() {
        return Err(Error::shape(
            "griffin_lim",
            &mag.frames.shape(),
            &[mag.num_frames(), params.num_bins()],
        ));
    }
    let engine = StftEngine::new(params)?;
    let target = &mag.frames;

    if mag.num_frames() == 0 {
        return Ok(GriffinLimOutput {
            clip: AudioClip::new(Vec::new(), mag.sample_rate)?,
            errors: vec![0.0; iterations],
            target_norm: 0.0,
        });
    }

    let mut x = engine.istft(&Stft::from_magnitude(target))?;
    let mut errors = Vec::with_capacity(iterations);
    let mut spec = engine.stft(&x)?;
    for _ in 0..iterations {
        project_onto_magnitude(&mut spec, target);
        x = engine.istft(&spec)?;
        spec = engine.stft(&x)?;
        errors.push(consistency_error(&spec, target));
    }
    Ok(GriffinLimOutput {
        clip: AudioClip::new(x, mag.sample_rate)?,
        errors,
        target_norm: two_sided_norm(target),
    })
}

fn project_onto_magnitude(spec: &mut Stft, target: &Matrix) {
    for (z, &m) in spec.as_mut_slice().iter_mut().zip(target.as_slice()) {
        let n = z.norm();
        *z = if n > 0.0 { *z * (m / n) } else { Complex64::new(m, 0.0) };
    }
}

pub(crate) fn consistency_error(spec: &Stft, target: &Matrix) -> f64 {
    let bins = spec.num_bins();
    let mut acc = 0.0;
    for t in 0..spec.num_frames() {
        for (k, (z, &m)) in spec.frame(t).iter().zip(target.row(t)).enumerate() {
            let d = z.norm() - m;
            let w = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            acc += w * d * d;
        }
    }
    acc.sqrt()
}

/// Frobenius norm of a magnitude matrix under the same two-sided weighting.
pub(crate) fn two_sided_norm(mag: &Matrix) -> f64 {
    let bins = mag.cols();
    let mut acc = 0.0;
    for t in 0..mag.rows() {
        for (k, &m) in mag.row(t).iter().enumerate() {
            let w = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            acc += w * m * m;
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::spectrogram_of;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let p = StftParams::default();
        let mag = Spectrogram {
            frames: Matrix::zeros(12, 129),
            mode: SpectrogramMode::Magnitude,
            params: p,
            sample_rate: 8000,
        };
        for iters in [1, 4] {
            let out = griffin_lim(&mag, p, iters).unwrap();
            assert!(out.clip.samples.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn errors_non_increasing_on_true_magnitude() {
        let p = StftParams::default();
        let mag = spectrogram_of(&noise(5, 4000), p, SpectrogramMode::Magnitude).unwrap();
        let out = griffin_lim(&mag, p, 16).unwrap();
        for w in out.errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", out.errors);
        }
        let one = griffin_lim(&mag, p, 1).unwrap();
        assert_eq!(one.errors[0], out.errors[0]);
        assert!(out.errors[15] <= one.errors[0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = StftParams::default();
        let mut frames = Matrix::zeros(4, 129);
        frames.set(1, 1, -1.0);
        let mag = Spectrogram {
            frames,
            mode: SpectrogramMode::Magnitude,
            params: p,
            sample_rate: 8000,
        };
        assert!(griffin_lim(&mag, p, 16).is_err());
        let ok = Spectrogram {
            frames: Matrix::zeros(4, 129),
            ..mag
        };
        assert!(griffin_lim(&ok, p, 0).is_err());
    }
}
