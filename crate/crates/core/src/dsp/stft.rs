use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{hann_window, AudioClip, StftParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One-sided complex STFT, `frames × bins`, row-major, with phase referenced
/// to the center of each analysis window.
#[derive(Debug, Clone, PartialEq)]
pub struct Stft {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl Stft {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    /// Zero-phase spectrum from a nonnegative magnitude matrix.
    pub fn from_magnitude(mag: &Matrix) -> Self {
        Self {
            frames: mag.rows(),
            bins: mag.cols(),
            data: mag.as_slice().iter().map(|&m| Complex64::new(m, 0.0)).collect(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn magnitude(&self) -> Matrix {
        Matrix::from_vec(self.frames, self.bins, self.data.iter().map(|c| c.norm()).collect())
            .expect("consistent shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpectrogramMode {
    Magnitude,
    Power,
    SqrtMagnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Matrix,
    pub mode: SpectrogramMode,
    pub params: StftParams,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.cols()
    }

    /// Convert between modes through the magnitude domain.
    pub fn to_mode(&self, mode: SpectrogramMode) -> Spectrogram {
        let to_mag: fn(f64) -> f64 = match self.mode {
            SpectrogramMode::Magnitude => |v| v,
            SpectrogramMode::Power => f64::sqrt,
            SpectrogramMode::SqrtMagnitude => |v| v * v,
        };
        let from_mag: fn(f64) -> f64 = match mode {
            SpectrogramMode::Magnitude => |v| v,
            SpectrogramMode::Power => |v| v * v,
            SpectrogramMode::SqrtMagnitude => f64::sqrt,
        };
        Spectrogram {
            frames: self.frames.map(|v| from_mag(to_mag(v))),
            mode,
            params: self.params,
            sample_rate: self.sample_rate,
        }
    }
}

/// Forward/inverse plans and the analysis window for one parameter set.
pub(crate) struct StftEngine {
    params: StftParams,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub(crate) fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            params,
            window: hann_window(params.window_size)?,
            forward: planner.plan_fft_forward(params.fft_size),
            inverse: planner.plan_fft_inverse(params.fft_size),
        })
    }

    /// FFT buffer index of frame sample `n`. Frames are rotated so the window
    /// center sits at index 0, which references phase to the window center.
    #[inline]
    fn slot(&self, n: usize) -> usize {
        let half = self.params.window_size / 2;
        (n + self.params.fft_size - half) % self.params.fft_size
    }

    pub(crate) fn stft(&self, samples: &[f64]) -> Result<Stft> {
        let p = &self.params;
        if samples.len() < p.window_size {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than one window ({})",
                samples.len(),
                p.window_size
            )));
        }
        let frames = p.num_frames(samples.len());
        let bins = p.num_bins();
        let mut out = Stft::zeros(frames, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); p.fft_size];
        for t in 0..frames {
            let seg = &samples[t * p.hop_size..t * p.hop_size + p.window_size];
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for (n, (&x, &w)) in seg.iter().zip(&self.window).enumerate() {
                buf[self.slot(n)] = Complex64::new(x * w, 0.0);
            }
            self.forward.process(&mut buf);
            out.frame_mut(t).copy_from_slice(&buf[..bins]);
        }
        Ok(out)
    }

    /// Least-squares overlap-add inverse (window-square normalization).
    pub(crate) fn istft(&self, spec: &Stft) -> Result<Vec<f64>> {
        let p = &self.params;
        if spec.num_bins() != p.num_bins() {
            return Err(Error::shape(
                "istft_ola",
                &[spec.num_frames(), spec.num_bins()],
                &[spec.num_frames(), p.num_bins()],
            ));
        }
        let len = p.signal_len(spec.num_frames());
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); p.fft_size];
        let n = p.fft_size;
        let scale = 1.0 / n as f64;
        for t in 0..spec.num_frames() {
            let frame = spec.frame(t);
            buf[..frame.len()].copy_from_slice(frame);
            for k in 1..n / 2 {
                buf[n - k] = frame[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * p.hop_size;
            for k in 0..p.window_size {
                let w = self.window[k];
                out[start + k] += w * buf[self.slot(k)].re * scale;
                norm[start + k] += w * w;
            }
        }
        for (o, &d) in out.iter_mut().zip(&norm) {
            *o = if d > 1e-10 { *o / d } else { 0.0 };
        }
        Ok(out)
    }
}

/// Per-sample gain that caps the overlap-add normalization at half its peak.
///
/// Samples near the ends of a signal are covered by a single frame whose
/// window is close to zero, so the least-squares inverse divides by a tiny
/// number there. Multiplying an inverted signal by this envelope replaces the
/// denominator `Σw²` with `max(Σw², peak/2)`; interior samples are untouched
/// for Hann windows at 50% or 75% overlap.
pub fn edge_taper(params: StftParams, frames: usize) -> Result<Vec<f64>> {
    params.validate()?;
    let w = hann_window(params.window_size)?;
    let len = params.signal_len(frames);
    let mut norm = vec![0.0; len];
    for t in 0..frames {
        for (k, wv) in w.iter().enumerate() {
            norm[t * params.hop_size + k] += wv * wv;
        }
    }
    let floor = 0.5 * norm.iter().copied().fold(0.0, f64::max);
    Ok(norm.iter().map(|&d| if d >= floor { 1.0 } else { d / floor }).collect())
}

pub fn stft(clip: &AudioClip, params: StftParams) -> Result<Stft> {
    StftEngine::new(params)?.stft(&clip.samples)
}

pub fn spectrogram_of(clip: &AudioClip, params: StftParams, mode: SpectrogramMode) -> Result<Spectrogram> {
    let spec = stft(clip, params)?;
    let mag = spec.magnitude();
    let frames = match mode {
        SpectrogramMode::Magnitude => mag,
        SpectrogramMode::Power => mag.map(|m| m * m),
        SpectrogramMode::SqrtMagnitude => mag.map(f64::sqrt),
    };
    Ok(Spectrogram {
        frames,
        mode,
        params,
        sample_rate: clip.sample_rate,
    })
}

pub fn istft_ola(spec: &Stft, params: StftParams, sample_rate: u32) -> Result<AudioClip> {
    let samples = StftEngine::new(params)?.istft(spec)?;
    AudioClip::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 8000).unwrap()
    }

    #[test]
    fn zero_clip_gives_zero_stft_and_spectrograms() {
        let c = clip(vec![0.0; 1024]);
        let s = stft(&c, StftParams::default()).unwrap();
        assert!(s.as_slice().iter().all(|z| z.norm() == 0.0));
        for mode in [
            SpectrogramMode::Magnitude,
            SpectrogramMode::Power,
            SpectrogramMode::SqrtMagnitude,
        ] {
            let sp = spectrogram_of(&c, StftParams::default(), mode).unwrap();
            assert!(sp.frames.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frame_count_and_bins() {
        let p = StftParams::default();
        let s = stft(&clip(vec![0.1; 1000]), p).unwrap();
        assert_eq!(s.num_bins(), 129);
        assert_eq!(s.num_frames(), (1000 - 256) / 128 + 1);
        assert!(stft(&clip(vec![0.0; 255]), p).is_err());
    }

    #[test]
    fn bin_center_sinusoid_peaks_at_its_bin() {
        let p = StftParams::default();
        let k = 19;
        let f = k as f64 * 8000.0 / p.fft_size as f64;
        let x: Vec<f64> = (0..4000).map(|n| (2.0 * PI * f * n as f64 / 8000.0).sin()).collect();
        let s = stft(&clip(x.clone()), p).unwrap();
        // Direct DFT of frame 3 as oracle.
        let w = hann_window(p.window_size).unwrap();
        let seg = &x[3 * p.hop_size..3 * p.hop_size + p.window_size];
        let dft: Vec<f64> = (0..p.num_bins())
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, (&v, &wv)) in seg.iter().zip(&w).enumerate() {
                    let ang = -2.0 * PI * (b * n) as f64 / p.fft_size as f64;
                    re += v * wv * ang.cos();
                    im += v * wv * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        for (b, z) in s.frame(3).iter().enumerate() {
            assert!((z.norm() - dft[b]).abs() < 1e-9);
        }
        for t in 0..s.num_frames() {
            let argmax = s
                .frame(t)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .unwrap()
                .0;
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn impulse_support_with_disjoint_frames() {
        let p = StftParams {
            hop_size: 256,
            ..StftParams::default()
        };
        for pos in [0usize, 5, 128] {
            let mut x = vec![0.0; 1024];
            x[pos] = 1.0;
            let s = stft(&clip(x), p).unwrap();
            for t in 1..s.num_frames() {
                assert!(s.frame(t).iter().all(|z| z.norm() == 0.0));
            }
            // w[0] = 0 so sample 0 vanishes; interior samples survive.
            let e0: f64 = s.frame(0).iter().map(|z| z.norm_sqr()).sum();
            assert_eq!(e0 > 0.0, pos != 0);
        }
    }

    #[test]
    fn power_is_magnitude_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = clip((0..2000).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = StftParams::default();
        let mag = spectrogram_of(&c, p, SpectrogramMode::Magnitude).unwrap();
        let pow = spectrogram_of(&c, p, SpectrogramMode::Power).unwrap();
        for (m, q) in mag.frames.as_slice().iter().zip(pow.frames.as_slice()) {
            assert!((m * m - q).abs() <= 1e-12 * q.abs().max(1e-300));
        }
    }

    #[test]
    fn round_trip_interior_and_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = StftParams::default();
        let s = stft(&clip(x.clone()), p).unwrap();
        let y = istft_ola(&s, p, 8000).unwrap();
        assert!(x.len() - y.len() < p.window_size);
        for n in p.window_size..x.len() - p.window_size {
            assert!((x[n] - y.samples[n]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_spectrum_inverts_to_silence() {
        let p = StftParams::default();
        let y = istft_ola(&Stft::zeros(10, 129), p, 8000).unwrap();
        assert_eq!(y.len(), 9 * 128 + 256);
        assert!(y.samples.iter().all(|&v| v == 0.0));
        assert!(istft_ola(&Stft::zeros(10, 100), p, 8000).is_err());
    }

    #[test]
    fn checked_params_enforce_overlap() {
        assert!(StftParams::new(256, 256, 128).is_ok());
        assert!(StftParams::new(256, 256, 64).is_ok());
        assert!(StftParams::new(256, 256, 256).is_err());
        assert!(StftParams::new(256, 512, 128).is_err());
    }
}
