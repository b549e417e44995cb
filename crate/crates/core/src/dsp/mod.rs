//! Non-learned signal processing: windows, STFT/ISTFT, spectrograms,
//! Griffin-Lim phase recovery, cross-correlation and the WAV codec.

mod griffin_lim;
mod ncc;
mod stft;
mod wav;
mod window;

pub use griffin_lim::{griffin_lim, GriffinLimOutput};
pub use ncc::normalized_cross_correlation;
pub use stft::{edge_taper, istft_ola, spectrogram_of, stft, Spectrogram, SpectrogramMode, Stft};
pub use wav::{wav_decode, wav_encode, wav_read, wav_write};
pub use window::hann_window;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Mono time-domain signal with amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StftParams {
    pub fft_size: usize,
    pub window_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            fft_size: 256,
            window_size: 256,
            hop_size: 128,
            window: WindowKind::Hann,
        }
    }
}

impl StftParams {
    /// Checked constructor; the hop must give between 25% and 75% overlap.
    pub fn new(fft_size: usize, window_size: usize, hop_size: usize) -> Result<Self> {
        let p = Self {
            fft_size,
            window_size,
            hop_size,
            window: WindowKind::Hann,
        };
        p.validate()?;
        let overlap = p.overlap();
        if !(0.25 - 1e-12..=0.75 + 1e-12).contains(&overlap) {
            return Err(Error::invalid(format!(
                "overlap {:.1}% outside [25%, 75%]",
                overlap * 100.0
            )));
        }
        Ok(p)
    }

    /// Structural checks only (used by every transform).
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.fft_size == 0 {
            return Err(Error::invalid("window and fft sizes must be positive"));
        }
        if self.window_size > self.fft_size {
            return Err(Error::invalid(format!(
                "window {} larger than fft size {}",
                self.window_size, self.fft_size
            )));
        }
        if !self.fft_size.is_multiple_of(2) {
            return Err(Error::invalid("fft size must be even"));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::invalid(format!(
                "hop {} must be in 1..={}",
                self.hop_size, self.window_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn overlap(&self) -> f64 {
        1.0 - self.hop_size as f64 / self.window_size as f64
    }

    /// Frames produced for a signal of `len` samples; tail frames past the end are dropped.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_size {
            0
        } else {
            (len - self.window_size) / self.hop_size + 1
        }
    }

    /// Signal length produced by inverting `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_size + self.window_size
        }
    }
}
