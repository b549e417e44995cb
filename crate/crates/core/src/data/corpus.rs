//! Procedural audio-visual corpus: one visual motif and one tonal rhythm
//! per class, with audio events placed at the instants the motif reacts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage as PngImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::DEFAULT_CLASSES;
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::dsp::{wav_write, AudioClip};
use crate::error::{Error, Result};
use crate::tensor::keyed_rng;

pub const CORPUS_SAMPLE_RATE: u32 = 8000;
pub const CORPUS_FPS: f64 = 16.0;
pub const CORPUS_SECONDS: f64 = 2.0;
pub const CORPUS_FRAME_SIZE: usize = 32;
const FFT_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motif {
    Flash,
    SlidingBar,
    Hand,
    OscillatingBar,
    Flicker,
    Steps,
    BouncingDot,
    Drops,
    Grid,
    Stripes,
}

#[derive(Debug, Clone, Copy)]
enum Envelope {
    /// Exponential decay of time constant `tau` after every event.
    Decay { tau: f64 },
    /// Sinusoidal amplitude modulation of the given depth at the event period.
    Sustained { depth: f64 },
}

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    motif: Motif,
    period: f64,
    envelope: Envelope,
}

const STYLES: [ClassStyle; 12] = [
    ClassStyle {
        motif: Motif::Flash,
        period: 0.6,
        envelope: Envelope::Decay { tau: 0.12 },
    },
    ClassStyle {
        motif: Motif::SlidingBar,
        period: 1.0,
        envelope: Envelope::Sustained { depth: 0.4 },
    },
    ClassStyle {
        motif: Motif::Hand,
        period: 0.5,
        envelope: Envelope::Decay { tau: 0.08 },
    },
    ClassStyle {
        motif: Motif::OscillatingBar,
        period: 0.4,
        envelope: Envelope::Decay { tau: 0.07 },
    },
    ClassStyle {
        motif: Motif::Flicker,
        period: 0.3,
        envelope: Envelope::Sustained { depth: 0.3 },
    },
    ClassStyle {
        motif: Motif::Steps,
        period: 0.55,
        envelope: Envelope::Decay { tau: 0.1 },
    },
    ClassStyle {
        motif: Motif::Flash,
        period: 0.9,
        envelope: Envelope::Decay { tau: 0.18 },
    },
    ClassStyle {
        motif: Motif::BouncingDot,
        period: 0.35,
        envelope: Envelope::Decay { tau: 0.06 },
    },
    ClassStyle {
        motif: Motif::Drops,
        period: 0.25,
        envelope: Envelope::Sustained { depth: 0.2 },
    },
    ClassStyle {
        motif: Motif::Flash,
        period: 1.2,
        envelope: Envelope::Decay { tau: 0.3 },
    },
    ClassStyle {
        motif: Motif::Grid,
        period: 0.2,
        envelope: Envelope::Decay { tau: 0.04 },
    },
    ClassStyle {
        motif: Motif::Stripes,
        period: 0.7,
        envelope: Envelope::Sustained { depth: 0.15 },
    },
];

/// STFT bin carrying class `k`'s tone. Even bins keep the phase advance per hop a multiple of 2π.
pub fn class_tone_bin(k: usize) -> usize {
    8 + 8 * k
}

pub fn class_tone_hz(k: usize) -> f64 {
    class_tone_bin(k) as f64 * CORPUS_SAMPLE_RATE as f64 / FFT_SIZE as f64
}

fn class_color(k: usize) -> [f64; 3] {
    let h = k as f64 / 12.0 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.35 * r, 0.15 + 0.35 * g, 0.15 + 0.35 * b]
}

/// Per-clip random draws shared by the video and audio renderers.
struct ClipPlan {
    style: ClassStyle,
    color: [f64; 3],
    phase: f64,
    amplitude: f64,
    tone_phase: f64,
    events: Vec<f64>,
    offset: (f64, f64),
    grid_keys: Vec<(usize, usize)>,
}

impl ClipPlan {
    fn new(k: usize, rng: &mut ChaCha8Rng) -> Self {
        let style = STYLES[k];
        let phase = rng.random::<f64>() * style.period;
        let mut events = Vec::new();
        let mut t = phase;
        while t < CORPUS_SECONDS {
            events.push(t);
            t += style.period;
        }
        let jitter = |rng: &mut ChaCha8Rng| 0.9 + 0.2 * rng.random::<f64>();
        let base = class_color(k);
        let color = [base[0] * jitter(rng), base[1] * jitter(rng), base[2] * jitter(rng)];
        let grid_keys = events
            .iter()
            .map(|_| (rng.random_range(0..4), rng.random_range(0..4)))
            .collect();
        Self {
            style,
            color,
            phase,
            amplitude: 0.5 + 0.2 * rng.random::<f64>(),
            tone_phase: rng.random::<f64>() * 2.0 * PI,
            events,
            offset: (rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0),
            grid_keys,
        }
    }

    /// Index of the most recent event at time `t` and the time since it.
    fn last_event(&self, t: f64) -> Option<(usize, f64)> {
        self.events
            .iter()
            .rposition(|&e| e <= t)
            .map(|i| (i, t - self.events[i]))
    }

    fn envelope(&self, t: f64) -> f64 {
        match self.style.envelope {
            Envelope::Decay { tau } => {
                let e = self.last_event(t).map_or(0.0, |(_, dt)| (-dt / tau).exp());
                0.05 + 0.95 * e
            }
            Envelope::Sustained { depth } => {
                1.0 - depth + depth * (2.0 * PI * (t - self.phase) / self.style.period).cos()
            }
        }
    }
}

fn render_audio(plan: &ClipPlan, k: usize) -> Result<AudioClip> {
    let n = (CORPUS_SECONDS * CORPUS_SAMPLE_RATE as f64) as usize;
    let f = class_tone_hz(k);
    let sr = CORPUS_SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            plan.amplitude * plan.envelope(t) * (2.0 * PI * f * t + plan.tone_phase).sin()
        })
        .collect();
    AudioClip::new(samples, CORPUS_SAMPLE_RATE)
}

fn render_frame(plan: &ClipPlan, t: f64, noise: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let s = CORPUS_FRAME_SIZE;
    let sf = s as f64;
    let (ox, oy) = plan.offset;
    let mut px = vec![plan.color; s * s];
    let bright = [0.95, 0.95, 0.9];
    let mut paint = |x: f64, y: f64, w: f64, h: f64, level: f64| {
        let (x0, y0) = ((x + ox).round() as i64, (y + oy).round() as i64);
        for yy in y0.max(0)..(y0 + h.round() as i64).min(s as i64) {
            for xx in x0.max(0)..(x0 + w.round() as i64).min(s as i64) {
                let p = &mut px[yy as usize * s + xx as usize];
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - level) + bright[c] * level;
                }
            }
        }
    };
    let period = plan.style.period;
    let cycle = (t - plan.phase) / period;
    let since = plan.last_event(t);
    let decay = since.map_or(0.0, |(_, dt)| (-dt / (0.25 * period)).exp());
    match plan.style.motif {
        Motif::Flash => paint(4.0, 4.0, sf - 8.0, sf - 8.0, 0.9 * decay),
        Motif::SlidingBar => {
            let x = (cycle.rem_euclid(1.0)) * (sf - 6.0);
            paint(x, 8.0, 6.0, 16.0, 1.0);
        }
        Motif::Hand => {
            let ticks = since.map_or(0, |(i, _)| i + 1) as f64;
            let angle = ticks * PI / 6.0;
            for r in 0..12 {
                let (x, y) = (15.0 + r as f64 * angle.sin(), 15.0 - r as f64 * angle.cos());
                paint(x, y, 2.0, 2.0, 1.0);
            }
        }
        Motif::OscillatingBar => {
            let y = 13.0 + 11.0 * (2.0 * PI * cycle).cos();
            paint(2.0, y, sf - 4.0, 5.0, 1.0);
        }
        Motif::Flicker => {
            let level = 0.4 + 0.4 * (2.0 * PI * cycle).cos();
            for _ in 0..40 {
                let (x, y) = (noise.random_range(0..s) as f64, noise.random_range(0..s) as f64);
                paint(x, y, 2.0, 2.0, level);
            }
        }
        Motif::Steps => {
            let i = since.map_or(0, |(i, _)| i);
            let x = if i.is_multiple_of(2) { 6.0 } else { 18.0 };
            paint(x, 20.0, 8.0, 6.0, 0.4 + 0.6 * decay);
        }
        Motif::BouncingDot => {
            let u = since.map_or(0.0, |(_, dt)| dt / period);
            let y = 24.0 - 20.0 * (PI * u).sin();
            paint(13.0, y, 6.0, 6.0, 1.0);
        }
        Motif::Drops => {
            for d in 0..6 {
                let lane = 2.0 + 5.0 * d as f64;
                let y = ((cycle + d as f64 * 0.37).rem_euclid(1.0)) * sf;
                paint(lane, y, 2.0, 4.0, 0.9);
            }
        }
        Motif::Grid => {
            for gy in 0..4 {
                for gx in 0..4 {
                    paint(2.0 + 7.5 * gx as f64, 2.0 + 7.5 * gy as f64, 6.0, 6.0, 0.25);
                }
            }
            if let Some((i, _)) = since {
                let (gx, gy) = plan.grid_keys[i];
                paint(2.0 + 7.5 * gx as f64, 2.0 + 7.5 * gy as f64, 6.0, 6.0, decay);
            }
        }
        Motif::Stripes => {
            let shift = cycle.rem_euclid(1.0) * 8.0;
            for band in -1..5 {
                paint(0.0, band as f64 * 8.0 + shift, sf, 3.0, 0.8);
            }
        }
    }
    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c = (*c + 0.02 * (noise.random::<f64>() - 0.5)).clamp(0.0, 1.0);
        }
    }
    px
}

fn write_png(path: &Path, px: &[[f64; 3]]) -> Result<()> {
    let s = CORPUS_FRAME_SIZE as u32;
    let raw: Vec<u8> = px
        .iter()
        .flat_map(|p| p.iter().map(|&v| (v * 255.0).round() as u8))
        .collect();
    let img = PngImage::from_raw(s, s, raw).expect("buffer matches frame size");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Ingest {
            file: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Per class, pick `round(n · test_fraction)` clips (at least one, at most
/// `n − 1`) for the test split.
pub fn stratified_test_picks(clips_per_class: usize, test_fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let n = clips_per_class;
    let k = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut test = vec![false; n];
    for &i in &order[..k] {
        test[i] = true;
    }
    test
}

/// `generate_synthetic_corpus`: writes frames, WAVs and `manifest.tsv` under `out_dir`.
pub fn generate_synthetic_corpus(
    out_dir: impl AsRef<Path>,
    classes: usize,
    clips_per_class: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    if classes == 0 || classes > DEFAULT_CLASSES.len() {
        return Err(Error::invalid(format!("classes must be in 1..=12, got {classes}")));
    }
    if clips_per_class < 2 {
        return Err(Error::invalid(format!(
            "clips_per_class must be at least 2, got {clips_per_class}"
        )));
    }
    std::fs::create_dir_all(out.join("clips"))?;
    let frames = (CORPUS_SECONDS * CORPUS_FPS) as usize;
    let mut entries = Vec::with_capacity(classes * clips_per_class);
    for (k, name) in DEFAULT_CLASSES.iter().enumerate().take(classes) {
        let test = stratified_test_picks(clips_per_class, test_fraction, &mut keyed_rng(seed, &[k as u64, 0]));
        for (c, &is_test) in test.iter().enumerate() {
            let id = format!("{name}_{c:02}");
            let mut rng = keyed_rng(seed, &[k as u64, 1, c as u64]);
            let plan = ClipPlan::new(k, &mut rng);
            let rel_frames = PathBuf::from("clips").join(&id);
            std::fs::create_dir_all(out.join(&rel_frames))?;
            for f in 0..frames {
                let mut noise = keyed_rng(seed, &[k as u64, 2, c as u64, f as u64]);
                let px = render_frame(&plan, f as f64 / CORPUS_FPS, &mut noise);
                write_png(&out.join(&rel_frames).join(format!("frame_{f:04}.png")), &px)?;
            }
            let rel_wav = PathBuf::from("clips").join(format!("{id}.wav"));
            wav_write(&render_audio(&plan, k)?, out.join(&rel_wav))?;
            entries.push(ManifestEntry {
                clip_id: id,
                label: name.to_string(),
                frames_path: rel_frames,
                wav_path: rel_wav,
                fps: CORPUS_FPS,
                duration: CORPUS_SECONDS,
                split: if is_test { Split::Test } else { Split::Train },
            });
        }
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.save(out.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{spectrogram_of, SpectrogramMode, StftParams};

    #[test]
    fn tones_sit_on_distinct_bins_below_nyquist() {
        for k in 0..12 {
            assert!(class_tone_hz(k) < 4000.0);
            if k > 0 {
                assert!(class_tone_bin(k) - class_tone_bin(k - 1) >= 1);
            }
        }
    }

    #[test]
    fn dominant_bin_matches_class() {
        for k in 0..12 {
            let plan = ClipPlan::new(k, &mut keyed_rng(3, &[k as u64]));
            let clip = render_audio(&plan, k).unwrap();
            let spec = spectrogram_of(&clip, StftParams::default(), SpectrogramMode::Power).unwrap();
            let mut energy = vec![0.0; spec.frames.cols()];
            for t in 0..spec.frames.rows() {
                for (e, v) in energy.iter_mut().zip(spec.frames.row(t)) {
                    *e += v;
                }
            }
            let argmax = (0..energy.len())
                .max_by(|&a, &b| energy[a].total_cmp(&energy[b]))
                .unwrap();
            assert_eq!(argmax, class_tone_bin(k));
        }
    }

    #[test]
    fn decaying_audio_peaks_at_events() {
        let plan = ClipPlan::new(0, &mut keyed_rng(5, &[]));
        for &e in &plan.events {
            assert!((plan.envelope(e) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_split_counts() {
        let picks = stratified_test_picks(8, 0.2, &mut keyed_rng(1, &[]));
        assert_eq!(picks.iter().filter(|&&t| t).count(), 2);
        let picks = stratified_test_picks(2, 0.2, &mut keyed_rng(1, &[]));
        assert_eq!(picks.iter().filter(|&&t| t).count(), 1);
    }

    #[test]
    fn rejects_too_few_clips() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_corpus(dir.path(), 12, 1, 0, 0.2).is_err());
    }
}
