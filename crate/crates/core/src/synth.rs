//! Class-average spectrogram bank, base-plus-residual composition, the robust
//! regression loss and waveform rendering.
//!
//! All spectrograms here live in the sqrt-magnitude domain.

use crate::dsp::{edge_taper, griffin_lim, spectrogram_of, AudioClip, Spectrogram, SpectrogramMode, StftParams};
use crate::error::{Error, Result};
use crate::matrix::{interp_position, Matrix};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_GL_ITERATIONS: usize = 16;
pub const PEAK_LEVEL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub name: String,
    pub clip_count: usize,
    /// Average sqrt-magnitude spectrogram `[T × bins]`.
    pub mean: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpectrogramBank {
    pub entries: Vec<BankEntry>,
    pub params: StftParams,
    pub sample_rate: u32,
}

impl ClassSpectrogramBank {
    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn num_frames(&self) -> usize {
        self.entries.first().map_or(0, |e| e.mean.rows())
    }

    pub fn num_bins(&self) -> usize {
        self.params.num_bins()
    }

    pub fn base(&self, class: usize) -> Result<&Matrix> {
        self.entries
            .get(class)
            .map(|e| &e.mean)
            .ok_or_else(|| Error::Bank(format!("unknown class index {class} ({} classes)", self.entries.len())))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

/// Sqrt-magnitude spectrogram of `clip`, resampled in time to `target_frames`.
pub fn sqrt_spectrogram_frames(clip: &AudioClip, params: StftParams, target_frames: usize) -> Result<Matrix> {
    spectrogram_of(clip, params, SpectrogramMode::SqrtMagnitude)?
        .frames
        .resample_rows(target_frames)
}

/// Average each class's resampled sqrt-magnitude spectrograms.
pub fn build_bank(
    groups: &[(String, Vec<AudioClip>)],
    params: StftParams,
    target_frames: usize,
) -> Result<ClassSpectrogramBank> {
    if target_frames == 0 {
        return Err(Error::invalid("bank target frame count must be positive"));
    }
    let mut sample_rate = None;
    let mut entries = Vec::with_capacity(groups.len());
    for (name, clips) in groups {
        if clips.is_empty() {
            return Err(Error::Bank(format!("class {name} has no training clips")));
        }
        let mut acc = Matrix::zeros(target_frames, params.num_bins());
        for clip in clips {
            match sample_rate {
                None => sample_rate = Some(clip.sample_rate),
                Some(sr) if sr != clip.sample_rate => {
                    return Err(Error::Bank(format!(
                        "class {name}: sample rate {} differs from {sr}",
                        clip.sample_rate
                    )))
                }
                _ => {}
            }
            let s = sqrt_spectrogram_frames(clip, params, target_frames)?;
            for (a, v) in acc.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *a += v;
            }
        }
        let n = clips.len() as f64;
        acc.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        entries.push(BankEntry {
            name: name.clone(),
            clip_count: clips.len(),
            mean: acc,
        });
    }
    Ok(ClassSpectrogramBank {
        entries,
        params,
        sample_rate: sample_rate.unwrap_or(crate::dsp::DEFAULT_SAMPLE_RATE),
    })
}

/// Per-bin linear time interpolation from `T_r` to `target_frames` rows.
pub fn align_frames(residuals: &Matrix, target_frames: usize) -> Result<Matrix> {
    if target_frames == 0 {
        return Err(Error::invalid("target frame count must be positive"));
    }
    if residuals.rows() == 0 {
        return Err(Error::invalid("residual has no frames"));
    }
    residuals.resample_rows(target_frames)
}

/// The `[target × source]` matrix that performs [`align_frames`] as a matmul.
pub fn alignment_matrix(source: usize, target: usize) -> Result<Tensor> {
    if source == 0 || target == 0 {
        return Err(Error::invalid("alignment needs positive frame counts"));
    }
    let mut m = vec![0.0; target * source];
    for t in 0..target {
        let (lo, hi, frac) = interp_position(t, target, source);
        m[t * source + lo] += 1.0 - frac;
        m[t * source + hi] += frac;
    }
    Tensor::new(&[target, source], m)
}

/// Differentiable [`align_frames`] for a `[T_r × bins]` graph value.
pub fn align_frames_var(g: &mut Graph, residuals: Var, target_frames: usize) -> Result<Var> {
    let s = g.shape(residuals).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("align_frames", &s, &[0, 0]));
    }
    if s[0] == target_frames {
        return Ok(residuals);
    }
    let m = g.constant(alignment_matrix(s[0], target_frames)?);
    g.matmul(m, residuals)
}

/// `S - A_K`, the residual that makes composition reproduce `S`.
pub fn extract_residual(spec: &Matrix, class: usize, bank: &ClassSpectrogramBank) -> Result<Matrix> {
    let base = bank.base(class)?;
    if base.shape() != spec.shape() {
        return Err(Error::Alignment(format!(
            "spectrogram {:?} vs bank {:?}",
            spec.shape(),
            base.shape()
        )));
    }
    let data = spec
        .as_slice()
        .iter()
        .zip(base.as_slice())
        .map(|(s, a)| s - a)
        .collect();
    Matrix::from_vec(spec.rows(), spec.cols(), data)
}

/// `s' = max(s_c + A_K, 0)`; with no residual the class base is returned.
pub fn compose_spectrogram(
    residual: Option<&Matrix>,
    class: usize,
    bank: &ClassSpectrogramBank,
) -> Result<Spectrogram> {
    let base = bank.base(class)?;
    let frames = match residual {
        None => base.clone(),
        Some(r) => {
            if r.shape() != base.shape() {
                return Err(Error::Alignment(format!(
                    "residual {:?} not aligned to bank {:?}",
                    r.shape(),
                    base.shape()
                )));
            }
            let data = r
                .as_slice()
                .iter()
                .zip(base.as_slice())
                .map(|(s, a)| (s + a).max(0.0))
                .collect();
            Matrix::from_vec(base.rows(), base.cols(), data)?
        }
    };
    Ok(Spectrogram {
        frames,
        mode: SpectrogramMode::SqrtMagnitude,
        params: bank.params,
        sample_rate: bank.sample_rate,
    })
}

/// `L(γ) = log(α + γ²)`.
pub fn robust_loss_scalar(gamma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok((alpha + gamma * gamma).ln())
}

/// `E = Σ_t log(α + ‖s_t − s'_t‖²)` over frames.
pub fn robust_energy(pred: &Matrix, target: &Matrix, alpha: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Alignment(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    (0..pred.rows())
        .map(|t| {
            let sq: f64 = pred
                .row(t)
                .iter()
                .zip(target.row(t))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            robust_loss_scalar(sq.sqrt(), alpha)
        })
        .sum()
}

/// Graph form of [`robust_energy`] with `pred` a graph value and `target` constant.
pub fn robust_energy_var(g: &mut Graph, pred: Var, target: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let (sp, st) = (g.shape(pred), g.shape(target));
    if sp != st {
        return Err(Error::Alignment(format!("{sp:?} vs {st:?}")));
    }
    let diff = g.sub(target, pred)?;
    let sq = g.square(diff)?;
    let norms = g.sum_last(sq)?;
    let shifted = g.add_scalar(norms, alpha)?;
    let logs = g.log(shifted)?;
    g.sum(logs)
}

/// Square back to magnitude, recover phase with Griffin-Lim and peak-normalize.
pub fn synthesize_waveform(spec: &Spectrogram, params: StftParams, gl_iterations: usize) -> Result<AudioClip> {
    let mag = spec.to_mode(SpectrogramMode::Magnitude);
    let mut clip = griffin_lim(&mag, params, gl_iterations)?.clip;
    let taper = edge_taper(params, spec.num_frames())?;
    for (v, t) in clip.samples.iter_mut().zip(&taper) {
        *v *= t;
    }
    let peak = clip.peak();
    if peak > 0.0 {
        let g = PEAK_LEVEL / peak;
        clip.samples.iter_mut().for_each(|v| *v *= g);
    }
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64, n: usize) -> AudioClip {
        AudioClip::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / 8000.0).sin())
                .collect(),
            8000,
        )
        .unwrap()
    }

    fn const_bank(values: &[f64]) -> ClassSpectrogramBank {
        ClassSpectrogramBank {
            entries: values
                .iter()
                .enumerate()
                .map(|(i, &v)| BankEntry {
                    name: format!("c{i}"),
                    clip_count: 1,
                    mean: Matrix::filled(4, 129, v),
                })
                .collect(),
            params: StftParams::default(),
            sample_rate: 8000,
        }
    }

    #[test]
    fn bank_of_single_and_identical_clips() {
        let p = StftParams::default();
        let a = tone(500.0, 0.5, 4000);
        let single = build_bank(&[("x".into(), vec![a.clone()])], p, 20).unwrap();
        let expect = sqrt_spectrogram_frames(&a, p, 20).unwrap();
        assert_eq!(single.entries[0].mean, expect);
        let twice = build_bank(&[("x".into(), vec![a.clone(), a])], p, 20).unwrap();
        assert!(twice.entries[0].mean.max_abs_diff(&expect) < 1e-12);
        assert!(matches!(build_bank(&[("empty".into(), vec![])], p, 20), Err(Error::Bank(m)) if m.contains("empty")));
    }

    #[test]
    fn bank_of_constant_magnitude_clips_averages() {
        // A DC clip has a constant sqrt-magnitude in every bin and frame.
        let p = StftParams::default();
        let c1 = AudioClip::new(vec![0.2; 2048], 8000).unwrap();
        let c2 = AudioClip::new(vec![0.8; 2048], 8000).unwrap();
        let m1 = sqrt_spectrogram_frames(&c1, p, 10).unwrap();
        let m2 = sqrt_spectrogram_frames(&c2, p, 10).unwrap();
        let bank = build_bank(&[("dc".into(), vec![c1, c2])], p, 10).unwrap();
        for ((a, x), y) in bank.entries[0]
            .mean
            .as_slice()
            .iter()
            .zip(m1.as_slice())
            .zip(m2.as_slice())
        {
            assert!((a - 0.5 * (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_examples() {
        let r = Matrix::from_fn(5, 3, |t, b| (t * 3 + b) as f64);
        assert_eq!(align_frames(&r, 5).unwrap(), r);
        let c = Matrix::filled(3, 4, 0.7);
        assert!(align_frames(&c, 9)
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| (v - 0.7).abs() < 1e-15));
        let two = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(align_frames(&two, 3).unwrap().row(1), &[0.5, 0.5]);
        assert!(align_frames(&two, 0).is_err());

        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[5, 3], r.as_slice().to_vec()).unwrap());
        let a = align_frames_var(&mut g, v, 8).unwrap();
        let direct = align_frames(&r, 8).unwrap();
        for (x, y) in g.value(a).data().iter().zip(direct.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_examples() {
        let bank = const_bank(&[0.5, 1.0]);
        let zero = Matrix::zeros(4, 129);
        assert_eq!(
            compose_spectrogram(Some(&zero), 1, &bank).unwrap().frames,
            bank.entries[1].mean
        );
        assert_eq!(
            compose_spectrogram(None, 0, &bank).unwrap().frames,
            bank.entries[0].mean
        );
        let neg = bank.entries[1].mean.map(|v| -v);
        assert!(compose_spectrogram(Some(&neg), 1, &bank)
            .unwrap()
            .frames
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        let truth = Matrix::from_fn(4, 129, |t, b| ((t + b) % 5) as f64 * 0.3);
        let res = extract_residual(&truth, 0, &bank).unwrap();
        assert!(
            compose_spectrogram(Some(&res), 0, &bank)
                .unwrap()
                .frames
                .max_abs_diff(&truth)
                < 1e-15
        );
        assert!(matches!(compose_spectrogram(None, 5, &bank), Err(Error::Bank(_))));
    }

    #[test]
    fn robust_loss_closed_forms_and_derivative() {
        assert_eq!(robust_loss_scalar(0.0, 1.0).unwrap(), 0.0);
        assert!((robust_loss_scalar(1.0, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(robust_loss_scalar(1.0, 0.0).is_err());
        for &(gamma, alpha) in &[(0.3, 1.0), (2.0, 0.5), (-1.2, 3.0)] {
            let h = 1e-6;
            let fd = (robust_loss_scalar(gamma + h, alpha).unwrap() - robust_loss_scalar(gamma - h, alpha).unwrap())
                / (2.0 * h);
            let analytic = 2.0 * gamma / (alpha + gamma * gamma);
            assert!((fd - analytic).abs() < 1e-6);
        }
    }

    #[test]
    fn robust_energy_lower_bound_and_graph_agreement() {
        let a = Matrix::from_fn(6, 5, |t, b| (t as f64 - b as f64) * 0.1);
        let b = Matrix::from_fn(6, 5, |t, b| (t * b) as f64 * 0.05);
        let alpha = 0.7;
        let e = robust_energy(&a, &b, alpha).unwrap();
        assert!(e >= 6.0 * alpha.ln());
        assert!((robust_energy(&a, &a, alpha).unwrap() - 6.0 * alpha.ln()).abs() < 1e-12);
        let mut g = Graph::new();
        let pa = g.constant(Tensor::new(&[6, 5], a.as_slice().to_vec()).unwrap());
        let pb = g.constant(Tensor::new(&[6, 5], b.as_slice().to_vec()).unwrap());
        let ev = robust_energy_var(&mut g, pa, pb, alpha).unwrap();
        assert!((g.value(ev).item() - e).abs() < 1e-12);
    }

    #[test]
    fn synthesis_of_silence_and_duration() {
        let bank = const_bank(&[0.0]);
        let s = compose_spectrogram(None, 0, &bank).unwrap();
        let clip = synthesize_waveform(&s, bank.params, 16).unwrap();
        assert_eq!(clip.len(), 3 * 128 + 256);
        assert!(clip.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesis_from_true_spectrogram_correlates() {
        let p = StftParams::default();
        let x = tone(437.5, 0.6, 8000);
        let spec = spectrogram_of(&x, p, SpectrogramMode::SqrtMagnitude).unwrap();
        let y = synthesize_waveform(&spec, p, 16).unwrap();
        assert!((y.peak() - PEAK_LEVEL).abs() < 1e-12);
        let ncc = crate::dsp::normalized_cross_correlation(&x, &y).unwrap();
        assert!(ncc > 0.5, "{ncc}");
    }
}
