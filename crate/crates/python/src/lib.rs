//! Python module `foleygen_py`: DSP helpers, the robust loss, corpus
//! generation and the full command-line interface.

use clap::Parser;
use foleygen::data::generate_synthetic_corpus;
use foleygen::dsp::{
    griffin_lim as gl, istft_ola, normalized_cross_correlation as ncc, spectrogram_of, stft, wav_read, wav_write,
    AudioClip, Spectrogram, SpectrogramMode, StftParams,
};
use foleygen::synth::robust_loss_scalar;
use foleygen::{Error, Matrix};
use foleygen_cli::{diagnostic, run, Cli};
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::UnknownClip(_) => PyKeyError::new_err(diagnostic(&e)),
        Error::InvalidArgument(_) | Error::Shape { .. } | Error::Config(_) | Error::Parse { .. } => {
            PyValueError::new_err(diagnostic(&e))
        }
        _ => PyRuntimeError::new_err(diagnostic(&e)),
    }
}

fn params(fft_size: usize, hop_size: usize) -> PyResult<StftParams> {
    StftParams::new(fft_size, fft_size, hop_size).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse_mode(mode: &str) -> PyResult<SpectrogramMode> {
    match mode {
        "power" => Ok(SpectrogramMode::Power),
        "magnitude" => Ok(SpectrogramMode::Magnitude),
        "sqrt" => Ok(SpectrogramMode::SqrtMagnitude),
        other => Err(PyValueError::new_err(format!("unknown spectrogram mode {other:?}"))),
    }
}

/// Frames × bins spectrogram of a mono signal (`mode` is power, magnitude or sqrt).
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, mode = "power", fft_size = 256, hop_size = 128))]
fn spectrogram(
    samples: Vec<f64>,
    sample_rate: u32,
    mode: &str,
    fft_size: usize,
    hop_size: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let clip = AudioClip::new(samples, sample_rate).map_err(to_py)?;
    let s = spectrogram_of(&clip, params(fft_size, hop_size)?, parse_mode(mode)?).map_err(to_py)?;
    Ok(rows(&s.frames))
}

/// Forward then inverse STFT of `samples`.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, fft_size = 256, hop_size = 128))]
fn stft_roundtrip(samples: Vec<f64>, sample_rate: u32, fft_size: usize, hop_size: usize) -> PyResult<Vec<f64>> {
    let p = params(fft_size, hop_size)?;
    let clip = AudioClip::new(samples, sample_rate).map_err(to_py)?;
    let spec = stft(&clip, p).map_err(to_py)?;
    Ok(istft_ola(&spec, p, sample_rate).map_err(to_py)?.samples)
}

/// Waveform and per-iteration relative consistency errors recovered from a magnitude spectrogram.
#[pyfunction]
#[pyo3(signature = (magnitude, sample_rate, iterations = 16, fft_size = 256, hop_size = 128))]
fn griffin_lim(
    magnitude: Vec<Vec<f64>>,
    sample_rate: u32,
    iterations: usize,
    fft_size: usize,
    hop_size: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let p = params(fft_size, hop_size)?;
    let bins = magnitude.first().map_or(0, Vec::len);
    let frames = magnitude.len();
    let flat: Vec<f64> = magnitude.into_iter().flatten().collect();
    let m = Matrix::from_vec(frames, bins, flat).map_err(to_py)?;
    let spec = Spectrogram {
        frames: m,
        mode: SpectrogramMode::Magnitude,
        params: p,
        sample_rate,
    };
    let out = gl(&spec, p, iterations).map_err(to_py)?;
    let rel = out.relative_errors();
    Ok((out.clip.samples, rel))
}

/// Lag-maximized normalized cross-correlation within ±0.5 s.
#[pyfunction]
fn normalized_cross_correlation(a: Vec<f64>, b: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    let a = AudioClip::new(a, sample_rate).map_err(to_py)?;
    let b = AudioClip::new(b, sample_rate).map_err(to_py)?;
    ncc(&a, &b).map_err(to_py)
}

/// `log(alpha + gamma²)`.
#[pyfunction]
#[pyo3(signature = (gamma, alpha = 1.0))]
fn robust_loss(gamma: f64, alpha: f64) -> PyResult<f64> {
    robust_loss_scalar(gamma, alpha).map_err(to_py)
}

#[pyfunction]
fn read_wav(path: &str) -> PyResult<(Vec<f64>, u32)> {
    let c = wav_read(path).map_err(to_py)?;
    Ok((c.samples, c.sample_rate))
}

#[pyfunction]
fn write_wav(path: &str, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    let c = AudioClip::new(samples, sample_rate).map_err(to_py)?;
    wav_write(&c, path).map_err(to_py)
}

/// Writes the procedural corpus and returns the number of clips.
#[pyfunction]
#[pyo3(signature = (out_dir, clips_per_class = 8, seed = 7, classes = 12, test_fraction = 0.2))]
fn generate_corpus(
    out_dir: &str,
    clips_per_class: usize,
    seed: u64,
    classes: usize,
    test_fraction: f64,
) -> PyResult<usize> {
    let m = generate_synthetic_corpus(out_dir, classes, clips_per_class, seed, test_fraction).map_err(to_py)?;
    Ok(m.entries.len())
}

/// Runs a command-line invocation, e.g. `run_cli(["--json", "train", ...])`, and returns its stdout.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<String> {
    let argv = std::iter::once("foleygen".to_string()).chain(args);
    let cli = Cli::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
    run(&cli).map_err(to_py)
}

#[pymodule]
fn foleygen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(stft_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(griffin_lim, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_cross_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(robust_loss, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
