//! Run configuration: every tunable of the pipeline in one flat,
//! sectioned `key = value` text file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dsp::StftParams;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fslstm::{CellLayout, FsLstmConfig};
use crate::trn::TrnConfig;
use crate::video::SegmentMode;

pub const DEFAULT_CLASSES: [&str; 12] = [
    "break",
    "car",
    "clock",
    "cutting",
    "fire",
    "footstep",
    "gunshot",
    "horse",
    "rain",
    "thunder",
    "typing",
    "waterfall",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    Interpolate,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    SpaceTime,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub classes: Vec<String>,
    pub clip_seconds: f64,
    pub test_fraction: f64,

    pub sample_rate: u32,
    pub fft_size: usize,
    pub window_size: usize,
    pub hop_size: usize,
    pub gl_iterations: usize,

    pub frame_height: usize,
    pub frame_width: usize,
    pub interpolation_factor: usize,
    pub frame_mode: FrameMode,
    pub input: InputMode,

    pub encoder_widths: Vec<usize>,
    pub feature_dim: usize,

    pub num_fast_cells: usize,
    pub hidden_dim: usize,
    pub zoneout_prob: f64,
    pub dropout_prob: f64,
    pub forget_bias_init: f64,
    pub layout: CellLayout,

    pub max_scale: usize,
    pub trn_hidden: usize,
    pub subsets_per_scale: usize,
    /// Adam step size used when training Model 2.
    pub trn_learning_rate: f64,
    pub sampled_frames: usize,
    pub segment: SegmentMode,

    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub clip_norm: f64,
    pub early_stop_accuracy: f64,
    pub early_stop_patience: usize,

    pub retrieval_size: usize,
    pub retrieval_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            clip_seconds: 2.0,
            test_fraction: 0.2,
            sample_rate: 8000,
            fft_size: 256,
            window_size: 256,
            hop_size: 128,
            gl_iterations: 16,
            frame_height: 16,
            frame_width: 16,
            interpolation_factor: 2,
            frame_mode: FrameMode::Interpolate,
            input: InputMode::SpaceTime,
            encoder_widths: vec![4, 8],
            feature_dim: 64,
            num_fast_cells: 4,
            hidden_dim: 32,
            zoneout_prob: 0.1,
            dropout_prob: 0.1,
            forget_bias_init: 1.0,
            layout: CellLayout::FastSlow,
            max_scale: 8,
            trn_hidden: 256,
            subsets_per_scale: 8,
            trn_learning_rate: 0.002,
            sampled_frames: 8,
            segment: SegmentMode::Full,
            seed: 7,
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.005,
            lambda: 1.0,
            alpha: 1.0,
            clip_norm: 5.0,
            early_stop_accuracy: 1.0,
            early_stop_patience: 3,
            retrieval_size: 32,
            retrieval_epochs: 30,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn enum_text(v: &str, options: &[&str]) -> std::result::Result<usize, String> {
    options
        .iter()
        .position(|o| *o == v)
        .ok_or_else(|| format!("expected one of {options:?}, got {v:?}"))
}

const FRAME_MODES: [&str; 2] = ["interpolate", "replicate"];
const INPUT_MODES: [&str; 2] = ["space_time", "raw"];
const LAYOUTS: [&str; 2] = ["fast_slow", "simple"];
const SEGMENTS: [&str; 2] = ["full", "early"];

impl RunConfig {
    /// `(section, key, value)` in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let f = |v: f64| format!("{v:?}");
        vec![
            ("data", "classes", self.classes.join(",")),
            ("data", "clip_seconds", f(self.clip_seconds)),
            ("data", "test_fraction", f(self.test_fraction)),
            ("audio", "sample_rate", self.sample_rate.to_string()),
            ("audio", "fft_size", self.fft_size.to_string()),
            ("audio", "window_size", self.window_size.to_string()),
            ("audio", "hop_size", self.hop_size.to_string()),
            ("audio", "gl_iterations", self.gl_iterations.to_string()),
            ("video", "frame_height", self.frame_height.to_string()),
            ("video", "frame_width", self.frame_width.to_string()),
            ("video", "interpolation_factor", self.interpolation_factor.to_string()),
            ("video", "frame_mode", FRAME_MODES[self.frame_mode as usize].into()),
            ("video", "input", INPUT_MODES[self.input as usize].into()),
            ("encoder", "widths", join(&self.encoder_widths)),
            ("encoder", "feature_dim", self.feature_dim.to_string()),
            ("fslstm", "num_fast_cells", self.num_fast_cells.to_string()),
            ("fslstm", "hidden_dim", self.hidden_dim.to_string()),
            ("fslstm", "zoneout_prob", f(self.zoneout_prob)),
            ("fslstm", "dropout_prob", f(self.dropout_prob)),
            ("fslstm", "forget_bias_init", f(self.forget_bias_init)),
            ("fslstm", "layout", LAYOUTS[self.layout as usize].into()),
            ("trn", "max_scale", self.max_scale.to_string()),
            ("trn", "hidden", self.trn_hidden.to_string()),
            ("trn", "subsets_per_scale", self.subsets_per_scale.to_string()),
            ("trn", "learning_rate", f(self.trn_learning_rate)),
            ("trn", "sampled_frames", self.sampled_frames.to_string()),
            ("trn", "segment", SEGMENTS[self.segment as usize].into()),
            ("train", "seed", self.seed.to_string()),
            ("train", "epochs", self.epochs.to_string()),
            ("train", "batch_size", self.batch_size.to_string()),
            ("train", "learning_rate", f(self.learning_rate)),
            ("train", "lambda", f(self.lambda)),
            ("train", "alpha", f(self.alpha)),
            ("train", "clip_norm", f(self.clip_norm)),
            ("train", "early_stop_accuracy", f(self.early_stop_accuracy)),
            ("train", "early_stop_patience", self.early_stop_patience.to_string()),
            ("retrieval", "size", self.retrieval_size.to_string()),
            ("retrieval", "epochs", self.retrieval_epochs.to_string()),
        ]
    }

    /// Assign one key; the message of the error describes the bad value.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        match (section, key) {
            ("data", "classes") => {
                self.classes = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            ("data", "clip_seconds") => self.clip_seconds = parse(v)?,
            ("data", "test_fraction") => self.test_fraction = parse(v)?,
            ("audio", "sample_rate") => self.sample_rate = parse(v)?,
            ("audio", "fft_size") => self.fft_size = parse(v)?,
            ("audio", "window_size") => self.window_size = parse(v)?,
            ("audio", "hop_size") => self.hop_size = parse(v)?,
            ("audio", "gl_iterations") => self.gl_iterations = parse(v)?,
            ("video", "frame_height") => self.frame_height = parse(v)?,
            ("video", "frame_width") => self.frame_width = parse(v)?,
            ("video", "interpolation_factor") => self.interpolation_factor = parse(v)?,
            ("video", "frame_mode") => {
                self.frame_mode = [FrameMode::Interpolate, FrameMode::Replicate][enum_text(v, &FRAME_MODES)?]
            }
            ("video", "input") => self.input = [InputMode::SpaceTime, InputMode::Raw][enum_text(v, &INPUT_MODES)?],
            ("encoder", "widths") => self.encoder_widths = split_list(v)?,
            ("encoder", "feature_dim") => self.feature_dim = parse(v)?,
            ("fslstm", "num_fast_cells") => self.num_fast_cells = parse(v)?,
            ("fslstm", "hidden_dim") => self.hidden_dim = parse(v)?,
            ("fslstm", "zoneout_prob") => self.zoneout_prob = parse(v)?,
            ("fslstm", "dropout_prob") => self.dropout_prob = parse(v)?,
            ("fslstm", "forget_bias_init") => self.forget_bias_init = parse(v)?,
            ("fslstm", "layout") => self.layout = [CellLayout::FastSlow, CellLayout::Simple][enum_text(v, &LAYOUTS)?],
            ("trn", "max_scale") => self.max_scale = parse(v)?,
            ("trn", "hidden") => self.trn_hidden = parse(v)?,
            ("trn", "subsets_per_scale") => self.subsets_per_scale = parse(v)?,
            ("trn", "learning_rate") => self.trn_learning_rate = parse(v)?,
            ("trn", "sampled_frames") => self.sampled_frames = parse(v)?,
            ("trn", "segment") => self.segment = [SegmentMode::Full, SegmentMode::Early][enum_text(v, &SEGMENTS)?],
            ("train", "seed") => self.seed = parse(v)?,
            ("train", "epochs") => self.epochs = parse(v)?,
            ("train", "batch_size") => self.batch_size = parse(v)?,
            ("train", "learning_rate") => self.learning_rate = parse(v)?,
            ("train", "lambda") => self.lambda = parse(v)?,
            ("train", "alpha") => self.alpha = parse(v)?,
            ("train", "clip_norm") => self.clip_norm = parse(v)?,
            ("train", "early_stop_accuracy") => self.early_stop_accuracy = parse(v)?,
            ("train", "early_stop_patience") => self.early_stop_patience = parse(v)?,
            ("retrieval", "size") => self.retrieval_size = parse(v)?,
            ("retrieval", "epochs") => self.retrieval_epochs = parse(v)?,
            _ => return Err(format!("unknown key [{section}] {key}")),
        }
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} lacks '='")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key {path:?} must be section.key")))?;
        self.set(section, key, value.trim()).map_err(Error::Config)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Parse a config file. Keys not present keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line,
                    message: format!("unterminated section header {s:?}"),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key = value, got {s:?}"),
            })?;
            let sec = section.as_deref().ok_or_else(|| Error::Parse {
                line,
                message: "key outside of any section".into(),
            })?;
            cfg.set(sec, k.trim(), v.trim())
                .map_err(|message| Error::Parse { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn stft_params(&self) -> Result<StftParams> {
        StftParams::new(self.fft_size, self.window_size, self.hop_size).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    /// Spectrogram frames of a clip of the configured duration; the bank's `T`.
    pub fn bank_frames(&self) -> usize {
        let n = self.clip_samples();
        if n < self.window_size {
            0
        } else {
            (n - self.window_size) / self.hop_size + 1
        }
    }

    pub fn encoder(&self, in_channels: usize, height: usize, width: usize) -> EncoderConfig {
        EncoderConfig {
            height,
            width,
            in_channels,
            widths: self.encoder_widths.clone(),
            output_dim: self.feature_dim,
        }
    }

    pub fn video_encoder(&self) -> EncoderConfig {
        self.encoder(3, self.frame_height, self.frame_width)
    }

    pub fn fslstm(&self) -> FsLstmConfig {
        FsLstmConfig {
            num_fast_cells: self.num_fast_cells,
            input_dim: 2 * self.feature_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.classes.len(),
            residual_dim: self.num_bins(),
            zoneout_prob: self.zoneout_prob,
            dropout_prob: self.dropout_prob,
            forget_bias_init: self.forget_bias_init,
            layout: self.layout,
        }
    }

    pub fn trn(&self) -> TrnConfig {
        TrnConfig {
            max_scale: self.max_scale,
            feature_dim: 2 * self.feature_dim,
            hidden: self.trn_hidden,
            num_classes: self.classes.len(),
            subsets_per_scale: self.subsets_per_scale,
            num_frames: self.sampled_frames,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::Config(format!("duplicate class {c}")));
            }
            if c.chars().any(|ch| ch.is_whitespace() || ch == ',') {
                return Err(Error::Config(format!("class name {c:?} has whitespace or commas")));
            }
        }
        if !(self.clip_seconds > 0.0) {
            return Err(Error::Config("clip_seconds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        self.stft_params()?;
        if self.bank_frames() == 0 {
            return Err(Error::Config(
                "clip duration is shorter than one analysis window".into(),
            ));
        }
        if self.gl_iterations == 0 || self.interpolation_factor == 0 {
            return Err(Error::Config(
                "gl_iterations and interpolation_factor must be positive".into(),
            ));
        }
        self.video_encoder().validate()?;
        self.fslstm().validate()?;
        self.trn().validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("retrieval.size", self.retrieval_size),
            ("retrieval.epochs", self.retrieval_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0)
            || !(self.trn_learning_rate > 0.0)
            || !(self.alpha > 0.0)
            || !(self.lambda >= 0.0)
            || !(self.clip_norm > 0.0)
        {
            return Err(Error::Config(
                "learning_rate, alpha and clip_norm must be positive, lambda nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_consistent() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.fslstm().residual_dim, c.stft_params().unwrap().num_bins());
        assert_eq!(c.bank_frames(), 124);
        assert_eq!(c.classes.len(), 12);
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig {
            learning_rate: 0.0125,
            layout: CellLayout::Simple,
            encoder_widths: vec![2, 3, 5],
            segment: SegmentMode::Early,
            ..RunConfig::default()
        };
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::from_text("[train]\nseed = 1\nepochs = many\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = RunConfig::from_text("seed = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = RunConfig::from_text("[train]\n\n# c\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }));
    }

    #[test]
    fn scale_above_sampled_frames_is_config_error() {
        let text = "[trn]\nmax_scale = 8\nsampled_frames = 4\n";
        assert!(matches!(RunConfig::from_text(text), Err(Error::Config(_))));
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("video.frame_mode=replicate").unwrap();
        assert_eq!(c.frame_mode, FrameMode::Replicate);
        assert!(c.apply_override("video.nope=1").is_err());
        assert!(c.apply_override("frame_mode").is_err());
    }
}
