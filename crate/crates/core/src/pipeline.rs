//! End-to-end plumbing: clip preparation, model construction, training,
//! inference and waveform synthesis for both models.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::{Checkpoint, DatasetManifest, FrameMode, InputMode, ManifestEntry, RunConfig, Split};
use crate::dsp::{wav_read, AudioClip};
use crate::encoder::FeatureEncoder;
use crate::error::{Error, Result};
use crate::fslstm::{fslstm_loss, FsLstm, Mode};
use crate::matrix::Matrix;
use crate::synth::{
    align_frames, align_frames_var, build_bank, compose_spectrogram, extract_residual, sqrt_spectrogram_frames,
    synthesize_waveform, ClassSpectrogramBank,
};
use crate::tensor::{
    adam_step, keyed_rng, mix_key, AdamConfig, AdamState, BoundParams, Gradients, Graph, ParamStore, Var,
};
use crate::trn::{trn_loss, Trn};
use crate::video::{
    interpolate_frames, load_frames, replicate_frames, sample_representative_frames, space_time_image, SpaceTimeImage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Model 1: encoder + FS-LSTM with class and residual heads.
    FsLstm,
    /// Model 2: encoder + multi-scale TRN.
    Trn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FsLstm => "fslstm",
            ModelKind::Trn => "trn",
        }
    }

    fn tag(self) -> u64 {
        match self {
            ModelKind::FsLstm => 1,
            ModelKind::Trn => 2,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fslstm" => Ok(ModelKind::FsLstm),
            "trn" => Ok(ModelKind::Trn),
            other => Err(Error::invalid(format!(
                "unknown model {other:?}; expected fslstm or trn"
            ))),
        }
    }
}

/// A clip decoded and preprocessed according to a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// Encoder input per (interpolated) frame, `3 × H × W`.
    pub frames: Vec<Vec<f64>>,
    pub first_rgb: Vec<f64>,
    /// Frame indices fed to the relation network.
    pub sampled: Vec<usize>,
    pub audio: AudioClip,
    /// Sqrt-magnitude spectrogram resampled to the bank's frame count.
    pub target_sqrt: Matrix,
}

pub fn prepare_clip(manifest: &DatasetManifest, entry: &ManifestEntry, config: &RunConfig) -> Result<PreparedClip> {
    let label = config
        .classes
        .iter()
        .position(|c| *c == entry.label)
        .ok_or_else(|| Error::Config(format!("clip {} has unknown label {}", entry.clip_id, entry.label)))?;
    let seq = load_frames(
        manifest.resolve(&entry.frames_path),
        config.frame_height,
        config.frame_width,
        entry.fps,
    )?;
    let seq = match config.frame_mode {
        FrameMode::Interpolate => interpolate_frames(&seq, config.interpolation_factor)?,
        FrameMode::Replicate => replicate_frames(&seq, config.interpolation_factor)?,
    };
    let frames = (0..seq.len())
        .map(|t| {
            Ok(match config.input {
                InputMode::SpaceTime => space_time_image(&seq, t)?,
                InputMode::Raw => SpaceTimeImage::raw(&seq.frames[t]),
            }
            .to_chw())
        })
        .collect::<Result<Vec<_>>>()?;
    if frames.len() < config.sampled_frames {
        return Err(Error::Config(format!(
            "clip {} has {} frames, fewer than the {} sampled frames",
            entry.clip_id,
            frames.len(),
            config.sampled_frames
        )));
    }
    let sampled = sample_representative_frames(frames.len(), config.sampled_frames, config.segment)?;
    let audio = wav_read(manifest.resolve(&entry.wav_path))?;
    if audio.sample_rate != config.sample_rate {
        return Err(Error::Config(format!(
            "clip {} is sampled at {} Hz, config expects {}",
            entry.clip_id, audio.sample_rate, config.sample_rate
        )));
    }
    let target_sqrt = sqrt_spectrogram_frames(&audio, config.stft_params()?, config.bank_frames())?;
    Ok(PreparedClip {
        id: entry.clip_id.clone(),
        label,
        split: entry.split,
        frames,
        first_rgb: seq.first_rgb.to_chw(),
        sampled,
        audio,
        target_sqrt,
    })
}

pub fn prepare_dataset(manifest: &DatasetManifest, config: &RunConfig) -> Result<Vec<PreparedClip>> {
    manifest.validate(&config.classes)?;
    manifest.check_train_coverage(&config.classes)?;
    manifest
        .entries
        .iter()
        .map(|e| prepare_clip(manifest, e, config))
        .collect()
}

/// Class-average bank over the training split (Algorithm 1, "Avg ← Average(S)").
pub fn bank_from_clips(clips: &[PreparedClip], config: &RunConfig) -> Result<ClassSpectrogramBank> {
    let groups: Vec<(String, Vec<AudioClip>)> = config
        .classes
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let audio = clips
                .iter()
                .filter(|c| c.split == Split::Train && c.label == k)
                .map(|c| c.audio.clone())
                .collect();
            (name.clone(), audio)
        })
        .collect();
    build_bank(&groups, config.stft_params()?, config.bank_frames())
}

#[derive(Debug, Clone)]
pub enum Network {
    FsLstm { encoder: FeatureEncoder, net: FsLstm },
    Trn { encoder: FeatureEncoder, trn: Trn },
}

/// Parameters plus architecture of one trained (or freshly initialized) model.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub config: RunConfig,
    pub store: ParamStore,
    pub network: Network,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Forward pass outputs of a minibatch.
struct BatchOutput {
    /// `[B × C]` class scores (mean-pooled logits for Model 1).
    scores: Var,
    /// Model 1 per-clip `[T × bins]` residuals.
    residuals: Vec<Var>,
    /// Model 1 per-clip `[T × C]` logits.
    logits: Vec<Var>,
}

impl Model {
    pub fn new(kind: ModelKind, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(config.seed, &[kind.tag(), 0]);
        let encoder = FeatureEncoder::new(config.video_encoder(), "encoder", &mut store, &mut rng)?;
        let network = match kind {
            ModelKind::FsLstm => Network::FsLstm {
                encoder,
                net: FsLstm::new(config.fslstm(), "fslstm", &mut store, &mut rng)?,
            },
            ModelKind::Trn => Network::Trn {
                encoder,
                trn: Trn::new(config.trn(), &mut store, &mut rng)?,
            },
        };
        Ok(Self {
            kind,
            config: config.clone(),
            store,
            network,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.kind.name(), &self.config, self.step, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ckpt.model.parse()?;
        let mut model = Self::new(kind, &ckpt.config)?;
        ckpt.restore_into(&mut model.store)?;
        model.step = ckpt.step;
        Ok(model)
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, batch: &[&PreparedClip], mode: Mode) -> Result<BatchOutput> {
        let b = batch.len();
        match &self.network {
            Network::FsLstm { encoder, net } => {
                let steps = batch[0].frames.len();
                if batch.iter().any(|c| c.frames.len() != steps) {
                    return Err(Error::invalid("minibatch clips must have equal frame counts"));
                }
                let mut images = Vec::with_capacity(steps * b);
                let mut owners = Vec::with_capacity(steps * b);
                for t in 0..steps {
                    for (i, c) in batch.iter().enumerate() {
                        images.push(c.frames[t].clone());
                        owners.push(i);
                    }
                }
                let x = encoder.input(g, &images)?;
                let firsts: Vec<Vec<f64>> = batch.iter().map(|c| c.first_rgb.clone()).collect();
                let first = encoder.input(g, &firsts)?;
                let v = encoder.frame_features(g, p, x, first, &owners)?;
                let out = net.forward(g, p, v, b, mode)?;
                let scores = out.pooled_logits(g)?;
                let mut residuals = Vec::with_capacity(b);
                let mut logits = Vec::with_capacity(b);
                for i in 0..b {
                    residuals.push(out.clip_residuals(g, i)?);
                    logits.push(out.clip_logits(g, i)?);
                }
                Ok(BatchOutput {
                    scores,
                    residuals,
                    logits,
                })
            }
            Network::Trn { encoder, trn } => {
                let r = self.config.sampled_frames;
                let mut images = Vec::with_capacity(r * b);
                let mut owners = Vec::with_capacity(r * b);
                for (i, c) in batch.iter().enumerate() {
                    for &j in &c.sampled {
                        images.push(c.frames[j].clone());
                        owners.push(i);
                    }
                }
                let x = encoder.input(g, &images)?;
                let firsts: Vec<Vec<f64>> = batch.iter().map(|c| c.first_rgb.clone()).collect();
                let first = encoder.input(g, &firsts)?;
                let v = encoder.frame_features(g, p, x, first, &owners)?;
                let scores = trn.forward(g, p, v, b)?;
                Ok(BatchOutput {
                    scores,
                    residuals: Vec::new(),
                    logits: Vec::new(),
                })
            }
        }
    }

    fn loss(
        &self,
        g: &mut Graph,
        out: &BatchOutput,
        batch: &[&PreparedClip],
        bank: Option<&ClassSpectrogramBank>,
    ) -> Result<Var> {
        match self.kind {
            ModelKind::Trn => {
                let classes: Vec<usize> = batch.iter().map(|c| c.label).collect();
                trn_loss(g, out.scores, &classes)
            }
            ModelKind::FsLstm => {
                let bank = bank.ok_or_else(|| Error::Bank("the fs-lstm loss needs a class bank".into()))?;
                let mut total: Option<Var> = None;
                for (i, c) in batch.iter().enumerate() {
                    let res = align_frames_var(g, out.residuals[i], bank.num_frames())?;
                    let l = fslstm_loss(
                        g,
                        out.logits[i],
                        res,
                        c.label,
                        &c.target_sqrt,
                        bank,
                        self.config.lambda,
                        self.config.alpha,
                    )?;
                    total = Some(match total {
                        Some(t) => g.add(t, l)?,
                        None => l,
                    });
                }
                let total = total.ok_or_else(|| Error::invalid("empty minibatch"))?;
                g.scale(total, 1.0 / batch.len() as f64)
            }
        }
    }

    /// Minibatches of equal-length clips in a seeded order.
    fn batches<'a>(&self, clips: &[&'a PreparedClip], epoch: usize) -> Vec<Vec<&'a PreparedClip>> {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut keyed_rng(self.config.seed, &[self.kind.tag(), 1, epoch as u64]));
        let mut out = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let mut group: Vec<&PreparedClip> = chunk.iter().map(|&i| clips[i]).collect();
            group.sort_by_key(|c| c.frames.len());
            let mut start = 0;
            for i in 1..=group.len() {
                if i == group.len() || group[i].frames.len() != group[start].frames.len() {
                    out.push(group[start..i].to_vec());
                    start = i;
                }
            }
        }
        out
    }

    /// Trains on `clips` with Adam until the epoch budget runs out or the
    /// training accuracy stays at the early-stop level for the configured
    /// number of consecutive epochs.
    pub fn train(
        &mut self,
        clips: &[&PreparedClip],
        bank: Option<&ClassSpectrogramBank>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        if clips.is_empty() {
            return Err(Error::Split("no training clips".into()));
        }
        let cfg = self.config.clone();
        let mut adam = AdamState::new(
            &self.store,
            AdamConfig {
                lr: match self.kind {
                    ModelKind::FsLstm => cfg.learning_rate,
                    ModelKind::Trn => cfg.trn_learning_rate,
                },
                ..AdamConfig::default()
            },
        );
        let mut grads = Gradients::zeros_like(&self.store);
        let mut history = Vec::new();
        let mut streak = 0;
        for epoch in 0..cfg.epochs {
            let (mut loss_sum, mut correct) = (0.0, 0);
            for (bi, batch) in self.batches(clips, epoch).iter().enumerate() {
                let key = mix_key(cfg.seed, &[self.kind.tag(), 2, epoch as u64, bi as u64]);
                let mut g = Graph::new();
                let p = self.store.bind(&mut g);
                let out = self.forward(&mut g, &p, batch, Mode::Train(key))?;
                let loss = self.loss(&mut g, &out, batch, bank)?;
                g.backward(loss)?;
                grads.reset();
                grads.accumulate(&g, &p);
                grads.clip_global_norm(cfg.clip_norm);
                adam_step(&mut self.store, &grads, &mut adam)?;
                self.step += 1;
                loss_sum += g.value(loss).item() * batch.len() as f64;
                let scores = g.value(out.scores);
                let c = scores.last_dim();
                for (i, clip) in batch.iter().enumerate() {
                    if argmax(&scores.data()[i * c..(i + 1) * c]) == clip.label {
                        correct += 1;
                    }
                }
            }
            let stats = EpochStats {
                epoch,
                loss: loss_sum / clips.len() as f64,
                train_accuracy: correct as f64 / clips.len() as f64,
            };
            on_epoch(&stats);
            history.push(stats);
            streak = if stats.train_accuracy >= cfg.early_stop_accuracy {
                streak + 1
            } else {
                0
            };
            if cfg.early_stop_patience > 0 && streak >= cfg.early_stop_patience {
                break;
            }
        }
        Ok(history)
    }

    /// Eval-mode predictions for every clip.
    pub fn predict(&self, clips: &[&PreparedClip]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(self.config.batch_size) {
            let mut start = 0;
            let mut groups = Vec::new();
            for i in 1..=chunk.len() {
                if i == chunk.len() || chunk[i].frames.len() != chunk[start].frames.len() {
                    groups.push(&chunk[start..i]);
                    start = i;
                }
            }
            for group in groups {
                let mut g = Graph::new();
                let p = self.store.bind_frozen(&mut g);
                let res = self.forward(&mut g, &p, group, Mode::Eval)?;
                let probs = g.softmax(res.scores)?;
                let pv = g.value(probs);
                let c = pv.last_dim();
                for i in 0..group.len() {
                    let probabilities = pv.data()[i * c..(i + 1) * c].to_vec();
                    let residual = match res.residuals.get(i) {
                        Some(&r) => {
                            let t = g.value(r);
                            Some(Matrix::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec())?)
                        }
                        None => None,
                    };
                    out.push(Prediction {
                        class: argmax(&probabilities),
                        probabilities,
                        residual,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class: usize,
    /// Model 1 residual frames at the video timestep rate.
    pub residual: Option<Matrix>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Compose with the predicted class (Model 1 adds its aligned residual) and
/// render a waveform (Algorithm 1, "Aud_generated ← ISTFT(S′)").
pub fn synthesize_prediction(pred: &Prediction, bank: &ClassSpectrogramBank, config: &RunConfig) -> Result<AudioClip> {
    let aligned = match &pred.residual {
        Some(r) => Some(align_frames(r, bank.num_frames())?),
        None => None,
    };
    let spec = compose_spectrogram(aligned.as_ref(), pred.class, bank)?;
    synthesize_waveform(&spec, config.stft_params()?, config.gl_iterations)
}

/// Synthesis from the clip's own spectrogram expressed as a residual over its class base.
pub fn synthesize_true_residual(
    clip: &PreparedClip,
    bank: &ClassSpectrogramBank,
    config: &RunConfig,
) -> Result<AudioClip> {
    let residual = extract_residual(&clip.target_sqrt, clip.label, bank)?;
    let spec = compose_spectrogram(Some(&residual), clip.label, bank)?;
    synthesize_waveform(&spec, config.stft_params()?, config.gl_iterations)
}

pub fn split_refs(clips: &[PreparedClip], split: Split) -> Vec<&PreparedClip> {
    clips.iter().filter(|c| c.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[-1.0, -0.5]), 1);
    }

    #[test]
    fn model_kind_parses() {
        assert_eq!("trn".parse::<ModelKind>().unwrap(), ModelKind::Trn);
        assert!("rnn".parse::<ModelKind>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_model() {
        let cfg = RunConfig::default();
        let m = Model::new(ModelKind::Trn, &cfg).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::decode(&m.to_checkpoint().encode().unwrap()).unwrap()).unwrap();
        let a: Vec<_> = m.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let b: Vec<_> = back.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(a, b);
    }
}
