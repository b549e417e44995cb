use std::path::Path;

use super::codec::{ByteReader, ByteWriter};
use super::config::RunConfig;
use crate::dsp::StftParams;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synth::{BankEntry, ClassSpectrogramBank};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FGCKPT01";
pub const BANK_MAGIC: &[u8; 8] = b"FGBANK01";
const CHECKPOINT_VERSION: u32 = 1;

/// Storage width of one tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub precision: Precision,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Which model the tensors belong to (`fslstm`, `trn`, `retrieval`).
    pub model: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(model: &str, config: &RunConfig, step: u64, store: &ParamStore) -> Self {
        Self {
            model: model.to_string(),
            config: config.clone(),
            seed: config.seed,
            step,
            tensors: store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    precision: Precision::F64,
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    /// Copies every tensor into the matching entry of `store`.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for nt in &self.tensors {
            let id = store
                .id(&nt.name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor {} not in model", nt.name)))?;
            let dst = store.get_mut(id);
            if dst.shape() != nt.tensor.shape() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    nt.name,
                    nt.tensor.shape(),
                    dst.shape()
                )));
            }
            *dst = nt.tensor.clone();
        }
        Ok(())
    }

    /// Rejects checkpoints whose class count or bin count differ from `expected`.
    pub fn check_compatible(&self, expected: &RunConfig) -> Result<()> {
        if self.config.classes != expected.classes {
            return Err(Error::Config(format!(
                "checkpoint has {} classes, expected {}",
                self.config.classes.len(),
                expected.classes.len()
            )));
        }
        if self.config.num_bins() != expected.num_bins() {
            return Err(Error::Config(format!(
                "checkpoint has {} bins, expected {}",
                self.config.num_bins(),
                expected.num_bins()
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_magic(CHECKPOINT_MAGIC);
        let text = self.config.to_text();
        w.u32(CHECKPOINT_VERSION)
            .str(&self.model)
            .str(&text)
            .str(&self.config.hash())
            .u64(self.seed)
            .u64(self.step)
            .usize(self.tensors.len());
        let mut names = std::collections::BTreeSet::new();
        for nt in &self.tensors {
            if !names.insert(nt.name.as_str()) {
                return Err(Error::invalid(format!("duplicate tensor name {}", nt.name)));
            }
            w.str(&nt.name).usize(nt.tensor.shape().len());
            for &d in nt.tensor.shape() {
                w.usize(d);
            }
            match nt.precision {
                Precision::F64 => {
                    w.u8(0).f64s(nt.tensor.data());
                }
                Precision::F32 => {
                    w.u8(1);
                    for &v in nt.tensor.data() {
                        w.f32(v as f32);
                    }
                }
            }
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_magic(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::codec(at, format!("unsupported checkpoint version {version}")));
        }
        let model = r.str()?;
        let at = r.offset();
        let text = r.str()?;
        let hash = r.str()?;
        let config = RunConfig::from_text(&text)?;
        if config.hash() != hash {
            return Err(Error::codec(at, "config hash mismatch"));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let count = r.usize()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::codec(r.offset(), "tensor size overflows"))?;
            let at = r.offset();
            let (precision, data) = match r.u8()? {
                0 => (Precision::F64, r.f64s(n)?),
                1 => (Precision::F32, r.f32s(n)?.into_iter().map(f64::from).collect()),
                other => return Err(Error::codec(at, format!("unknown precision flag {other}"))),
            };
            let tensor = Tensor::new(&shape, data).map_err(|e| Error::codec(at, e.to_string()))?;
            tensors.push(NamedTensor {
                name,
                precision,
                tensor,
            });
        }
        r.expect_end()?;
        Ok(Self {
            model,
            config,
            seed,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn encode_bank(bank: &ClassSpectrogramBank) -> Vec<u8> {
    let mut w = ByteWriter::with_magic(BANK_MAGIC);
    let p = bank.params;
    w.u32(bank.sample_rate)
        .usize(p.fft_size)
        .usize(p.window_size)
        .usize(p.hop_size)
        .usize(bank.num_classes())
        .usize(bank.num_frames())
        .usize(bank.num_bins());
    for e in &bank.entries {
        w.str(&e.name).usize(e.clip_count).f64s(e.mean.as_slice());
    }
    w.finish()
}

pub fn decode_bank(bytes: &[u8]) -> Result<ClassSpectrogramBank> {
    let mut r = ByteReader::with_magic(bytes, BANK_MAGIC, "bank")?;
    let sample_rate = r.u32()?;
    let at = r.offset();
    let (fft, win, hop) = (r.usize()?, r.usize()?, r.usize()?);
    let params = StftParams::new(fft, win, hop).map_err(|e| Error::codec(at, e.to_string()))?;
    let (classes, frames, bins) = (r.usize()?, r.usize()?, r.usize()?);
    if bins != params.num_bins() {
        return Err(Error::codec(at, format!("{bins} bins do not match fft size {fft}")));
    }
    let mut entries = Vec::with_capacity(classes.min(4096));
    for _ in 0..classes {
        let name = r.str()?;
        let clip_count = r.usize()?;
        let data = r.f64s(frames * bins)?;
        entries.push(BankEntry {
            name,
            clip_count,
            mean: Matrix::from_vec(frames, bins, data)?,
        });
    }
    r.expect_end()?;
    Ok(ClassSpectrogramBank {
        entries,
        params,
        sample_rate,
    })
}

pub fn save_bank(path: impl AsRef<Path>, bank: &ClassSpectrogramBank) -> Result<()> {
    std::fs::write(path, encode_bank(bank))?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<ClassSpectrogramBank> {
    decode_bank(&std::fs::read(path)?)
}
