//! Small convolutional image encoder standing in for a pretrained backbone,
//! plus the per-frame feature `[f(SP_t); f(I_1)]` and a loader for features
//! computed elsewhere.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

pub const FEATURES_MAGIC: &[u8; 8] = b"FGFEAT01";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Output channels of each {conv 3×3, relu, 2× average-pool} stage.
    pub widths: Vec<usize>,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            in_channels: 3,
            widths: vec![8, 16],
            output_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.in_channels == 0 || self.widths.is_empty() {
            return Err(Error::Config(
                "encoder dims must be positive with at least one stage".into(),
            ));
        }
        let shrink = 1usize << self.widths.len();
        if self.height < shrink || self.width < shrink {
            return Err(Error::Config(format!(
                "{}x{} input too small for {} pooling stages",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        Ok(())
    }
}

/// Per-frame feature `V_t`, length `2·D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub config: EncoderConfig,
    stages: Vec<(ParamId, ParamId)>,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl FeatureEncoder {
    pub fn new(config: EncoderConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.widths.iter().enumerate() {
            let w = glorot_uniform(&[c_out, c_in, 3, 3], c_in * 9, c_out * 9, rng);
            let w = store.add(format!("{prefix}.conv{i}.w"), w)?;
            let b = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[c_out]))?;
            stages.push((w, b));
            c_in = c_out;
        }
        let pw = glorot_uniform(&[c_in, config.output_dim], c_in, config.output_dim, rng);
        let proj_w = store.add(format!("{prefix}.proj.w"), pw)?;
        let proj_b = store.add(format!("{prefix}.proj.b"), Tensor::zeros(&[config.output_dim]))?;
        Ok(Self {
            config,
            stages,
            proj_w,
            proj_b,
        })
    }

    /// Stack `[C × H × W]` images into an `[N, C, H, W]` constant.
    pub fn input(&self, g: &mut Graph, images: &[Vec<f64>]) -> Result<Var> {
        let c = &self.config;
        let per = c.in_channels * c.height * c.width;
        let mut data = Vec::with_capacity(images.len() * per);
        for im in images {
            if im.len() != per {
                return Err(Error::shape(
                    "encode_image",
                    &[c.in_channels, c.height, c.width],
                    &[im.len()],
                ));
            }
            data.extend_from_slice(im);
        }
        Ok(g.constant(Tensor::new(&[images.len(), c.in_channels, c.height, c.width], data)?))
    }

    /// Output of the last convolution stage, `[N, widths.last, H/2^k, W/2^k]`.
    pub fn feature_maps(&self, g: &mut Graph, p: &BoundParams, images: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(images);
        if s.len() != 4 || s[1..] != [c.in_channels, c.height, c.width] {
            return Err(Error::shape("encode_image", s, &[0, c.in_channels, c.height, c.width]));
        }
        let mut x = images;
        for &(w, b) in &self.stages {
            x = g.conv2d(x, p.var(w), p.var(b))?;
            x = g.relu(x)?;
            x = g.avg_pool2(x)?;
        }
        Ok(x)
    }

    /// `[N, C, H, W] -> [N × D]`.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, images: Var) -> Result<Var> {
        let maps = self.feature_maps(g, p, images)?;
        let pooled = g.global_avg_pool(maps)?;
        g.affine(pooled, p.var(self.proj_w), p.var(self.proj_b))
    }

    /// Length of a flattened [`feature_maps`](Self::feature_maps) row.
    pub fn map_len(&self) -> usize {
        let c = &self.config;
        let k = self.stages.len() as u32;
        c.widths.last().copied().unwrap_or(0) * (c.height >> k) * (c.width >> k)
    }

    /// `V_t = [f(SP_t); f(I_1)]` for every row of `space_time` (`[N,C,H,W]`).
    ///
    /// `first_rgb` holds one first frame per clip (`[B,C,H,W]`), each encoded
    /// once; `owners[n]` names the clip that row `n` belongs to.
    pub fn frame_features(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        space_time: Var,
        first_rgb: Var,
        owners: &[usize],
    ) -> Result<Var> {
        let n = g.shape(space_time)[0];
        let clips = g.shape(first_rgb)[0];
        if owners.len() != n || owners.iter().any(|&o| o >= clips) {
            return Err(Error::shape("build_frame_feature", &[n, clips], &[owners.len()]));
        }
        let motion = self.encode(g, p, space_time)?;
        let color = self.encode(g, p, first_rgb)?;
        let color = if clips == 1 {
            g.tile_rows(color, n)?
        } else {
            let mut sel = vec![0.0; n * clips];
            for (r, &o) in owners.iter().enumerate() {
                sel[r * clips + o] = 1.0;
            }
            let sel = g.constant(Tensor::new(&[n, clips], sel)?);
            g.matmul(sel, color)?
        };
        g.concat(&[motion, color], 1)
    }
}

pub fn encode_features(features: &[FrameFeature]) -> Result<Vec<u8>> {
    let dim = features.first().map_or(0, |f| f.0.len());
    let mut w = ByteWriter::with_magic(FEATURES_MAGIC);
    w.usize(features.len()).usize(dim);
    for f in features {
        if f.0.len() != dim {
            return Err(Error::shape("encode_features", &[dim], &[f.0.len()]));
        }
        for &v in &f.0 {
            w.f32(v as f32);
        }
    }
    Ok(w.finish())
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FrameFeature>> {
    let mut r = ByteReader::with_magic(bytes, FEATURES_MAGIC, "feature")?;
    let count = r.usize()?;
    let dim = r.usize()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(FrameFeature(r.f32s(dim)?.into_iter().map(f64::from).collect()));
    }
    r.expect_end()?;
    Ok(out)
}

pub fn save_features(path: impl AsRef<Path>, features: &[FrameFeature]) -> Result<()> {
    fs::write(path, encode_features(features)?)?;
    Ok(())
}

/// Load externally computed per-frame features; `expected_dim` is the model's `2·D`.
pub fn load_precomputed_features(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Vec<FrameFeature>> {
    let feats = decode_features(&fs::read(path)?)?;
    if let (Some(want), Some(f)) = (expected_dim, feats.first()) {
        if f.0.len() != want {
            return Err(Error::Config(format!(
                "feature dim {} does not match model input dim {want}",
                f.0.len()
            )));
        }
    }
    Ok(feats)
}
