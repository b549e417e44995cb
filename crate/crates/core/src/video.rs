//! Frame ingest and the pre-processing that feeds both classifiers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::{interp_position, Matrix};

pub const RAW_FRAMES_MAGIC: &[u8; 8] = b"FGFRAME1";

/// Frame rate the interpolation stage targets by default.
pub const TARGET_FPS: f64 = 190.0;

/// Color image as three planes (R, G, B) with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub planes: [Matrix; 3],
}

impl RgbImage {
    pub fn from_gray(gray: &Matrix) -> Self {
        Self {
            planes: [gray.clone(), gray.clone(), gray.clone()],
        }
    }

    pub fn height(&self) -> usize {
        self.planes[0].rows()
    }

    pub fn width(&self) -> usize {
        self.planes[0].cols()
    }

    /// Channel-major `[3 × H × W]` values.
    pub fn to_chw(&self) -> Vec<f64> {
        self.planes.iter().flat_map(|p| p.as_slice().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Matrix>,
    pub fps: f64,
    pub first_rgb: RgbImage,
}

impl FrameSequence {
    pub fn new(frames: Vec<Matrix>, fps: f64, first_rgb: RgbImage) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("frame sequence is empty"))?;
        let shape = first.shape();
        if let Some(i) = frames.iter().position(|f| f.shape() != shape) {
            return Err(Error::shape("frame_sequence", &shape, &frames[i].shape()));
        }
        if [first_rgb.height(), first_rgb.width()] != shape {
            return Err(Error::shape(
                "frame_sequence",
                &shape,
                &[first_rgb.height(), first_rgb.width()],
            ));
        }
        Ok(Self { frames, fps, first_rgb })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].rows()
    }

    pub fn width(&self) -> usize {
        self.frames[0].cols()
    }

    pub fn duration_secs(&self) -> f64 {
        (self.frames.len().saturating_sub(1)) as f64 / self.fps
    }
}

/// Previous, current and next grayscale frames stacked as channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeImage {
    pub channels: [Matrix; 3],
}

impl SpaceTimeImage {
    pub fn to_chw(&self) -> Vec<f64> {
        self.channels
            .iter()
            .flat_map(|p| p.as_slice().iter().copied())
            .collect()
    }

    /// The "raw frame" variant: the current frame in all three channels.
    pub fn raw(frame: &Matrix) -> Self {
        Self {
            channels: [frame.clone(), frame.clone(), frame.clone()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentMode {
    /// Uniform over the whole clip.
    Full,
    /// Uniform over the first 25% of frames (early recognition).
    Early,
}

pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &Matrix, height: usize, width: usize) -> Matrix {
    if src.shape() == [height, width] {
        return src.clone();
    }
    let sy = src.rows() as f64 / height as f64;
    let sx = src.cols() as f64 / width as f64;
    let coord = |o: usize, scale: f64, len: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, c - lo as f64)
    };
    Matrix::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = coord(y, sy, src.rows());
        let (x0, x1, fx) = coord(x, sx, src.cols());
        let top = src.get(y0, x0) * (1.0 - fx) + src.get(y0, x1) * fx;
        let bot = src.get(y1, x0) * (1.0 - fx) + src.get(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn decode_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes = [Matrix::zeros(h, w), Matrix::zeros(h, w), Matrix::zeros(h, w)];
    for (x, y, px) in rgb.enumerate_pixels() {
        for (c, plane) in planes.iter_mut().enumerate() {
            plane.set(y as usize, x as usize, px.0[c] as f64);
        }
    }
    Ok(RgbImage { planes })
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

/// Load a clip from an image directory (lexicographic order) or a raw-plane
/// binary, convert to grayscale and resize to `height × width`.
pub fn load_frames(path: impl AsRef<Path>, height: usize, width: usize, fps: f64) -> Result<FrameSequence> {
    let path = path.as_ref();
    if path.is_file() {
        let bytes = fs::read(path)?;
        let (frames, first) = decode_raw_frames(&bytes).map_err(|e| Error::Ingest {
            file: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let frames: Vec<Matrix> = frames.iter().map(|f| resize_bilinear(f, height, width)).collect();
        let first_rgb = RgbImage::from_gray(&resize_bilinear(&first, height, width));
        return FrameSequence::new(frames, fps, first_rgb);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::Ingest {
            file: path.to_path_buf(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_frame_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest {
            file: path.to_path_buf(),
            message: "no frame images found".into(),
        });
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut first_rgb = None;
    let mut dims = None;
    for f in &files {
        let img = decode_image(f)?;
        let d = (img.height(), img.width());
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Ingest {
                    file: f.clone(),
                    message: format!("frame is {}x{}, expected {}x{}", d.0, d.1, prev.0, prev.1),
                })
            }
            _ => {}
        }
        let gray = Matrix::from_fn(d.0, d.1, |y, x| {
            luma(
                img.planes[0].get(y, x),
                img.planes[1].get(y, x),
                img.planes[2].get(y, x),
            )
        });
        frames.push(resize_bilinear(&gray, height, width));
        if first_rgb.is_none() {
            first_rgb = Some(RgbImage {
                planes: img.planes.map(|p| resize_bilinear(&p, height, width)),
            });
        }
    }
    FrameSequence::new(frames, fps, first_rgb.expect("at least one frame"))
}

/// Raw-plane container: magic, then `H`, `W`, `count` as u32 LE, then u8 planes row-major.
pub fn encode_raw_frames(frames: &[Matrix]) -> Result<Vec<u8>> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames to encode"))?;
    let (h, w) = (first.rows(), first.cols());
    let mut out = Vec::with_capacity(20 + frames.len() * h * w);
    out.extend_from_slice(RAW_FRAMES_MAGIC);
    for v in [h, w, frames.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in frames {
        if f.shape() != [h, w] {
            return Err(Error::shape("encode_raw_frames", &[h, w], &f.shape()));
        }
        out.extend(f.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

fn decode_raw_frames(bytes: &[u8]) -> Result<(Vec<Matrix>, Matrix)> {
    if bytes.len() < 20 || &bytes[..8] != RAW_FRAMES_MAGIC {
        return Err(Error::codec(0, "missing raw-frame magic"));
    }
    let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, n) = (rd(8), rd(12), rd(16));
    if h == 0 || w == 0 || n == 0 {
        return Err(Error::codec(8, "zero dimension in raw-frame header"));
    }
    let need = 20 + h * w * n;
    if bytes.len() < need {
        return Err(Error::codec(
            bytes.len() as u64,
            format!("payload truncated, need {need} bytes"),
        ));
    }
    let frames: Vec<Matrix> = (0..n)
        .map(|i| {
            let px = &bytes[20 + i * h * w..20 + (i + 1) * h * w];
            Matrix::from_vec(h, w, px.iter().map(|&b| b as f64 / 255.0).collect()).expect("shape")
        })
        .collect();
    let first = frames[0].clone();
    Ok((frames, first))
}

/// Interpolation factor that lifts `fps` to at least `target_fps`.
pub fn interpolation_factor_for(fps: f64, target_fps: f64) -> usize {
    ((target_fps / fps).ceil() as usize).max(1)
}

/// Insert `factor - 1` linear blends between consecutive frames.
pub fn interpolate_frames(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    if factor == 0 {
        return Err(Error::invalid("interpolation factor must be at least 1"));
    }
    if seq.len() < 2 {
        return Err(Error::invalid("interpolation needs at least two frames"));
    }
    let mut frames = Vec::with_capacity(factor * (seq.len() - 1) + 1);
    for pair in seq.frames.windows(2) {
        frames.push(pair[0].clone());
        for k in 1..factor {
            let a = k as f64 / factor as f64;
            let data = pair[0]
                .as_slice()
                .iter()
                .zip(pair[1].as_slice())
                .map(|(x, y)| (1.0 - a) * x + a * y)
                .collect();
            frames.push(Matrix::from_vec(pair[0].rows(), pair[0].cols(), data)?);
        }
    }
    frames.push(seq.frames[seq.len() - 1].clone());
    FrameSequence::new(frames, seq.fps * factor as f64, seq.first_rgb.clone())
}

/// Repeat each frame `factor` times (the replication baseline).
pub fn replicate_frames(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    if factor == 0 {
        return Err(Error::invalid("replication factor must be at least 1"));
    }
    let frames = seq
        .frames
        .iter()
        .flat_map(|f| std::iter::repeat_n(f, factor).cloned())
        .collect();
    FrameSequence::new(frames, seq.fps * factor as f64, seq.first_rgb.clone())
}

/// `(I_{t-1}, I_t, I_{t+1})` with clamped boundaries.
pub fn space_time_image(seq: &FrameSequence, t: usize) -> Result<SpaceTimeImage> {
    if seq.is_empty() {
        return Err(Error::invalid("empty frame sequence"));
    }
    if t >= seq.len() {
        return Err(Error::invalid(format!("frame index {t} out of range 0..{}", seq.len())));
    }
    let prev = t.saturating_sub(1);
    let next = (t + 1).min(seq.len() - 1);
    Ok(SpaceTimeImage {
        channels: [
            seq.frames[prev].clone(),
            seq.frames[t].clone(),
            seq.frames[next].clone(),
        ],
    })
}

/// Strictly increasing, uniformly spread frame indices (endpoints included).
pub fn sample_representative_frames(n: usize, q: usize, mode: SegmentMode) -> Result<Vec<usize>> {
    let span = match mode {
        SegmentMode::Full => n,
        SegmentMode::Early => n.div_ceil(4),
    };
    if q == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    if q > span {
        return Err(Error::invalid(format!(
            "cannot sample {q} frames from {span} available ({mode:?} mode, {n} total)"
        )));
    }
    if q == 1 {
        return Ok(vec![0]);
    }
    Ok((0..q)
        .map(|i| {
            let (lo, hi, frac) = interp_position(i, q, span);
            if frac >= 0.5 {
                hi
            } else {
                lo
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_seq(values: &[f64], fps: f64) -> FrameSequence {
        let frames: Vec<Matrix> = values.iter().map(|&v| Matrix::filled(4, 4, v)).collect();
        let rgb = RgbImage::from_gray(&frames[0]);
        FrameSequence::new(frames, fps, rgb).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let s = constant_seq(&[0.2, 0.6], 10.0);
        assert_eq!(interpolate_frames(&s, 1).unwrap(), s);
        let i = interpolate_frames(&s, 2).unwrap();
        assert_eq!(i.len(), 3);
        assert!(i.frames[1].as_slice().iter().all(|v| (v - 0.4).abs() < 1e-15));
        let five = constant_seq(&[0.0, 0.1, 0.2, 0.3, 0.4], 16.0);
        let up = interpolate_frames(&five, 4).unwrap();
        assert_eq!(up.len(), 17);
        assert!((up.duration_secs() - five.duration_secs()).abs() < 1e-9);
        assert!(interpolate_frames(&s, 0).is_err());
    }

    #[test]
    fn replication_examples() {
        let s = constant_seq(&[0.1, 0.5, 0.9], 8.0);
        assert_eq!(replicate_frames(&s, 1).unwrap(), s);
        let r = replicate_frames(&s, 2).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(r.fps, 16.0);
        for k in 0..3 {
            assert_eq!(r.frames[2 * k], r.frames[2 * k + 1]);
        }
        assert!(replicate_frames(&s, 0).is_err());
    }

    #[test]
    fn space_time_clamps_at_edges() {
        let s = constant_seq(&[0.1, 0.5, 0.9], 8.0);
        let first = space_time_image(&s, 0).unwrap();
        assert_eq!(first.channels[0], first.channels[1]);
        let last = space_time_image(&s, 2).unwrap();
        assert_eq!(last.channels[1], last.channels[2]);
        let mid = space_time_image(&s, 1).unwrap();
        assert_eq!(mid.channels[0], s.frames[0]);
        assert_eq!(mid.channels[2], s.frames[2]);
        assert!(space_time_image(&s, 3).is_err());
        let st = constant_seq(&[0.3; 5], 8.0);
        let im = space_time_image(&st, 2).unwrap();
        assert!(im.channels[0] == im.channels[1] && im.channels[1] == im.channels[2]);
    }

    #[test]
    fn moving_dot_differs_only_at_dot_positions() {
        let frames: Vec<Matrix> = (0..6)
            .map(|t| {
                let mut m = Matrix::zeros(8, 8);
                m.set(3, t, 1.0);
                m
            })
            .collect();
        let rgb = RgbImage::from_gray(&frames[0]);
        let s = FrameSequence::new(frames, 8.0, rgb).unwrap();
        let im = space_time_image(&s, 2).unwrap();
        let mut diff = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                if im.channels[0].get(y, x) != im.channels[2].get(y, x) {
                    diff.push((y, x));
                }
            }
        }
        assert_eq!(diff, vec![(3, 1), (3, 3)]);
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(
            sample_representative_frames(5, 5, SegmentMode::Full).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
        assert_eq!(
            sample_representative_frames(8, 2, SegmentMode::Full).unwrap(),
            vec![0, 7]
        );
        let early = sample_representative_frames(100, 8, SegmentMode::Early).unwrap();
        assert!(early.iter().all(|&i| i < 25));
        assert!(early.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_representative_frames(4, 5, SegmentMode::Full).is_err());
    }

    #[test]
    fn resize_keeps_constants_and_raw_round_trip() {
        let m = Matrix::filled(10, 6, 1.0);
        let r = resize_bilinear(&m, 4, 4);
        assert!(r.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let frames = vec![Matrix::filled(3, 2, 0.0), Matrix::filled(3, 2, 1.0)];
        let bytes = encode_raw_frames(&frames).unwrap();
        let (back, _) = decode_raw_frames(&bytes).unwrap();
        assert_eq!(back, frames);
        assert!(decode_raw_frames(&bytes[..bytes.len() - 1]).is_err());
    }
}
