//! Per-pixel feature extraction and multi-scale average pooling.
//!
//! The learned encoders this replaces are out of scope; instead a
//! [`DescriptorProvider`] turns an image into a [`FeatureMap`] of unit-norm
//! descriptors at one of two stage resolutions (1/16 coarse, 1/4 fine). The
//! default provider concatenates mean-removed 7x7 patch intensities with
//! Sobel responses and projects them through a fixed seeded random matrix, so
//! the whole pipeline is deterministic with no trained weights. Activations
//! exported from a learned encoder can be plugged in from file instead
//! ([`load_feature_map`], byte layout documented there).

use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Descriptors below this L2 norm are the designated invalid sentinel
/// (textureless pixel, out-of-frame sample, masked blend).
pub const MIN_DESCRIPTOR_NORM: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty image")]
    EmptyImage,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("data length {got} does not match width*height*channels = {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite descriptor entry at pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("descriptor at ({x}, {y}) has norm {norm}; expected 1 within 1e-3 or an all-zero sentinel")]
    NotNormalized { x: usize, y: usize, norm: f32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad feature file: {0}")]
    Format(String),
}

/// Processing stage: which resolution features are extracted at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    /// Downsampling factor relative to full resolution.
    pub fn scale(self) -> usize {
        match self {
            Stage::Coarse => 16,
            Stage::Fine => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }
}

/// Grayscale raster with f32 intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct GrayImageF32 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImageF32 {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        if width == 0 || height == 0 {
            return Err(FeatureError::EmptyImage);
        }
        if data.len() != width * height {
            return Err(FeatureError::DataLength {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Rec.601 luma of an 8-bit RGB image, scaled to [0, 1].
pub fn gray_from_rgb(img: &image::RgbImage) -> GrayImageF32 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for p in img.pixels() {
        let [r, g, b] = p.0;
        data.push((0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0);
    }
    GrayImageF32 {
        width: w,
        height: h,
        data,
    }
}

/// Triangle-wave mirror index: reflects out-of-range indices back into
/// [0, n), repeating edges. Total over all i.
fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Reflect-pad an image on the right and bottom up to multiples of `m`.
pub fn pad_to_multiple(img: &GrayImageF32, m: usize) -> GrayImageF32 {
    let pw = img.width.div_ceil(m) * m;
    let ph = img.height.div_ceil(m) * m;
    if pw == img.width && ph == img.height {
        return img.clone();
    }
    let mut data = vec![0.0f32; pw * ph];
    for y in 0..ph {
        let sy = mirror_index(y as isize, img.height);
        for x in 0..pw {
            let sx = mirror_index(x as isize, img.width);
            data[y * pw + x] = img.at(sx, sy);
        }
    }
    GrayImageF32 {
        width: pw,
        height: ph,
        data,
    }
}

fn block_mean_downsample(img: &GrayImageF32, s: usize) -> GrayImageF32 {
    debug_assert_eq!(img.width % s, 0);
    debug_assert_eq!(img.height % s, 0);
    let (w, h) = (img.width / s, img.height / s);
    let mut data = vec![0.0f32; w * h];
    let inv = 1.0 / (s * s) as f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in 0..s {
                for dx in 0..s {
                    acc += img.at(x * s + dx, y * s + dy);
                }
            }
            data[y * w + x] = acc * inv;
        }
    }
    GrayImageF32 {
        width: w,
        height: h,
        data,
    }
}

/// Configuration of the default patch + Sobel descriptor.
#[derive(Debug, Clone)]
pub struct DescriptorConfig {
    /// Half-width of the intensity patch (3 gives a 7x7 window).
    pub patch_radius: usize,
    /// Output channels after the fixed random projection.
    pub channels: usize,
    /// Seed of the projection matrix; part of the provider identity.
    pub projection_seed: u64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            channels: 32,
            projection_seed: 0x5eed_f00d,
        }
    }
}

impl DescriptorConfig {
    fn raw_dim(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        side * side + 2
    }

    /// Fixed projection matrix, row-major [channels][raw_dim].
    fn projection(&self) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.projection_seed);
        let raw = self.raw_dim();
        (0..self.channels * raw)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect()
    }
}

/// Dense per-pixel descriptors at one stage resolution.
///
/// Layout is row-major `[y][x][c]`. Valid descriptors are unit-norm; the
/// all-zero vector is the invalid sentinel.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    /// Downsampling factor relative to full resolution.
    scale: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        scale: usize,
        data: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(FeatureError::EmptyImage);
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(FeatureError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            scale,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn descriptor(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Whether the stored descriptor is a valid (non-sentinel) vector.
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.descriptor(x, y).iter().any(|&v| v != 0.0)
    }

    /// Bilinear descriptor sample at a continuous position, renormalized.
    /// Returns false (and zeros `out`) outside the map or when the blend has
    /// no valid mass.
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f32]) -> bool {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        if !(x.is_finite() && y.is_finite()) {
            return false;
        }
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return false;
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let weights = [
            ((1.0 - fx) * (1.0 - fy), (x0, y0)),
            (fx * (1.0 - fy), (x1, y0)),
            ((1.0 - fx) * fy, (x0, y1)),
            (fx * fy, (x1, y1)),
        ];
        for (wgt, (px, py)) in weights {
            if wgt == 0.0 {
                continue;
            }
            let d = self.descriptor(px, py);
            for (o, v) in out.iter_mut().zip(d) {
                *o += wgt * v;
            }
        }
        let norm: f32 = out.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm < MIN_DESCRIPTOR_NORM {
            out.fill(0.0);
            return false;
        }
        for o in out.iter_mut() {
            *o /= norm;
        }
        true
    }

    /// Allocating wrapper around [`FeatureMap::sample_into`].
    pub fn sample(&self, x: f64, y: f64) -> Option<Vec<f32>> {
        let mut out = vec![0.0f32; self.channels];
        self.sample_into(x, y, &mut out).then_some(out)
    }
}

/// Average-pool pyramid of one feature map; level k is pooled k times.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &FeatureMap {
        &self.levels[k]
    }
}

/// 2x2 average pooling of a feature map (ceiling dimensions), renormalized
/// per pixel. Pooled vectors below the sentinel norm stay invalid.
fn pool_half(map: &FeatureMap) -> FeatureMap {
    let w = map.width.div_ceil(2);
    let h = map.height.div_ceil(2);
    let ch = map.channels;
    let mut data = vec![0.0f32; w * h * ch];
    let mut acc = vec![0.0f32; ch];
    for y in 0..h {
        for x in 0..w {
            acc.fill(0.0);
            let mut count = 0u32;
            for dy in 0..2 {
                for dx in 0..2 {
                    let sx = 2 * x + dx;
                    let sy = 2 * y + dy;
                    if sx < map.width && sy < map.height {
                        count += 1;
                        for (a, v) in acc.iter_mut().zip(map.descriptor(sx, sy)) {
                            *a += v;
                        }
                    }
                }
            }
            let inv = 1.0 / count as f32;
            let norm: f32 = acc
                .iter()
                .map(|v| (v * inv) * (v * inv))
                .sum::<f32>()
                .sqrt();
            let out = &mut data[(y * w + x) * ch..(y * w + x + 1) * ch];
            if norm >= MIN_DESCRIPTOR_NORM {
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o = a * inv / norm;
                }
            }
        }
    }
    FeatureMap {
        width: w,
        height: h,
        channels: ch,
        scale: map.scale * 2,
        data,
    }
}

/// Build the m_s-level pyramid used for multi-scale epipolar sampling.
/// Level 0 is the unpooled map.
pub fn build_pyramid(map: &FeatureMap, m_s: usize) -> Result<FeaturePyramid, FeatureError> {
    if m_s < 1 {
        return Err(FeatureError::InvalidConfig("m_s must be >= 1".into()));
    }
    let min_dim = map.width.min(map.height);
    let max_poolings = (usize::BITS - 1 - min_dim.leading_zeros()) as usize; // floor(log2)
    if m_s - 1 > max_poolings {
        return Err(FeatureError::InvalidConfig(format!(
            "m_s = {m_s} pools past a single pixel for a {}x{} map",
            map.width, map.height
        )));
    }
    let mut levels = Vec::with_capacity(m_s);
    levels.push(map.clone());
    for _ in 1..m_s {
        levels.push(pool_half(levels.last().unwrap()));
    }
    Ok(FeaturePyramid { levels })
}

fn extract_rows(
    image: &GrayImageF32,
    stage: Stage,
    config: &DescriptorConfig,
    sequential: bool,
) -> Result<FeatureMap, FeatureError> {
    if image.width == 0 || image.height == 0 || image.data.is_empty() {
        return Err(FeatureError::EmptyImage);
    }
    if config.channels == 0 || config.patch_radius == 0 {
        return Err(FeatureError::InvalidConfig(
            "channels and patch_radius must be positive".into(),
        ));
    }
    let padded = pad_to_multiple(image, 16);
    let small = block_mean_downsample(&padded, stage.scale());
    let (w, h) = (small.width, small.height);
    let ch = config.channels;
    let projection = config.projection();
    let raw_dim = config.raw_dim();
    let r = config.patch_radius as isize;
    let mut data = vec![0.0f32; w * h * ch];

    let fill_row = |y: usize, row: &mut [f32]| {
        let mut raw = vec![0.0f32; raw_dim];
        for x in 0..w {
            // Mean-removed patch intensities.
            let mut mean = 0.0f32;
            let mut idx = 0;
            for dy in -r..=r {
                let sy = mirror_index(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = mirror_index(x as isize + dx, w);
                    let v = small.at(sx, sy);
                    raw[idx] = v;
                    mean += v;
                    idx += 1;
                }
            }
            mean /= idx as f32;
            for v in raw[..idx].iter_mut() {
                *v -= mean;
            }
            // Sobel responses (reflected borders), normalized by 1/8.
            let px = |dx: isize, dy: isize| {
                small.at(
                    mirror_index(x as isize + dx, w),
                    mirror_index(y as isize + dy, h),
                )
            };
            let gx = (px(1, -1) + 2.0 * px(1, 0) + px(1, 1)
                - px(-1, -1)
                - 2.0 * px(-1, 0)
                - px(-1, 1))
                / 8.0;
            let gy = (px(-1, 1) + 2.0 * px(0, 1) + px(1, 1)
                - px(-1, -1)
                - 2.0 * px(0, -1)
                - px(1, -1))
                / 8.0;
            raw[idx] = gx;
            raw[idx + 1] = gy;

            let out = &mut row[x * ch..(x + 1) * ch];
            for (c, o) in out.iter_mut().enumerate() {
                let prow = &projection[c * raw_dim..(c + 1) * raw_dim];
                *o = prow.iter().zip(&raw).map(|(p, v)| p * v).sum();
            }
            // Zero-mean across channels, then unit norm; textureless pixels
            // collapse to the zero sentinel.
            let cmean: f32 = out.iter().sum::<f32>() / ch as f32;
            for o in out.iter_mut() {
                *o -= cmean;
            }
            let norm: f32 = out.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm < MIN_DESCRIPTOR_NORM {
                out.fill(0.0);
            } else {
                for o in out.iter_mut() {
                    *o /= norm;
                }
            }
        }
    };

    if sequential {
        par::for_each_row_seq(&mut data, w * ch, fill_row);
    } else {
        par::for_each_row(&mut data, w * ch, fill_row);
    }
    FeatureMap::new(w, h, ch, stage.scale(), data)
}

/// Extract the default patch + Sobel descriptors at the stage resolution.
/// Deterministic: the same image bytes always produce the same map.
pub fn extract_features(
    image: &GrayImageF32,
    stage: Stage,
    config: &DescriptorConfig,
) -> Result<FeatureMap, FeatureError> {
    extract_rows(image, stage, config, true)
}

/// Row-parallel version of [`extract_features`] with identical output.
#[cfg(feature = "parallel")]
pub fn extract_features_parallel(
    image: &GrayImageF32,
    stage: Stage,
    config: &DescriptorConfig,
) -> Result<FeatureMap, FeatureError> {
    extract_rows(image, stage, config, false)
}

pub(crate) fn extract_features_auto(
    image: &GrayImageF32,
    stage: Stage,
    config: &DescriptorConfig,
) -> Result<FeatureMap, FeatureError> {
    extract_rows(image, stage, config, !cfg!(feature = "parallel"))
}

/// Descriptor source for the pipeline: the built-in provider or activations
/// imported from file.
pub trait DescriptorProvider: Send + Sync {
    fn extract(
        &self,
        image: &GrayImageF32,
        stage: Stage,
        view_index: usize,
    ) -> Result<FeatureMap, FeatureError>;
}

/// Default deterministic provider (mean-removed patch + Sobel + fixed random
/// projection).
#[derive(Debug, Clone, Default)]
pub struct PatchSobelProvider {
    pub config: DescriptorConfig,
}

impl DescriptorProvider for PatchSobelProvider {
    fn extract(
        &self,
        image: &GrayImageF32,
        stage: Stage,
        _view_index: usize,
    ) -> Result<FeatureMap, FeatureError> {
        extract_features_auto(image, stage, &self.config)
    }
}

/// Provider reading precomputed maps from `dir/{view:04}_{stage}.fmap`.
#[derive(Debug, Clone)]
pub struct ImportedFeatures {
    pub dir: PathBuf,
}

impl DescriptorProvider for ImportedFeatures {
    fn extract(
        &self,
        image: &GrayImageF32,
        stage: Stage,
        view_index: usize,
    ) -> Result<FeatureMap, FeatureError> {
        let path = self
            .dir
            .join(format!("{view_index:04}_{}.fmap", stage.name()));
        let map = load_feature_map(&path)?;
        let padded_w = image.width.div_ceil(16) * 16;
        let padded_h = image.height.div_ceil(16) * 16;
        let (ew, eh) = (padded_w / stage.scale(), padded_h / stage.scale());
        if map.width != ew || map.height != eh || map.scale != stage.scale() {
            return Err(FeatureError::Format(format!(
                "{}: {}x{} at scale {} does not match expected {}x{} at scale {}",
                path.display(),
                map.width,
                map.height,
                map.scale,
                ew,
                eh,
                stage.scale()
            )));
        }
        Ok(map)
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"EFM1";

/// Write a feature map as flat binary.
///
/// Byte layout (little-endian):
/// - bytes 0..4   magic "EFM1"
/// - bytes 4..8   width  (u32)
/// - bytes 8..12  height (u32)
/// - bytes 12..14 channels (u16)
/// - bytes 14..16 scale (u16)
/// - then width*height*channels f32 values, row-major `[y][x][c]`.
pub fn save_feature_map(map: &FeatureMap, path: &Path) -> Result<(), FeatureError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(FEATURE_MAGIC)?;
    f.write_all(&(map.width as u32).to_le_bytes())?;
    f.write_all(&(map.height as u32).to_le_bytes())?;
    f.write_all(&(map.channels as u16).to_le_bytes())?;
    f.write_all(&(map.scale as u16).to_le_bytes())?;
    for v in &map.data {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a feature map written by [`save_feature_map`] (or an external
/// exporter following the same layout). Descriptors must be unit-norm within
/// 1e-3 or all-zero sentinels.
pub fn load_feature_map(path: &Path) -> Result<FeatureMap, FeatureError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(FeatureError::Format("bad magic; expected EFM1".into()));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let channels = u16::from_le_bytes(header[12..14].try_into().unwrap()) as usize;
    let scale = u16::from_le_bytes(header[14..16].try_into().unwrap()) as usize;
    if width == 0 || height == 0 || channels == 0 || scale == 0 {
        return Err(FeatureError::Format("zero dimension in header".into()));
    }
    let count = width * height * channels;
    let mut bytes = vec![0u8; count * 4];
    f.read_exact(&mut bytes)?;
    let mut data = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let map = FeatureMap::new(width, height, channels, scale, data)?;
    for y in 0..height {
        for x in 0..width {
            let d = map.descriptor(x, y);
            if d.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::NonFinite { x, y });
            }
            let norm: f32 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm >= MIN_DESCRIPTOR_NORM && (norm - 1.0).abs() > 1e-3 {
                return Err(FeatureError::NotNormalized { x, y, norm });
            }
        }
    }
    Ok(map)
}
