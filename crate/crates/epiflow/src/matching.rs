//! Epipolar cost volumes and the per-pair disparity update.
//!
//! For each reference pixel the matcher samples `m_p` points spaced one pixel
//! apart along the epipolar line at each of the `m_s` pyramid scales around
//! the current match position, scoring them against the reference descriptor
//! by dot product ([`similarity`]). The resulting [`CostSlice`] is the 2D
//! cost volume: image plane x epipolar offsets, never a 3D depth-bin volume.
//!
//! Two update rules turn a slice into a disparity delta plus a confidence
//! logit: [`update_deterministic`] (cost-peak with parabolic sub-pixel
//! refinement, the default) and a convolutional GRU cell with loadable
//! weights ([`gru_cell`] / [`gru_head`]).

use crate::features::{FeatureMap, FeaturePyramid};
use crate::geom::EpipolarFrame;
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad weight file: {0}")]
    Format(String),
}

/// Dot-product similarity of two descriptors.
///
/// Unit-norm inputs keep the result in [-1, 1]. Returns `None` (masked) when
/// either operand is the all-zero invalid sentinel.
pub fn similarity(a: &[f32], b: &[f32]) -> Result<Option<f32>, MatchingError> {
    if a.len() != b.len() {
        return Err(MatchingError::DimensionMismatch(format!(
            "descriptor lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    Ok(Some(dot(a, b)))
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-pixel 1D similarity arrays over epipolar sample offsets.
///
/// Entries are laid out `[y][x][scale][offset]` with exactly `m_s * m_p`
/// scores per pixel; invalid entries (out-of-frame samples, zero
/// descriptors) are masked, never NaN.
#[derive(Debug, Clone)]
pub struct CostSlice {
    width: usize,
    height: usize,
    m_s: usize,
    m_p: usize,
    entries: Vec<f32>,
    valid: Vec<bool>,
    pixel_valid: Vec<bool>,
    /// Signed offsets in stage pixels, `[scale][offset]`: (j - c) << scale.
    offsets: Vec<f32>,
}

impl CostSlice {
    /// Assemble a slice from raw parts (mainly for tests and GRU plumbing).
    pub fn from_raw(
        width: usize,
        height: usize,
        m_s: usize,
        m_p: usize,
        entries: Vec<f32>,
        valid: Vec<bool>,
        pixel_valid: Vec<bool>,
    ) -> Result<Self, MatchingError> {
        let per_pixel = m_s * m_p;
        if entries.len() != width * height * per_pixel || valid.len() != entries.len() {
            return Err(MatchingError::DimensionMismatch(
                "entry buffers do not match width*height*m_s*m_p".into(),
            ));
        }
        if pixel_valid.len() != width * height {
            return Err(MatchingError::DimensionMismatch(
                "pixel_valid does not match width*height".into(),
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(MatchingError::InvalidConfig(
                "cost entries must be finite".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            m_s,
            m_p,
            entries,
            valid,
            pixel_valid,
            offsets: offset_table(m_s, m_p),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn m_s(&self) -> usize {
        self.m_s
    }

    pub fn m_p(&self) -> usize {
        self.m_p
    }

    pub fn entries_per_pixel(&self) -> usize {
        self.m_s * self.m_p
    }

    /// Scores of one pixel, `[scale][offset]`.
    pub fn scores(&self, x: usize, y: usize) -> &[f32] {
        let n = self.entries_per_pixel();
        let i = (y * self.width + x) * n;
        &self.entries[i..i + n]
    }

    pub fn validity(&self, x: usize, y: usize) -> &[bool] {
        let n = self.entries_per_pixel();
        let i = (y * self.width + x) * n;
        &self.valid[i..i + n]
    }

    pub fn pixel_valid(&self, x: usize, y: usize) -> bool {
        self.pixel_valid[y * self.width + x]
    }

    /// Signed epipolar offsets in stage pixels, `[scale][offset]`.
    pub fn offsets(&self) -> &[f32] {
        &self.offsets
    }
}

fn offset_table(m_s: usize, m_p: usize) -> Vec<f32> {
    let c = (m_p as isize - 1) / 2;
    let mut t = Vec::with_capacity(m_s * m_p);
    for k in 0..m_s {
        for j in 0..m_p as isize {
            t.push(((j - c) << k) as f32);
        }
    }
    t
}

/// Everything needed to score one (reference, source) pair at one stage.
pub struct CostVolumeInputs<'a> {
    /// Level-0 reference features at the stage resolution.
    pub ref_map: &'a FeatureMap,
    /// Source feature pyramid with at least `m_s` levels.
    pub src_pyramid: &'a FeaturePyramid,
    /// Current epipolar disparity per reference pixel (stage pixels).
    pub eflow: &'a [f64],
    /// Per-pixel epipolar frame; `None` marks degenerate pixels.
    pub frames: &'a [Option<EpipolarFrame>],
    /// Per-pixel validity of the current estimate.
    pub valid: &'a [bool],
    pub m_s: usize,
    pub m_p: usize,
}

fn validate_inputs(inputs: &CostVolumeInputs) -> Result<(), MatchingError> {
    let n = inputs.ref_map.width() * inputs.ref_map.height();
    if inputs.eflow.len() != n || inputs.frames.len() != n || inputs.valid.len() != n {
        return Err(MatchingError::DimensionMismatch(
            "eflow/frames/valid buffers do not match the reference map".into(),
        ));
    }
    if inputs.m_p % 2 == 0 || inputs.m_p == 0 {
        return Err(MatchingError::InvalidConfig(format!(
            "m_p = {} must be odd",
            inputs.m_p
        )));
    }
    if inputs.m_s == 0 || inputs.m_s > inputs.src_pyramid.levels() {
        return Err(MatchingError::InvalidConfig(format!(
            "m_s = {} exceeds pyramid depth {}",
            inputs.m_s,
            inputs.src_pyramid.levels()
        )));
    }
    if inputs.src_pyramid.level(0).channels() != inputs.ref_map.channels() {
        return Err(MatchingError::DimensionMismatch(
            "reference and source channel counts differ".into(),
        ));
    }
    Ok(())
}

fn fill_cost_rows(inputs: &CostVolumeInputs, sequential: bool) -> CostSlice {
    let (w, h) = (inputs.ref_map.width(), inputs.ref_map.height());
    let (m_s, m_p) = (inputs.m_s, inputs.m_p);
    let per_pixel = m_s * m_p;
    let c = (m_p as isize - 1) / 2;
    let channels = inputs.ref_map.channels();
    let mut entries = vec![0.0f32; w * h * per_pixel];
    let mut valid = vec![false; w * h * per_pixel];
    let mut pixel_valid = vec![false; w * h];

    // pixel_valid is filled after the two main buffers so the row closure
    // only captures immutable inputs.
    let fill = |y: usize, e_row: &mut [f32], v_row: &mut [bool]| {
        let mut buf = vec![0.0f32; channels];
        for x in 0..w {
            let i = y * w + x;
            if !inputs.valid[i] {
                continue;
            }
            let Some(frame) = inputs.frames[i] else {
                continue;
            };
            if !inputs.ref_map.is_valid(x, y) {
                continue;
            }
            let p_s = frame.point_at(inputs.eflow[i]);
            let dir = frame.direction();
            let ref_desc = inputs.ref_map.descriptor(x, y);
            for k in 0..m_s {
                let level = inputs.src_pyramid.level(k);
                let s = (1usize << k) as f64;
                let lx = (p_s.x + 0.5) / s - 0.5;
                let ly = (p_s.y + 0.5) / s - 0.5;
                for j in 0..m_p as isize {
                    let o = (j - c) as f64;
                    let sx = lx + o * dir.x;
                    let sy = ly + o * dir.y;
                    if level.sample_into(sx, sy, &mut buf) {
                        let slot = x * per_pixel + k * m_p + j as usize;
                        e_row[slot] = dot(ref_desc, &buf);
                        v_row[slot] = true;
                    }
                }
            }
        }
    };

    if sequential {
        par::for_each_row2_seq(&mut entries, w * per_pixel, &mut valid, w * per_pixel, fill);
    } else {
        par::for_each_row2(&mut entries, w * per_pixel, &mut valid, w * per_pixel, fill);
    }
    for i in 0..w * h {
        pixel_valid[i] = valid[i * per_pixel..(i + 1) * per_pixel].iter().any(|&v| v);
    }
    CostSlice {
        width: w,
        height: h,
        m_s,
        m_p,
        entries,
        valid,
        pixel_valid,
        offsets: offset_table(m_s, m_p),
    }
}

/// Build the per-pair cost slice for the current disparity estimates.
pub fn build_cost_slice(inputs: &CostVolumeInputs) -> Result<CostSlice, MatchingError> {
    validate_inputs(inputs)?;
    Ok(fill_cost_rows(inputs, true))
}

/// Row-parallel version of [`build_cost_slice`] with identical output.
#[cfg(feature = "parallel")]
pub fn build_cost_slice_parallel(inputs: &CostVolumeInputs) -> Result<CostSlice, MatchingError> {
    validate_inputs(inputs)?;
    Ok(fill_cost_rows(inputs, false))
}

pub(crate) fn build_cost_slice_auto(inputs: &CostVolumeInputs) -> Result<CostSlice, MatchingError> {
    validate_inputs(inputs)?;
    Ok(fill_cost_rows(inputs, !cfg!(feature = "parallel")))
}

/// Per-pixel disparity delta and confidence logit from one update step.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub width: usize,
    pub height: usize,
    /// Disparity change in stage pixels.
    pub delta_eflow: Vec<f64>,
    /// Pre-softmax fusion logit; `-inf` on invalid pixels.
    pub weight: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Deterministic cost-peak update.
///
/// Per pixel, every scale's similarity curve is linearly interpolated onto
/// the finest offset grid and the valid scales averaged; the argmax offset is
/// refined by a parabolic fit over its two neighbors (clamped to +-0.5). The
/// returned weight is the peak combined similarity. Deltas are relative to
/// the disparity the slice was built for.
pub fn update_deterministic(slice: &CostSlice) -> UpdateResult {
    let (w, h) = (slice.width, slice.height);
    let (m_s, m_p) = (slice.m_s, slice.m_p);
    let c = (m_p as isize - 1) / 2;
    let mut delta_eflow = vec![0.0f64; w * h];
    let mut weight = vec![f32::NEG_INFINITY; w * h];
    let mut valid = vec![false; w * h];

    let mut combined = vec![0.0f32; m_p];
    let mut counts = vec![0u32; m_p];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !slice.pixel_valid[i] {
                continue;
            }
            let scores = slice.scores(x, y);
            let flags = slice.validity(x, y);
            combined.fill(0.0);
            counts.fill(0);
            for (j_f, (comb, count)) in combined.iter_mut().zip(counts.iter_mut()).enumerate() {
                let pos = (j_f as isize - c) as f64;
                for k in 0..m_s {
                    // Fractional index of this finest-grid position in the
                    // scale-k offset lattice (spacing 2^k stage pixels).
                    let u = pos / (1u64 << k) as f64 + c as f64;
                    let i0 = u.floor() as usize;
                    let frac = (u - i0 as f64) as f32;
                    let base = k * m_p;
                    if frac == 0.0 {
                        if flags[base + i0] {
                            *comb += scores[base + i0];
                            *count += 1;
                        }
                    } else if flags[base + i0] && flags[base + i0 + 1] {
                        *comb +=
                            scores[base + i0] * (1.0 - frac) + scores[base + i0 + 1] * frac;
                        *count += 1;
                    }
                }
            }
            let mut best: Option<usize> = None;
            for j in 0..m_p {
                if counts[j] == 0 {
                    continue;
                }
                combined[j] /= counts[j] as f32;
                if best.is_none_or(|b| combined[j] > combined[b]) {
                    best = Some(j);
                }
            }
            let Some(b) = best else {
                continue;
            };
            let mut refined = (b as isize - c) as f64;
            if b > 0 && b + 1 < m_p && counts[b - 1] > 0 && counts[b + 1] > 0 {
                let (sm, s0, sp) =
                    (combined[b - 1] as f64, combined[b] as f64, combined[b + 1] as f64);
                let den = sm - 2.0 * s0 + sp;
                if den < -1e-12 {
                    let vertex = ((sm - sp) / (2.0 * den)).clamp(-0.5, 0.5);
                    refined += vertex;
                }
            }
            delta_eflow[i] = refined;
            weight[i] = combined[b];
            valid[i] = true;
        }
    }
    UpdateResult {
        width: w,
        height: h,
        delta_eflow,
        weight,
        valid,
    }
}

/// One gate's 3x3 convolution parameters.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Row-major [out][in][ky][kx].
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvBlock {
    fn validate(&self) -> Result<(), MatchingError> {
        if self.weight.len() != self.out_channels * self.in_channels * 9
            || self.bias.len() != self.out_channels
        {
            return Err(MatchingError::InvalidConfig(
                "conv block parameter sizes inconsistent with channel counts".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of the convolutional GRU update: update/reset/candidate gates
/// plus the linear head mapping hidden state to (delta, weight).
#[derive(Debug, Clone)]
pub struct GruWeights {
    pub hidden: usize,
    pub input: usize,
    pub update_gate: ConvBlock,
    pub reset_gate: ConvBlock,
    pub candidate: ConvBlock,
    /// Row-major [2][hidden].
    pub head_weight: Vec<f32>,
    pub head_bias: [f32; 2],
}

impl GruWeights {
    pub fn validate(&self) -> Result<(), MatchingError> {
        let cat = self.hidden + self.input;
        for (name, block) in [
            ("update", &self.update_gate),
            ("reset", &self.reset_gate),
            ("candidate", &self.candidate),
        ] {
            block.validate()?;
            if block.in_channels != cat || block.out_channels != self.hidden {
                return Err(MatchingError::InvalidConfig(format!(
                    "{name} gate must map {cat} -> {} channels",
                    self.hidden
                )));
            }
        }
        if self.head_weight.len() != 2 * self.hidden {
            return Err(MatchingError::InvalidConfig(
                "head weight must be 2 x hidden".into(),
            ));
        }
        Ok(())
    }

    /// Random weights for tests and property checks.
    pub fn random(hidden: usize, input: usize, seed: u64, scale: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = hidden + input;
        let mut block = || ConvBlock {
            out_channels: hidden,
            in_channels: cat,
            weight: (0..hidden * cat * 9)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
            bias: (0..hidden).map(|_| rng.random_range(-scale..scale)).collect(),
        };
        let update_gate = block();
        let reset_gate = block();
        let candidate = block();
        Self {
            hidden,
            input,
            update_gate,
            reset_gate,
            candidate,
            head_weight: (0..2 * hidden)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
            head_bias: [rng.random_range(-scale..scale), rng.random_range(-scale..scale)],
        }
    }
}

/// Per-pixel GRU hidden state.
#[derive(Debug, Clone)]
pub struct GruState {
    pub width: usize,
    pub height: usize,
    pub hidden: usize,
    /// Row-major [y][x][ch].
    pub h: Vec<f32>,
}

impl GruState {
    pub fn zeros(width: usize, height: usize, hidden: usize) -> Self {
        Self {
            width,
            height,
            hidden,
            h: vec![0.0; width * height * hidden],
        }
    }
}

fn conv3x3(input: &[f32], w: usize, h: usize, in_ch: usize, block: &ConvBlock) -> Vec<f32> {
    let out_ch = block.out_channels;
    let mut out = vec![0.0f32; w * h * out_ch];
    for y in 0..h {
        for x in 0..w {
            let o_base = (y * w + x) * out_ch;
            for oc in 0..out_ch {
                let mut acc = block.bias[oc];
                let w_base = oc * in_ch * 9;
                for (dy, ky) in (-1isize..=1).zip(0usize..) {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue; // zero padding
                    }
                    for (dx, kx) in (-1isize..=1).zip(0usize..) {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let i_base = (sy as usize * w + sx as usize) * in_ch;
                        for ic in 0..in_ch {
                            acc += block.weight[w_base + ic * 9 + ky * 3 + kx]
                                * input[i_base + ic];
                        }
                    }
                }
                out[o_base + oc] = acc;
            }
        }
    }
    out
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU step: z and r gates from [h, x], candidate from [r*h, x], then
/// h' = (1 - z) * h + z * h_tilde.
pub fn gru_cell(
    state: &GruState,
    x: &[f32],
    x_channels: usize,
    weights: &GruWeights,
) -> Result<GruState, MatchingError> {
    weights.validate()?;
    let (w, h) = (state.width, state.height);
    if state.hidden != weights.hidden || x_channels != weights.input {
        return Err(MatchingError::InvalidConfig(format!(
            "state/input channels ({}, {x_channels}) do not match weights ({}, {})",
            state.hidden, weights.hidden, weights.input
        )));
    }
    if x.len() != w * h * x_channels {
        return Err(MatchingError::DimensionMismatch(
            "input buffer does not match grid".into(),
        ));
    }
    let hid = weights.hidden;
    let cat_ch = hid + x_channels;
    let mut cat = vec![0.0f32; w * h * cat_ch];
    for i in 0..w * h {
        cat[i * cat_ch..i * cat_ch + hid].copy_from_slice(&state.h[i * hid..(i + 1) * hid]);
        cat[i * cat_ch + hid..(i + 1) * cat_ch]
            .copy_from_slice(&x[i * x_channels..(i + 1) * x_channels]);
    }
    let z: Vec<f32> = conv3x3(&cat, w, h, cat_ch, &weights.update_gate)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f32> = conv3x3(&cat, w, h, cat_ch, &weights.reset_gate)
        .into_iter()
        .map(sigmoid)
        .collect();
    for i in 0..w * h {
        for c in 0..hid {
            cat[i * cat_ch + c] = r[i * hid + c] * state.h[i * hid + c];
        }
    }
    let h_tilde: Vec<f32> = conv3x3(&cat, w, h, cat_ch, &weights.candidate)
        .into_iter()
        .map(f32::tanh)
        .collect();
    let mut h_next = vec![0.0f32; w * h * hid];
    for i in 0..h_next.len() {
        h_next[i] = (1.0 - z[i]) * state.h[i] + z[i] * h_tilde[i];
    }
    Ok(GruState {
        width: w,
        height: h,
        hidden: hid,
        h: h_next,
    })
}

/// Linear head: hidden state to (delta_eflow, weight logit) per pixel.
/// `valid` masks pixels whose cost slice had no usable samples.
pub fn gru_head(state: &GruState, weights: &GruWeights, valid: &[bool]) -> UpdateResult {
    let (w, h, hid) = (state.width, state.height, state.hidden);
    let mut delta_eflow = vec![0.0f64; w * h];
    let mut weight = vec![f32::NEG_INFINITY; w * h];
    let mut out_valid = vec![false; w * h];
    for i in 0..w * h {
        if !valid[i] {
            continue;
        }
        let hvec = &state.h[i * hid..(i + 1) * hid];
        delta_eflow[i] = (dot(&weights.head_weight[..hid], hvec) + weights.head_bias[0]) as f64;
        weight[i] = dot(&weights.head_weight[hid..], hvec) + weights.head_bias[1];
        out_valid[i] = true;
    }
    UpdateResult {
        width: w,
        height: h,
        delta_eflow,
        weight,
        valid: out_valid,
    }
}

const GRU_MAGIC: &[u8; 4] = b"EGRU";

/// Write GRU weights.
///
/// Byte layout (little-endian):
/// - bytes 0..4  magic "EGRU"
/// - bytes 4..8  version (u32, = 1)
/// - bytes 8..12 hidden channels (u32)
/// - bytes 12..16 input channels (u32)
/// - then f32 blocks in order: update weight [hidden][hidden+input][3][3],
///   update bias [hidden], reset weight, reset bias, candidate weight,
///   candidate bias, head weight [2][hidden], head bias [2].
pub fn save_gru_weights(weights: &GruWeights, path: &Path) -> Result<(), MatchingError> {
    weights.validate()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(GRU_MAGIC)?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(weights.hidden as u32).to_le_bytes())?;
    f.write_all(&(weights.input as u32).to_le_bytes())?;
    let mut dump = |vals: &[f32]| -> std::io::Result<()> {
        for v in vals {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for block in [&weights.update_gate, &weights.reset_gate, &weights.candidate] {
        dump(&block.weight)?;
        dump(&block.bias)?;
    }
    dump(&weights.head_weight)?;
    dump(&weights.head_bias)?;
    Ok(())
}

/// Read GRU weights written by [`save_gru_weights`].
pub fn load_gru_weights(path: &Path) -> Result<GruWeights, MatchingError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    if &header[0..4] != GRU_MAGIC {
        return Err(MatchingError::Format("bad magic; expected EGRU".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != 1 {
        return Err(MatchingError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let hidden = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let input = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if hidden == 0 || input == 0 {
        return Err(MatchingError::Format("zero channel count".into()));
    }
    let cat = hidden + input;
    let mut read_block = |count: usize| -> Result<Vec<f32>, MatchingError> {
        let mut bytes = vec![0u8; count * 4];
        f.read_exact(&mut bytes)
            .map_err(|_| MatchingError::Format("file truncated".into()))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut blocks = Vec::new();
    for _ in 0..3 {
        let weight = read_block(hidden * cat * 9)?;
        let bias = read_block(hidden)?;
        blocks.push(ConvBlock {
            out_channels: hidden,
            in_channels: cat,
            weight,
            bias,
        });
    }
    let head_weight = read_block(2 * hidden)?;
    let head_bias_v = read_block(2)?;
    let candidate = blocks.pop().unwrap();
    let reset_gate = blocks.pop().unwrap();
    let update_gate = blocks.pop().unwrap();
    let weights = GruWeights {
        hidden,
        input,
        update_gate,
        reset_gate,
        candidate,
        head_weight,
        head_bias: [head_bias_v[0], head_bias_v[1]],
    };
    weights.validate()?;
    Ok(weights)
}
