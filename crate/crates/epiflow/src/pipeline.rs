//! End-to-end depth estimation for one reference view.
//!
//! The loop starts from a per-pixel random depth (uniform in inverse depth
//! over the declared range), converts the current fused depth to each pair's
//! epipolar disparity, scores a cost slice, applies the update rule,
//! triangulates each pair's disparity back to depth and fuses the candidates
//! with softmax weights. The coarse stage (1/16) runs `t_c` iterations, is
//! upsampled x4 by a convex combination of 3x3 neighbors, and the fine stage
//! (1/4) runs `t_f` more.
//!
//! The declared depth range is consumed only by [`init_depth`], the
//! [`compute_loss`] diagnostic and final filtering; nothing inside the
//! iteration reads it, which is what makes the method insensitive to range
//! changes.

use crate::features::{
    build_pyramid, DescriptorProvider, FeatureError, FeatureMap, FeaturePyramid, GrayImageF32,
    Stage,
};
use crate::geom::{CameraView, EpipolarFrame, GeomError, Pixel, ViewPair};
use crate::matching::{
    build_cost_slice_auto, gru_cell, gru_head, update_deterministic, CostSlice, CostVolumeInputs,
    GruState, GruWeights, MatchingError, UpdateResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Decay of per-iteration terms in the loss diagnostic.
pub const LOSS_GAMMA: f64 = 0.9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reconstruction failed: {0}")]
    ReconstructionFailed(String),
    #[error("loss undefined: no overlapping valid pixels")]
    UndefinedLoss,
}

/// Per-pixel depth values with a validity mask for one reference view.
#[derive(Debug, Clone)]
pub struct DepthField {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
    pub stage: Option<Stage>,
    pub iteration: u32,
}

impl DepthField {
    pub fn new(
        width: usize,
        height: usize,
        stage: Option<Stage>,
        depth: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, PipelineError> {
        if depth.len() != width * height || valid.len() != width * height {
            return Err(PipelineError::InvalidInput(
                "depth/valid buffers do not match dimensions".into(),
            ));
        }
        for (d, &v) in depth.iter().zip(&valid) {
            if v && !(d.is_finite() && *d > 0.0) {
                return Err(PipelineError::InvalidInput(format!(
                    "valid pixel with non-positive depth {d}"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            depth,
            valid,
            stage,
            iteration: 0,
        })
    }

    pub fn invalid(width: usize, height: usize, stage: Option<Stage>) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
            stage,
            iteration: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        debug_assert!(depth.is_finite() && depth > 0.0);
        let i = y * self.width + x;
        self.depth[i] = depth;
        self.valid[i] = true;
    }

    pub fn mask(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.valid[i] = false;
        self.depth[i] = 0.0;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel epipolar disparity for one (reference, source) pair.
#[derive(Debug, Clone)]
pub struct EFlowField {
    pub width: usize,
    pub height: usize,
    pub source_index: usize,
    /// Disparity in stage pixels along the per-pixel epipolar direction.
    pub eflow: Vec<f64>,
    pub frames: Vec<Option<EpipolarFrame>>,
    pub valid: Vec<bool>,
}

/// Per-pixel, per-source fusion logits.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub width: usize,
    pub height: usize,
    /// `[source][pixel]`, `-inf` marks a pair with no usable estimate.
    pub logits: Vec<Vec<f32>>,
}

/// Inverse-depth sample of the initialization formula:
/// 1/d = rand * (1/d_min - 1/d_max) + 1/d_max.
///
/// rand = 0 gives d_max, rand = 1 gives d_min.
pub fn inverse_depth_sample(rand: f64, d_min: f64, d_max: f64) -> f64 {
    1.0 / (rand * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max)
}

/// Random depth field over the camera's declared range, uniform in inverse
/// depth per pixel, reproducible from the seed.
pub fn init_depth(cam: &CameraView, seed: u64) -> DepthField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cam.width * cam.height;
    let mut depth = Vec::with_capacity(n);
    for _ in 0..n {
        let r: f64 = rng.random();
        depth.push(inverse_depth_sample(r, cam.depth_min, cam.depth_max));
    }
    DepthField {
        width: cam.width,
        height: cam.height,
        depth,
        valid: vec![true; n],
        stage: None,
        iteration: 0,
    }
}

/// Softmax-weighted fusion of per-pair depth candidates.
///
/// Logits are normalized across sources per pixel; pairs at `-inf` drop out,
/// and a pixel with no valid source is masked. The fused depth is a convex
/// combination, so it stays within the candidates' range.
pub fn fuse_views(
    per_pair_depths: &[DepthField],
    weights: &FusionWeights,
) -> Result<DepthField, PipelineError> {
    let Some(first) = per_pair_depths.first() else {
        return Err(PipelineError::InvalidInput("no depth candidates".into()));
    };
    let (w, h) = (first.width, first.height);
    if per_pair_depths.len() != weights.logits.len() {
        return Err(PipelineError::InvalidInput(
            "weights do not match the number of sources".into(),
        ));
    }
    for d in per_pair_depths {
        if d.width != w || d.height != h {
            return Err(PipelineError::InvalidInput(
                "depth candidates differ in dimensions".into(),
            ));
        }
    }
    for l in &weights.logits {
        if l.len() != w * h {
            return Err(PipelineError::InvalidInput(
                "logit buffer does not match dimensions".into(),
            ));
        }
    }
    let mut out = DepthField::invalid(w, h, first.stage);
    for i in 0..w * h {
        let mut max_logit = f32::NEG_INFINITY;
        for (s, d) in per_pair_depths.iter().enumerate() {
            if d.valid[i] && weights.logits[s][i] > max_logit {
                max_logit = weights.logits[s][i];
            }
        }
        if max_logit == f32::NEG_INFINITY {
            continue;
        }
        let mut denom = 0.0f64;
        let mut acc = 0.0f64;
        for (s, d) in per_pair_depths.iter().enumerate() {
            let l = weights.logits[s][i];
            if !d.valid[i] || l == f32::NEG_INFINITY {
                continue;
            }
            let e = ((l - max_logit) as f64).exp();
            denom += e;
            acc += e * d.depth[i];
        }
        out.depth[i] = acc / denom;
        out.valid[i] = true;
    }
    Ok(out)
}

/// Iteration counts and sampling parameters for one stage.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub m_s: usize,
    pub m_p: usize,
    pub iterations: usize,
}

/// Update rule driving the disparity refinement.
pub enum UpdateBackend {
    /// Cost-peak argmax with parabolic refinement (no weights needed).
    Deterministic,
    /// Convolutional GRU with loaded weights, one set per stage. The hidden
    /// state resets at stage boundaries.
    Gru {
        coarse: Box<GruWeights>,
        fine: Box<GruWeights>,
    },
}

/// Full pipeline configuration for one scene.
pub struct PipelineConfig {
    pub coarse: StageParams,
    pub fine: StageParams,
    pub seed: u64,
    pub backend: UpdateBackend,
    pub upsample_weights: Option<UpsampleWeights>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            coarse: StageParams {
                m_s: 4,
                m_p: 9,
                iterations: 8,
            },
            fine: StageParams {
                m_s: 2,
                m_p: 5,
                iterations: 2,
            },
            seed: 0,
            backend: UpdateBackend::Deterministic,
            upsample_weights: None,
        }
    }
}

/// Feature maps of one view at both stage resolutions.
pub struct ViewFeatures {
    pub coarse: FeatureMap,
    pub fine: FeatureMap,
}

/// Extract both stage feature maps for a view through a provider.
pub fn extract_view_features(
    provider: &dyn DescriptorProvider,
    image: &GrayImageF32,
    view_index: usize,
) -> Result<ViewFeatures, PipelineError> {
    Ok(ViewFeatures {
        coarse: provider.extract(image, Stage::Coarse, view_index)?,
        fine: provider.extract(image, Stage::Fine, view_index)?,
    })
}

/// Precomputed geometry and features of one (reference, source) pair at one
/// stage resolution.
pub struct PairContext {
    pub source_index: usize,
    pub pair: ViewPair,
    pub pyramid: FeaturePyramid,
    /// Per-reference-pixel epipolar frame; `None` marks degenerate pixels.
    pub frames: Vec<Option<EpipolarFrame>>,
}

/// Reference features plus all pair contexts for one stage.
pub struct StageContext<'a> {
    pub stage: Stage,
    pub ref_map: &'a FeatureMap,
    pub pairs: Vec<PairContext>,
}

/// Build the stage context: scaled cameras, view pairs (zero-baseline pairs
/// are rejected here), source pyramids and cached epipolar frames.
pub fn prepare_stage_context<'a>(
    stage: Stage,
    params: &StageParams,
    features: &'a [ViewFeatures],
    cameras: &[CameraView],
    ref_index: usize,
    source_indices: &[usize],
) -> Result<StageContext<'a>, PipelineError> {
    let ref_features = &features[ref_index];
    let ref_map = match stage {
        Stage::Coarse => &ref_features.coarse,
        Stage::Fine => &ref_features.fine,
    };
    let cam_ref = cameras[ref_index].scaled(stage.scale())?;
    if cam_ref.width != ref_map.width() || cam_ref.height != ref_map.height() {
        return Err(PipelineError::InvalidInput(format!(
            "stage camera {}x{} does not match feature map {}x{}",
            cam_ref.width,
            cam_ref.height,
            ref_map.width(),
            ref_map.height()
        )));
    }
    let mut pairs = Vec::with_capacity(source_indices.len());
    for &s in source_indices {
        if s == ref_index {
            return Err(PipelineError::InvalidInput(
                "a view cannot be its own source".into(),
            ));
        }
        let cam_src = cameras[s].scaled(stage.scale())?;
        let pair = ViewPair::new(&cam_ref, &cam_src)?;
        let src_map = match stage {
            Stage::Coarse => &features[s].coarse,
            Stage::Fine => &features[s].fine,
        };
        let pyramid = build_pyramid(src_map, params.m_s)?;
        let mut frames = Vec::with_capacity(ref_map.width() * ref_map.height());
        for y in 0..ref_map.height() {
            for x in 0..ref_map.width() {
                frames.push(pair.epipolar_frame(Pixel::new(x as f64, y as f64)).ok());
            }
        }
        pairs.push(PairContext {
            source_index: s,
            pair,
            pyramid,
            frames,
        });
    }
    Ok(StageContext {
        stage,
        ref_map,
        pairs,
    })
}

fn depth_to_eflow_field(depth: &DepthField, ctx: &PairContext) -> EFlowField {
    let (w, h) = (depth.width, depth.height);
    let mut eflow = vec![0.0f64; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.valid[i] {
                continue;
            }
            let Some(frame) = ctx.frames[i] else {
                continue;
            };
            let p = Pixel::new(x as f64, y as f64);
            if let Ok(e) = ctx.pair.depth_to_eflow_with_frame(&frame, p, depth.depth[i]) {
                eflow[i] = e;
                valid[i] = true;
            }
        }
    }
    EFlowField {
        width: w,
        height: h,
        source_index: ctx.source_index,
        eflow,
        frames: ctx.frames.clone(),
        valid,
    }
}

fn gru_input(slice: &CostSlice, eflow: &EFlowField) -> (Vec<f32>, usize) {
    let n = slice.width() * slice.height();
    let per = slice.entries_per_pixel();
    let channels = per + 1;
    let mut x = vec![0.0f32; n * channels];
    for i in 0..n {
        let (px, py) = (i % slice.width(), i / slice.width());
        let scores = slice.scores(px, py);
        let flags = slice.validity(px, py);
        let dst = &mut x[i * channels..(i + 1) * channels];
        for (d, (s, &f)) in dst[..per].iter_mut().zip(scores.iter().zip(flags)) {
            *d = if f { *s } else { 0.0 };
        }
        dst[per] = eflow.eflow[i] as f32;
    }
    (x, channels)
}

/// One refinement step of a single pair: current depth to disparity, cost
/// slice, update rule.  Masked pixels stay masked. Returns the updated
/// disparity field plus the raw update (deltas and fusion logits).
pub fn iterate_pair(
    depth: &DepthField,
    ctx: &PairContext,
    ref_map: &FeatureMap,
    params: &StageParams,
    backend: &UpdateBackend,
    stage: Stage,
    gru_state: Option<&mut GruState>,
) -> Result<(EFlowField, UpdateResult), PipelineError> {
    let mut field = depth_to_eflow_field(depth, ctx);
    let slice = build_cost_slice_auto(&CostVolumeInputs {
        ref_map,
        src_pyramid: &ctx.pyramid,
        eflow: &field.eflow,
        frames: &field.frames,
        valid: &field.valid,
        m_s: params.m_s,
        m_p: params.m_p,
    })?;
    let update = match backend {
        UpdateBackend::Deterministic => update_deterministic(&slice),
        UpdateBackend::Gru { coarse, fine } => {
            let weights = match stage {
                Stage::Coarse => coarse,
                Stage::Fine => fine,
            };
            let state = gru_state.ok_or_else(|| {
                PipelineError::InvalidInput("GRU backend requires a state".into())
            })?;
            let (x, channels) = gru_input(&slice, &field);
            *state = gru_cell(state, &x, channels, weights)?;
            let pixel_valid: Vec<bool> = (0..slice.width() * slice.height())
                .map(|i| slice.pixel_valid(i % slice.width(), i / slice.width()))
                .collect();
            gru_head(state, weights, &pixel_valid)
        }
    };
    for i in 0..field.eflow.len() {
        if field.valid[i] && update.valid[i] {
            field.eflow[i] += update.delta_eflow[i];
        } else {
            field.valid[i] = false;
        }
    }
    Ok((field, update))
}

/// Run `params.iterations` rounds of per-pair iteration, triangulation and
/// fusion, pushing the post-fusion depth of every iteration to `snapshots`.
pub fn run_stage(
    depth_in: &DepthField,
    ctx: &StageContext,
    params: &StageParams,
    backend: &UpdateBackend,
    snapshots: &mut Vec<DepthField>,
) -> Result<DepthField, PipelineError> {
    if params.iterations < 1 {
        return Err(PipelineError::InvalidInput(
            "iteration count must be >= 1".into(),
        ));
    }
    if ctx.pairs.is_empty() {
        return Err(PipelineError::InvalidInput("no source pairs".into()));
    }
    let (w, h) = (depth_in.width, depth_in.height);
    if w != ctx.ref_map.width() || h != ctx.ref_map.height() {
        return Err(PipelineError::InvalidInput(
            "depth field does not match the stage resolution".into(),
        ));
    }
    let hidden = match backend {
        UpdateBackend::Gru { coarse, fine } => {
            let weights = match ctx.stage {
                Stage::Coarse => coarse,
                Stage::Fine => fine,
            };
            let expected = params.m_s * params.m_p + 1;
            if weights.input != expected {
                return Err(PipelineError::InvalidInput(format!(
                    "GRU weights expect {} input channels but the stage produces {expected}",
                    weights.input
                )));
            }
            weights.hidden
        }
        UpdateBackend::Deterministic => 0,
    };
    let mut gru_states: Vec<GruState> = match backend {
        UpdateBackend::Gru { .. } => ctx
            .pairs
            .iter()
            .map(|_| GruState::zeros(w, h, hidden))
            .collect(),
        UpdateBackend::Deterministic => Vec::new(),
    };

    let mut current = depth_in.clone();
    current.stage = Some(ctx.stage);
    for t in 0..params.iterations {
        let mut candidates = Vec::with_capacity(ctx.pairs.len());
        let mut logits = Vec::with_capacity(ctx.pairs.len());
        for (pi, pair_ctx) in ctx.pairs.iter().enumerate() {
            let state = gru_states.get_mut(pi);
            let (field, update) =
                iterate_pair(&current, pair_ctx, ctx.ref_map, params, backend, ctx.stage, state)?;
            let mut cand = DepthField::invalid(w, h, Some(ctx.stage));
            let mut logit = vec![f32::NEG_INFINITY; w * h];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !field.valid[i] {
                        continue;
                    }
                    let Some(frame) = field.frames[i] else {
                        continue;
                    };
                    let p = Pixel::new(x as f64, y as f64);
                    // Triangulation failures (negative depth, degenerate
                    // denominator) drop this pair's logit to -inf; fusion
                    // proceeds with the remaining pairs.
                    if let Ok(d) =
                        pair_ctx
                            .pair
                            .eflow_to_depth_with_frame(&frame, p, field.eflow[i])
                    {
                        cand.depth[i] = d;
                        cand.valid[i] = true;
                        logit[i] = update.weight[i];
                    }
                }
            }
            candidates.push(cand);
            logits.push(logit);
        }
        let mut fused = fuse_views(
            &candidates,
            &FusionWeights {
                width: w,
                height: h,
                logits,
            },
        )?;
        fused.stage = Some(ctx.stage);
        fused.iteration = t as u32 + 1;
        if fused.valid_count() == 0 {
            return Err(PipelineError::ReconstructionFailed(format!(
                "all pixels masked after iteration {t} of the {} stage",
                ctx.stage.name()
            )));
        }
        snapshots.push(fused.clone());
        current = fused;
    }
    Ok(current)
}

/// Per-output-pixel convex weights over the 3x3 coarse neighborhood.
#[derive(Debug, Clone)]
pub struct UpsampleWeights {
    pub width: usize,
    pub height: usize,
    /// Row-major `[y][x][9]`, each 9-vector nonnegative and summing to 1.
    pub weights: Vec<f32>,
}

impl UpsampleWeights {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.weights.len() != self.width * self.height * 9 {
            return Err(PipelineError::InvalidInput(
                "upsample weight buffer does not match dimensions".into(),
            ));
        }
        for (i, chunk) in self.weights.chunks_exact(9).enumerate() {
            let mut sum = 0.0f64;
            for &v in chunk {
                if !(v >= 0.0) {
                    return Err(PipelineError::InvalidInput(format!(
                        "negative upsample weight at pixel {i}"
                    )));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(PipelineError::InvalidInput(format!(
                    "upsample weights at pixel {i} sum to {sum}"
                )));
            }
        }
        Ok(())
    }
}

fn hat(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Upsample a coarse depth field x4 by a convex combination of each output
/// pixel's 3x3 coarse neighborhood. Default weights reproduce bilinear
/// interpolation exactly; masked neighbors are excluded and the remaining
/// weights renormalized.
pub fn upsample_depth(
    coarse: &DepthField,
    factor: usize,
    weights: Option<&UpsampleWeights>,
) -> Result<DepthField, PipelineError> {
    if factor != 4 {
        return Err(PipelineError::InvalidInput(format!(
            "upsample factor must be 4, got {factor}"
        )));
    }
    let (cw, ch) = (coarse.width, coarse.height);
    let (fw, fh) = (cw * factor, ch * factor);
    if let Some(w) = weights {
        if w.width != fw || w.height != fh {
            return Err(PipelineError::InvalidInput(format!(
                "upsample weights are {}x{} but the output is {fw}x{fh}",
                w.width, w.height
            )));
        }
        w.validate()?;
    }
    let mut out = DepthField::invalid(fw, fh, Some(Stage::Fine));
    let inv = 1.0 / factor as f64;
    let half = (factor as f64 - 1.0) / 2.0;
    for fy in 0..fh {
        let yc = (fy as f64 - half) * inv;
        let cy = (yc.round().max(0.0) as usize).min(ch - 1);
        for fx in 0..fw {
            let xc = (fx as f64 - half) * inv;
            let cx = (xc.round().max(0.0) as usize).min(cw - 1);
            let mut wsum = 0.0f64;
            let mut dsum = 0.0f64;
            for oy in 0..3usize {
                let ny = cy as isize + oy as isize - 1;
                if ny < 0 || ny >= ch as isize {
                    continue;
                }
                for ox in 0..3usize {
                    let nx = cx as isize + ox as isize - 1;
                    if nx < 0 || nx >= cw as isize {
                        continue;
                    }
                    let ci = ny as usize * cw + nx as usize;
                    if !coarse.valid[ci] {
                        continue;
                    }
                    let wgt = match weights {
                        Some(w) => w.weights[(fy * fw + fx) * 9 + oy * 3 + ox] as f64,
                        None => hat(xc - nx as f64) * hat(yc - ny as f64),
                    };
                    if wgt <= 0.0 {
                        continue;
                    }
                    wsum += wgt;
                    dsum += wgt * coarse.depth[ci];
                }
            }
            if wsum > 1e-9 {
                let i = fy * fw + fx;
                out.depth[i] = dsum / wsum;
                out.valid[i] = true;
            }
        }
    }
    out.iteration = coarse.iteration;
    Ok(out)
}

/// Gamma-weighted L1 loss of per-iteration snapshots against ground truth,
/// in normalized inverse depth. Diagnostic only; nothing trains here.
///
/// Within each stage, snapshot i carries weight gamma^i; snapshots are
/// compared at their own resolution by center-sampling the ground truth.
pub fn compute_loss(
    stage_snapshots: &[&[DepthField]],
    gt: &DepthField,
    d_min: f64,
    d_max: f64,
) -> Result<f64, PipelineError> {
    let mut total = 0.0f64;
    let mut any = false;
    for snapshots in stage_snapshots {
        for (i, snap) in snapshots.iter().enumerate() {
            let scale = ((gt.width as f64) / (snap.width as f64)).round().max(1.0) as usize;
            let offset = (scale as f64 - 1.0) / 2.0;
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for y in 0..snap.height {
                for x in 0..snap.width {
                    let si = y * snap.width + x;
                    if !snap.valid[si] {
                        continue;
                    }
                    let gx = (x as f64 * scale as f64 + offset).round() as usize;
                    let gy = (y as f64 * scale as f64 + offset).round() as usize;
                    if gx >= gt.width || gy >= gt.height {
                        continue;
                    }
                    let gi = gy * gt.width + gx;
                    if !gt.valid[gi] {
                        continue;
                    }
                    let a = crate::geom::normalize_depth(gt.depth[gi], d_min, d_max)?;
                    let b = crate::geom::normalize_depth(snap.depth[si], d_min, d_max)?;
                    acc += (a - b).abs();
                    count += 1;
                }
            }
            if count == 0 {
                return Err(PipelineError::UndefinedLoss);
            }
            total += LOSS_GAMMA.powi(i as i32) * acc / count as f64;
            any = true;
        }
    }
    if !any {
        return Err(PipelineError::UndefinedLoss);
    }
    Ok(total)
}

/// Result of reconstructing one reference view.
pub struct ViewReconstruction {
    /// Final fine-stage depth (1/4 of the padded full resolution).
    pub depth: DepthField,
    pub coarse_snapshots: Vec<DepthField>,
    pub fine_snapshots: Vec<DepthField>,
}

/// Reconstruct one reference view against its source views.
///
/// `initial` overrides the random initialization (it must match the coarse
/// resolution); otherwise the depth starts from [`init_depth`] with
/// `config.seed`.
pub fn reconstruct_view(
    features: &[ViewFeatures],
    cameras: &[CameraView],
    ref_index: usize,
    source_indices: &[usize],
    config: &PipelineConfig,
    initial: Option<DepthField>,
) -> Result<ViewReconstruction, PipelineError> {
    if features.len() != cameras.len() {
        return Err(PipelineError::InvalidInput(
            "feature and camera counts differ".into(),
        ));
    }
    if ref_index >= cameras.len() {
        return Err(PipelineError::InvalidInput("reference index out of range".into()));
    }
    if source_indices.is_empty() {
        return Err(PipelineError::InvalidInput("no source views".into()));
    }
    if source_indices.iter().any(|&s| s >= cameras.len()) {
        return Err(PipelineError::InvalidInput("source index out of range".into()));
    }

    let coarse_ctx = prepare_stage_context(
        Stage::Coarse,
        &config.coarse,
        features,
        cameras,
        ref_index,
        source_indices,
    )?;
    let cam_coarse = cameras[ref_index].scaled(Stage::Coarse.scale())?;
    let mut start = match initial {
        Some(field) => {
            if field.width != cam_coarse.width || field.height != cam_coarse.height {
                return Err(PipelineError::InvalidInput(format!(
                    "initial depth is {}x{} but the coarse stage is {}x{}",
                    field.width, field.height, cam_coarse.width, cam_coarse.height
                )));
            }
            field
        }
        None => init_depth(&cam_coarse, config.seed),
    };
    start.stage = Some(Stage::Coarse);

    let mut coarse_snapshots = Vec::new();
    let coarse_out = run_stage(
        &start,
        &coarse_ctx,
        &config.coarse,
        &config.backend,
        &mut coarse_snapshots,
    )?;

    let upsampled = upsample_depth(&coarse_out, 4, config.upsample_weights.as_ref())?;

    let fine_ctx = prepare_stage_context(
        Stage::Fine,
        &config.fine,
        features,
        cameras,
        ref_index,
        source_indices,
    )?;
    let mut fine_snapshots = Vec::new();
    let depth = run_stage(
        &upsampled,
        &fine_ctx,
        &config.fine,
        &config.backend,
        &mut fine_snapshots,
    )?;

    Ok(ViewReconstruction {
        depth,
        coarse_snapshots,
        fine_snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Mat3;
    use crate::geom::Vec3;
    use approx::assert_relative_eq;

    fn cam(width: usize, height: usize, d_min: f64, d_max: f64) -> CameraView {
        CameraView::new(
            Mat3::identity(),
            Mat3::identity(),
            Vec3::zeros(),
            d_min,
            d_max,
            width,
            height,
        )
        .unwrap()
    }

    #[test]
    fn inverse_depth_sample_endpoints() {
        assert_relative_eq!(inverse_depth_sample(0.0, 1.0, 8.0), 8.0, epsilon = 1e-12);
        assert_relative_eq!(inverse_depth_sample(1.0, 1.0, 8.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn init_depth_is_reproducible_and_in_range() {
        let c = cam(64, 48, 1.5, 4.0);
        let a = init_depth(&c, 7);
        let b = init_depth(&c, 7);
        assert_eq!(a.depths(), b.depths());
        let other = init_depth(&c, 8);
        assert_ne!(a.depths(), other.depths());
        for &d in a.depths() {
            assert!((1.5..=4.0).contains(&d));
        }
    }

    #[test]
    fn init_depth_inverse_is_uniform() {
        let c = cam(320, 320, 1.0, 10.0);
        let field = init_depth(&c, 3);
        // Kolmogorov-Smirnov statistic of 1/d against uniform on
        // [1/d_max, 1/d_min]; ~1e5 draws should land well under 0.01.
        let mut inv: Vec<f64> = field.depths().iter().map(|d| 1.0 / d).collect();
        inv.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (lo, hi) = (1.0 / 10.0, 1.0);
        let n = inv.len() as f64;
        let mut ks = 0.0f64;
        for (i, v) in inv.iter().enumerate() {
            let cdf = (v - lo) / (hi - lo);
            let emp_hi = (i + 1) as f64 / n;
            let emp_lo = i as f64 / n;
            ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn fusion_examples() {
        let mut a = DepthField::invalid(1, 1, None);
        a.set(0, 0, 2.0);
        let mut b = DepthField::invalid(1, 1, None);
        b.set(0, 0, 4.0);
        // Equal logits: plain mean.
        let fused = fuse_views(
            &[a.clone(), b.clone()],
            &FusionWeights {
                width: 1,
                height: 1,
                logits: vec![vec![0.3], vec![0.3]],
            },
        )
        .unwrap();
        assert_relative_eq!(fused.get(0, 0).unwrap(), 3.0, epsilon = 1e-12);
        // Single valid source passes through.
        let mut only = DepthField::invalid(1, 1, None);
        only.set(0, 0, 2.5);
        let fused = fuse_views(
            &[only, DepthField::invalid(1, 1, None)],
            &FusionWeights {
                width: 1,
                height: 1,
                logits: vec![vec![0.0], vec![0.9]],
            },
        )
        .unwrap();
        assert_relative_eq!(fused.get(0, 0).unwrap(), 2.5, epsilon = 1e-12);
        // Hand-computed softmax: logits (ln 3, 0) weight 3/4 and 1/4.
        let mut x = DepthField::invalid(1, 1, None);
        x.set(0, 0, 1.0);
        let mut y = DepthField::invalid(1, 1, None);
        y.set(0, 0, 5.0);
        let fused = fuse_views(
            &[x, y],
            &FusionWeights {
                width: 1,
                height: 1,
                logits: vec![vec![3.0f32.ln()], vec![0.0]],
            },
        )
        .unwrap();
        assert_relative_eq!(fused.get(0, 0).unwrap(), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn fusion_rejects_mismatched_dimensions() {
        let a = DepthField::invalid(2, 2, None);
        let b = DepthField::invalid(3, 2, None);
        let err = fuse_views(
            &[a, b],
            &FusionWeights {
                width: 2,
                height: 2,
                logits: vec![vec![0.0; 4], vec![0.0; 4]],
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn fusion_is_convex_in_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let mut fields = Vec::new();
            let mut logits = Vec::new();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for _ in 0..4 {
                let mut f = DepthField::invalid(1, 1, None);
                let d = rng.random_range(0.5..9.0);
                f.set(0, 0, d);
                lo = lo.min(d);
                hi = hi.max(d);
                fields.push(f);
                logits.push(vec![rng.random_range(-3.0f32..3.0)]);
            }
            let fused = fuse_views(
                &fields,
                &FusionWeights {
                    width: 1,
                    height: 1,
                    logits,
                },
            )
            .unwrap();
            let d = fused.get(0, 0).unwrap();
            assert!(d >= lo - 1e-9 && d <= hi + 1e-9);
        }
    }

    fn ramp_field(w: usize, h: usize, f: impl Fn(f64, f64) -> f64) -> DepthField {
        let mut field = DepthField::invalid(w, h, Some(Stage::Coarse));
        for y in 0..h {
            for x in 0..w {
                field.set(x, y, f(x as f64, y as f64));
            }
        }
        field
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let coarse = ramp_field(5, 4, |_, _| 2.5);
        let fine = upsample_depth(&coarse, 4, None).unwrap();
        assert_eq!(fine.width(), 20);
        assert_eq!(fine.height(), 16);
        for y in 0..fine.height() {
            for x in 0..fine.width() {
                assert_relative_eq!(fine.get(x, y).unwrap(), 2.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn upsample_default_weights_reproduce_affine_ramps() {
        let (a, b, c) = (3.0, 0.25, -0.125);
        let coarse = ramp_field(8, 6, |x, y| a + b * x + c * y);
        let fine = upsample_depth(&coarse, 4, None).unwrap();
        // Interior fine pixels (full 3x3 support) must match the analytic
        // bilinear value exactly.
        for fy in 4..fine.height() - 4 {
            for fx in 4..fine.width() - 4 {
                let xc = (fx as f64 - 1.5) / 4.0;
                let yc = (fy as f64 - 1.5) / 4.0;
                let expected = a + b * xc + c * yc;
                assert_relative_eq!(fine.get(fx, fy).unwrap(), expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn upsample_output_bounded_by_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut coarse = DepthField::invalid(6, 5, Some(Stage::Coarse));
        for y in 0..5 {
            for x in 0..6 {
                if rng.random_range(0.0..1.0) < 0.85 {
                    coarse.set(x, y, rng.random_range(1.0..9.0));
                }
            }
        }
        let fine = upsample_depth(&coarse, 4, None).unwrap();
        for fy in 0..fine.height() {
            for fx in 0..fine.width() {
                let Some(d) = fine.get(fx, fy) else { continue };
                let cx = ((fx as f64 - 1.5) / 4.0).round().clamp(0.0, 5.0) as isize;
                let cy = ((fy as f64 - 1.5) / 4.0).round().clamp(0.0, 4.0) as isize;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for oy in -1..=1 {
                    for ox in -1..=1 {
                        let (nx, ny) = (cx + ox, cy + oy);
                        if nx < 0 || ny < 0 || nx >= 6 || ny >= 5 {
                            continue;
                        }
                        if let Some(v) = coarse.get(nx as usize, ny as usize) {
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                }
                assert!(d >= lo - 1e-9 && d <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn upsample_rejects_invalid_weights() {
        let coarse = ramp_field(2, 2, |_, _| 1.0);
        let mut w = UpsampleWeights {
            width: 8,
            height: 8,
            weights: vec![0.0; 8 * 8 * 9],
        };
        for chunk in w.weights.chunks_exact_mut(9) {
            chunk[4] = 1.0;
        }
        assert!(upsample_depth(&coarse, 4, Some(&w)).is_ok());
        // Sum != 1.
        w.weights[4] = 0.5;
        assert!(upsample_depth(&coarse, 4, Some(&w)).is_err());
        // Negative entry.
        w.weights[4] = 1.2;
        w.weights[5] = -0.2;
        assert!(upsample_depth(&coarse, 4, Some(&w)).is_err());
        // Wrong factor.
        assert!(upsample_depth(&coarse, 2, None).is_err());
    }

    #[test]
    fn custom_center_weights_pick_nearest_coarse_pixel() {
        let coarse = ramp_field(3, 3, |x, y| 1.0 + x + 10.0 * y);
        let mut w = UpsampleWeights {
            width: 12,
            height: 12,
            weights: vec![0.0; 12 * 12 * 9],
        };
        for chunk in w.weights.chunks_exact_mut(9) {
            chunk[4] = 1.0;
        }
        let fine = upsample_depth(&coarse, 4, Some(&w)).unwrap();
        // Fine pixel (6, 6) maps to coarse (1.125, 1.125) -> center (1, 1).
        assert_relative_eq!(fine.get(6, 6).unwrap(), 12.0, epsilon = 1e-12);
    }

    fn uniform_field(w: usize, h: usize, d: f64) -> DepthField {
        let mut f = DepthField::invalid(w, h, None);
        for y in 0..h {
            for x in 0..w {
                f.set(x, y, d);
            }
        }
        f
    }

    #[test]
    fn loss_is_zero_when_snapshots_equal_gt() {
        let gt = uniform_field(8, 8, 2.0);
        let snaps = vec![gt.clone(), gt.clone()];
        let loss = compute_loss(&[&snaps], &gt, 1.0, 4.0).unwrap();
        assert_relative_eq!(loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_single_snapshot_uniform_error() {
        let gt = uniform_field(8, 8, 2.0);
        let snap = uniform_field(8, 8, 2.5);
        let e = (crate::geom::normalize_depth(2.0, 1.0, 4.0).unwrap()
            - crate::geom::normalize_depth(2.5, 1.0, 4.0).unwrap())
        .abs();
        let loss = compute_loss(&[std::slice::from_ref(&snap)], &gt, 1.0, 4.0).unwrap();
        assert_relative_eq!(loss, e, epsilon = 1e-12);
    }

    #[test]
    fn loss_weights_iterations_by_gamma() {
        // Normalized errors 0.2 and 0.1 combine to 0.2 + 0.9 * 0.1 = 0.29.
        // Pick depths whose normalized values differ from gt by those amounts.
        let (d_min, d_max) = (1.0, 4.0);
        let gt_norm = 0.5;
        let denom = 1.0 / d_min - 1.0 / d_max;
        let depth_of_norm =
            |n: f64| 1.0 / (n * denom + 1.0 / d_max);
        let gt = uniform_field(4, 4, depth_of_norm(gt_norm));
        let s1 = uniform_field(4, 4, depth_of_norm(gt_norm - 0.2));
        let s2 = uniform_field(4, 4, depth_of_norm(gt_norm + 0.1));
        let snaps = vec![s1, s2];
        let loss = compute_loss(&[&snaps], &gt, d_min, d_max).unwrap();
        assert_relative_eq!(loss, 0.29, epsilon = 1e-12);
    }

    #[test]
    fn loss_requires_overlap() {
        let gt = DepthField::invalid(8, 8, None);
        let snap = uniform_field(8, 8, 2.0);
        assert!(matches!(
            compute_loss(&[std::slice::from_ref(&snap)], &gt, 1.0, 4.0),
            Err(PipelineError::UndefinedLoss)
        ));
    }

    #[test]
    fn run_stage_rejects_zero_iterations() {
        // A context is never built because validation fires first.
        let params = StageParams {
            m_s: 1,
            m_p: 3,
            iterations: 0,
        };
        let map = FeatureMap::new(2, 2, 2, 16, vec![0.0; 8]).unwrap();
        let ctx = StageContext {
            stage: Stage::Coarse,
            ref_map: &map,
            pairs: Vec::new(),
        };
        let depth = DepthField::invalid(2, 2, None);
        let err = run_stage(&depth, &ctx, &params, &UpdateBackend::Deterministic, &mut Vec::new());
        assert!(err.is_err());
    }
}
