//! Geometric-consistency filtering and colored point-cloud fusion.
//!
//! Depth maps are filtered in two steps before fusion: source depths are
//! projected into the reference to reject large relative depth differences,
//! and the reference depth is reprojected into each source and back to
//! reject large round-trip pixel displacements. Surviving pixels are lifted
//! to world space, deduplicated within a resolution-adaptive merge radius and
//! written as a binary little-endian PLY.

use crate::geom::{project, reproject, CameraView, GeomError, Pixel};
use crate::pipeline::DepthField;
use nalgebra::Vector3;
use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad PLY file: {0}")]
    Format(String),
}

/// Thresholds of the two-step consistency test.
#[derive(Debug, Clone)]
pub struct ConsistencyParams {
    /// Maximum round-trip pixel displacement (pixels at depth-map resolution).
    pub max_reproj_error: f64,
    /// Maximum relative depth difference of the round trip.
    pub max_rel_depth_diff: f64,
    /// A pixel survives when consistent with at least this many sources.
    pub min_consistent_views: usize,
    /// Drop depths outside the reference camera's declared range.
    pub enforce_range: bool,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            max_reproj_error: 1.0,
            max_rel_depth_diff: 0.01,
            min_consistent_views: 2,
            enforce_range: false,
        }
    }
}

impl ConsistencyParams {
    fn validate(&self, n_views: usize) -> Result<(), FusionError> {
        if !(self.max_reproj_error > 0.0 && self.max_rel_depth_diff > 0.0) {
            return Err(FusionError::InvalidConfig(
                "thresholds must be positive".into(),
            ));
        }
        if self.min_consistent_views < 1 {
            return Err(FusionError::InvalidConfig(
                "min_consistent_views must be >= 1".into(),
            ));
        }
        if n_views < self.min_consistent_views + 1 {
            return Err(FusionError::InvalidConfig(format!(
                "{n_views} views cannot satisfy min_consistent_views = {}",
                self.min_consistent_views
            )));
        }
        Ok(())
    }
}

/// Outcome of the per-(pixel, source) round-trip test, split by step so both
/// checks are independently observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsistencyChecks {
    /// Step 1: relative depth difference within threshold.
    pub depth_ok: bool,
    /// Step 2: round-trip pixel displacement within threshold.
    pub reproj_ok: bool,
}

impl ConsistencyChecks {
    pub fn consistent(self) -> bool {
        self.depth_ok && self.reproj_ok
    }
}

fn unproject_world(cam: &CameraView, p: Pixel, depth: f64) -> Result<Vec3, GeomError> {
    let pc = reproject(p, depth, cam)?;
    Ok(cam.to_anchor_frame(&pc))
}

/// Round-trip consistency of one reference pixel against one source view.
/// Returns `None` when the point is invisible in the source (behind it, out
/// of frame, or the source has no valid depth there).
pub fn check_pixel_pair(
    cam_ref: &CameraView,
    cam_src: &CameraView,
    src_depths: &DepthField,
    p: Pixel,
    depth: f64,
    params: &ConsistencyParams,
) -> Option<ConsistencyChecks> {
    let world = unproject_world(cam_ref, p, depth).ok()?;
    let (q, _) = project(&world, cam_src).ok()?;
    let qx = q.x.round();
    let qy = q.y.round();
    if qx < 0.0 || qy < 0.0 || qx >= src_depths.width() as f64 || qy >= src_depths.height() as f64
    {
        return None;
    }
    let d_src = src_depths.get(qx as usize, qy as usize)?;
    // Lift the matched source pixel by its own stored depth and come back.
    let world_back = unproject_world(cam_src, Pixel::new(qx, qy), d_src).ok()?;
    let (p_back, d_back) = project(&world_back, cam_ref).ok()?;
    let depth_ok = (d_back - depth).abs() / depth <= params.max_rel_depth_diff;
    let dx = p_back.x - p.x;
    let dy = p_back.y - p.y;
    let reproj_ok = (dx * dx + dy * dy).sqrt() <= params.max_reproj_error;
    Some(ConsistencyChecks { depth_ok, reproj_ok })
}

/// Per-view survival masks of the two-step geometric consistency test.
///
/// All cameras must share one world frame and match their depth map's
/// resolution.
pub fn geometric_consistency_masks(
    depths: &[DepthField],
    cams: &[CameraView],
    params: &ConsistencyParams,
) -> Result<Vec<Vec<bool>>, FusionError> {
    if depths.len() != cams.len() {
        return Err(FusionError::DimensionMismatch(
            "depth and camera counts differ".into(),
        ));
    }
    params.validate(depths.len())?;
    for (d, c) in depths.iter().zip(cams) {
        if d.width() != c.width || d.height() != c.height {
            return Err(FusionError::DimensionMismatch(format!(
                "depth map {}x{} does not match camera {}x{}",
                d.width(),
                d.height(),
                c.width,
                c.height
            )));
        }
    }
    let mut masks = Vec::with_capacity(depths.len());
    for (r, (depth_r, cam_r)) in depths.iter().zip(cams).enumerate() {
        let mut mask = vec![false; depth_r.width() * depth_r.height()];
        for y in 0..depth_r.height() {
            for x in 0..depth_r.width() {
                let Some(d) = depth_r.get(x, y) else { continue };
                if params.enforce_range && !(cam_r.depth_min..=cam_r.depth_max).contains(&d) {
                    continue;
                }
                let p = Pixel::new(x as f64, y as f64);
                let mut consistent = 0usize;
                for (s, (depth_s, cam_s)) in depths.iter().zip(cams).enumerate() {
                    if s == r {
                        continue;
                    }
                    if let Some(checks) = check_pixel_pair(cam_r, cam_s, depth_s, p, d, params) {
                        if checks.consistent() {
                            consistent += 1;
                        }
                    }
                }
                if consistent >= params.min_consistent_views {
                    mask[y * depth_r.width() + x] = true;
                }
            }
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// Fused 3D points with per-point color and provenance.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    /// (view index, pixel) of the first contributor to each point.
    pub sources: Vec<(usize, (u32, u32))>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Median of the pixel footprints (depth / focal) over surviving pixels, the
/// resolution-adaptive spacing estimate used for the merge radius.
pub fn median_pixel_footprint(
    depths: &[DepthField],
    masks: &[Vec<bool>],
    cams: &[CameraView],
) -> f64 {
    let mut footprints = Vec::new();
    for ((depth, mask), cam) in depths.iter().zip(masks).zip(cams) {
        let fx = cam.intrinsics()[(0, 0)];
        for (i, &m) in mask.iter().enumerate() {
            if m && depth.validity()[i] {
                footprints.push(depth.depths()[i] / fx);
            }
        }
    }
    if footprints.is_empty() {
        return 0.0;
    }
    footprints.sort_by(|a, b| a.partial_cmp(b).unwrap());
    footprints[footprints.len() / 2]
}

fn cell_of(p: &[f64; 3], inv_cell: f64) -> (i64, i64, i64) {
    (
        (p[0] * inv_cell).floor() as i64,
        (p[1] * inv_cell).floor() as i64,
        (p[2] * inv_cell).floor() as i64,
    )
}

struct Cluster {
    sum: Vec3,
    color_sum: [u64; 3],
    count: u64,
    source: (usize, (u32, u32)),
}

/// Lift surviving pixels to world space and merge duplicates across views.
///
/// Points within half the median pixel footprint of an existing cluster
/// centroid are averaged into it; traversal order (view, row, column) is
/// fixed, so output order is deterministic. Colors are sampled from each
/// view's image at the depth-map pixel's full-resolution center.
pub fn fuse_to_point_cloud(
    depths: &[DepthField],
    masks: &[Vec<bool>],
    images: &[image::RgbImage],
    cams: &[CameraView],
) -> Result<PointCloud, FusionError> {
    if depths.len() != masks.len() || depths.len() != images.len() || depths.len() != cams.len() {
        return Err(FusionError::DimensionMismatch(
            "depths, masks, images and cameras must have equal counts".into(),
        ));
    }
    let radius = 0.5 * median_pixel_footprint(depths, masks, cams);
    let inv_cell = if radius > 0.0 { 1.0 / radius } else { 0.0 };
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();

    for (v, ((depth, mask), cam)) in depths.iter().zip(masks).zip(cams).enumerate() {
        let img = &images[v];
        // Depth maps may be at reduced resolution; map to image pixels by
        // block centers.
        let scale = (img.width() as f64 / depth.width() as f64).round().max(1.0);
        let offset = (scale - 1.0) / 2.0;
        for y in 0..depth.height() {
            for x in 0..depth.width() {
                let i = y * depth.width() + x;
                if !mask[i] {
                    continue;
                }
                let Some(d) = depth.get(x, y) else { continue };
                let p = Pixel::new(x as f64, y as f64);
                let world = unproject_world(cam, p, d)?;
                let point = [world.x, world.y, world.z];
                let ix = ((x as f64 * scale + offset).round() as u32).min(img.width() - 1);
                let iy = ((y as f64 * scale + offset).round() as u32).min(img.height() - 1);
                let color = img.get_pixel(ix, iy).0;
                let source = (v, (x as u32, y as u32));

                let mut merged = false;
                if radius > 0.0 {
                    let (cx, cy, cz) = cell_of(&point, inv_cell);
                    'search: for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                let Some(ids) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                                    continue;
                                };
                                for &id in ids {
                                    let c = &mut clusters[id];
                                    let centroid = c.sum / c.count as f64;
                                    let diff = centroid - world;
                                    if diff.norm() <= radius {
                                        c.sum += world;
                                        c.count += 1;
                                        for (acc, &ch) in c.color_sum.iter_mut().zip(&color) {
                                            *acc += ch as u64;
                                        }
                                        merged = true;
                                        break 'search;
                                    }
                                }
                            }
                        }
                    }
                }
                if !merged {
                    let id = clusters.len();
                    clusters.push(Cluster {
                        sum: world,
                        color_sum: [color[0] as u64, color[1] as u64, color[2] as u64],
                        count: 1,
                        source,
                    });
                    if radius > 0.0 {
                        grid.entry(cell_of(&point, inv_cell)).or_default().push(id);
                    }
                }
            }
        }
    }

    let mut cloud = PointCloud::default();
    for c in clusters {
        let centroid = c.sum / c.count as f64;
        cloud.points.push([centroid.x, centroid.y, centroid.z]);
        cloud.colors.push([
            (c.color_sum[0] / c.count) as u8,
            (c.color_sum[1] / c.count) as u8,
            (c.color_sum[2] / c.count) as u8,
        ]);
        cloud.sources.push(c.source);
    }
    Ok(cloud)
}

/// Write a binary little-endian PLY with x, y, z float and red, green, blue
/// uchar properties. The header is exactly:
///
/// ```text
/// ply
/// format binary_little_endian 1.0
/// element vertex <count>
/// property float x
/// property float y
/// property float z
/// property uchar red
/// property uchar green
/// property uchar blue
/// end_header
/// ```
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), FusionError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.points.len()
    )?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for v in p {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        f.write_all(c)?;
    }
    Ok(())
}

/// Read a PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PointCloud, FusionError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let mut read_line = |reader: &mut std::io::BufReader<std::fs::File>| -> Result<String, FusionError> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(FusionError::Format("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if read_line(&mut reader)? != "ply" {
        return Err(FusionError::Format("missing ply magic".into()));
    }
    if read_line(&mut reader)? != "format binary_little_endian 1.0" {
        return Err(FusionError::Format(
            "only binary_little_endian 1.0 is supported".into(),
        ));
    }
    let mut count: Option<usize> = None;
    let mut properties = Vec::new();
    loop {
        let l = read_line(&mut reader)?;
        if l == "end_header" {
            break;
        }
        if let Some(rest) = l.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse().map_err(|_| {
                FusionError::Format(format!("bad vertex count line: {l}"))
            })?);
        } else if let Some(rest) = l.strip_prefix("property ") {
            properties.push(rest.to_string());
        } else if l.starts_with("comment") || l.starts_with("element") {
            // Extra elements are not supported but comments are harmless.
            if l.starts_with("element") {
                return Err(FusionError::Format(format!("unsupported element: {l}")));
            }
        } else {
            return Err(FusionError::Format(format!("unexpected header line: {l}")));
        }
    }
    let expected = [
        "float x", "float y", "float z", "uchar red", "uchar green", "uchar blue",
    ];
    if properties != expected {
        return Err(FusionError::Format(format!(
            "unsupported property layout: {properties:?}"
        )));
    }
    let count = count.ok_or_else(|| FusionError::Format("missing vertex element".into()))?;
    let mut cloud = PointCloud::default();
    let mut buf = [0u8; 15];
    for i in 0..count {
        reader.read_exact(&mut buf).map_err(|_| {
            FusionError::Format(format!("truncated vertex data at point {i}"))
        })?;
        let x = f32::from_le_bytes(buf[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(buf[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(buf[8..12].try_into().unwrap()) as f64;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(FusionError::Format(format!("non-finite point {i}")));
        }
        cloud.points.push([x, y, z]);
        cloud.colors.push([buf[12], buf[13], buf[14]]);
        cloud.sources.push((0, (0, 0)));
    }
    Ok(cloud)
}
