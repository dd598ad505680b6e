//! Camera models and the depth / flow / epipolar-disparity conversion kernel.
//!
//! Everything in this module is plain f64 math on pinhole cameras: projecting
//! pixels to 3D and back, converting a depth into the optical flow it induces
//! between two views, recovering depth from a flow by closed-form
//! triangulation, and reducing the 2D flow to a signed scalar displacement
//! along the epipolar line (the per-pixel [`EpipolarFrame`]).
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently. Triangulation denominators are cancellation-prone, which is
//! why this module stays in 64-bit floats even though feature math elsewhere
//! is f32.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Minimum camera-frame z for a point to count as in front of the camera.
pub const EPSILON_Z: f64 = 1e-6;
/// Minimum baseline (scene units) for epipolar geometry to exist.
pub const EPSILON_BASELINE: f64 = 1e-9;
/// Triangulation denominator guard is this factor times max(image dimension).
pub const EPSILON_DENOM_FACTOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid depth {0}: must be finite and positive")]
    InvalidDepth(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("point behind camera (z = {z:.3e})")]
    BehindCamera { z: f64 },
    #[error("degenerate triangulation: |denominator| {denom:.3e} below guard {guard:.3e}")]
    DegenerateTriangulation { denom: f64, guard: f64 },
    #[error("triangulated depth {0:.3e} is not positive")]
    NegativeDepth(f64),
    #[error("baseline {0:.3e} below minimum; no epipolar geometry")]
    NoBaseline(f64),
    #[error("pixel coincides with the epipole; epipolar direction undefined")]
    DegenerateEpipolarFrame,
    #[error("invalid depth range [{0}, {1}]")]
    InvalidDepthRange(f64, f64),
}

/// Continuous pixel coordinates. Integer values sit on pixel centers.
///
/// Bounds checking is the caller's business, not the type's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl Pixel {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Homogeneous form (x, y, 1).
    pub fn homogeneous(&self) -> Vec3 {
        Vec3::new(self.x, self.y, 1.0)
    }

    pub fn to_vec(self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn offset(self, v: Vec2) -> Pixel {
        Pixel::new(self.x + v.x, self.y + v.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<(f64, f64)> for Pixel {
    fn from((x, y): (f64, f64)) -> Self {
        Pixel::new(x, y)
    }
}

/// Intrinsics, extrinsics and declared depth range for one image.
///
/// The rigid transform maps points from the anchor frame into this camera's
/// frame: for cameras loaded from a scene the anchor is the world; for the
/// source half of a [`ViewPair`] the anchor is the reference camera.
#[derive(Debug, Clone)]
pub struct CameraView {
    intrinsics: Mat3,
    intrinsics_inv: Mat3,
    rotation: Mat3,
    translation: Vec3,
    pub depth_min: f64,
    pub depth_max: f64,
    pub width: usize,
    pub height: usize,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

fn validate_intrinsics(k: &Mat3) -> Result<(), GeomError> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::InvalidCamera("non-finite intrinsics".into()));
    }
    for (r, c) in [(1, 0), (2, 0), (2, 1)] {
        if k[(r, c)].abs() > 1e-12 {
            return Err(GeomError::InvalidCamera(format!(
                "intrinsics not upper-triangular: K[{r}][{c}] = {}",
                k[(r, c)]
            )));
        }
    }
    if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
        return Err(GeomError::InvalidCamera(
            "focal entries must be positive".into(),
        ));
    }
    if (k[(2, 2)] - 1.0).abs() > 1e-12 {
        return Err(GeomError::InvalidCamera(format!(
            "K[2][2] = {} but must be 1",
            k[(2, 2)]
        )));
    }
    Ok(())
}

fn validate_rotation(r: &Mat3) -> Result<(), GeomError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::InvalidCamera("non-finite rotation".into()));
    }
    let gram = r.transpose() * r;
    let mut max_dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((gram[(i, j)] - target).abs());
        }
    }
    if max_dev > ORTHONORMAL_TOL {
        return Err(GeomError::InvalidCamera(format!(
            "rotation not orthonormal: max |R'R - I| = {max_dev:.3e}"
        )));
    }
    if (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(GeomError::InvalidCamera(format!(
            "rotation determinant {} is not +1",
            r.determinant()
        )));
    }
    Ok(())
}

impl CameraView {
    pub fn new(
        intrinsics: Mat3,
        rotation: Mat3,
        translation: Vec3,
        depth_min: f64,
        depth_max: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        validate_intrinsics(&intrinsics)?;
        validate_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::InvalidCamera("non-finite translation".into()));
        }
        if !(depth_min.is_finite() && depth_max.is_finite() && 0.0 < depth_min && depth_min < depth_max)
        {
            return Err(GeomError::InvalidDepthRange(depth_min, depth_max));
        }
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidCamera("zero image dimension".into()));
        }
        // Upper-triangular with positive diagonal is always invertible.
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| GeomError::InvalidCamera("singular intrinsics".into()))?;
        Ok(Self {
            intrinsics,
            intrinsics_inv,
            rotation,
            translation,
            depth_min,
            depth_max,
            width,
            height,
        })
    }

    pub fn intrinsics(&self) -> &Mat3 {
        &self.intrinsics
    }

    pub fn intrinsics_inv(&self) -> &Mat3 {
        &self.intrinsics_inv
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center expressed in the anchor frame.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera_frame(&self, anchor_point: &Vec3) -> Vec3 {
        self.rotation * anchor_point + self.translation
    }

    pub fn to_anchor_frame(&self, camera_point: &Vec3) -> Vec3 {
        self.rotation.transpose() * (camera_point - self.translation)
    }

    /// Camera for the same pose observing the image downsampled by `factor`.
    ///
    /// Pixel centers follow the block-center convention:
    /// x_scaled = (x_full - (factor-1)/2) / factor.
    pub fn scaled(&self, factor: usize) -> Result<CameraView, GeomError> {
        if factor == 0 {
            return Err(GeomError::InvalidCamera("zero scale factor".into()));
        }
        let f = factor as f64;
        let half = (f - 1.0) / 2.0;
        let mut k = self.intrinsics;
        k[(0, 0)] /= f;
        k[(1, 1)] /= f;
        k[(0, 1)] /= f;
        k[(0, 2)] = (k[(0, 2)] - half) / f;
        k[(1, 2)] = (k[(1, 2)] - half) / f;
        CameraView::new(
            k,
            self.rotation,
            self.translation,
            self.depth_min,
            self.depth_max,
            self.width.div_ceil(factor),
            self.height.div_ceil(factor),
        )
    }

    /// Same camera with a substituted depth range.
    pub fn with_depth_range(&self, depth_min: f64, depth_max: f64) -> Result<CameraView, GeomError> {
        CameraView::new(
            self.intrinsics,
            self.rotation,
            self.translation,
            depth_min,
            depth_max,
            self.width,
            self.height,
        )
    }
}

/// Lift a pixel to the 3D point at `depth` in the camera's own frame:
/// P = depth * K^-1 * (x, y, 1).
pub fn reproject(p: Pixel, depth: f64, cam: &CameraView) -> Result<Vec3, GeomError> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(GeomError::InvalidDepth(depth));
    }
    if !p.is_finite() {
        return Err(GeomError::NonFinite("pixel"));
    }
    Ok(cam.intrinsics_inv * p.homogeneous() * depth)
}

/// Project an anchor-frame point through the camera: dehomogenized pixel of
/// K (R P + T) plus the camera-frame depth.
pub fn project(point: &Vec3, cam: &CameraView) -> Result<(Pixel, f64), GeomError> {
    if point.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::NonFinite("point"));
    }
    let pc = cam.rotation * point + cam.translation;
    if pc.z <= EPSILON_Z {
        return Err(GeomError::BehindCamera { z: pc.z });
    }
    let h = cam.intrinsics * pc;
    Ok((Pixel::new(h.x / h.z, h.y / h.z), pc.z))
}

/// Flow of a matched pixel pair: p_s - p_r.
pub fn flow_of_pair(p_r: Pixel, p_s: Pixel) -> Vec2 {
    p_s.to_vec() - p_r.to_vec()
}

/// Affine map of inverse depth onto [0, 1]:
/// (1/depth - 1/d_max) / (1/d_min - 1/d_max).
///
/// d_min maps to 1, d_max to 0; strictly decreasing in depth. Depths outside
/// the range extend smoothly beyond [0, 1].
pub fn normalize_depth(depth: f64, d_min: f64, d_max: f64) -> Result<f64, GeomError> {
    if !(d_min.is_finite() && d_max.is_finite() && 0.0 < d_min && d_min < d_max) {
        return Err(GeomError::InvalidDepthRange(d_min, d_max));
    }
    if !depth.is_finite() || depth <= 0.0 {
        return Err(GeomError::InvalidDepth(depth));
    }
    Ok((1.0 / depth - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max))
}

/// Which closed-form triangulation branch produced a depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangulationBranch {
    X,
    Y,
}

/// Per-pixel epipolar coordinate frame in the source image.
///
/// `direction` is the unit direction of the epipolar line, oriented along
/// d p_s / d(1/depth) so the epipolar disparity grows with inverse depth.
/// `anchor` is the zero-disparity position: the orthogonal projection of the
/// reference pixel onto the epipolar line (equal to p_r whenever the line
/// passes through it, e.g. rectified pairs).
#[derive(Debug, Clone, Copy)]
pub struct EpipolarFrame {
    direction: Vec2,
    anchor: Pixel,
}

impl EpipolarFrame {
    pub fn direction(&self) -> Vec2 {
        self.direction
    }

    pub fn anchor(&self) -> Pixel {
        self.anchor
    }

    /// Signed scalar projection of a flow onto the epipolar direction.
    pub fn flow_to_eflow(&self, flow: Vec2) -> f64 {
        self.direction.dot(&flow)
    }

    /// Flow vector of an epipolar disparity: direction * eflow.
    pub fn eflow_to_flow(&self, eflow: f64) -> Vec2 {
        self.direction * eflow
    }

    /// Source-image point at the given disparity coordinate, exactly on the
    /// epipolar line.
    pub fn point_at(&self, eflow: f64) -> Pixel {
        self.anchor.offset(self.direction * eflow)
    }
}

/// A (reference, source) view pair with precomputed relative geometry.
///
/// The relative pose maps reference-camera-frame points into the source
/// camera frame. Both cameras' extrinsics must share one anchor frame.
#[derive(Debug, Clone)]
pub struct ViewPair {
    k_ref_inv: Mat3,
    k_src: Mat3,
    k_src_inv: Mat3,
    rotation: Mat3,
    translation: Vec3,
    denom_guard: f64,
}

impl ViewPair {
    pub fn new(reference: &CameraView, source: &CameraView) -> Result<Self, GeomError> {
        let rotation = source.rotation * reference.rotation.transpose();
        let translation = source.translation - rotation * reference.translation;
        let baseline = translation.norm();
        if baseline <= EPSILON_BASELINE {
            return Err(GeomError::NoBaseline(baseline));
        }
        let denom_guard = EPSILON_DENOM_FACTOR * source.width.max(source.height) as f64;
        Ok(Self {
            k_ref_inv: reference.intrinsics_inv,
            k_src: source.intrinsics,
            k_src_inv: source.intrinsics_inv,
            rotation,
            translation,
            denom_guard,
        })
    }

    pub fn baseline(&self) -> f64 {
        self.translation.norm()
    }

    /// Flow induced at `p_r` by `depth`: project the lifted point into the
    /// source view and subtract p_r.
    pub fn depth_to_flow(&self, p_r: Pixel, depth: f64) -> Result<Vec2, GeomError> {
        if !depth.is_finite() || depth <= 0.0 {
            return Err(GeomError::InvalidDepth(depth));
        }
        if !p_r.is_finite() {
            return Err(GeomError::NonFinite("pixel"));
        }
        let ray = self.k_ref_inv * p_r.homogeneous();
        let pc = self.rotation * (ray * depth) + self.translation;
        if pc.z <= EPSILON_Z {
            return Err(GeomError::BehindCamera { z: pc.z });
        }
        let h = self.k_src * pc;
        Ok(Vec2::new(h.x / h.z - p_r.x, h.y / h.z - p_r.y))
    }

    /// Closed-form triangulation of the flow at `p_r`, reporting which branch
    /// was selected: the x-branch iff |f_x| >= |f_y| (larger flow wins, tie
    /// goes to x).
    pub fn flow_to_depth_branched(
        &self,
        p_r: Pixel,
        flow: Vec2,
    ) -> Result<(f64, TriangulationBranch), GeomError> {
        if !p_r.is_finite() || !(flow.x.is_finite() && flow.y.is_finite()) {
            return Err(GeomError::NonFinite("flow"));
        }
        let p_s = p_r.offset(flow);
        // Reference ray rotated into the source frame, and the source ray.
        // Solving d_s * c = d_r * q + T row-wise against the z row gives the
        // two branch formulas below; c.z == 1 because K has unit last row.
        let q = self.rotation * (self.k_ref_inv * p_r.homogeneous());
        let c = self.k_src_inv * p_s.homogeneous();
        let t = &self.translation;
        let branch = if flow.x.abs() >= flow.y.abs() {
            TriangulationBranch::X
        } else {
            TriangulationBranch::Y
        };
        let (num, den) = match branch {
            TriangulationBranch::X => (t.x - t.z * c.x, q.z * c.x - q.x),
            TriangulationBranch::Y => (t.y - t.z * c.y, q.z * c.y - q.y),
        };
        if den.abs() < self.denom_guard {
            return Err(GeomError::DegenerateTriangulation {
                denom: den.abs(),
                guard: self.denom_guard,
            });
        }
        let depth = num / den;
        if !depth.is_finite() {
            return Err(GeomError::NonFinite("triangulated depth"));
        }
        if depth <= 0.0 {
            return Err(GeomError::NegativeDepth(depth));
        }
        Ok((depth, branch))
    }

    pub fn flow_to_depth(&self, p_r: Pixel, flow: Vec2) -> Result<f64, GeomError> {
        self.flow_to_depth_branched(p_r, flow).map(|(d, _)| d)
    }

    /// Epipolar frame of `p_r` in the source image.
    ///
    /// The direction is u x v line geometry with u the infinite-depth image of
    /// the pixel ray and v the epipole; it equals d p_s / d(1/depth) up to a
    /// positive factor, which fixes the orientation.
    pub fn epipolar_frame(&self, p_r: Pixel) -> Result<EpipolarFrame, GeomError> {
        if !p_r.is_finite() {
            return Err(GeomError::NonFinite("pixel"));
        }
        let u = self.k_src * (self.rotation * (self.k_ref_inv * p_r.homogeneous()));
        let v = self.k_src * self.translation;
        let dir = Vec2::new(v.x * u.z - v.z * u.x, v.y * u.z - v.z * u.y);
        let norm = dir.norm();
        let scale = (u.norm() * v.norm()).max(1.0);
        if !(norm > 1e-12 * scale) {
            return Err(GeomError::DegenerateEpipolarFrame);
        }
        let direction = dir / norm;
        // Epipolar line through dehom(u) and dehom(v): normal (-dir.y, dir.x),
        // offset (u x v).z. Anchor = perpendicular foot of p_r on that line.
        let n = Vec2::new(-dir.y, dir.x);
        let c = u.x * v.y - u.y * v.x;
        let lambda = (n.dot(&p_r.to_vec()) + c) / (norm * norm);
        let anchor = Pixel::new(p_r.x - lambda * n.x, p_r.y - lambda * n.y);
        Ok(EpipolarFrame { direction, anchor })
    }

    pub fn depth_to_eflow(&self, p_r: Pixel, depth: f64) -> Result<f64, GeomError> {
        let frame = self.epipolar_frame(p_r)?;
        self.depth_to_eflow_with_frame(&frame, p_r, depth)
    }

    pub fn depth_to_eflow_with_frame(
        &self,
        frame: &EpipolarFrame,
        p_r: Pixel,
        depth: f64,
    ) -> Result<f64, GeomError> {
        let flow = self.depth_to_flow(p_r, depth)?;
        Ok(frame.flow_to_eflow(flow))
    }

    pub fn eflow_to_depth(&self, p_r: Pixel, eflow: f64) -> Result<f64, GeomError> {
        let frame = self.epipolar_frame(p_r)?;
        self.eflow_to_depth_with_frame(&frame, p_r, eflow)
    }

    /// Triangulate the source point at disparity `eflow` on the epipolar line.
    pub fn eflow_to_depth_with_frame(
        &self,
        frame: &EpipolarFrame,
        p_r: Pixel,
        eflow: f64,
    ) -> Result<f64, GeomError> {
        if !eflow.is_finite() {
            return Err(GeomError::NonFinite("eflow"));
        }
        let p_s = frame.point_at(eflow);
        self.flow_to_depth(p_r, flow_of_pair(p_r, p_s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn intrinsics(f: f64, cx: f64, cy: f64) -> Mat3 {
        Mat3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    fn camera(k: Mat3, r: Mat3, t: Vec3) -> CameraView {
        CameraView::new(k, r, t, 0.5, 50.0, 640, 480).unwrap()
    }

    fn identity_camera() -> CameraView {
        camera(Mat3::identity(), Mat3::identity(), Vec3::zeros())
    }

    fn rotation_xyz(rx: f64, ry: f64, rz: f64) -> Mat3 {
        *nalgebra::Rotation3::from_euler_angles(rx, ry, rz).matrix()
    }

    fn random_pair(rng: &mut StdRng) -> (CameraView, CameraView, ViewPair) {
        let reference = camera(
            intrinsics(
                rng.random_range(200.0..800.0),
                rng.random_range(300.0..340.0),
                rng.random_range(220.0..260.0),
            ),
            Mat3::identity(),
            Vec3::zeros(),
        );
        let source = camera(
            intrinsics(
                rng.random_range(200.0..800.0),
                rng.random_range(300.0..340.0),
                rng.random_range(220.0..260.0),
            ),
            rotation_xyz(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ),
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            ),
        );
        let pair = match ViewPair::new(&reference, &source) {
            Ok(p) => p,
            Err(_) => return random_pair(rng),
        };
        (reference, source, pair)
    }

    // Test-local 3x3 inverse via the adjugate, independent of nalgebra.
    fn inverse3(m: &Mat3) -> Mat3 {
        let a = m[(0, 0)];
        let b = m[(0, 1)];
        let c = m[(0, 2)];
        let d = m[(1, 0)];
        let e = m[(1, 1)];
        let f = m[(1, 2)];
        let g = m[(2, 0)];
        let h = m[(2, 1)];
        let i = m[(2, 2)];
        let det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
        Mat3::new(
            (e * i - f * h) / det,
            (c * h - b * i) / det,
            (b * f - c * e) / det,
            (f * g - d * i) / det,
            (a * i - c * g) / det,
            (c * d - a * f) / det,
            (d * h - e * g) / det,
            (b * g - a * h) / det,
            (a * e - b * d) / det,
        )
    }

    #[test]
    fn reproject_identity_intrinsics() {
        let cam = identity_camera();
        let p = reproject(Pixel::new(0.0, 0.0), 3.5, &cam).unwrap();
        assert_relative_eq!(p, Vec3::new(0.0, 0.0, 3.5), epsilon = 1e-15);
    }

    #[test]
    fn reproject_principal_point_hits_optical_axis() {
        let cam = camera(intrinsics(500.0, 320.0, 240.0), Mat3::identity(), Vec3::zeros());
        let p = reproject(Pixel::new(320.0, 240.0), 2.0, &cam).unwrap();
        assert_relative_eq!(p, Vec3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn reproject_matches_independent_inverse() {
        let k = intrinsics(500.0, 320.0, 240.0);
        let cam = camera(k, Mat3::identity(), Vec3::zeros());
        let p = reproject(Pixel::new(320.0, 240.0), 2.5, &cam).unwrap();
        let expected = inverse3(&k) * Vec3::new(320.0, 240.0, 1.0) * 2.5;
        assert_relative_eq!(p, expected, epsilon = 1e-12);

        let q = reproject(Pixel::new(101.0, 404.0), 7.25, &cam).unwrap();
        let expected = inverse3(&k) * Vec3::new(101.0, 404.0, 1.0) * 7.25;
        assert_relative_eq!(q, expected, epsilon = 1e-12);
    }

    #[test]
    fn reproject_rejects_bad_depth() {
        let cam = identity_camera();
        assert!(reproject(Pixel::new(0.0, 0.0), f64::NAN, &cam).is_err());
        assert!(reproject(Pixel::new(0.0, 0.0), -1.0, &cam).is_err());
        assert!(reproject(Pixel::new(0.0, 0.0), 0.0, &cam).is_err());
    }

    #[test]
    fn project_round_trips_reproject_under_identity_pose() {
        let cam = camera(intrinsics(450.0, 310.0, 250.0), Mat3::identity(), Vec3::zeros());
        let p = Pixel::new(123.25, 456.5);
        let point = reproject(p, 4.0, &cam).unwrap();
        let (pix, depth) = project(&point, &cam).unwrap();
        assert_relative_eq!(pix.x, p.x, epsilon = 1e-9);
        assert_relative_eq!(pix.y, p.y, epsilon = 1e-9);
        assert_relative_eq!(depth, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn project_pure_z_translation() {
        let cam = camera(Mat3::identity(), Mat3::identity(), Vec3::new(0.0, 0.0, 1.0));
        let (pix, depth) = project(&Vec3::new(0.0, 0.0, 1.0), &cam).unwrap();
        assert_relative_eq!(pix.x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(pix.y, 0.0, epsilon = 1e-15);
        assert_relative_eq!(depth, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn project_matches_brute_force_matrix_pipeline() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let k = intrinsics(
                rng.random_range(200.0..800.0),
                rng.random_range(280.0..360.0),
                rng.random_range(200.0..280.0),
            );
            let r = rotation_xyz(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            );
            let t = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let point = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(3.0..10.0),
            );
            let cam = camera(k, r, t);
            // Independent elementwise pipeline.
            let mut pc = [0.0f64; 3];
            for row in 0..3 {
                pc[row] = r[(row, 0)] * point.x + r[(row, 1)] * point.y + r[(row, 2)] * point.z
                    + t[row];
            }
            if pc[2] <= EPSILON_Z {
                continue;
            }
            let mut h = [0.0f64; 3];
            for row in 0..3 {
                h[row] = k[(row, 0)] * pc[0] + k[(row, 1)] * pc[1] + k[(row, 2)] * pc[2];
            }
            let (pix, depth) = project(&point, &cam).unwrap();
            assert_relative_eq!(pix.x, h[0] / h[2], epsilon = 1e-9);
            assert_relative_eq!(pix.y, h[1] / h[2], epsilon = 1e-9);
            assert_relative_eq!(depth, pc[2], epsilon = 1e-9);
        }
    }

    #[test]
    fn project_rejects_behind_camera() {
        let cam = identity_camera();
        let err = project(&Vec3::new(0.0, 0.0, -1.0), &cam).unwrap_err();
        assert!(matches!(err, GeomError::BehindCamera { .. }));
    }

    #[test]
    fn flow_of_pair_examples() {
        assert_eq!(
            flow_of_pair(Pixel::new(3.0, 4.0), Pixel::new(3.0, 4.0)),
            Vec2::zeros()
        );
        assert_eq!(
            flow_of_pair(Pixel::new(0.0, 0.0), Pixel::new(5.0, -2.0)),
            Vec2::new(5.0, -2.0)
        );
    }

    proptest! {
        #[test]
        fn flow_of_pair_antisymmetric(ax in -1e3f64..1e3, ay in -1e3f64..1e3,
                                      bx in -1e3f64..1e3, by in -1e3f64..1e3) {
            let a = Pixel::new(ax, ay);
            let b = Pixel::new(bx, by);
            prop_assert_eq!(flow_of_pair(a, b), -flow_of_pair(b, a));
        }

        #[test]
        fn normalize_depth_strictly_decreasing(d in 0.6f64..9.9, delta in 1e-3f64..0.1) {
            let lo = normalize_depth(d + delta, 0.5, 10.0).unwrap();
            let hi = normalize_depth(d, 0.5, 10.0).unwrap();
            prop_assert!(hi > lo);
        }
    }

    #[test]
    fn depth_to_flow_identical_cameras_is_zero() {
        // Same intrinsics, tiny numerical baseline not allowed; instead use an
        // exactly shared pose via two distinct translations along the ray?
        // Identical cameras means zero baseline, which the pair rejects, so
        // the zero-flow statement is checked through a vanishing baseline
        // limit: flow scales linearly with the baseline.
        let reference = identity_camera();
        for eps in [1e-3, 1e-4, 1e-5] {
            let source = camera(Mat3::identity(), Mat3::identity(), Vec3::new(eps, 0.0, 0.0));
            let pair = ViewPair::new(&reference, &source).unwrap();
            let flow = pair.depth_to_flow(Pixel::new(0.3, -0.2), 2.0).unwrap();
            assert_relative_eq!(flow.x, eps / 2.0, epsilon = 1e-12);
            assert_relative_eq!(flow.y, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn depth_to_flow_rectified_stereo_matches_disparity_formula() {
        let f = 500.0;
        let b = 0.2;
        let reference = camera(intrinsics(f, 320.0, 240.0), Mat3::identity(), Vec3::zeros());
        let source = camera(
            intrinsics(f, 320.0, 240.0),
            Mat3::identity(),
            Vec3::new(-b, 0.0, 0.0),
        );
        let pair = ViewPair::new(&reference, &source).unwrap();
        let p = Pixel::new(100.0, 200.0);
        for d in [1.0, 2.0, 4.0] {
            let flow = pair.depth_to_flow(p, d).unwrap();
            assert_relative_eq!(flow.x, -b * f / d, epsilon = 1e-9);
            assert_relative_eq!(flow.y, 0.0, epsilon = 1e-12);
        }
        // Doubling depth halves the flow magnitude.
        let f1 = pair.depth_to_flow(p, 1.5).unwrap();
        let f2 = pair.depth_to_flow(p, 3.0).unwrap();
        assert_relative_eq!(f1.x, 2.0 * f2.x, epsilon = 1e-9);
    }

    #[test]
    fn depth_to_flow_matches_step_by_step_composition() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 200 {
            let (reference, source, pair) = random_pair(&mut rng);
            let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let depth = rng.random_range(1.0..10.0);
            let composed = reproject(p, depth, &reference)
                .and_then(|point| project(&point, &source))
                .map(|(pix, _)| flow_of_pair(p, pix));
            let direct = pair.depth_to_flow(p, depth);
            match (composed, direct) {
                (Ok(expected), Ok(actual)) => {
                    assert_relative_eq!(actual.x, expected.x, epsilon = 1e-9);
                    assert_relative_eq!(actual.y, expected.y, epsilon = 1e-9);
                    checked += 1;
                }
                (Err(_), Err(_)) => {}
                (a, b) => panic!("composition/direct disagree: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn flow_to_depth_round_trip_random_configurations() {
        let mut rng = StdRng::seed_from_u64(13);
        let mut checked = 0;
        while checked < 1000 {
            let (_, _, pair) = random_pair(&mut rng);
            let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let depth = rng.random_range(1.0..10.0);
            let Ok(flow) = pair.depth_to_flow(p, depth) else {
                continue;
            };
            let Ok(recovered) = pair.flow_to_depth(p, flow) else {
                continue;
            };
            let rel = (recovered - depth).abs() / depth;
            assert!(rel < 1e-6, "relative error {rel} at depth {depth}");
            checked += 1;
        }
    }

    #[test]
    fn flow_to_depth_rectified_takes_x_branch() {
        let f = 500.0;
        let b = 0.25;
        let reference = camera(intrinsics(f, 320.0, 240.0), Mat3::identity(), Vec3::zeros());
        let source = camera(
            intrinsics(f, 320.0, 240.0),
            Mat3::identity(),
            Vec3::new(-b, 0.0, 0.0),
        );
        let pair = ViewPair::new(&reference, &source).unwrap();
        let d = 2.0;
        let flow = Vec2::new(-b * f / d, 0.0);
        let (depth, branch) = pair
            .flow_to_depth_branched(Pixel::new(320.0, 240.0), flow)
            .unwrap();
        assert_relative_eq!(depth, d, epsilon = 1e-9);
        assert_eq!(branch, TriangulationBranch::X);
    }

    #[test]
    fn flow_to_depth_branch_rule_with_exact_tie() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut ties = 0;
        let mut x_taken = 0;
        let mut y_taken = 0;
        for _ in 0..2000 {
            let (_, _, pair) = random_pair(&mut rng);
            let p = Pixel::new(rng.random_range(100.0..540.0), rng.random_range(100.0..380.0));
            let depth = rng.random_range(1.0..8.0);
            let Ok(flow) = pair.depth_to_flow(p, depth) else {
                continue;
            };
            let Ok((_, branch)) = pair.flow_to_depth_branched(p, flow) else {
                continue;
            };
            let expected = if flow.x.abs() >= flow.y.abs() {
                TriangulationBranch::X
            } else {
                TriangulationBranch::Y
            };
            assert_eq!(branch, expected);
            match branch {
                TriangulationBranch::X => x_taken += 1,
                TriangulationBranch::Y => y_taken += 1,
            }
            // Exact-tie probe on the same pair: a diagonal flow has equal
            // components, so the x-branch must be selected.
            let diag = Vec2::new(3.0, -3.0);
            if let Ok((_, b)) = pair.flow_to_depth_branched(p, diag) {
                assert_eq!(b, TriangulationBranch::X);
                ties += 1;
            }
        }
        assert!(ties > 0);
        assert!(x_taken > 0 && y_taken > 0, "both branches should be exercised");
    }

    #[test]
    fn epipolar_frame_rectified_direction_and_stability() {
        let f = 400.0;
        let reference = camera(intrinsics(f, 320.0, 240.0), Mat3::identity(), Vec3::zeros());
        let source = camera(
            intrinsics(f, 320.0, 240.0),
            Mat3::identity(),
            Vec3::new(-0.3, 0.0, 0.0),
        );
        let pair = ViewPair::new(&reference, &source).unwrap();
        let p = Pixel::new(222.0, 111.0);
        let frame = pair.epipolar_frame(p).unwrap();
        // T = (-b, 0, 0): flow goes to -x as inverse depth grows.
        assert_relative_eq!(frame.direction().x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(frame.direction().y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(frame.anchor().x, p.x, epsilon = 1e-9);
        assert_relative_eq!(frame.anchor().y, p.y, epsilon = 1e-9);
        // Same configuration always yields the same sign.
        let again = pair.epipolar_frame(p).unwrap();
        assert_eq!(frame.direction(), again.direction());
    }

    #[test]
    fn epipolar_direction_matches_numerical_inverse_depth_derivative() {
        let mut rng = StdRng::seed_from_u64(19);
        let mut checked = 0;
        while checked < 200 {
            let (_, _, pair) = random_pair(&mut rng);
            let p = Pixel::new(rng.random_range(50.0..590.0), rng.random_range(50.0..430.0));
            let Ok(frame) = pair.epipolar_frame(p) else {
                continue;
            };
            let d = rng.random_range(1.5..8.0);
            let w = 1.0 / d;
            let h = 1e-6;
            let (Ok(f_plus), Ok(f_minus)) = (
                pair.depth_to_flow(p, 1.0 / (w + h)),
                pair.depth_to_flow(p, 1.0 / (w - h)),
            ) else {
                continue;
            };
            let deriv = (f_plus - f_minus) / (2.0 * h);
            let norm = deriv.norm();
            if norm < 1e-6 {
                continue;
            }
            let unit = deriv / norm;
            assert_relative_eq!(unit.x, frame.direction().x, epsilon = 1e-5);
            assert_relative_eq!(unit.y, frame.direction().y, epsilon = 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn epipolar_line_is_depth_independent_and_collinear() {
        let mut rng = StdRng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 300 {
            let (_, _, pair) = random_pair(&mut rng);
            let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let Ok(frame) = pair.epipolar_frame(p) else {
                continue;
            };
            let (d1, d2) = (rng.random_range(1.0..3.0), rng.random_range(4.0..9.0));
            let (Ok(f1), Ok(f2)) = (pair.depth_to_flow(p, d1), pair.depth_to_flow(p, d2)) else {
                continue;
            };
            for flow in [f1, f2] {
                let p_s = p.offset(flow);
                // Point-to-line distance: component orthogonal to direction.
                let rel = p_s.to_vec() - frame.anchor().to_vec();
                let ortho = rel - frame.direction() * frame.direction().dot(&rel);
                assert!(ortho.norm() < 1e-6, "off-line by {} px", ortho.norm());
            }
            checked += 1;
        }
    }

    #[test]
    fn eflow_projection_properties() {
        let frame = EpipolarFrame {
            direction: Vec2::new(0.6, 0.8),
            anchor: Pixel::new(5.0, 5.0),
        };
        assert_eq!(frame.flow_to_eflow(Vec2::zeros()), 0.0);
        // Flow parallel to the direction keeps its signed length.
        assert_relative_eq!(frame.flow_to_eflow(Vec2::new(1.2, 1.6)), 2.0, epsilon = 1e-12);
        assert_relative_eq!(frame.flow_to_eflow(Vec2::new(-0.6, -0.8)), -1.0, epsilon = 1e-12);
        assert_eq!(frame.eflow_to_flow(0.0), Vec2::zeros());
        // Round trip through flow space is exact for any scalar.
        for e in [-3.5, -0.25, 0.0, 1.0, 7.75] {
            assert_relative_eq!(frame.flow_to_eflow(frame.eflow_to_flow(e)), e, epsilon = 1e-12);
        }
        // Projection never lengthens a flow.
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..200 {
            let flow = Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let projected = frame.eflow_to_flow(frame.flow_to_eflow(flow));
            assert!(projected.norm() <= flow.norm() + 1e-12);
        }
    }

    #[test]
    fn eflow_depth_round_trip() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut checked = 0;
        while checked < 1000 {
            let (_, _, pair) = random_pair(&mut rng);
            let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let depth = rng.random_range(1.0..10.0);
            let Ok(eflow) = pair.depth_to_eflow(p, depth) else {
                continue;
            };
            let Ok(recovered) = pair.eflow_to_depth(p, eflow) else {
                continue;
            };
            let rel = (recovered - depth).abs() / depth;
            assert!(rel < 1e-6, "relative error {rel}");
            checked += 1;
        }
    }

    #[test]
    fn zero_baseline_is_rejected_at_pair_construction() {
        let reference = identity_camera();
        let source = identity_camera();
        let err = ViewPair::new(&reference, &source).unwrap_err();
        assert!(matches!(err, GeomError::NoBaseline(_)));
    }

    #[test]
    fn eflow_monotone_in_inverse_depth() {
        let mut rng = StdRng::seed_from_u64(37);
        let mut checked = 0;
        while checked < 50 {
            let (_, _, pair) = random_pair(&mut rng);
            let p = Pixel::new(rng.random_range(100.0..540.0), rng.random_range(100.0..380.0));
            if pair.epipolar_frame(p).is_err() {
                continue;
            }
            let (d_min, d_max) = (1.0, 10.0);
            let samples: Vec<_> = (0..200)
                .map(|i| {
                    let w = 1.0 / d_max + (1.0 / d_min - 1.0 / d_max) * i as f64 / 199.0;
                    pair.depth_to_eflow(p, 1.0 / w)
                })
                .collect();
            if samples.iter().any(|s| s.is_err()) {
                continue;
            }
            for pair_w in samples.windows(2) {
                let (a, b) = (pair_w[0].as_ref().unwrap(), pair_w[1].as_ref().unwrap());
                assert!(b > a, "eflow not strictly increasing in inverse depth");
            }
            checked += 1;
        }
    }

    #[test]
    fn normalize_depth_endpoints_and_errors() {
        assert_relative_eq!(normalize_depth(0.5, 0.5, 10.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(normalize_depth(10.0, 0.5, 10.0).unwrap(), 0.0, epsilon = 1e-12);
        assert!(normalize_depth(-1.0, 0.5, 10.0).is_err());
        assert!(normalize_depth(0.0, 0.5, 10.0).is_err());
        assert!(normalize_depth(1.0, 10.0, 0.5).is_err());
    }

    #[test]
    fn camera_validation_catches_bad_inputs() {
        // Non-orthonormal rotation.
        let bad_r = Mat3::new(1.1, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraView::new(Mat3::identity(), bad_r, Vec3::zeros(), 1.0, 2.0, 8, 8).is_err());
        // Reflection (det -1).
        let refl = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraView::new(Mat3::identity(), refl, Vec3::zeros(), 1.0, 2.0, 8, 8).is_err());
        // Lower-triangular intrinsics entry.
        let bad_k = Mat3::new(500.0, 0.0, 320.0, 3.0, 500.0, 240.0, 0.0, 0.0, 1.0);
        assert!(CameraView::new(bad_k, Mat3::identity(), Vec3::zeros(), 1.0, 2.0, 8, 8).is_err());
        // Inverted depth range.
        assert!(
            CameraView::new(Mat3::identity(), Mat3::identity(), Vec3::zeros(), 2.0, 1.0, 8, 8)
                .is_err()
        );
    }

    #[test]
    fn scaled_camera_preserves_pixel_center_geometry() {
        let cam = camera(intrinsics(320.0, 79.5, 63.5), Mat3::identity(), Vec3::zeros());
        let scaled = cam.scaled(4).unwrap();
        assert_eq!(scaled.width, 160);
        assert_eq!(scaled.height, 120);
        // A point projecting to full-res pixel (4x + 1.5) lands on scaled x.
        let point = reproject(Pixel::new(4.0 * 20.0 + 1.5, 4.0 * 10.0 + 1.5), 2.0, &cam).unwrap();
        let (pix, _) = project(&point, &scaled).unwrap();
        assert_relative_eq!(pix.x, 20.0, epsilon = 1e-9);
        assert_relative_eq!(pix.y, 10.0, epsilon = 1e-9);
    }
}
