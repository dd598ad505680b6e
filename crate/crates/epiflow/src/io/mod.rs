//! Scene ingestion and on-disk formats.
//!
//! A scene directory looks like:
//!
//! ```text
//! scene/
//!   images/0000.png ...      PNG or PPM/PGM, decoded to 8-bit RGB
//!   cams/0000_cam.txt ...    camera text files (see [`load_camera_file`])
//!   pair.txt                 per-reference source lists (see [`load_scene`])
//!   gt_depths/0000.pfm ...   optional ground-truth depth maps
//!   gt_cloud.ply             optional ground-truth point cloud
//! ```
//!
//! Every loader either parses to a validated object or reports a diagnostic
//! error naming the offending location; nothing is silently coerced.

mod camera;
mod config;
mod pfm;

pub use camera::{load_camera_file, save_camera_file};
pub use config::{BackendSpec, ProviderSpec, ReconstructSettings};
pub use pfm::{read_depth_pfm, write_depth_pfm};

use crate::geom::CameraView;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> SceneError {
    SceneError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// One loaded view: image plus its camera.
pub struct SceneView {
    pub image: image::RgbImage,
    pub camera: CameraView,
}

/// A validated multi-view scene: views, per-reference source lists, name.
pub struct SceneBundle {
    pub name: String,
    pub views: Vec<SceneView>,
    /// `pairs[r]` lists source indices for reference r in priority order,
    /// already truncated to the requested count.
    pub pairs: Vec<Vec<usize>>,
}

impl SceneBundle {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

fn view_file(dir: &Path, sub: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{index:04}{ext}"))
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    let png = view_file(dir, "images", index, ".png");
    if png.exists() {
        return png;
    }
    let ppm = view_file(dir, "images", index, ".ppm");
    if ppm.exists() {
        return ppm;
    }
    view_file(dir, "images", index, ".pgm")
}

pub fn camera_path(dir: &Path, index: usize) -> PathBuf {
    view_file(dir, "cams", index, "_cam.txt")
}

pub fn gt_depth_path(dir: &Path, index: usize) -> PathBuf {
    view_file(dir, "gt_depths", index, ".pfm")
}

/// Parse pair.txt: first line is the view count, then per view a line with
/// its index and a line `k src0 score0 src1 score1 ...`.
fn load_pairs(path: &Path, n_views: usize) -> Result<Vec<Vec<usize>>, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut tokens = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            tokens.push((ln + 1, tok));
        }
    }
    let mut cursor = 0usize;
    let mut next = |what: &str| -> Result<(usize, &str), SceneError> {
        let t = tokens.get(cursor).copied().ok_or_else(|| {
            parse_err(
                path,
                tokens.last().map_or(1, |t| t.0),
                format!("unexpected end of file, expected {what}"),
            )
        })?;
        cursor += 1;
        Ok(t)
    };
    let (ln, tok) = next("view count")?;
    let declared: usize = tok
        .parse()
        .map_err(|_| parse_err(path, ln, format!("bad view count: {tok}")))?;
    if declared != n_views {
        return Err(parse_err(
            path,
            ln,
            format!("pair file declares {declared} views but the scene has {n_views}"),
        ));
    }
    let mut pairs = vec![Vec::new(); n_views];
    for _ in 0..n_views {
        let (ln, tok) = next("reference index")?;
        let r: usize = tok
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad reference index: {tok}")))?;
        if r >= n_views {
            return Err(parse_err(
                path,
                ln,
                format!("reference index {r} out of range"),
            ));
        }
        let (ln, tok) = next("source count")?;
        let k: usize = tok
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad source count: {tok}")))?;
        let mut list = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, tok) = next("source index")?;
            let s: usize = tok
                .parse()
                .map_err(|_| parse_err(path, ln, format!("bad source index: {tok}")))?;
            if s >= n_views {
                return Err(parse_err(
                    path,
                    ln,
                    format!("source index {s} out of range"),
                ));
            }
            let (ln, tok) = next("source score")?;
            let _score: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, ln, format!("bad source score: {tok}")))?;
            list.push(s);
        }
        pairs[r] = list;
    }
    Ok(pairs)
}

/// Load a scene directory, checking image/camera dimension agreement and
/// truncating each pair list to `n_sources`.
pub fn load_scene(dir: &Path, n_sources: usize) -> Result<SceneBundle, SceneError> {
    let cams_dir = dir.join("cams");
    let mut n_views = 0;
    while camera_path(dir, n_views).exists() {
        n_views += 1;
    }
    if n_views == 0 {
        return Err(SceneError::Invalid {
            path: cams_dir,
            message: "no camera files found (expected cams/0000_cam.txt ...)".into(),
        });
    }
    let mut views = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let cam = load_camera_file(&camera_path(dir, i))?;
        let img_path = image_path(dir, i);
        let image = image::open(&img_path)
            .map_err(|e| SceneError::Image {
                path: img_path.clone(),
                source: e,
            })?
            .to_rgb8();
        if image.width() as usize != cam.width || image.height() as usize != cam.height {
            return Err(SceneError::Invalid {
                path: img_path,
                message: format!(
                    "image is {}x{} but the camera declares {}x{}",
                    image.width(),
                    image.height(),
                    cam.width,
                    cam.height
                ),
            });
        }
        views.push(SceneView { image, camera: cam });
    }
    let pair_path = dir.join("pair.txt");
    let mut pairs = load_pairs(&pair_path, n_views)?;
    for (r, list) in pairs.iter_mut().enumerate() {
        list.truncate(n_sources);
        if list.is_empty() {
            return Err(SceneError::Invalid {
                path: pair_path.clone(),
                message: format!("reference {r} has no sources"),
            });
        }
        if list.contains(&r) {
            return Err(SceneError::Invalid {
                path: pair_path.clone(),
                message: format!("reference {r} lists itself as a source"),
            });
        }
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    Ok(SceneBundle { name, views, pairs })
}

/// Serialize pair lists in the format read by [`load_scene`].
pub fn pairs_to_string(pairs: &[Vec<usize>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", pairs.len());
    for (r, list) in pairs.iter().enumerate() {
        let _ = writeln!(out, "{r}");
        let _ = write!(out, "{}", list.len());
        for s in list {
            let _ = write!(out, " {s} 1.0");
        }
        let _ = writeln!(out);
    }
    out
}
