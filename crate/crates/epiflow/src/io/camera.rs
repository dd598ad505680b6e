//! Camera text files.
//!
//! Whitespace-tokenized blocks in fixed order:
//!
//! ```text
//! extrinsic
//! r00 r01 r02 t0
//! r10 r11 r12 t1
//! r20 r21 r22 t2
//! 0.0 0.0 0.0 1.0
//!
//! intrinsic
//! fx s cx
//! 0 fy cy
//! 0 0 1
//!
//! resolution
//! width height
//!
//! d_min d_max
//! ```
//!
//! The extrinsic block is the world-to-camera transform. The final range
//! line also accepts the four-number form `d_min d_interval n_bins d_max`;
//! only d_min and d_max are used since depth is never binned here.

use super::{io_err, parse_err, SceneError};
use crate::geom::{CameraView, Mat3, Vec3};
use std::path::Path;

struct Tokens<'a> {
    path: &'a Path,
    items: Vec<(usize, &'a str)>,
    cursor: usize,
}

impl<'a> Tokens<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                items.push((ln + 1, tok));
            }
        }
        Self {
            path,
            items,
            cursor: 0,
        }
    }

    fn last_line(&self) -> usize {
        self.items.last().map_or(1, |t| t.0)
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str), SceneError> {
        let t = self.items.get(self.cursor).copied().ok_or_else(|| {
            parse_err(
                self.path,
                self.last_line(),
                format!("unexpected end of file, expected {what}"),
            )
        })?;
        self.cursor += 1;
        Ok(t)
    }

    fn keyword(&mut self, word: &str) -> Result<(), SceneError> {
        let (ln, tok) = self.next(&format!("keyword '{word}'"))?;
        if tok != word {
            return Err(parse_err(
                self.path,
                ln,
                format!("expected keyword '{word}', found '{tok}'"),
            ));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<(usize, f64), SceneError> {
        let (ln, tok) = self.next(what)?;
        let v: f64 = tok
            .parse()
            .map_err(|_| parse_err(self.path, ln, format!("bad {what}: '{tok}'")))?;
        if !v.is_finite() {
            return Err(parse_err(self.path, ln, format!("non-finite {what}")));
        }
        Ok((ln, v))
    }

    fn remaining(&self) -> usize {
        self.items.len() - self.cursor
    }
}

/// Parse a camera file. Validation failures (non-orthonormal rotation,
/// inverted range, malformed blocks) are reported with the file and line.
pub fn load_camera_file(path: &Path) -> Result<CameraView, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut t = Tokens::new(path, &text);

    t.keyword("extrinsic")?;
    let mut rotation = Mat3::zeros();
    let mut translation = Vec3::zeros();
    let mut block_line = 1;
    for row in 0..4 {
        for col in 0..4 {
            let (ln, v) = t.number("extrinsic entry")?;
            block_line = ln;
            match (row, col) {
                (0..=2, 0..=2) => rotation[(row, col)] = v,
                (0..=2, 3) => translation[row] = v,
                (3, _) => {
                    let expected = if col == 3 { 1.0 } else { 0.0 };
                    if (v - expected).abs() > 1e-12 {
                        return Err(parse_err(
                            path,
                            ln,
                            format!("last extrinsic row must be 0 0 0 1, entry {col} is {v}"),
                        ));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    t.keyword("intrinsic")?;
    let mut intrinsics = Mat3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            let (ln, v) = t.number("intrinsic entry")?;
            block_line = ln;
            intrinsics[(row, col)] = v;
        }
    }

    t.keyword("resolution")?;
    let (ln_w, w) = t.number("width")?;
    let (ln_h, h) = t.number("height")?;
    if w.fract() != 0.0 || w < 1.0 {
        return Err(parse_err(path, ln_w, format!("bad width {w}")));
    }
    if h.fract() != 0.0 || h < 1.0 {
        return Err(parse_err(path, ln_h, format!("bad height {h}")));
    }

    // Range line: either "d_min d_max" or "d_min d_interval n_bins d_max".
    let (range_line, d_min) = t.number("d_min")?;
    let second = t.number("range value")?.1;
    let (d_min, d_max) = match t.remaining() {
        0 => (d_min, second),
        2 => {
            let _n_bins = t.number("bin count")?;
            let d_max = t.number("d_max")?.1;
            (d_min, d_max)
        }
        n => {
            return Err(parse_err(
                path,
                t.last_line(),
                format!("range line must have 2 or 4 numbers, found {} extra", n),
            ));
        }
    };

    CameraView::new(
        intrinsics,
        rotation,
        translation,
        d_min,
        d_max,
        w as usize,
        h as usize,
    )
    .map_err(|e| parse_err(path, block_line.max(range_line), e.to_string()))
}

/// Write a camera in the format read by [`load_camera_file`], with 17
/// significant digits so reloading reproduces the values exactly.
pub fn save_camera_file(cam: &CameraView, path: &Path) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let r = cam.rotation();
    let t = cam.translation();
    let k = cam.intrinsics();
    let mut out = String::from("extrinsic\n");
    for row in 0..3 {
        out.push_str(&format!(
            "{:.17e} {:.17e} {:.17e} {:.17e}\n",
            r[(row, 0)],
            r[(row, 1)],
            r[(row, 2)],
            t[row]
        ));
    }
    out.push_str("0.0 0.0 0.0 1.0\n\nintrinsic\n");
    for row in 0..3 {
        out.push_str(&format!(
            "{:.17e} {:.17e} {:.17e}\n",
            k[(row, 0)],
            k[(row, 1)],
            k[(row, 2)]
        ));
    }
    out.push_str(&format!(
        "\nresolution\n{} {}\n\n{:.17e} {:.17e}\n",
        cam.width, cam.height, cam.depth_min, cam.depth_max
    ));
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn dtu_style_example_parses() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cam.txt");
        std::fs::write(
            &path,
            "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n\nintrinsic\n500 0 320\n0 500 240\n0 0 1\n\nresolution\n640 480\n\n425 935\n",
        )
        .unwrap();
        let cam = load_camera_file(&path).unwrap();
        assert_eq!(cam.depth_min, 425.0);
        assert_eq!(cam.depth_max, 935.0);
        assert_eq!(cam.width, 640);
        assert_eq!(cam.intrinsics()[(0, 0)], 500.0);
    }

    #[test]
    fn four_number_range_line_keeps_min_and_max() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cam.txt");
        std::fs::write(
            &path,
            "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\nintrinsic\n500 0 320\n0 500 240\n0 0 1\nresolution\n640 480\n425 2.5 192 935\n",
        )
        .unwrap();
        let cam = load_camera_file(&path).unwrap();
        assert_eq!(cam.depth_min, 425.0);
        assert_eq!(cam.depth_max, 935.0);
    }

    #[test]
    fn bad_rotation_is_a_parse_error_naming_the_line() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cam.txt");
        std::fs::write(
            &path,
            "extrinsic\n1.1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\nintrinsic\n500 0 320\n0 500 240\n0 0 1\nresolution\n640 480\n1 2\n",
        )
        .unwrap();
        let err = load_camera_file(&path).unwrap_err();
        assert!(err.to_string().contains("orthonormal"), "{err}");
    }

    #[test]
    fn inverted_range_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cam.txt");
        std::fs::write(
            &path,
            "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\nintrinsic\n500 0 320\n0 500 240\n0 0 1\nresolution\n640 480\n935 425\n",
        )
        .unwrap();
        assert!(load_camera_file(&path).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let rot = *Rotation3::from_euler_angles(0.1, -0.2, 0.3).matrix();
        let cam = CameraView::new(
            Mat3::new(
                512.25, 0.0, 319.5, 0.0, 508.75, 239.5, 0.0, 0.0, 1.0,
            ),
            rot,
            Vec3::new(0.125, -2.5, 0.0625),
            0.7,
            13.5,
            640,
            480,
        )
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cam.txt");
        save_camera_file(&cam, &path).unwrap();
        let loaded = load_camera_file(&path).unwrap();
        assert_eq!(loaded.intrinsics(), cam.intrinsics());
        assert_eq!(loaded.rotation(), cam.rotation());
        assert_eq!(loaded.translation(), cam.translation());
        assert_eq!(loaded.depth_min, cam.depth_min);
        assert_eq!(loaded.depth_max, cam.depth_max);
        assert_eq!(loaded.width, cam.width);
        assert_eq!(loaded.height, cam.height);
    }

    #[test]
    fn truncated_file_reports_missing_block() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cam.txt");
        std::fs::write(&path, "extrinsic\n1 0 0 0\n0 1 0 0\n").unwrap();
        let err = load_camera_file(&path).unwrap_err();
        assert!(err.to_string().contains("unexpected end"), "{err}");
    }
}
