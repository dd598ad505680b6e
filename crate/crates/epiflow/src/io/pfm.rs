//! PFM depth maps: grayscale "Pf", bottom-up row order, scale sign encoding
//! endianness. Invalid pixels are written as 0 and values that are zero,
//! negative or non-finite are masked on read.

use super::{io_err, parse_err, SceneError};
use crate::pipeline::DepthField;
use std::io::{BufRead, Read, Write};
use std::path::Path;

/// Write a depth field as little-endian PFM (scale -1.0).
pub fn write_depth_pfm(field: &DepthField, path: &Path) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut f = std::io::BufWriter::new(file);
    let (w, h) = (field.width(), field.height());
    write!(f, "Pf\n{w} {h}\n-1.0\n").map_err(|e| io_err(path, e))?;
    // Bottom-up row order.
    for y in (0..h).rev() {
        for x in 0..w {
            let v = field.get(x, y).unwrap_or(0.0) as f32;
            f.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

/// Read a grayscale PFM into a depth field.
pub fn read_depth_pfm(path: &Path) -> Result<DepthField, SceneError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut header = String::new();
    let mut line_no = 0usize;
    let mut read_header_line = |reader: &mut std::io::BufReader<std::fs::File>| {
        header.clear();
        line_no += 1;
        match reader.read_line(&mut header) {
            Ok(0) => Err(parse_err(path, line_no, "unexpected end of header")),
            Ok(_) => Ok((line_no, header.trim().to_string())),
            Err(e) => Err(io_err(path, e)),
        }
    };
    let (ln, magic) = read_header_line(&mut reader)?;
    if magic == "PF" {
        return Err(parse_err(
            path,
            ln,
            "color PFM (PF) is not supported, expected grayscale Pf",
        ));
    }
    if magic != "Pf" {
        return Err(parse_err(path, ln, format!("bad magic '{magic}'")));
    }
    let (ln, dims) = read_header_line(&mut reader)?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, ln, format!("bad dimensions line '{dims}'")))?;
    let h: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, ln, format!("bad dimensions line '{dims}'")))?;
    if it.next().is_some() || w == 0 || h == 0 {
        return Err(parse_err(path, ln, format!("bad dimensions line '{dims}'")));
    }
    let (ln, scale_line) = read_header_line(&mut reader)?;
    let scale: f32 = scale_line
        .parse()
        .map_err(|_| parse_err(path, ln, format!("bad scale '{scale_line}'")))?;
    if scale == 0.0 {
        return Err(parse_err(path, ln, "scale must be nonzero"));
    }
    let little_endian = scale < 0.0;

    let mut bytes = vec![0u8; w * h * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| parse_err(path, line_no, "truncated pixel data"))?;
    let mut depth = vec![0.0f64; w * h];
    let mut valid = vec![false; w * h];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // Bottom-up: sample i is row h-1-(i/w) of the image.
        let y = h - 1 - i / w;
        let x = i % w;
        let idx = y * w + x;
        if v.is_finite() && v > 0.0 {
            depth[idx] = v as f64;
            valid[idx] = true;
        }
    }
    DepthField::new(w, h, None, depth, valid)
        .map_err(|e| parse_err(path, line_no, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_from(w: usize, h: usize, values: &[f32]) -> DepthField {
        let depth: Vec<f64> = values.iter().map(|&v| v.max(0.0) as f64).collect();
        let valid: Vec<bool> = values.iter().map(|&v| v > 0.0).collect();
        DepthField::new(w, h, None, depth, valid).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let field = field_from(3, 2, &[1.25, 2.5, 0.0, 4.75, 0.125, 9.0]);
        let a = tmp.path().join("a.pfm");
        let b = tmp.path().join("b.pfm");
        write_depth_pfm(&field, &a).unwrap();
        let loaded = read_depth_pfm(&a).unwrap();
        write_depth_pfm(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn zeros_become_masked_pixels() {
        let tmp = tempfile::tempdir().unwrap();
        let field = field_from(2, 2, &[1.0, 0.0, 3.0, 0.0]);
        let path = tmp.path().join("m.pfm");
        write_depth_pfm(&field, &path).unwrap();
        let loaded = read_depth_pfm(&path).unwrap();
        assert_eq!(loaded.get(0, 0), Some(1.0));
        assert_eq!(loaded.get(1, 0), None);
        assert_eq!(loaded.get(0, 1), Some(3.0));
        assert_eq!(loaded.get(1, 1), None);
    }

    #[test]
    fn big_endian_scale_is_honored() {
        // Hand-build a 2x1 big-endian file (positive scale).
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.0f32.to_be_bytes());
        bytes.extend_from_slice(&8.0f32.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let loaded = read_depth_pfm(&path).unwrap();
        assert_eq!(loaded.get(0, 0), Some(2.0));
        assert_eq!(loaded.get(1, 0), Some(8.0));
        // And the little-endian branch reads its own writing (covered by the
        // round trip above); cross-check one value against a LE rewrite.
        let back = tmp.path().join("le.pfm");
        write_depth_pfm(&loaded, &back).unwrap();
        let le = read_depth_pfm(&back).unwrap();
        assert_eq!(le.get(1, 0), Some(8.0));
    }

    #[test]
    fn bottom_up_row_order() {
        // 1x2 field: top pixel 1.0, bottom pixel 2.0. The file stores the
        // bottom row first.
        let tmp = tempfile::tempdir().unwrap();
        let field = field_from(1, 2, &[1.0, 2.0]);
        let path = tmp.path().join("rows.pfm");
        write_depth_pfm(&field, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let data = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(data[0..4].try_into().unwrap()), 2.0);
        assert_eq!(f32::from_le_bytes(data[4..8].try_into().unwrap()), 1.0);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.pfm");
        std::fs::write(&path, "PF\n2 2\n-1.0\n").unwrap();
        assert!(read_depth_pfm(&path).is_err());
        std::fs::write(&path, "Pf\n2\n-1.0\n").unwrap();
        assert!(read_depth_pfm(&path).is_err());
        std::fs::write(&path, "Pf\n2 2\n0\n").unwrap();
        assert!(read_depth_pfm(&path).is_err());
        std::fs::write(&path, "Pf\n2 2\n-1.0\nxx").unwrap();
        assert!(read_depth_pfm(&path).is_err());
    }
}
