//! Binary PPM (P6, maxval 255) frame files.

use crate::error::{format_err, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Write one RGB frame given as channel-major f32 planes in [0, 1]
/// (`[3, h, w]`, row-major within each plane).
pub fn write_frame(path: &Path, rgb: &[f32], h: usize, w: usize) -> Result<()> {
    if rgb.len() != 3 * h * w {
        return format_err(format!(
            "frame buffer holds {} values, want {}",
            rgb.len(),
            3 * h * w
        ));
    }
    let mut buf = Vec::with_capacity(3 * h * w + 32);
    write!(buf, "P6\n{w} {h}\n255\n")?;
    for i in 0..h * w {
        for c in 0..3 {
            let v = (rgb[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.push(v);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a P6 file back into channel-major [0, 1] planes.
pub fn read_frame(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let mut r = &bytes[..];
    let magic = next_token(&mut r)?;
    if magic != "P6" {
        return format_err(format!("{}: not a P6 file (got `{magic}`)", path.display()));
    }
    let w: usize = parse_dim(&next_token(&mut r)?, path)?;
    let h: usize = parse_dim(&next_token(&mut r)?, path)?;
    let maxval: usize = parse_dim(&next_token(&mut r)?, path)?;
    if maxval != 255 {
        return format_err(format!("{}: only maxval 255 is supported", path.display()));
    }
    let mut pixels = vec![0u8; 3 * h * w];
    r.read_exact(&mut pixels)
        .map_err(|_| crate::error::AppError::Format(format!("{}: truncated pixel data", path.display())))?;
    let mut out = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            out[c * h * w + i] = pixels[3 * i + c] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

fn parse_dim(tok: &str, path: &Path) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| {
        crate::error::AppError::Format(format!("{}: bad header field `{tok}`", path.display()))
    })
}

/// One whitespace-delimited header token; `#` comments run to end of line.
/// Consumes the single whitespace byte that terminates the token, which is
/// exactly the P6 rule for where pixel data starts.
fn next_token(r: &mut &[u8]) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let Some((&b, rest)) = r.split_first() else {
            return format_err("unexpected end of PPM header");
        };
        *r = rest;
        match b {
            b'#' if tok.is_empty() => {
                while let Some((&c, rest)) = r.split_first() {
                    *r = rest;
                    if c == b'\n' {
                        break;
                    }
                }
            }
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(String::from_utf8_lossy(&tok).into_owned());
                }
            }
            _ => tok.push(b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        let h = 3;
        let w = 5;
        let rgb: Vec<f32> = (0..3 * h * w).map(|i| (i % 17) as f32 / 16.0).collect();
        write_frame(&path, &rgb, h, w).unwrap();
        let (back, rh, rw) = read_frame(&path).unwrap();
        assert_eq!((rh, rw), (h, w));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn out_of_range_values_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        write_frame(&path, &[-1.0, 0.5, 2.0], 1, 1).unwrap();
        let (back, _, _) = read_frame(&path).unwrap();
        assert_eq!(back[0], 0.0);
        assert_eq!(back[2], 1.0);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(read_frame(&path).is_err());
    }
}
