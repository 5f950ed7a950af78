//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{FameError, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, width: usize, height: usize, samples: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(samples.map(to_byte));
    out
}

/// Interleaves `planes` (each `height × width`) into a P6 image.
pub fn encode_ppm(planes: [&[f64]; 3], width: usize, height: usize) -> Vec<u8> {
    encode("P6", width, height, (0..width * height).flat_map(move |i| planes.map(|p| p[i])))
}

pub fn encode_pgm(plane: &[f64], width: usize, height: usize) -> Vec<u8> {
    encode("P5", width, height, plane.iter().copied())
}

/// Decoded image: `channels` planes of `height × width` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<Vec<f64>>,
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(FameError::Format("truncated pixmap header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| FameError::Format("non-ASCII pixmap header".into()))
}

pub fn decode_pixmap(bytes: &[u8]) -> Result<Pixmap> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)? {
        "P6" => 3,
        "P5" => 1,
        m => return Err(FameError::Format(format!("unsupported pixmap magic {m:?}"))),
    };
    let mut num = |name: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| FameError::Format(format!("bad pixmap {name} {tok:?}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(FameError::Format(format!("maxval {maxval} unsupported (need 255)")));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let need = width * height * channels;
    if body.len() != need {
        return Err(FameError::Format(format!("pixmap body has {} bytes, expected {need}", body.len())));
    }
    let planes = (0..channels)
        .map(|c| (0..width * height).map(|i| f64::from(body[i * channels + c]) / 255.0).collect())
        .collect();
    Ok(Pixmap { width, height, planes })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| FameError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| FameError::io(path, e))
}

pub fn read_pixmap(path: &Path) -> Result<Pixmap> {
    let bytes = fs::read(path).map_err(|e| FameError::io(path, e))?;
    decode_pixmap(&bytes).map_err(|e| match e {
        FameError::Format(m) => FameError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_of_byte_values() {
        let r: Vec<f64> = (0..6).map(|i| i as f64 * 51.0 / 255.0).collect();
        let g = vec![1.0; 6];
        let b = vec![0.0; 6];
        let bytes = encode_ppm([&r, &g, &b], 3, 2);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let img = decode_pixmap(&bytes).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.planes, vec![r, g, b]);
    }

    #[test]
    fn pgm_with_comment_and_clamping() {
        let mut bytes = b"P5\n# heatmap\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(decode_pixmap(&bytes).unwrap().planes, vec![vec![0.0, 1.0]]);
        assert_eq!(encode_pgm(&[-0.5, 2.0], 2, 1)[11..], [0u8, 255]);
    }

    #[test]
    fn malformed_pixmaps_are_format_errors() {
        for bad in [&b"P3\n1 1\n255\n\0"[..], b"P5\n1 1\n65535\n\0\0", b"P5\n2 2\n255\n\0", b"P5\n"] {
            assert!(matches!(decode_pixmap(bad), Err(FameError::Format(_))), "{bad:?}");
        }
    }
}
