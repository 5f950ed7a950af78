//! Blockwise 8×8 DCT quantization standing in for lossy video coding.

use std::fmt;
use std::sync::OnceLock;

use crate::error::{FameError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Compression {
    None,
    Hq,
    Lq,
}

impl Compression {
    pub const ALL: [Compression; 3] = [Compression::None, Compression::Hq, Compression::Lq];

    pub fn as_str(self) -> &'static str {
        match self {
            Compression::None => "none",
            Compression::Hq => "hq",
            Compression::Lq => "lq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Compression::None),
            "hq" => Ok(Compression::Hq),
            "lq" => Ok(Compression::Lq),
            _ => Err(FameError::Data(format!("unknown compression level {s:?}"))),
        }
    }

    /// Quality factor on the 1..100 scale; `None` means no quantization.
    pub fn quality(self) -> Option<u32> {
        match self {
            Compression::None => None,
            Compression::Hq => Some(90),
            Compression::Lq => Some(25),
        }
    }
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[rustfmt::skip]
const BASE_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard luminance table scaled to `quality` (1..=100).
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    BASE_TABLE.map(|b| ((b * scale + 50) / 100).clamp(1, 255) as f64)
}

/// Orthonormal DCT-II basis: `basis[u][x]`.
fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Quantizes one `n × n` plane of `[0, 1]` values block by block; partial
/// edge blocks are padded by replication.
pub fn compress_plane(plane: &[f64], n: usize, quality: u32) -> Vec<f64> {
    let table = quant_table(quality);
    let mut out = vec![0.0; n * n];
    for by in (0..n).step_by(8) {
        for bx in (0..n).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let (sy, sx) = ((by + y).min(n - 1), (bx + x).min(n - 1));
                    block[y * 8 + x] = plane[sy * n + sx] * 255.0 - 128.0;
                }
            }
            let mut coef = dct8x8(&block);
            for (c, q) in coef.iter_mut().zip(&table) {
                *c = (*c / q).round() * q;
            }
            let rec = idct8x8(&coef);
            for y in 0..8.min(n - by) {
                for x in 0..8.min(n - bx) {
                    out[(by + y) * n + bx + x] = ((rec[y * 8 + x] + 128.0) / 255.0).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_scaling_hand_values() {
        assert_eq!(quant_table(50)[0], 16.0);
        assert_eq!(quant_table(90)[0], 3.0);
        assert_eq!(quant_table(25)[0], 32.0);
        assert_eq!(quant_table(1)[63], 255.0);
        assert!(quant_table(100).iter().all(|&q| q == 1.0));
    }

    #[test]
    fn dct_round_trip_and_dc() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 29) % 17) as f64 - 8.0);
        let back = idct8x8(&dct8x8(&block));
        for (a, b) in block.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = dct8x8(&[2.0; 64]);
        assert!((flat[0] - 16.0).abs() < 1e-12);
        assert!(flat[1..].iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn dct_matches_direct_formula() {
        let block: [f64; 64] = std::array::from_fn(|i| (i as f64 * 0.37).sin());
        let coef = dct8x8(&block);
        let pi = std::f64::consts::PI;
        let c = |k: usize| if k == 0 { (0.125f64).sqrt() } else { 0.5 };
        for (v, u) in [(0, 0), (1, 3), (7, 7), (4, 2)] {
            let mut s = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    s += block[y * 8 + x]
                        * ((2 * x + 1) as f64 * u as f64 * pi / 16.0).cos()
                        * ((2 * y + 1) as f64 * v as f64 * pi / 16.0).cos();
                }
            }
            assert!((coef[v * 8 + u] - c(u) * c(v) * s).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_planes_survive_quantization() {
        let plane = vec![128.0 / 255.0; 100];
        let out = compress_plane(&plane, 10, 25);
        assert!(out.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn parse_round_trip() {
        for c in Compression::ALL {
            assert_eq!(Compression::parse(c.as_str()).unwrap(), c);
        }
        assert!(Compression::parse("mid").is_err());
    }
}
