//! Decoder-family fingerprints: fixed encoder/decoder round trips.

use super::image::{box_blur3, resize_area, resize_bilinear, upsample_nearest, upsample_transposed};
use crate::error::{contract_err, FameError, Result};

/// One simulated autoencoder decoder.
pub trait DecoderFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// Round trip of one frame given as `channels` planes of `n × n`.
    fn decode(&self, planes: &[Vec<f64>], n: usize) -> Vec<Vec<f64>>;
}

/// Shrinks to `work / 2^stages`, then applies `stages` ×2 upsamplings (with
/// `after_stage` run on all channels after each) and resamples back to `n`.
fn round_trip(
    planes: &[Vec<f64>],
    n: usize,
    work: usize,
    stages: u32,
    up: impl Fn(&[f64], usize) -> Vec<f64>,
    after_stage: impl Fn(&mut [Vec<f64>], usize),
) -> Vec<Vec<f64>> {
    let bottleneck = ((work as f64) / f64::from(1u32 << stages)).round().max(1.0) as usize;
    let mut x: Vec<Vec<f64>> = planes.iter().map(|p| resize_area(p, n, bottleneck)).collect();
    let mut m = bottleneck;
    for _ in 0..stages {
        x = x.iter().map(|p| up(p, m)).collect();
        m *= 2;
        after_stage(&mut x, m);
    }
    x.iter()
        .map(|p| if m > n { resize_area(p, m, n) } else { resize_bilinear(p, m, n) })
        .collect()
}

fn up_bilinear(p: &[f64], m: usize) -> Vec<f64> {
    resize_bilinear(p, m, 2 * m)
}

fn half(n: usize) -> usize {
    (n / 2).max(1)
}

/// Baseline: 3 bilinear upsamplings at half resolution.
pub struct Faceswap;

impl DecoderFamily for Faceswap {
    fn name(&self) -> &'static str {
        "faceswap"
    }

    fn decode(&self, planes: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        round_trip(planes, n, half(n), 3, up_bilinear, |_, _| {})
    }
}

/// Shallow decoder: 3 nearest-neighbour upsamplings at half resolution.
pub struct Lightweight;

impl DecoderFamily for Lightweight {
    fn name(&self) -> &'static str {
        "lightweight"
    }

    fn decode(&self, planes: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        round_trip(planes, n, half(n), 3, upsample_nearest, |_, _| {})
    }
}

/// Shared intermediate layers: 4 bilinear upsamplings, each followed by
/// partial channel averaging and a 3×3 blur.
pub struct Iae;

pub const IAE_CHANNEL_MIX: f64 = 0.15;

impl DecoderFamily for Iae {
    fn name(&self) -> &'static str {
        "iae"
    }

    fn decode(&self, planes: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        round_trip(planes, n, half(n), 4, up_bilinear, |x, m| {
            let c = x.len() as f64;
            for i in 0..m * m {
                let mean = x.iter().map(|p| p[i]).sum::<f64>() / c;
                for p in x.iter_mut() {
                    p[i] = (1.0 - IAE_CHANNEL_MIX) * p[i] + IAE_CHANNEL_MIX * mean;
                }
            }
            for p in x.iter_mut() {
                *p = box_blur3(p, m);
            }
        })
    }
}

/// Transposed-convolution decoder: 4 checkerboard upsamplings at full
/// resolution, then a partial 3×3 smoothing of the result.
pub struct Dfaker;

pub const DFAKER_SIDE_TAP: f64 = 0.45;
pub const DFAKER_SMOOTHING: f64 = 0.3;

impl DecoderFamily for Dfaker {
    fn name(&self) -> &'static str {
        "dfaker"
    }

    fn decode(&self, planes: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        let up = |p: &[f64], m: usize| upsample_transposed(p, m, DFAKER_SIDE_TAP);
        let mut out = round_trip(planes, n, n, 4, up, |_, _| {});
        for p in out.iter_mut() {
            let blurred = box_blur3(p, n);
            for (v, b) in p.iter_mut().zip(blurred) {
                *v = (1.0 - DFAKER_SMOOTHING) * *v + DFAKER_SMOOTHING * b;
            }
        }
        out
    }
}

/// High-resolution decoder: 3 bilinear upsamplings at full resolution.
pub struct DflH128;

impl DecoderFamily for DflH128 {
    fn name(&self) -> &'static str {
        "dfl-h128"
    }

    fn decode(&self, planes: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        round_trip(planes, n, n, 3, up_bilinear, |_, _| {})
    }
}

/// Families by id, in registration order.
pub struct FamilyRegistry {
    families: Vec<Box<dyn DecoderFamily>>,
}

impl Default for FamilyRegistry {
    fn default() -> Self {
        let mut r = FamilyRegistry { families: Vec::new() };
        for f in [
            Box::new(Faceswap) as Box<dyn DecoderFamily>,
            Box::new(Lightweight),
            Box::new(Iae),
            Box::new(Dfaker),
            Box::new(DflH128),
        ] {
            r.register(f).expect("built-in names are distinct");
        }
        r
    }
}

impl FamilyRegistry {
    /// Appends a family and returns its id.
    pub fn register(&mut self, family: Box<dyn DecoderFamily>) -> Result<usize> {
        if self.find(family.name()).is_some() {
            return Err(FameError::Config(format!("decoder family {:?} registered twice", family.name())));
        }
        self.families.push(family);
        Ok(self.families.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.families.iter().map(|f| f.name()).collect()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.families.iter().position(|f| f.name() == name)
    }

    pub fn get(&self, id: usize) -> Result<&dyn DecoderFamily> {
        self.families
            .get(id)
            .map(|b| b.as_ref())
            .ok_or_else(|| contract_err!("unknown decoder family {id} ({} defined)", self.families.len()))
    }
}
