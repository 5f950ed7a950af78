use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FameError, Result};
use crate::synthdata::{resize_bilinear, Clip, CHANNELS};

/// Mirrors every frame left to right.
pub fn flip_horizontal(clip: &Clip) -> Clip {
    let n = clip.size;
    let mut out = clip.clone();
    for row in out.data.chunks_mut(n) {
        row.reverse();
    }
    out
}

/// Bilinear resize of every frame to `size × size`.
pub fn resize_clip(clip: &Clip, size: usize) -> Clip {
    if clip.size == size {
        return clip.clone();
    }
    let mut data = Vec::with_capacity(clip.frames * CHANNELS * size * size);
    for t in 0..clip.frames {
        for c in 0..CHANNELS {
            data.extend(resize_bilinear(clip.plane(t, c), clip.size, size));
        }
    }
    Clip { size, data, ..clip.clone() }
}

/// `(x − 0.5) / 0.5` per channel.
pub fn normalize(clip: &Clip) -> Clip {
    let mut out = clip.clone();
    out.data.iter_mut().for_each(|v| *v = (*v - 0.5) / 0.5);
    out
}

/// Frames `start, start + stride, …` (`frames` of them).
pub fn select_frames(clip: &Clip, frames: usize, stride: usize, start: usize) -> Result<Clip> {
    if frames == 0 || stride == 0 || start + (frames - 1) * stride >= clip.frames {
        return Err(FameError::Sampling(format!(
            "cannot take {frames} frames at stride {stride} from {start} in a {}-frame clip",
            clip.frames
        )));
    }
    let per = CHANNELS * clip.size * clip.size;
    let data = (0..frames)
        .flat_map(|i| {
            let t = start + i * stride;
            clip.data[t * per..(t + 1) * per].iter().copied()
        })
        .collect();
    Ok(Clip { frames, data, ..clip.clone() })
}

/// Random stride in {1, 2} among those that fit, then a uniform start.
pub fn temporal_crop(clip: &Clip, frames: usize, rng: &mut ChaCha8Rng) -> Result<Clip> {
    if frames == 0 || clip.frames < frames {
        return Err(FameError::Sampling(format!("{}-frame clip is shorter than {frames}", clip.frames)));
    }
    let stride = if clip.frames >= 2 * frames && rng.random_bool(0.5) { 2 } else { 1 };
    let span = (frames - 1) * stride + 1;
    let start = rng.random_range(0..=clip.frames - span);
    select_frames(clip, frames, stride, start)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub temporal_crop: bool,
    /// Model input resolution.
    pub size: usize,
    /// Model input frames.
    pub frames: usize,
}

/// Training-time pipeline: per-clip flip (p = 0.5), temporal crop, resize,
/// normalize. With crop disabled the first `frames` frames are used.
pub fn augment(clip: &Clip, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<Clip> {
    let flipped = cfg.flip && rng.random_bool(0.5);
    let mut out = if cfg.temporal_crop {
        temporal_crop(clip, cfg.frames, rng)?
    } else {
        select_frames(clip, cfg.frames, 1, 0)?
    };
    if flipped {
        out = flip_horizontal(&out);
    }
    Ok(normalize(&resize_clip(&out, cfg.size)))
}

/// Evaluation-time pipeline: first `frames` frames, resize, normalize.
pub fn preprocess(clip: &Clip, size: usize, frames: usize) -> Result<Clip> {
    Ok(normalize(&resize_clip(&select_frames(clip, frames, 1, 0)?, size)))
}
