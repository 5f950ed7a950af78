//! Resampling and filtering on square single-channel planes.

/// Separable `n_dst × n_src` weights of area (box) resampling.
fn area_weights(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, f64)>> {
    let r = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * r, (i + 1) as f64 * r);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_src);
            (first..last)
                .filter_map(|j| {
                    let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
                    (overlap > 0.0).then_some((j, overlap / r))
                })
                .collect()
        })
        .collect()
}

/// Half-pixel-centred bilinear taps with edge clamping.
fn bilinear_weights(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, f64)>> {
    let r = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * r - 0.5).clamp(0.0, (n_src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(n_src - 1);
            let f = x - x0 as f64;
            if x1 == x0 || f == 0.0 {
                vec![(x0, 1.0)]
            } else {
                vec![(x0, 1.0 - f), (x1, f)]
            }
        })
        .collect()
}

fn separable(src: &[f64], n_src: usize, n_dst: usize, taps: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let mut rows = vec![0.0; n_src * n_dst];
    for y in 0..n_src {
        for (x, t) in taps.iter().enumerate() {
            rows[y * n_dst + x] = t.iter().map(|&(j, w)| w * src[y * n_src + j]).sum();
        }
    }
    let mut out = vec![0.0; n_dst * n_dst];
    for (y, t) in taps.iter().enumerate() {
        for x in 0..n_dst {
            out[y * n_dst + x] = t.iter().map(|&(j, w)| w * rows[j * n_dst + x]).sum();
        }
    }
    out
}

/// Box-filter resampling; preserves the mean when shrinking by any ratio.
pub fn resize_area(src: &[f64], n_src: usize, n_dst: usize) -> Vec<f64> {
    if n_src == n_dst {
        return src.to_vec();
    }
    separable(src, n_src, n_dst, &area_weights(n_src, n_dst))
}

pub fn resize_bilinear(src: &[f64], n_src: usize, n_dst: usize) -> Vec<f64> {
    if n_src == n_dst {
        return src.to_vec();
    }
    separable(src, n_src, n_dst, &bilinear_weights(n_src, n_dst))
}

pub fn upsample_nearest(src: &[f64], n: usize) -> Vec<f64> {
    let m = 2 * n;
    (0..m * m).map(|i| src[(i / m / 2) * n + (i % m) / 2]).collect()
}

/// Stride-2 transposed convolution with a 3-tap kernel `[side, 1, side]` per
/// axis. Even and odd output phases receive different total weight, which
/// leaves a period-2 pattern; the result is rescaled to keep the mean.
pub fn upsample_transposed(src: &[f64], n: usize, side: f64) -> Vec<f64> {
    let m = 2 * n;
    let gain = (1.0 + 2.0 * side) / 2.0;
    let axis = |o: usize| -> Vec<(usize, f64)> {
        let i = o / 2;
        if o % 2 == 0 {
            vec![(i, 1.0 / gain)]
        } else {
            vec![(i, side / gain), ((i + 1).min(n - 1), side / gain)]
        }
    };
    let taps: Vec<Vec<(usize, f64)>> = (0..m).map(axis).collect();
    separable(src, n, m, &taps)
}

/// 3×3 box blur with replicated edges.
pub fn box_blur3(src: &[f64], n: usize) -> Vec<f64> {
    let taps: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            vec![(lo, 1.0 / 3.0), (i, 1.0 / 3.0), (hi, 1.0 / 3.0)]
        })
        .collect();
    separable(src, n, n, &taps)
}
