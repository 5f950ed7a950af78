//! Raw convolution and pooling kernels over flat NCHW buffers.

use super::Scalar;
use crate::error::{dim_err, Result};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, c_in, h, w] = *input else {
            return Err(dim_err!("conv2d input must be NxCxHxW, got {input:?}"));
        };
        let [c_out, wc_in, k, k2] = *weight else {
            return Err(dim_err!("conv2d weight must be CoutxCinxkxk, got {weight:?}"));
        };
        if wc_in != c_in || k != k2 {
            return Err(dim_err!(
                "conv2d weight {weight:?} incompatible with input {input:?}"
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(dim_err!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], col: &mut [S]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if ii < 0 || ii >= g.h as isize {
                        drow.fill(S::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            S::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, col: &[S], dx: &mut [S]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dx[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            drow[jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; output is `N x Cout x H' x W'`.
pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: Option<&[S]>) -> Vec<S> {
    let plane = g.out_plane();
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * plane;
    let rows = g.col_rows();
    let mut out = vec![S::zero(); g.n * out_size];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); rows * plane]
    };
    for n in 0..g.n {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let on = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = b {
            for (co, chunk) in on.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let colref: &[S] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        S::gemm(g.c_out, rows, plane, w, false, colref, false, on, b.is_some());
    }
    out
}

/// Accumulates gradients for input, weight and bias from `dy`.
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    dy: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let plane = g.out_plane();
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * plane;
    let rows = g.col_rows();

    if let Some(db) = db {
        for n in 0..g.n {
            for (co, chunk) in dy[n * out_size..(n + 1) * out_size]
                .chunks(plane)
                .enumerate()
            {
                let mut s = S::zero();
                for &v in chunk {
                    s += v;
                }
                db[co] += s;
            }
        }
    }

    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![S::zero(); rows * plane]
    };
    if let Some(dw) = dw {
        for n in 0..g.n {
            let xn = &x[n * in_size..(n + 1) * in_size];
            let colref: &[S] = if pointwise {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            let dyn_ = &dy[n * out_size..(n + 1) * out_size];
            S::gemm(g.c_out, plane, rows, dyn_, false, colref, true, dw, true);
        }
    }
    if let Some(dx) = dx {
        for n in 0..g.n {
            let dyn_ = &dy[n * out_size..(n + 1) * out_size];
            let dxn = &mut dx[n * in_size..(n + 1) * in_size];
            if pointwise {
                S::gemm(rows, g.c_out, plane, w, true, dyn_, false, dxn, true);
            } else {
                S::gemm(rows, g.c_out, plane, w, true, dyn_, false, &mut col, false);
                col2im(g, &col, dxn);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Geometry of a square, unpadded pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], k: usize, stride: usize) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(dim_err!("pool input must be NxCxHxW, got {input:?}"));
        };
        if k == 0 || stride == 0 {
            return Err(dim_err!("pool window and stride must be positive"));
        }
        if k > h || k > w {
            return Err(dim_err!("pool window {k} larger than input {h}x{w}"));
        }
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            h_out: (h - k) / stride + 1,
            w_out: (w - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h_out, self.w_out]
    }
}

/// Returns pooled values and, for max pooling, the flat argmax of each window.
/// Ties resolve to the first maximum in row-major window order.
pub fn pool_forward<S: Scalar>(g: &PoolGeom, kind: PoolKind, x: &[S]) -> (Vec<S>, Vec<usize>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.h_out * g.w_out);
    let mut argmax = Vec::new();
    let inv = S::one() / S::of((g.k * g.k) as f64);
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oi in 0..g.h_out {
            for oj in 0..g.w_out {
                let (i0, j0) = (oi * g.stride, oj * g.stride);
                match kind {
                    PoolKind::Max => {
                        let mut best = base + i0 * g.w + j0;
                        for di in 0..g.k {
                            for dj in 0..g.k {
                                let idx = base + (i0 + di) * g.w + j0 + dj;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                    PoolKind::Avg => {
                        let mut s = S::zero();
                        for di in 0..g.k {
                            for dj in 0..g.k {
                                s += x[base + (i0 + di) * g.w + j0 + dj];
                            }
                        }
                        out.push(s * inv);
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub fn pool_backward<S: Scalar>(
    g: &PoolGeom,
    kind: PoolKind,
    argmax: &[usize],
    dy: &[S],
    dx: &mut [S],
) {
    match kind {
        PoolKind::Max => {
            for (&idx, &d) in argmax.iter().zip(dy) {
                dx[idx] += d;
            }
        }
        PoolKind::Avg => {
            let inv = S::one() / S::of((g.k * g.k) as f64);
            let mut o = 0;
            for p in 0..g.n * g.c {
                let base = p * g.h * g.w;
                for oi in 0..g.h_out {
                    for oj in 0..g.w_out {
                        let share = dy[o] * inv;
                        o += 1;
                        for di in 0..g.k {
                            for dj in 0..g.k {
                                dx[base + (oi * g.stride + di) * g.w + oj * g.stride + dj] += share;
                            }
                        }
                    }
                }
            }
        }
    }
}
