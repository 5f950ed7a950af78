use super::kernels::{self, ConvGeom, PoolGeom, PoolKind};
use super::{Scalar, Tensor};
use crate::error::{contract_err, dim_err, FameError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        a_t: bool,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        d: usize,
    },
    Scale(Var, S),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        geom: PoolGeom,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        hw: usize,
    },
    ChannelPool {
        x: Var,
        n: usize,
        c: usize,
        hw: usize,
        argmax: Vec<usize>,
    },
    MulChannelMask {
        x: Var,
        mask: Var,
        n: usize,
        c: usize,
        hw: usize,
    },
    MulRows {
        x: Var,
        w: Var,
        d: usize,
    },
    SumTime {
        x: Var,
        batch: usize,
        time: usize,
        d: usize,
    },
    DivFloor {
        num: Var,
        den: Var,
        floor: S,
    },
    Softmax {
        x: Var,
        d: usize,
    },
    LogSoftmax {
        x: Var,
        d: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        hw: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        hw: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
        d: usize,
    },
    StackTime {
        parts: Vec<Var>,
        batch: usize,
        time: usize,
        d: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
        da: usize,
        db: usize,
    },
    SliceCols {
        x: Var,
        cols: usize,
        start: usize,
        len: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    WeightedCrossEntropy {
        logits: Var,
        k: usize,
        labels: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
    },
    Select {
        x: Var,
        index: usize,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool { .. } => "pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::ChannelPool { .. } => "channel_pool",
            Op::MulChannelMask { .. } => "mul_channel_mask",
            Op::MulRows { .. } => "mul_rows",
            Op::SumTime { .. } => "sum_time",
            Op::DivFloor { .. } => "div_floor",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::StackTime { .. } => "stack_time",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Dropout { .. } => "dropout",
            Op::WeightedCrossEntropy { .. } => "weighted_cross_entropy",
            Op::Select { .. } => "select",
        }
    }
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased (n - 1) variance, the convention used for running estimates.
    pub var_unbiased: Vec<S>,
}

/// Linear record of operations; an op's inputs always precede it.
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when disconnected from the loss.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<S> {
        self.get(v).map_or_else(|| vec![S::zero(); numel], <[S]>::to_vec)
    }

    /// Accumulates the gradient of `v` into `t.grad`.
    pub fn write_into(&self, v: Var, t: &mut Tensor<S>) -> Result<()> {
        let g = self.get_or_zeros(v, t.numel());
        t.accumulate_grad(&g)
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(dim_err!("{op}: shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / d, d)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are well-formed")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(FameError::NonFinite(format!(
                "{} produced a non-finite value at element {pos}",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes a 2-D operand when its flag is set.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a), a_t, self.value(b), b_t, &mut out, false);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n, a_t, b_t }, &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<Vec<S>> {
        same_shape(self.shape(a), self.shape(b), name)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[D]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        if self.shape(bias) != [d] {
            return Err(dim_err!(
                "bias {:?} does not match trailing dim of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias);
        let out: Vec<S> = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias, d }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = S::zero();
        for &v in self.value(x) {
            s += v;
        }
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let mut s = S::zero();
        for &v in self.value(x) {
            s += v;
        }
        let n = S::of(self.value(x).len() as f64);
        self.push(vec![1], vec![s / n], Op::Mean(x), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(dim_err!("conv2d bias shape {:?}", self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let shape = vec![geom.n, geom.c_out, geom.h_out, geom.w_out];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(shape, out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), k, stride)?;
        let (out, argmax) = kernels::pool_forward(&geom, kind, self.value(x));
        self.push(geom.out_shape().to_vec(), out, Op::Pool { x, kind, geom, argmax }, &[x])
    }

    /// `N x C x H x W -> N x C`, mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = *self.shape(x) else {
            return Err(dim_err!("global_avg_pool needs NxCxHxW, got {:?}", self.shape(x)));
        };
        let hw = h * w;
        let inv = S::one() / S::of(hw as f64);
        let out = self
            .value(x)
            .chunks(hw)
            .map(|p| {
                let mut s = S::zero();
                for &v in p {
                    s += v;
                }
                s * inv
            })
            .collect();
        self.push(vec![n, c], out, Op::GlobalAvgPool { x, hw }, &[x])
    }

    /// `N x C x H x W -> N x 2 x H x W`: channel-wise mean (0) and max (1).
    pub fn channel_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = *self.shape(x) else {
            return Err(dim_err!("channel_pool needs NxCxHxW, got {:?}", self.shape(x)));
        };
        let hw = h * w;
        let xv = self.value(x);
        let inv = S::one() / S::of(c as f64);
        let mut out = vec![S::zero(); n * 2 * hw];
        let mut argmax = vec![0usize; n * hw];
        for ni in 0..n {
            let base = ni * c * hw;
            for p in 0..hw {
                let mut s = S::zero();
                let mut best = base + p;
                for ci in 0..c {
                    let idx = base + ci * hw + p;
                    s += xv[idx];
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out[ni * 2 * hw + p] = s * inv;
                out[ni * 2 * hw + hw + p] = xv[best];
                argmax[ni * hw + p] = best;
            }
        }
        self.push(vec![n, 2, h, w], out, Op::ChannelPool { x, n, c, hw, argmax }, &[x])
    }

    /// Multiplies `x: N x C x H x W` by `mask: N x 1 x H x W`, broadcasting over channels.
    pub fn mul_channel_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let [n, c, h, w] = *self.shape(x) else {
            return Err(dim_err!("mul_channel_mask needs NxCxHxW, got {:?}", self.shape(x)));
        };
        if self.shape(mask) != [n, 1, h, w] {
            return Err(dim_err!(
                "mask {:?} does not match features {:?}",
                self.shape(mask),
                self.shape(x)
            ));
        }
        let hw = h * w;
        let (xv, mv) = (self.value(x), self.value(mask));
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mv[(i / (c * hw)) * hw + i % hw])
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::MulChannelMask { x, mask, n, c, hw }, &[x, mask])
    }

    /// Scales each row of `x: R x D` by the matching entry of `w` (R elements).
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.value(w).len() != rows {
            return Err(dim_err!(
                "row weights {:?} do not match {rows} rows",
                self.shape(w)
            ));
        }
        let wv = self.value(w);
        let out = self
            .value(x)
            .chunks(d)
            .zip(wv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::MulRows { x, w, d }, &[x, w])
    }

    /// `(B*T) x D -> B x D`, summing the T rows of each batch element in order.
    pub fn sum_time(&mut self, x: Var, batch: usize, time: usize) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if rows != batch * time {
            return Err(dim_err!("sum_time: {rows} rows is not {batch}x{time}"));
        }
        let xv = self.value(x);
        let mut out = vec![S::zero(); batch * d];
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for t in 0..time {
                let r = &xv[(b * time + t) * d..][..d];
                o.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
            }
        }
        self.push(vec![batch, d], out, Op::SumTime { x, batch, time, d }, &[x])
    }

    /// Elementwise `num / max(den, floor)`.
    pub fn div_floor(&mut self, num: Var, den: Var, floor: S) -> Result<Var> {
        let out = self.zip_with(num, den, "div_floor", |a, b| a / b.max(floor))?;
        self.push(self.shape(num).to_vec(), out, Op::DivFloor { num, den, floor }, &[num, den])
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            out.extend(softmax_row(row));
        }
        self.push(self.shape(x).to_vec(), out, Op::Softmax { x, d }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax { x, d }, &[x])
    }

    /// Standardizes each slice along the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer_norm affine params must have shape [{d}]"));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let inv_d = S::one() / S::of(d as f64);
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, d, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    fn bn_shape(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let [n, c, h, w] = *self.shape(x) else {
            return Err(dim_err!("batch_norm needs NxCxHxW, got {:?}", self.shape(x)));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!("batch_norm affine params must have shape [{c}]"));
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization with statistics over `N x H x W`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let (n, c, hw) = self.bn_shape(x, gamma, beta)?;
        let count = n * hw;
        if count < 2 {
            return Err(contract_err!(
                "degenerate batch: training-mode batch norm needs N*H*W >= 2, got {count}"
            ));
        }
        let xv = self.value(x);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                for &v in &xv[(ni * c + ci) * hw..][..hw] {
                    mean[ci] += v;
                }
            }
        }
        let inv_count = S::one() / S::of(count as f64);
        mean.iter_mut().for_each(|m| *m *= inv_count);
        for ni in 0..n {
            for ci in 0..c {
                for &v in &xv[(ni * c + ci) * hw..][..hw] {
                    var[ci] += (v - mean[ci]) * (v - mean[ci]);
                }
            }
        }
        let var_unbiased: Vec<S> = var
            .iter()
            .map(|&s| s / S::of((count - 1) as f64))
            .collect();
        let inv_std: Vec<S> = var
            .iter()
            .map(|&s| S::one() / (s * inv_count + eps).sqrt())
            .collect();
        let (xhat, out) = bn_apply(xv, self.value(gamma), self.value(beta), c, hw, &mean, &inv_std);
        let v = self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNormTrain { x, gamma, beta, c, hw, xhat, inv_std },
            &[x, gamma, beta],
        )?;
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var> {
        let (_, c, hw) = self.bn_shape(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(dim_err!("running statistics must have {c} entries"));
        }
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| S::one() / (v + eps).sqrt())
            .collect();
        let (xhat, out) = bn_apply(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            c,
            hw,
            running_mean,
            &inv_std,
        );
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNormEval { x, gamma, beta, c, hw, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x), &[x])
    }

    /// Picks the given rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (total, d) = rows_cols(self.shape(x));
        if let Some(&r) = rows.iter().find(|&&r| r >= total) {
            return Err(dim_err!("row {r} out of range for {total} rows"));
        }
        let xv = self.value(x);
        let out = rows.iter().flat_map(|&r| xv[r * d..(r + 1) * d].iter().copied()).collect();
        self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows { x, rows: rows.to_vec(), d },
            &[x],
        )
    }

    /// Interleaves `time` tensors of shape `B x D` into `(B*T) x D`, row `b*T + t`
    /// taken from `parts[t][b]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("stack_time needs at least one part"))?;
        let [batch, d] = *self.shape(first) else {
            return Err(dim_err!("stack_time parts must be 2-D"));
        };
        let time = parts.len();
        let mut out = vec![S::zero(); batch * time * d];
        for (t, &p) in parts.iter().enumerate() {
            if self.shape(p) != [batch, d] {
                return Err(dim_err!("stack_time part {t} has shape {:?}", self.shape(p)));
            }
            for (b, row) in self.value(p).chunks(d).enumerate() {
                out[(b * time + t) * d..][..d].copy_from_slice(row);
            }
        }
        self.push(
            vec![batch * time, d],
            out,
            Op::StackTime { parts: parts.to_vec(), batch, time, d },
            parts,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = rows_cols(self.shape(a));
        let (rb, db) = rows_cols(self.shape(b));
        if ra != rb || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(dim_err!(
                "concat_cols: {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (da + db));
        for r in 0..ra {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        self.push(vec![ra, da + db], out, Op::ConcatCols { a, b, da, db }, &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(x).len() != 2 || start + len > cols || len == 0 {
            return Err(dim_err!(
                "slice_cols [{start}, {}) out of range for {:?}",
                start + len,
                self.shape(x)
            ));
        }
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(vec![rows, len], out, Op::SliceCols { x, cols, start, len }, &[x])
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(dim_err!("dropout mask length mismatch"));
        }
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over rows of `weights[label] * -log softmax(logits)[label]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[S],
    ) -> Result<Var> {
        let shape = self.shape(logits);
        let [n, k] = *shape else {
            return Err(dim_err!("cross entropy needs N x K logits, got {shape:?}"));
        };
        if labels.len() != n {
            return Err(dim_err!("{} labels for {n} rows", labels.len()));
        }
        if weights.len() != k {
            return Err(dim_err!("{} class weights for {k} classes", weights.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(contract_err!("label {bad} out of range for {k} classes"));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = S::zero();
        for (row, &y) in self.value(logits).chunks(k).zip(labels) {
            let lse = log_sum_exp(row);
            total += weights[y] * (lse - row[y]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / S::of(n as f64);
        self.push(
            vec![1],
            vec![loss],
            Op::WeightedCrossEntropy {
                logits,
                k,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Scalar view of one element of `x`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .get(index)
            .ok_or_else(|| dim_err!("select index {index} out of range"))?;
        self.push(vec![1], vec![v], Op::Select { x, index }, &[x])
    }

    /// Hash of every branch decision taken by non-smooth ops (ReLU signs,
    /// max-pool and channel-max winners, active floors). Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                &Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.value(x) {
                        (v > S::zero()).hash(&mut h);
                    }
                }
                Op::Pool { argmax, .. } | Op::ChannelPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                &Op::DivFloor { den, floor, .. } => {
                    i.hash(&mut h);
                    for &v in self.value(den) {
                        (v > floor).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`; the tape is left intact so the call
    /// can be repeated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Tape::backward`], but also keeps the gradients of the listed
    /// intermediate nodes; by default only leaf gradients are kept.
    pub fn backward_retaining(&self, loss: Var, retain: &[Var]) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            if matches!(self.nodes[i].op, Op::Leaf) || retain.iter().any(|v| v.0 == i) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| -> &[S] { &nodes[v.0].value };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, a_t, b_t } => {
                acc(a, &mut |da| {
                    if a_t {
                        S::gemm(k, n, m, val(b), b_t, g, true, da, true);
                    } else {
                        S::gemm(m, n, k, g, false, val(b), !b_t, da, true);
                    }
                });
                acc(b, &mut |db| {
                    if b_t {
                        S::gemm(n, m, k, g, true, val(a), a_t, db, true);
                    } else {
                        S::gemm(k, m, n, val(a), !a_t, g, false, db, true);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |d| {
                    for ((x, &y), &bv) in d.iter_mut().zip(g).zip(val(b)) {
                        *x += y * bv;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, &y), &av) in d.iter_mut().zip(g).zip(val(a)) {
                        *x += y * av;
                    }
                });
            }
            &Op::AddBias { x, bias, d } => {
                acc(x, &mut |dx| add_into(dx, g));
                acc(bias, &mut |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c);
            }),
            &Op::Sum(x) => acc(x, &mut |dx| dx.iter_mut().for_each(|a| *a += g[0])),
            &Op::Mean(x) => {
                let share = g[0] / S::of(val(x).len() as f64);
                acc(x, &mut |dx| dx.iter_mut().for_each(|a| *a += share));
            }
            &Op::Relu(x) => acc(x, &mut |dx| {
                for ((a, &b), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                    if xv > S::zero() {
                        *a += b;
                    }
                }
            }),
            &Op::Tanh(x) => acc(x, &mut |dx| {
                for ((a, &b), &y) in dx.iter_mut().zip(g).zip(out) {
                    *a += b * (S::one() - y * y);
                }
            }),
            &Op::Sigmoid(x) => acc(x, &mut |dx| {
                for ((a, &b), &y) in dx.iter_mut().zip(g).zip(out) {
                    *a += b * y * (S::one() - y);
                }
            }),
            &Op::Conv2d { x, w, b, geom } => {
                // Each accumulation target is visited separately so the closure
                // borrows stay disjoint.
                acc(x, &mut |dx| {
                    kernels::conv2d_backward(&geom, val(x), val(w), g, Some(dx), None, None)
                });
                acc(w, &mut |dw| {
                    kernels::conv2d_backward(&geom, val(x), val(w), g, None, Some(dw), None)
                });
                if let Some(b) = b {
                    acc(b, &mut |db| {
                        kernels::conv2d_backward(&geom, val(x), val(w), g, None, None, Some(db))
                    });
                }
            }
            Op::Pool { x, kind, geom, argmax } => acc(*x, &mut |dx| {
                kernels::pool_backward(geom, *kind, argmax, g, dx)
            }),
            &Op::GlobalAvgPool { x, hw } => {
                let inv = S::one() / S::of(hw as f64);
                acc(x, &mut |dx| {
                    for (p, chunk) in dx.chunks_mut(hw).enumerate() {
                        let share = g[p] * inv;
                        chunk.iter_mut().for_each(|a| *a += share);
                    }
                });
            }
            Op::ChannelPool { x, n, c, hw, argmax } => {
                let (n, c, hw) = (*n, *c, *hw);
                let inv = S::one() / S::of(c as f64);
                acc(*x, &mut |dx| {
                    for ni in 0..n {
                        for p in 0..hw {
                            let ga = g[ni * 2 * hw + p] * inv;
                            for ci in 0..c {
                                dx[(ni * c + ci) * hw + p] += ga;
                            }
                            dx[argmax[ni * hw + p]] += g[ni * 2 * hw + hw + p];
                        }
                    }
                });
            }
            &Op::MulChannelMask { x, mask, n, c, hw } => {
                let mv = val(mask);
                acc(x, &mut |dx| {
                    for (i, a) in dx.iter_mut().enumerate() {
                        *a += g[i] * mv[(i / (c * hw)) * hw + i % hw];
                    }
                });
                let xv = val(x);
                acc(mask, &mut |dm| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dm[ni * hw + p] += g[base + p] * xv[base + p];
                            }
                        }
                    }
                });
            }
            &Op::MulRows { x, w, d } => {
                let wv = val(w);
                acc(x, &mut |dx| {
                    for (r, (drow, grow)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        drow.iter_mut().zip(grow).for_each(|(a, &b)| *a += b * wv[r]);
                    }
                });
                let xv = val(x);
                acc(w, &mut |dw| {
                    for (r, (xrow, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                        let mut s = S::zero();
                        for (&a, &b) in xrow.iter().zip(grow) {
                            s += a * b;
                        }
                        dw[r] += s;
                    }
                });
            }
            &Op::SumTime { x, batch, time, d } => acc(x, &mut |dx| {
                for b in 0..batch {
                    let gr = &g[b * d..(b + 1) * d];
                    for t in 0..time {
                        add_into(&mut dx[(b * time + t) * d..][..d], gr);
                    }
                }
            }),
            &Op::DivFloor { num, den, floor } => {
                let dv = val(den);
                acc(num, &mut |dn| {
                    for ((a, &b), &q) in dn.iter_mut().zip(g).zip(dv) {
                        *a += b / q.max(floor);
                    }
                });
                acc(den, &mut |dd| {
                    for (((a, &b), &q), &y) in dd.iter_mut().zip(g).zip(dv).zip(out) {
                        if q > floor {
                            *a -= b * y / q;
                        }
                    }
                });
            }
            &Op::Softmax { x, d } => acc(x, &mut |dx| {
                for ((drow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let mut dot = S::zero();
                    for (&a, &b) in grow.iter().zip(yrow) {
                        dot += a * b;
                    }
                    for ((a, &gb), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *a += y * (gb - dot);
                    }
                }
            }),
            &Op::LogSoftmax { x, d } => acc(x, &mut |dx| {
                for ((drow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let mut s = S::zero();
                    for &a in grow {
                        s += a;
                    }
                    for ((a, &gb), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *a += gb - y.exp() * s;
                    }
                }
            }),
            Op::LayerNorm { x, gamma, beta, d, xhat, inv_std } => {
                let d = *d;
                let gv = val(*gamma);
                acc(*x, &mut |dx| {
                    let inv_d = S::one() / S::of(d as f64);
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let (mut s1, mut s2) = (S::zero(), S::zero());
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[r * d + j] += inv_std[r] * (dxh - s1 * inv_d - xr[j] * s2 * inv_d);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::BatchNormTrain { x, gamma, beta, c, hw, xhat, inv_std } => {
                let (c, hw) = (*c, *hw);
                let n = g.len() / (c * hw);
                let gv = val(*gamma);
                let (sum_g, sum_gx) = bn_channel_sums(g, xhat, c, hw);
                acc(*x, &mut |dx| {
                    let inv_count = S::one() / S::of((n * hw) as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let k = gv[ci] * inv_std[ci];
                            let m1 = sum_g[ci] * inv_count;
                            let m2 = sum_gx[ci] * inv_count;
                            for p in base..base + hw {
                                dx[p] += k * (g[p] - m1 - xhat[p] * m2);
                            }
                        }
                    }
                });
                acc(*gamma, &mut |dg| add_into(dg, &sum_gx));
                acc(*beta, &mut |db| add_into(db, &sum_g));
            }
            Op::BatchNormEval { x, gamma, beta, c, hw, xhat, inv_std } => {
                let (c, hw) = (*c, *hw);
                let gv = val(*gamma);
                acc(*x, &mut |dx| {
                    for (i, a) in dx.iter_mut().enumerate() {
                        let ci = (i / hw) % c;
                        *a += g[i] * gv[ci] * inv_std[ci];
                    }
                });
                let (sum_g, sum_gx) = bn_channel_sums(g, xhat, c, hw);
                acc(*gamma, &mut |dg| add_into(dg, &sum_gx));
                acc(*beta, &mut |db| add_into(db, &sum_g));
            }
            &Op::Reshape(x) => acc(x, &mut |dx| add_into(dx, g)),
            Op::GatherRows { x, rows, d } => acc(*x, &mut |dx| {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }),
            Op::StackTime { parts, batch, time, d } => {
                let (batch, time, d) = (*batch, *time, *d);
                for (t, &p) in parts.iter().enumerate() {
                    acc(p, &mut |dp| {
                        for b in 0..batch {
                            add_into(&mut dp[b * d..(b + 1) * d], &g[(b * time + t) * d..][..d]);
                        }
                    });
                }
            }
            &Op::ConcatCols { a, b, da, db } => {
                let w = da + db;
                acc(a, &mut |d| {
                    for (drow, grow) in d.chunks_mut(da).zip(g.chunks(w)) {
                        add_into(drow, &grow[..da]);
                    }
                });
                acc(b, &mut |d| {
                    for (drow, grow) in d.chunks_mut(db).zip(g.chunks(w)) {
                        add_into(drow, &grow[da..]);
                    }
                });
            }
            &Op::SliceCols { x, cols, start, len } => acc(x, &mut |dx| {
                for (drow, grow) in dx.chunks_mut(cols).zip(g.chunks(len)) {
                    add_into(&mut drow[start..start + len], grow);
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |dx| {
                for ((a, &b), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            }),
            Op::WeightedCrossEntropy { logits, k, labels, weights, probs } => {
                let k = *k;
                let n = labels.len();
                let scale = g[0] / S::of(n as f64);
                acc(*logits, &mut |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        let wy = weights[y] * scale;
                        for j in 0..k {
                            let onehot = if j == y { S::one() } else { S::zero() };
                            dl[r * k + j] += wy * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            &Op::Select { x, index } => acc(x, &mut |dx| dx[index] += g[0]),
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn bn_apply<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    c: usize,
    hw: usize,
    mean: &[S],
    inv_std: &[S],
) -> (Vec<S>, Vec<S>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let ci = (i / hw) % c;
        let xh = (v - mean[ci]) * inv_std[ci];
        xhat.push(xh);
        out.push(xh * gamma[ci] + beta[ci]);
    }
    (xhat, out)
}

fn bn_channel_sums<S: Scalar>(g: &[S], xhat: &[S], c: usize, hw: usize) -> (Vec<S>, Vec<S>) {
    let mut sum_g = vec![S::zero(); c];
    let mut sum_gx = vec![S::zero(); c];
    for (plane, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ci = plane % c;
        for (&a, &b) in gp.iter().zip(xp) {
            sum_g[ci] += a;
            sum_gx[ci] += a * b;
        }
    }
    (sum_g, sum_gx)
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for &v in row {
        s += (v - m).exp();
    }
    m + s.ln()
}

pub(crate) fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
    let mut s = S::zero();
    for &v in &e {
        s += v;
    }
    e.into_iter().map(|v| v / s).collect()
}
