//! Spatial mask over frame feature maps and pluggable temporal attention.
//!
//! Temporal strategies implement [`TemporalAttention`] and are looked up by
//! name in a [`TemporalRegistry`]; the model config selects one.

use std::fmt::Debug;

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, FameError, Result};
use crate::layers::{init_uniform, Conv2d, Linear, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Floor on the per-dimension gate mass in the gated weighted mean.
pub const GATE_FLOOR: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-pixel MLP over channel-pooled (avg, max) maps, followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub hidden: usize,
}

impl SpatialAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        hidden: usize,
    ) -> Result<Self> {
        Ok(SpatialAttention {
            fc1: Conv2d::new(store, rng, &format!("{name}.fc1"), 2, hidden, 1, 1, 0)?,
            fc2: Conv2d::new(store, rng, &format!("{name}.fc2"), hidden, 1, 1, 1, 0)?,
            hidden,
        })
    }

    pub fn param_count(hidden: usize) -> usize {
        2 * hidden + hidden + hidden + 1
    }

    /// `F [N,C,H,W]` → mask `[N,1,H,W]` with values in (0,1).
    pub fn mask<S: Scalar>(&self, sess: &mut Session<S>, f: Var) -> Result<Var> {
        let pooled = sess.tape.channel_pool(f)?;
        let h = self.fc1.forward(sess, pooled)?;
        let h = sess.tape.relu(h)?;
        let m = self.fc2.forward(sess, h)?;
        sess.tape.sigmoid(m)
    }

    /// Returns `(F ⊙ M_s, M_s)`.
    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, f: Var) -> Result<(Var, Var)> {
        let m = self.mask(sess, f)?;
        Ok((apply_spatial(&mut sess.tape, f, m)?, m))
    }
}

/// Broadcast product of `F [N,C,H,W]` with a mask `[N,1,H,W]`.
pub fn apply_spatial<S: Scalar>(tape: &mut Tape<S>, f: Var, mask: Var) -> Result<Var> {
    tape.mul_channel_mask(f, mask)
}

/// `z_d = Σ_t A_td R_td / max(Σ_t A_td, floor)` per clip; inputs are `[B*T, D]`.
pub fn aggregate_gated<S: Scalar>(tape: &mut Tape<S>, r: Var, a: Var, batch: usize, time: usize) -> Result<Var> {
    let weighted = tape.mul(a, r)?;
    let num = tape.sum_time(weighted, batch, time)?;
    let den = tape.sum_time(a, batch, time)?;
    tape.div_floor(num, den, S::of(GATE_FLOOR))
}

/// `z = Σ_t α_t h_t` per clip; `h [B*T, H]`, `alpha [B*T]`.
pub fn aggregate_softmax<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    alpha: Var,
    batch: usize,
    time: usize,
) -> Result<Var> {
    let weighted = tape.mul_rows(h, alpha)?;
    tape.sum_time(weighted, batch, time)
}

/// Widths seen by a temporal strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalDims {
    /// Width of the condensed frame features R.
    pub feature: usize,
    /// Width of the BiLSTM outputs H.
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalOutput {
    /// Clip representation `[B, output_dim]`.
    pub z: Var,
    /// Gate `[B*T, D]` or per-frame weights `[B, T]`, depending on strategy.
    pub weights: Var,
}

pub trait TemporalAttention<S: Scalar>: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn output_dim(&self) -> usize;

    /// Learnable scalars owned by the strategy.
    fn param_count(&self) -> usize;

    /// Aggregates frame features `r [B*T, D]` using BiLSTM states `h [B*T, H_d]`.
    fn forward(&self, sess: &mut Session<S>, r: Var, h: Var, batch: usize, time: usize) -> Result<TemporalOutput>;
}

pub type TemporalCtor<S> =
    fn(&mut ParamStore<S>, &mut ChaCha8Rng, TemporalDims) -> Result<Box<dyn TemporalAttention<S>>>;

/// Named temporal strategies.
pub struct TemporalRegistry<S: Scalar> {
    entries: Vec<(&'static str, TemporalCtor<S>)>,
}

impl<S: Scalar> Default for TemporalRegistry<S> {
    fn default() -> Self {
        let mut r = TemporalRegistry { entries: Vec::new() };
        r.entries.push((GateAttention::NAME, GateAttention::boxed));
        r.entries.push((SoftmaxAttention::NAME, SoftmaxAttention::boxed));
        r.entries.push((MeanPooling::NAME, MeanPooling::boxed));
        r
    }
}

impl<S: Scalar> TemporalRegistry<S> {
    pub fn register(&mut self, name: &'static str, ctor: TemporalCtor<S>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(FameError::Config(format!("temporal strategy {name} already registered")));
        }
        self.entries.push((name, ctor));
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn build(
        &self,
        name: &str,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        dims: TemporalDims,
    ) -> Result<Box<dyn TemporalAttention<S>>> {
        let ctor = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, c)| *c)
            .ok_or_else(|| {
                FameError::Config(format!(
                    "unknown temporal attention {name:?}; expected one of {:?}",
                    self.names()
                ))
            })?;
        ctor(store, rng, dims)
    }
}

/// Names accepted by the default registry.
pub fn temporal_names() -> Vec<&'static str> {
    TemporalRegistry::<f64>::default().names()
}

/// Per-dimension gate `A = σ(LayerNorm(H W_aᵀ + b_a))` weighting the frame
/// features R.
#[derive(Clone, Debug)]
pub struct GateAttention {
    pub proj: Linear,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl GateAttention {
    pub const NAME: &'static str = "gate";

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, dims: TemporalDims) -> Result<Self> {
        let proj = Linear::new(store, rng, "temporal.gate.proj", dims.hidden, dims.feature)?;
        let ln_gamma = store.add("temporal.gate.ln.gamma", ParamKind::NoDecay, Tensor::full(&[dims.feature], S::one()))?;
        let ln_beta = store.add("temporal.gate.ln.beta", ParamKind::NoDecay, Tensor::zeros(&[dims.feature]))?;
        Ok(GateAttention { proj, ln_gamma, ln_beta })
    }

    fn boxed<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        dims: TemporalDims,
    ) -> Result<Box<dyn TemporalAttention<S>>> {
        Ok(Box::new(Self::new(store, rng, dims)?))
    }

    /// Gate values `[B*T, D]`.
    pub fn gate<S: Scalar>(&self, sess: &mut Session<S>, h: Var) -> Result<Var> {
        let a = self.proj.forward(sess, h)?;
        let g = sess.var(self.ln_gamma);
        let b = sess.var(self.ln_beta);
        let a = sess.tape.layer_norm(a, g, b, S::of(LAYER_NORM_EPS))?;
        sess.tape.sigmoid(a)
    }
}

impl<S: Scalar> TemporalAttention<S> for GateAttention {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn output_dim(&self) -> usize {
        self.proj.d_out
    }

    fn param_count(&self) -> usize {
        let (h, d) = (self.proj.d_in, self.proj.d_out);
        d * h + d + 2 * d
    }

    fn forward(&self, sess: &mut Session<S>, r: Var, h: Var, batch: usize, time: usize) -> Result<TemporalOutput> {
        if sess.tape.shape(r) != [batch * time, self.proj.d_out] {
            return Err(dim_err!("gate expects R of shape [{}, {}]", batch * time, self.proj.d_out));
        }
        let a = self.gate(sess, h)?;
        let z = aggregate_gated(&mut sess.tape, r, a, batch, time)?;
        Ok(TemporalOutput { z, weights: a })
    }
}

/// Scalar frame weights `α = softmax_t(vᵀ tanh(W_h h_t + b))` over BiLSTM states.
#[derive(Clone, Debug)]
pub struct SoftmaxAttention {
    pub proj: Linear,
    pub v: ParamId,
}

impl SoftmaxAttention {
    pub const NAME: &'static str = "softmax";

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, dims: TemporalDims) -> Result<Self> {
        let proj = Linear::new(store, rng, "temporal.softmax.proj", dims.hidden, dims.hidden)?;
        let v = store.add(
            "temporal.softmax.v",
            ParamKind::Weight,
            init_uniform(rng, &[dims.hidden], dims.hidden),
        )?;
        Ok(SoftmaxAttention { proj, v })
    }

    fn boxed<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        dims: TemporalDims,
    ) -> Result<Box<dyn TemporalAttention<S>>> {
        Ok(Box::new(Self::new(store, rng, dims)?))
    }

    /// Attention scores `[B, T]`.
    pub fn scores<S: Scalar>(&self, sess: &mut Session<S>, h: Var, batch: usize, time: usize) -> Result<Var> {
        let u = self.proj.forward(sess, h)?;
        let u = sess.tape.tanh(u)?;
        let v = sess.var(self.v);
        let v = sess.tape.reshape(v, &[self.proj.d_out, 1])?;
        let e = sess.tape.matmul(u, v)?;
        sess.tape.reshape(e, &[batch, time])
    }

    /// Normalized frame weights `[B, T]`.
    pub fn weights<S: Scalar>(&self, sess: &mut Session<S>, h: Var, batch: usize, time: usize) -> Result<Var> {
        let e = self.scores(sess, h, batch, time)?;
        sess.tape.softmax(e)
    }
}

impl<S: Scalar> TemporalAttention<S> for SoftmaxAttention {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn output_dim(&self) -> usize {
        self.proj.d_out
    }

    fn param_count(&self) -> usize {
        let h = self.proj.d_in;
        h * h + h + h
    }

    fn forward(&self, sess: &mut Session<S>, _r: Var, h: Var, batch: usize, time: usize) -> Result<TemporalOutput> {
        let alpha = self.weights(sess, h, batch, time)?;
        let flat = sess.tape.reshape(alpha, &[batch * time])?;
        let z = aggregate_softmax(&mut sess.tape, h, flat, batch, time)?;
        Ok(TemporalOutput { z, weights: alpha })
    }
}

/// Unweighted mean of BiLSTM states; the no-attention baseline.
#[derive(Clone, Debug)]
pub struct MeanPooling {
    pub hidden: usize,
}

impl MeanPooling {
    pub const NAME: &'static str = "mean";

    fn boxed<S: Scalar>(
        _store: &mut ParamStore<S>,
        _rng: &mut ChaCha8Rng,
        dims: TemporalDims,
    ) -> Result<Box<dyn TemporalAttention<S>>> {
        Ok(Box::new(MeanPooling { hidden: dims.hidden }))
    }
}

impl<S: Scalar> TemporalAttention<S> for MeanPooling {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn output_dim(&self) -> usize {
        self.hidden
    }

    fn param_count(&self) -> usize {
        0
    }

    fn forward(&self, sess: &mut Session<S>, _r: Var, h: Var, batch: usize, time: usize) -> Result<TemporalOutput> {
        let s = sess.tape.sum_time(h, batch, time)?;
        let z = sess.tape.scale(s, S::of(1.0 / time as f64))?;
        let weights = sess.tape.constant(&[batch, time], vec![S::of(1.0 / time as f64); batch * time])?;
        Ok(TemporalOutput { z, weights })
    }
}
