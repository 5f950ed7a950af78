//! Parameterized layers over the autodiff tape.
//!
//! Parameters live in a [`ParamStore`] keyed by name; a forward pass runs
//! inside a [`Session`] which binds each parameter onto its tape on first use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, FameError, Result};
use crate::tensor::{BatchStats, Gradients, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable and subject to weight decay.
    Weight,
    /// Learnable, excluded from weight decay (biases, normalization affine).
    NoDecay,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<S>,
}

/// Ordered, named collection of parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(contract_err!("duplicate parameter name {name}"));
        }
        self.entries.push(ParamEntry { name, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of learnable scalars; buffers are excluded.
    pub fn count_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.learnable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Learnable scalars whose name starts with `prefix`.
    pub fn count_params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.learnable() && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(FameError::Format(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(FameError::Format(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    /// Folds batch statistics into running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<S>]) {
        let m = S::of(BN_MOMENTUM);
        let keep = S::one() - m;
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var_unbiased)] {
                for (r, &b) in self.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

/// Uniform `(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn init_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let b = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::of(rng.random_range(-b..b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<S> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<S>,
}

/// One forward pass: a tape plus the parameter bindings made on it.
pub struct Session<'s, S: Scalar> {
    pub tape: Tape<S>,
    store: &'s ParamStore<S>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<BnUpdate<S>>,
    dropout_rng: ChaCha8Rng,
}

impl<'s, S: Scalar> Session<'s, S> {
    pub fn new(store: &'s ParamStore<S>, mode: Mode, track_grads: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            bn_updates: Vec::new(),
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<S> {
        self.store
    }

    /// Tape variable for a learnable parameter.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.track_grads {
            self.tape.param(t)
        } else {
            self.tape.leaf(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &'s [S] {
        self.store.get(id).data()
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(contract_err!("dropout rate must be below 1, got {rate}"));
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.dropout_rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.tape.dropout_mask(x, mask)
    }

    pub fn bn_updates(&self) -> &[BnUpdate<S>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<S>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient for every store entry that was bound on this tape.
    pub fn param_grads(&self, grads: &Gradients<S>) -> Vec<Option<Vec<S>>> {
        self.bound
            .iter()
            .zip(self.store.entries())
            .map(|(b, e)| b.map(|v| grads.get_or_zeros(v, e.value.numel())))
            .collect()
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            init_uniform(rng, &[c_out, c_in, k, k], fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), ParamKind::NoDecay, Tensor::zeros(&[c_out]))?;
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, x: Var) -> Result<Var> {
        let w = sess.var(self.weight);
        let b = sess.var(self.bias);
        sess.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Batch normalization over `N x H x W` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamKind::NoDecay, Tensor::full(&[c], S::one()))?,
            beta: store.add(format!("{name}.beta"), ParamKind::NoDecay, Tensor::zeros(&[c]))?,
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?,
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[c], S::one()),
            )?,
        })
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, x: Var) -> Result<Var> {
        let gamma = sess.var(self.gamma);
        let beta = sess.var(self.beta);
        let eps = S::of(BN_EPS);
        match sess.mode {
            Mode::Train => {
                let (y, stats) = sess.tape.batch_norm_train(x, gamma, beta, eps)?;
                sess.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = (sess.buffer(self.running_mean), sess.buffer(self.running_var));
                sess.tape.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

/// 3x3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), c_in, c_out, 3, 1, 1)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, x: Var) -> Result<Var> {
        let y = self.conv.forward(sess, x)?;
        let y = self.bn.forward(sess, y)?;
        sess.tape.relu(y)
    }
}

/// `y = x Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(
                format!("{name}.weight"),
                ParamKind::Weight,
                init_uniform(rng, &[d_out, d_in], d_in),
            )?,
            bias: store.add(format!("{name}.bias"), ParamKind::NoDecay, Tensor::zeros(&[d_out]))?,
            d_in,
            d_out,
        })
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, x: Var) -> Result<Var> {
        let shape = sess.tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(dim_err!("linear expects trailing dim {}, got {shape:?}", self.d_in));
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let flat = if shape.len() == 2 { x } else { sess.tape.reshape(x, &[rows, self.d_in])? };
        let w = sess.var(self.weight);
        let b = sess.var(self.bias);
        let y = sess.tape.matmul_t(flat, false, w, true)?;
        let y = sess.tape.add_bias(y, b)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.d_out;
        sess.tape.reshape(y, &out_shape)
    }
}

/// One LSTM direction; gate rows are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

pub const FORGET_BIAS: f64 = 1.0;

impl LstmDirection {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        let g = 4 * hidden;
        let w_ih = store.add(format!("{name}.w_ih"), ParamKind::Weight, init_uniform(rng, &[g, d_in], d_in))?;
        let w_hh = store.add(format!("{name}.w_hh"), ParamKind::Weight, init_uniform(rng, &[g, hidden], hidden))?;
        let bias = Tensor::from_fn(&[g], |i| {
            if (hidden..2 * hidden).contains(&i) {
                S::of(FORGET_BIAS)
            } else {
                S::zero()
            }
        });
        let bias = store.add(format!("{name}.bias"), ParamKind::NoDecay, bias)?;
        Ok(LstmDirection { w_ih, w_hh, bias, d_in, hidden })
    }

    /// `x W_ihᵀ + b` for every row of `x` at once.
    fn project_inputs<S: Scalar>(&self, sess: &mut Session<S>, x: Var) -> Result<Var> {
        let w = sess.var(self.w_ih);
        let b = sess.var(self.bias);
        let p = sess.tape.matmul_t(x, false, w, true)?;
        sess.tape.add_bias(p, b)
    }

    /// Advances the cell given already projected inputs `[B, 4H]`; `state` is
    /// `None` for the zero initial state.
    fn step_projected<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        xp: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let h = self.hidden;
        let pre = match state {
            Some((h_prev, _)) => {
                let w = sess.var(self.w_hh);
                let hh = sess.tape.matmul_t(h_prev, false, w, true)?;
                sess.tape.add(xp, hh)?
            }
            None => xp,
        };
        let t = &mut sess.tape;
        let i = t.slice_cols(pre, 0, h)?;
        let i = t.sigmoid(i)?;
        let g = t.slice_cols(pre, 2 * h, h)?;
        let g = t.tanh(g)?;
        let o = t.slice_cols(pre, 3 * h, h)?;
        let o = t.sigmoid(o)?;
        let ig = t.mul(i, g)?;
        let c_new = match state {
            Some((_, c_prev)) => {
                let f = t.slice_cols(pre, h, h)?;
                let f = t.sigmoid(f)?;
                let fc = t.mul(f, c_prev)?;
                t.add(fc, ig)?
            }
            None => ig,
        };
        let tc = t.tanh(c_new)?;
        let h_new = t.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// One step from explicit states: `x [B, D_in]`, `h`, `c` `[B, H]`.
    pub fn step<S: Scalar>(&self, sess: &mut Session<S>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xp = self.project_inputs(sess, x)?;
        self.step_projected(sess, xp, Some((h, c)))
    }

    /// Runs over `x [B*T, D_in]` (row `b*T + t`) in the given time order and
    /// returns the per-step hidden states indexed by time.
    fn run<S: Scalar>(
        &self,
        sess: &mut Session<S>,
        x: Var,
        batch: usize,
        time: usize,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let xp = self.project_inputs(sess, x)?;
        let mut outs: Vec<Option<Var>> = vec![None; time];
        let mut state = None;
        let order: Vec<usize> = if reverse { (0..time).rev().collect() } else { (0..time).collect() };
        for t in order {
            let rows: Vec<usize> = (0..batch).map(|b| b * time + t).collect();
            let xt = if time == 1 { xp } else { sess.tape.gather_rows(xp, &rows)? };
            let (h, c) = self.step_projected(sess, xt, state)?;
            state = Some((h, c));
            outs[t] = Some(h);
        }
        Ok(outs.into_iter().map(|v| v.expect("every step visited")).collect())
    }
}

/// Bidirectional LSTM; output rows are `[h_fwd ; h_bwd]` per timestep.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

impl BiLstm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BiLstm {
            fwd: LstmDirection::new(store, rng, &format!("{name}.fwd"), d_in, hidden)?,
            bwd: LstmDirection::new(store, rng, &format!("{name}.bwd"), d_in, hidden)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    /// `x [B*T, D_in]` → `[B*T, 2H]`, rows ordered `b*T + t`.
    pub fn forward<S: Scalar>(&self, sess: &mut Session<S>, x: Var, batch: usize, time: usize) -> Result<Var> {
        let shape = sess.tape.shape(x);
        if time == 0 || shape != [batch * time, self.fwd.d_in] {
            return Err(dim_err!(
                "bilstm expects [{}, {}], got {shape:?}",
                batch * time,
                self.fwd.d_in
            ));
        }
        let f = self.fwd.run(sess, x, batch, time, false)?;
        let b = self.bwd.run(sess, x, batch, time, true)?;
        let f = sess.tape.stack_time(&f)?;
        let b = sess.tape.stack_time(&b)?;
        sess.tape.concat_cols(f, b)
    }
}
