//! The FAME network: truncated VGG backbone, spatial mask, BiLSTM, temporal
//! attention, clip and frame heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{SpatialAttention, TemporalAttention, TemporalDims, TemporalRegistry};
use crate::error::{contract_err, dim_err, FameError, Result};
use crate::layers::{BatchNorm, BiLstm, ConvBlock, Linear, Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{finite_diff_check_piecewise, GradCheckOptions, GradCheckReport, PoolKind, Precision, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FameConfig {
    pub input_size: usize,
    pub channels: usize,
    pub frames: usize,
    /// Conv widths per stage; each stage ends with a 2x2 max pool.
    pub stages: Vec<Vec<usize>>,
    /// LSTM cell size per direction.
    pub lstm_hidden: usize,
    pub temporal: String,
    pub spatial_attention: bool,
    pub spatial_hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub beta: f64,
    pub precision: Precision,
}

impl Default for FameConfig {
    fn default() -> Self {
        FameConfig {
            input_size: 112,
            channels: 3,
            frames: 10,
            stages: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256, 256]],
            lstm_hidden: 96,
            temporal: "gate".into(),
            spatial_attention: true,
            spatial_hidden: 8,
            classes: 5,
            dropout: 0.0,
            alpha: 0.5,
            beta: 0.5,
            precision: Precision::F64,
        }
    }
}

impl FameConfig {
    /// Small configuration used for gradient checks.
    pub fn toy() -> Self {
        FameConfig {
            input_size: 16,
            frames: 3,
            stages: vec![vec![8, 8], vec![16, 16]],
            lstm_hidden: 4,
            classes: 2,
            ..FameConfig::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages
            .last()
            .and_then(|s| s.last())
            .copied()
            .unwrap_or(0)
    }

    pub fn lstm_out_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn final_map_size(&self) -> usize {
        self.input_size >> self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FameError::Config(m));
        if self.classes < 2 {
            return bad(format!("model.classes must be at least 2, got {}", self.classes));
        }
        if self.frames < 1 {
            return bad("model.frames must be at least 1".into());
        }
        if self.channels < 1 || self.lstm_hidden < 1 || self.spatial_hidden < 1 {
            return bad("model widths must be positive".into());
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return bad(format!("invalid stage layout {}", format_stages(&self.stages)));
        }
        if self.final_map_size() < 1 {
            return bad(format!(
                "input size {} too small for {} pooling stages",
                self.input_size,
                self.stages.len()
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return bad(format!(
                "loss weights need alpha >= 0, beta >= 0, alpha + beta > 0; got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout must be in [0, 1), got {}", self.dropout));
        }
        if !TemporalRegistry::<f64>::default().contains(&self.temporal) {
            return bad(format!(
                "unknown temporal attention {:?}; expected one of {:?}",
                self.temporal,
                crate::attention::temporal_names()
            ));
        }
        Ok(())
    }
}

/// `64,64/128,128/256,256,256,256`.
pub fn format_stages(stages: &[Vec<usize>]) -> String {
    stages
        .iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("/")
}

pub fn parse_stages(text: &str) -> Option<Vec<Vec<usize>>> {
    text.split('/')
        .map(|stage| {
            stage
                .split(',')
                .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
                .collect::<Option<Vec<_>>>()
        })
        .collect()
}

/// Learnable-scalar counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub backbone_conv: usize,
    pub backbone_bn: usize,
    pub spatial: usize,
    pub condense_bn: usize,
    pub lstm: usize,
    pub temporal: usize,
    pub clip_head: usize,
    pub frame_head: usize,
}

impl ParamBreakdown {
    /// Counts from the configuration alone.
    pub fn closed_form(cfg: &FameConfig) -> Self {
        let mut conv = 0;
        let mut bn = 0;
        let mut c_in = cfg.channels;
        for stage in &cfg.stages {
            for &c_out in stage {
                conv += c_in * c_out * 9 + c_out;
                bn += 2 * c_out;
                c_in = c_out;
            }
        }
        let d = cfg.feature_dim();
        let h = cfg.lstm_hidden;
        let hd = 2 * h;
        let (temporal, z_dim) = match cfg.temporal.as_str() {
            "gate" => (d * hd + d + 2 * d, d),
            "softmax" => (hd * hd + hd + hd, hd),
            _ => (0, hd),
        };
        ParamBreakdown {
            backbone_conv: conv,
            backbone_bn: bn,
            spatial: if cfg.spatial_attention {
                SpatialAttention::param_count(cfg.spatial_hidden)
            } else {
                0
            },
            condense_bn: 2 * d,
            lstm: 2 * (4 * h * d + 4 * h * h + 4 * h),
            temporal,
            clip_head: z_dim * cfg.classes + cfg.classes,
            frame_head: d * cfg.classes + cfg.classes,
        }
    }

    pub fn backbone(&self) -> usize {
        self.backbone_conv + self.backbone_bn
    }

    pub fn total(&self) -> usize {
        self.backbone()
            + self.spatial
            + self.condense_bn
            + self.lstm
            + self.temporal
            + self.clip_head
            + self.frame_head
    }
}

/// `2 k² Cin Cout H' W'`: one multiply-accumulate counts as two FLOPs.
pub fn conv_flops(k: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (k * k * c_in * c_out * h_out * w_out) as u64
}

pub fn linear_flops(d_in: usize, d_out: usize) -> u64 {
    2 * (d_in * d_out) as u64
}

/// FLOPs split into a part paid once per frame and a part paid once per clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopEstimate {
    pub backbone_per_frame: u64,
    pub spatial_per_frame: u64,
    pub frame_head_per_frame: u64,
    pub lstm_per_frame: u64,
    pub temporal_per_frame: u64,
    pub clip_head_per_clip: u64,
}

impl FlopEstimate {
    pub fn closed_form(cfg: &FameConfig) -> Self {
        let mut s = cfg.input_size;
        let mut c_in = cfg.channels;
        let mut backbone = 0;
        for stage in &cfg.stages {
            for &c_out in stage {
                backbone += conv_flops(3, c_in, c_out, s, s);
                c_in = c_out;
            }
            s /= 2;
        }
        let spatial = if cfg.spatial_attention {
            conv_flops(1, 2, cfg.spatial_hidden, s, s) + conv_flops(1, cfg.spatial_hidden, 1, s, s)
        } else {
            0
        };
        let d = cfg.feature_dim();
        let h = cfg.lstm_hidden;
        let hd = 2 * h;
        let (temporal, z_dim) = match cfg.temporal.as_str() {
            "gate" => (linear_flops(hd, d), d),
            "softmax" => (linear_flops(hd, hd) + linear_flops(hd, 1), hd),
            _ => (0, hd),
        };
        FlopEstimate {
            backbone_per_frame: backbone,
            spatial_per_frame: spatial,
            frame_head_per_frame: linear_flops(d, cfg.classes),
            lstm_per_frame: 2 * (linear_flops(d, 4 * h) + linear_flops(h, 4 * h)),
            temporal_per_frame: temporal,
            clip_head_per_clip: linear_flops(z_dim, cfg.classes),
        }
    }

    pub fn per_frame(&self) -> u64 {
        self.backbone_per_frame
            + self.spatial_per_frame
            + self.frame_head_per_frame
            + self.lstm_per_frame
            + self.temporal_per_frame
    }

    pub fn total(&self, frames: usize) -> u64 {
        frames as u64 * self.per_frame() + self.clip_head_per_clip
    }
}

pub fn estimate_flops(cfg: &FameConfig, frames: usize) -> u64 {
    FlopEstimate::closed_form(cfg).total(frames)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, K]`
    pub clip_logits: Var,
    /// `[B*T, K]`, rows ordered `b*T + t`.
    pub frame_logits: Var,
    /// `[B*T, 1, h, w]` when spatial attention is enabled.
    pub spatial_mask: Option<Var>,
    pub temporal_weights: Var,
    /// Condensed frame features R `[B*T, D]`.
    pub features: Var,
    pub z: Var,
    /// Final backbone conv activation (after BN and ReLU, before pooling).
    pub last_conv: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub spatial: Var,
    pub temporal: Var,
}

#[derive(Debug)]
pub struct FameModel<S: Scalar = f64> {
    pub config: FameConfig,
    pub store: ParamStore<S>,
    stages: Vec<Vec<ConvBlock>>,
    spatial: Option<SpatialAttention>,
    condense_bn: BatchNorm,
    lstm: BiLstm,
    temporal: Box<dyn TemporalAttention<S>>,
    clip_head: Linear,
    frame_head: Linear,
}

impl<S: Scalar> FameModel<S> {
    pub fn build(config: &FameConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if S::PRECISION != config.precision {
            return Err(FameError::Config(format!(
                "model built as {} but config asks for {}",
                S::PRECISION.as_str(),
                config.precision.as_str()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut c_in = config.channels;
        let mut stages = Vec::new();
        for (si, widths) in config.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for (bi, &c_out) in widths.iter().enumerate() {
                blocks.push(ConvBlock::new(&mut store, &mut rng, &format!("backbone.s{si}.b{bi}"), c_in, c_out)?);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        let spatial = if config.spatial_attention {
            Some(SpatialAttention::new(&mut store, &mut rng, "spatial", config.spatial_hidden)?)
        } else {
            None
        };
        let d = config.feature_dim();
        let condense_bn = BatchNorm::new(&mut store, "condense.bn", d)?;
        let lstm = BiLstm::new(&mut store, &mut rng, "lstm", d, config.lstm_hidden)?;
        let dims = TemporalDims { feature: d, hidden: lstm.out_dim() };
        let temporal = TemporalRegistry::default().build(&config.temporal, &mut store, &mut rng, dims)?;
        let clip_head = Linear::new(&mut store, &mut rng, "head.clip", temporal.output_dim(), config.classes)?;
        let frame_head = Linear::new(&mut store, &mut rng, "head.frame", d, config.classes)?;
        Ok(FameModel {
            config: config.clone(),
            store,
            stages,
            spatial,
            condense_bn,
            lstm,
            temporal,
            clip_head,
            frame_head,
        })
    }

    /// Rebuilds the architecture for `config` and loads `store` into it.
    pub fn from_store(config: &FameConfig, store: &ParamStore<S>) -> Result<Self> {
        let mut m = Self::build(config, 0)?;
        m.store.load_from(store)?;
        Ok(m)
    }

    pub fn temporal_name(&self) -> &'static str {
        self.temporal.name()
    }

    pub fn clip_head(&self) -> &Linear {
        &self.clip_head
    }

    pub fn frame_head(&self) -> &Linear {
        &self.frame_head
    }

    pub fn count_params(&self) -> usize {
        self.store.count_params()
    }

    /// Counts read off the live parameter store.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let s = &self.store;
        let backbone_conv: usize = s
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("backbone.") && e.name.contains(".conv."))
            .map(|e| e.value.numel())
            .sum();
        ParamBreakdown {
            backbone_conv,
            backbone_bn: s.count_params_with_prefix("backbone.") - backbone_conv,
            spatial: s.count_params_with_prefix("spatial."),
            condense_bn: s.count_params_with_prefix("condense."),
            lstm: s.count_params_with_prefix("lstm."),
            temporal: s.count_params_with_prefix("temporal."),
            clip_head: s.count_params_with_prefix("head.clip."),
            frame_head: s.count_params_with_prefix("head.frame."),
        }
    }

    /// Forward over `x [B*T, C, S, S]` (frames of clip `b` at rows `b*T..`).
    pub fn forward(&self, sess: &mut Session<S>, x: Var, batch: usize, time: usize) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let want = [batch * time, cfg.channels, cfg.input_size, cfg.input_size];
        if time == 0 || batch == 0 || sess.tape.shape(x) != want {
            return Err(dim_err!("forward expects input {want:?}, got {:?}", sess.tape.shape(x)));
        }
        let mut y = x;
        let mut last_conv = x;
        for stage in &self.stages {
            for block in stage {
                y = block.forward(sess, y)?;
            }
            last_conv = y;
            y = sess.tape.pool2d(y, PoolKind::Max, 2, 2)?;
        }
        let spatial_mask = match &self.spatial {
            Some(sa) => {
                let (masked, m) = sa.forward(sess, y)?;
                y = masked;
                Some(m)
            }
            None => None,
        };
        let y = sess.tape.relu(y)?;
        let y = self.condense_bn.forward(sess, y)?;
        let features = sess.tape.global_avg_pool(y)?;
        let h = self.lstm.forward(sess, features, batch, time)?;
        let t = self.temporal.forward(sess, features, h, batch, time)?;
        let z = sess.dropout(t.z, cfg.dropout)?;
        let clip_logits = self.clip_head.forward(sess, z)?;
        let frame_logits = self.frame_head.forward(sess, features)?;
        Ok(ForwardOutput {
            clip_logits,
            frame_logits,
            spatial_mask,
            temporal_weights: t.weights,
            features,
            z: t.z,
            last_conv,
        })
    }

    /// `α · mean_t WCE(frame logits) + β · WCE(clip logits)`, averaged over clips.
    pub fn hybrid_loss(
        &self,
        sess: &mut Session<S>,
        out: &ForwardOutput,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<LossParts> {
        let k = self.config.classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(contract_err!("label {bad} out of range for {k} classes"));
        }
        if class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(contract_err!("class weights must be positive"));
        }
        let rows = sess.tape.shape(out.frame_logits)[0];
        if labels.is_empty() || rows % labels.len() != 0 {
            return Err(dim_err!("{} labels for {rows} frame rows", labels.len()));
        }
        let time = rows / labels.len();
        let frame_labels: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, time)).collect();
        let w: Vec<S> = class_weights.iter().map(|&x| S::of(x)).collect();
        let spatial = sess.tape.weighted_cross_entropy(out.frame_logits, &frame_labels, &w)?;
        let temporal = sess.tape.weighted_cross_entropy(out.clip_logits, labels, &w)?;
        let a = sess.tape.scale(spatial, S::of(self.config.alpha))?;
        let b = sess.tape.scale(temporal, S::of(self.config.beta))?;
        let total = sess.tape.add(a, b)?;
        Ok(LossParts { total, spatial, temporal })
    }

    /// Eval-mode clip logits for a batch of clips.
    pub fn logits(&self, frames: &Tensor<S>, batch: usize, time: usize) -> Result<Vec<Vec<f64>>> {
        let mut sess = Session::new(&self.store, Mode::Eval, false);
        let x = sess.tape.leaf(frames);
        let out = self.forward(&mut sess, x, batch, time)?;
        Ok(sess
            .tape
            .value(out.clip_logits)
            .chunks(self.config.classes)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect())
    }
}

/// `(argmax, softmax)` with ties resolved to the lowest class index.
pub fn attribute(logits: &[f64]) -> (usize, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    (best, probs)
}

/// Options for the end-to-end gradient check.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub batch: usize,
    /// Batch-norm mode; training mode skips conv biases that feed a batch
    /// norm, whose true gradient is exactly zero.
    pub mode: Mode,
    pub seed: u64,
    pub options: GradCheckOptions,
}

impl Default for ModelGradCheck {
    fn default() -> Self {
        ModelGradCheck {
            batch: 2,
            mode: Mode::Eval,
            seed: 0,
            options: GradCheckOptions::default(),
        }
    }
}

/// Compares tape gradients of the hybrid loss with central differences over
/// every learnable tensor of a freshly built model.
pub fn model_gradcheck(cfg: &FameConfig, check: &ModelGradCheck) -> Result<GradCheckReport> {
    let mut model = FameModel::<f64>::build(cfg, check.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed ^ 0x5EED);
    // Move affine parameters off their symmetric initial values, then set the
    // running statistics to those of the check batch so that eval-mode
    // activations are unit scale, as in a trained network.
    let ids: Vec<ParamId> = model.store.ids().collect();
    for &id in &ids {
        if model.store.entry(id).kind == ParamKind::NoDecay {
            for v in model.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let (b, t, s) = (check.batch, cfg.frames, cfg.input_size);
    let input = Tensor::<f64>::from_fn(&[b * t, cfg.channels, s, s], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..b).map(|i| i % cfg.classes).collect();
    let weights: Vec<f64> = (0..cfg.classes).map(|_| rng.random_range(0.5..1.5)).collect();
    let updates = {
        let mut sess = Session::new(&model.store, Mode::Train, false);
        let x = sess.tape.leaf(&input);
        model.forward(&mut sess, x, b, t)?;
        sess.take_bn_updates()
    };
    for u in &updates {
        model.store.get_mut(u.mean).data_mut().copy_from_slice(&u.stats.mean);
        model.store.get_mut(u.var).data_mut().copy_from_slice(&u.stats.var_unbiased);
    }

    let checked: Vec<ParamId> = ids
        .iter()
        .copied()
        .filter(|&id| {
            let e = model.store.entry(id);
            let pre_bn_bias = e.name.starts_with("backbone.") && e.name.ends_with(".conv.bias");
            e.kind.learnable() && !(check.mode == Mode::Train && pre_bn_bias)
        })
        .collect();

    let loss_of = |model: &FameModel<f64>, want_grads: bool| -> Result<(f64, u64, Vec<Option<Vec<f64>>>)> {
        let mut sess = Session::new(&model.store, check.mode, want_grads);
        let x = sess.tape.leaf(&input);
        let out = model.forward(&mut sess, x, b, t)?;
        let loss = model.hybrid_loss(&mut sess, &out, &labels, &weights)?;
        let value = sess.tape.value(loss.total)[0];
        let sig = sess.tape.branch_signature();
        let grads = if want_grads {
            let g = sess.tape.backward(loss.total)?;
            sess.param_grads(&g)
        } else {
            Vec::new()
        };
        Ok((value, sig, grads))
    };
    let (_, _, grads) = loss_of(&model, true)?;
    let analytic: Vec<Vec<f64>> = checked
        .iter()
        .map(|id| grads[id.index()].clone().unwrap_or_else(|| vec![0.0; model.store.get(*id).numel()]))
        .collect();
    let params: Vec<Tensor<f64>> = checked.iter().map(|&id| model.store.get(id).clone()).collect();
    finite_diff_check_piecewise(
        |ps| {
            for (&id, p) in checked.iter().zip(ps) {
                model.store.get_mut(id).data_mut().copy_from_slice(p.data());
            }
            let (v, sig, _) = loss_of(&model, false)?;
            Ok((v, sig))
        },
        &params,
        &analytic,
        check.options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_clips(cfg: &FameConfig, batch: usize, time: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.input_size;
        Tensor::from_fn(&[batch * time, cfg.channels, s, s], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_parameter_count_is_in_band_and_reconciles() {
        let cfg = FameConfig::default();
        let m = FameModel::<f64>::build(&cfg, 1).unwrap();
        let live = m.param_breakdown();
        assert_eq!(live, ParamBreakdown::closed_form(&cfg));
        assert_eq!(live.total(), m.count_params());
        assert_eq!(live.backbone_conv, 2_325_568);
        assert_eq!(live.backbone_bn, 2_816);
        assert_eq!(live.backbone(), 2_328_384);
        assert_eq!(live.clip_head, 1_285);
        assert!((2_480_000..=2_740_000).contains(&m.count_params()), "{}", m.count_params());
    }

    #[test]
    fn toy_parameter_count_matches_hand_formula() {
        let cfg = FameConfig::toy();
        let m = FameModel::<f64>::build(&cfg, 1).unwrap();
        // convs 3->8->8->16->16 with bias, BN affine on each
        let conv = (3 * 8 * 9 + 8) + (8 * 8 * 9 + 8) + (8 * 16 * 9 + 16) + (16 * 16 * 9 + 16);
        let bn = 2 * (8 + 8 + 16 + 16);
        let spatial = 2 * 8 + 8 + 8 + 1;
        let condense = 2 * 16;
        let lstm = 2 * (16 * 16 + 16 * 4 + 16);
        let gate = 16 * 8 + 16 + 2 * 16;
        let heads = 2 * (16 * 2 + 2);
        assert_eq!(m.count_params(), conv + bn + spatial + condense + lstm + gate + heads);
    }

    #[test]
    fn softmax_mode_breakdown_reconciles() {
        let cfg = FameConfig { temporal: "softmax".into(), ..FameConfig::default() };
        let m = FameModel::<f64>::build(&cfg, 1).unwrap();
        assert_eq!(m.param_breakdown(), ParamBreakdown::closed_form(&cfg));
        assert_eq!(m.param_breakdown().temporal, 192 * 192 + 192 + 192);
    }

    #[test]
    fn count_is_structural() {
        let cfg = FameConfig::toy();
        let mut m = FameModel::<f64>::build(&cfg, 3).unwrap();
        let before = m.count_params();
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            m.store.get_mut(id).data_mut().fill(7.0);
        }
        assert_eq!(m.count_params(), before);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = FameConfig::toy();
        let a = FameModel::<f64>::build(&cfg, 4).unwrap();
        let b = FameModel::<f64>::build(&cfg, 4).unwrap();
        let c = FameModel::<f64>::build(&cfg, 5).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            FameConfig { classes: 1, ..FameConfig::toy() },
            FameConfig { frames: 0, ..FameConfig::toy() },
            FameConfig { alpha: 0.0, beta: 0.0, ..FameConfig::toy() },
            FameConfig { alpha: -1.0, ..FameConfig::toy() },
            FameConfig { input_size: 2, ..FameConfig::toy() },
            FameConfig { temporal: "lstm".into(), ..FameConfig::toy() },
            FameConfig { dropout: 1.0, ..FameConfig::toy() },
        ];
        for cfg in bad {
            assert!(matches!(FameModel::<f64>::build(&cfg, 0), Err(FameError::Config(_))), "{cfg:?}");
        }
        let f32cfg = FameConfig { precision: Precision::F32, ..FameConfig::toy() };
        assert!(FameModel::<f64>::build(&f32cfg, 0).is_err());
        assert!(FameModel::<f32>::build(&f32cfg, 0).is_ok());
    }

    #[test]
    fn stage_text_round_trip() {
        let s = FameConfig::default().stages;
        assert_eq!(format_stages(&s), "64,64/128,128/256,256,256,256");
        assert_eq!(parse_stages(&format_stages(&s)), Some(s));
        assert_eq!(parse_stages("8,0"), None);
        assert_eq!(parse_stages("8,x/4"), None);
    }

    #[test]
    fn output_shapes_across_clip_lengths() {
        for temporal in ["gate", "softmax", "mean"] {
            let cfg = FameConfig { temporal: temporal.into(), ..FameConfig::toy() };
            let m = FameModel::<f64>::build(&cfg, 6).unwrap();
            for time in [1, 3, 10] {
                let x = random_clips(&cfg, 2, time, time as u64);
                let mut sess = Session::new(&m.store, Mode::Eval, false);
                let xv = sess.tape.leaf(&x);
                let out = m.forward(&mut sess, xv, 2, time).unwrap();
                assert_eq!(sess.tape.shape(out.clip_logits), &[2, 2]);
                assert_eq!(sess.tape.shape(out.frame_logits), &[2 * time, 2]);
                assert_eq!(sess.tape.shape(out.spatial_mask.unwrap()), &[2 * time, 1, 4, 4]);
                assert_eq!(sess.tape.shape(out.last_conv), &[2 * time, 16, 8, 8]);
                assert_eq!(sess.tape.shape(out.features), &[2 * time, 16]);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_side_effect_free() {
        let cfg = FameConfig::toy();
        let m = FameModel::<f64>::build(&cfg, 7).unwrap();
        let before = m.store.clone();
        let x = random_clips(&cfg, 1, 3, 8);
        let mut two = x.data().to_vec();
        two.extend_from_slice(x.data());
        let two = Tensor::new(&[6, 3, 16, 16], two).unwrap();
        let l = m.logits(&two, 2, 3).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(m.logits(&x, 1, 3).unwrap()[0], l[0]);
        assert_eq!(m.store, before);
    }

    #[test]
    fn frame_order_matters() {
        let cfg = FameConfig::toy();
        let m = FameModel::<f64>::build(&cfg, 9).unwrap();
        let x = random_clips(&cfg, 1, 3, 10);
        let plane = 3 * 16 * 16;
        let base = m.logits(&x, 1, 3).unwrap()[0].clone();
        let perms = [[1, 0, 2], [2, 1, 0], [0, 2, 1]];
        let changed = perms.iter().any(|p| {
            let data: Vec<f64> = p.iter().flat_map(|&f| x.data()[f * plane..(f + 1) * plane].to_vec()).collect();
            let y = Tensor::new(x.shape(), data).unwrap();
            let l = m.logits(&y, 1, 3).unwrap()[0].clone();
            l.iter().zip(&base).any(|(a, b)| (a - b).abs() > 1e-6)
        });
        assert!(changed);
    }

    #[test]
    fn hybrid_loss_weight_degeneracy_and_uniform_logits() {
        let cfg = FameConfig { alpha: 1.0, beta: 0.0, ..FameConfig::toy() };
        let m = FameModel::<f64>::build(&cfg, 11).unwrap();
        let x = random_clips(&cfg, 2, 3, 12);
        let mut sess = Session::new(&m.store, Mode::Eval, false);
        let xv = sess.tape.leaf(&x);
        let out = m.forward(&mut sess, xv, 2, 3).unwrap();
        let l = m.hybrid_loss(&mut sess, &out, &[0, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(sess.tape.value(l.total), sess.tape.value(l.spatial));
        assert!(matches!(
            m.hybrid_loss(&mut sess, &out, &[0, 2], &[1.0, 1.0]),
            Err(FameError::Contract(_))
        ));

        // zero heads give uniform logits: each term is ln K
        let cfg = FameConfig { alpha: 0.3, beta: 0.9, classes: 4, ..FameConfig::toy() };
        let mut m = FameModel::<f64>::build(&cfg, 13).unwrap();
        for id in [m.clip_head.weight, m.clip_head.bias, m.frame_head.weight, m.frame_head.bias] {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        let x = random_clips(&cfg, 2, 3, 14);
        let mut sess = Session::new(&m.store, Mode::Eval, false);
        let xv = sess.tape.leaf(&x);
        let out = m.forward(&mut sess, xv, 2, 3).unwrap();
        let l = m.hybrid_loss(&mut sess, &out, &[3, 1], &[1.0; 4]).unwrap();
        assert!((sess.tape.value(l.total)[0] - 1.2 * 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_alpha_leaves_frame_head_without_gradient() {
        let cfg = FameConfig { alpha: 0.0, beta: 1.0, ..FameConfig::toy() };
        let m = FameModel::<f64>::build(&cfg, 15).unwrap();
        let x = random_clips(&cfg, 2, 3, 16);
        let mut sess = Session::new(&m.store, Mode::Train, true);
        let xv = sess.tape.leaf(&x);
        let out = m.forward(&mut sess, xv, 2, 3).unwrap();
        let l = m.hybrid_loss(&mut sess, &out, &[0, 1], &[1.0, 1.0]).unwrap();
        let g = sess.tape.backward(l.total).unwrap();
        let pg = sess.param_grads(&g);
        for id in [m.frame_head.weight, m.frame_head.bias] {
            assert!(pg[id.index()].as_ref().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn attribute_tie_break_and_probabilities() {
        assert_eq!(attribute(&[2.0, 1.0, 0.0, 0.0, 0.0]).0, 0);
        let (c, p) = attribute(&[1.0, 1.0, 0.0]);
        assert_eq!(c, 0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let logits = [0.3, -1.2, 2.5, 2.4];
        let scaled: Vec<f64> = logits.iter().map(|v| 3.7 * v - 11.0).collect();
        assert_eq!(attribute(&logits).0, attribute(&scaled).0);
    }

    #[test]
    fn duplicate_identical_frames_keep_gate_prediction() {
        let cfg = FameConfig { frames: 3, ..FameConfig::toy() };
        let m = FameModel::<f64>::build(&cfg, 17).unwrap();
        let one = random_clips(&cfg, 1, 1, 18);
        let rep = |t: usize| Tensor::new(&[t, 3, 16, 16], one.data().repeat(t)).unwrap();
        let a = attribute(&m.logits(&rep(3), 1, 3).unwrap()[0]).0;
        let b = attribute(&m.logits(&rep(4), 1, 4).unwrap()[0]).0;
        assert_eq!(a, b);
    }

    #[test]
    fn flops_closed_form() {
        assert_eq!(conv_flops(1, 1, 1, 1, 1), 2);
        let cfg = FameConfig::toy();
        let f = FlopEstimate::closed_form(&cfg);
        let backbone = 2 * 9 * (3 * 8 * 256 + 8 * 8 * 256 + 8 * 16 * 64 + 16 * 16 * 64) as u64;
        assert_eq!(f.backbone_per_frame, backbone);
        assert_eq!(f.spatial_per_frame, 2 * (2 * 8 + 8) * 16);
        assert_eq!(f.lstm_per_frame, 2 * 2 * (16 * 16 + 4 * 16));
        assert_eq!(f.temporal_per_frame, 2 * 8 * 16);
        assert_eq!(f.frame_head_per_frame, 2 * 16 * 2);
        assert_eq!(f.clip_head_per_clip, 2 * 16 * 2);
        let per_frame = |t| estimate_flops(&cfg, t) - f.clip_head_per_clip;
        assert_eq!(per_frame(6), 2 * per_frame(3));
    }

    #[test]
    fn end_to_end_gradient_check_both_temporal_modes() {
        for temporal in ["gate", "softmax"] {
            let cfg = FameConfig { temporal: temporal.into(), ..FameConfig::toy() };
            let report = model_gradcheck(&cfg, &ModelGradCheck::default()).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{temporal}: {report:?}");
            assert!(report.nonsmooth_skipped * 10 < report.coords_checked, "{temporal}: {report:?}");
        }
    }

    #[test]
    fn training_mode_gradient_check() {
        let check = ModelGradCheck { mode: Mode::Train, ..ModelGradCheck::default() };
        let report = model_gradcheck(&FameConfig::toy(), &check).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
