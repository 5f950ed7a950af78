//! AdamW training with step decay, weighted hybrid loss and augmentation.

mod augment;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FameError, Result};
use crate::layers::{Mode, ParamStore, Session};
use crate::model::{attribute, FameModel};
use crate::synthdata::{Clip, DatasetManifest, Split, CHANNELS};
use crate::tensor::{Scalar, Tensor};

pub use augment::{
    augment, flip_horizontal, normalize, preprocess, resize_clip, select_frames, temporal_crop, AugmentConfig,
};
pub use optim::{adamw_step, AdamWParams, OptimState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub adam: AdamWParams,
    pub flip: bool,
    pub temporal_crop: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            lr: 0.01,
            decay: 0.1,
            decay_every: 40,
            adam: AdamWParams::default(),
            flip: true,
            temporal_crop: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.decay_every > 0
            && (0.0..1.0).contains(&self.adam.beta1)
            && (0.0..1.0).contains(&self.adam.beta2)
            && self.adam.eps > 0.0
            && self.adam.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FameError::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// `lr · decay^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every) as i32;
    // Dividing by the exact integer power keeps 0.01 → 0.001 → … bit-exact.
    cfg.lr / (1.0 / cfg.decay).round().powi(k)
}

/// `w_k = N_train / (K · n_k)` over the training split.
pub fn class_weights(manifest: &DatasetManifest) -> Result<Vec<f64>> {
    let k = manifest.spec.classes;
    let mut counts = vec![0usize; k];
    for r in manifest.split(Split::Train) {
        counts[r.label] += 1;
    }
    class_weights_from_counts(&counts)
}

pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(FameError::Config(format!("class {missing} has no training clips")));
    }
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&c| n as f64 / (k * c as f64)).collect())
}

/// Stacks preprocessed clips into `[B·T, C, S, S]`.
pub fn batch_tensor<S: Scalar>(clips: &[Clip]) -> Result<Tensor<S>> {
    let first = clips.first().ok_or_else(|| FameError::Data("empty batch".into()))?;
    let (t, s) = (first.frames, first.size);
    if clips.iter().any(|c| c.frames != t || c.size != s) {
        return Err(FameError::Data("clips in a batch differ in shape".into()));
    }
    let data = clips.iter().flat_map(|c| c.data.iter().map(|&v| S::of(v))).collect();
    Tensor::new(&[clips.len() * t, CHANNELS, s, s], data)
}

/// Eval-mode clip logits, `batch` clips per forward pass.
pub fn clip_logits<S: Scalar>(model: &FameModel<S>, clips: &[Clip], batch: usize) -> Result<Vec<Vec<f64>>> {
    let (size, frames) = (model.config.input_size, model.config.frames);
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch.max(1)) {
        let pre: Vec<Clip> = chunk.iter().map(|c| preprocess(c, size, frames)).collect::<Result<_>>()?;
        out.extend(model.logits(&batch_tensor(&pre)?, pre.len(), frames)?);
    }
    Ok(out)
}

pub fn accuracy<S: Scalar>(model: &FameModel<S>, clips: &[Clip], batch: usize) -> Result<f64> {
    if clips.is_empty() {
        return Err(FameError::Config("accuracy over an empty clip set".into()));
    }
    let logits = clip_logits(model, clips, batch)?;
    let hits = logits.iter().zip(clips).filter(|(l, c)| attribute(l).0 == c.label).count();
    Ok(hits as f64 / clips.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch lr train_loss train_acc eval_acc seconds`, tab separated,
    /// after `header` lines written as `#` comments.
    pub fn to_tsv(&self, header: &[String]) -> String {
        let mut out: String = header.iter().map(|h| format!("# {h}\n")).collect();
        out.push_str("# epoch\tlr\ttrain_loss\ttrain_acc\teval_acc\tseconds\n");
        for r in &self.epochs {
            let eval = r.eval_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.6}"));
            out.push_str(&format!(
                "{}\t{:e}\t{:.6}\t{:.6}\t{eval}\t{:.3}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.seconds
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint<S: Scalar> {
    pub epoch: usize,
    pub eval_acc: f64,
    pub store: ParamStore<S>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub history: TrainHistory,
    /// Parameters at the first epoch with the highest eval accuracy.
    pub best: Option<BestCheckpoint<S>>,
    pub optim: OptimState,
}

/// Trains `model` in place; the final parameters stay in `model.store`.
pub fn train<S: Scalar>(
    model: &mut FameModel<S>,
    train_clips: &[Clip],
    eval_clips: &[Clip],
    class_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_clips.is_empty() {
        return Err(FameError::Config("training split is empty".into()));
    }
    if class_weights.len() != model.config.classes {
        return Err(FameError::Config(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            model.config.classes
        )));
    }
    let aug = AugmentConfig {
        flip: cfg.flip,
        temporal_crop: cfg.temporal_crop,
        size: model.config.input_size,
        frames: model.config.frames,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optim = OptimState::new(&model.store);
    let mut history = TrainHistory::default();
    let mut best: Option<BestCheckpoint<S>> = None;
    let mut order: Vec<usize> = (0..train_clips.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let context = |e: FameError| FameError::Training(format!("epoch {epoch} batch {b}: {e}"));
            let clips: Vec<Clip> = idx.iter().map(|&i| augment(&train_clips[i], &mut rng, &aug)).collect::<Result<_>>()?;
            let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
            let x = batch_tensor::<S>(&clips)?;
            let dropout_seed = rng.random();
            let (loss, grads, updates, logits) = {
                let mut sess = Session::new(&model.store, Mode::Train, true).with_dropout_seed(dropout_seed);
                let xv = sess.tape.leaf(&x);
                let out = model.forward(&mut sess, xv, labels.len(), aug.frames).map_err(context)?;
                let parts = model.hybrid_loss(&mut sess, &out, &labels, class_weights).map_err(context)?;
                let loss = sess.tape.value(parts.total)[0].as_f64();
                if !loss.is_finite() {
                    return Err(context(FameError::NonFinite(format!("loss {loss}"))));
                }
                let logits: Vec<f64> = sess.tape.value(out.clip_logits).iter().map(|v| v.as_f64()).collect();
                let g = sess.tape.backward(parts.total).map_err(context)?;
                (loss, sess.param_grads(&g), sess.take_bn_updates(), logits)
            };
            adamw_step(&mut model.store, &grads, &mut optim, &cfg.adam, lr).map_err(context)?;
            model.store.apply_bn_updates(&updates);
            loss_sum += loss * labels.len() as f64;
            hits += logits
                .chunks(model.config.classes)
                .zip(&labels)
                .filter(|(l, &y)| attribute(l).0 == y)
                .count();
        }
        let eval_acc = if eval_clips.is_empty() { None } else { Some(accuracy(model, eval_clips, cfg.batch_size)?) };
        if let Some(acc) = eval_acc {
            if best.as_ref().is_none_or(|b| acc > b.eval_acc) {
                best = Some(BestCheckpoint { epoch, eval_acc: acc, store: model.store.clone() });
            }
        }
        let n = train_clips.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            eval_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { history, best, optim })
}
