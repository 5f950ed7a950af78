use crate::error::{contract_err, Result};
use crate::layers::{Mode, Session};
use crate::model::FameModel;
use crate::synthdata::{encode_pgm, resize_bilinear, Clip};
use crate::tensor::Scalar;
use crate::training::{batch_tensor, preprocess};

/// Per-frame saliency in `[0, 1]` at the final conv resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    /// `(x, y)` centre of mass in pixel units; `None` for an all-zero map.
    pub fn center_of_mass(&self) -> Option<(f64, f64)> {
        let total: f64 = self.data.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let (mut x, mut y) = (0.0, 0.0);
        for (i, v) in self.data.iter().enumerate() {
            x += v * (i % self.width) as f64;
            y += v * (i / self.width) as f64;
        }
        Some((x / total, y / total))
    }

    pub fn upscale(&self, size: usize) -> Heatmap {
        Heatmap { width: size, height: size, data: resize_bilinear(&self.data, self.width, size) }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(&self.data, self.width, self.height)
    }
}

/// Grad-CAM of clip logit `target` against the final backbone activation
/// (after BN and ReLU, before pooling and the spatial mask).
pub fn grad_cam<S: Scalar>(model: &FameModel<S>, clip: &Clip, target: usize) -> Result<Vec<Heatmap>> {
    let cfg = &model.config;
    if target >= cfg.classes {
        return Err(contract_err!("target class {target} out of range for {} classes", cfg.classes));
    }
    let x = batch_tensor::<S>(&[preprocess(clip, cfg.input_size, cfg.frames)?])?;
    let mut sess = Session::new(&model.store, Mode::Eval, true);
    let xv = sess.tape.leaf(&x);
    let out = model.forward(&mut sess, xv, 1, cfg.frames)?;
    let logit = sess.tape.select(out.clip_logits, target)?;
    let grads = sess.tape.backward_retaining(logit, &[out.last_conv])?;

    let shape = sess.tape.shape(out.last_conv).to_vec();
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let act = sess.tape.value(out.last_conv);
    let g = grads.get_or_zeros(out.last_conv, act.len());
    let hw = h * w;
    let mut maps = Vec::with_capacity(t);
    for f in 0..t {
        let mut cam = vec![0.0; hw];
        for ch in 0..c {
            let at = (f * c + ch) * hw;
            let weight = g[at..at + hw].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
            for (m, a) in cam.iter_mut().zip(&act[at..at + hw]) {
                *m += weight * a.as_f64();
            }
        }
        cam.iter_mut().for_each(|v| *v = v.max(0.0));
        let peak = cam.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            cam.iter_mut().for_each(|v| *v /= peak);
        }
        maps.push(Heatmap { width: w, height: h, data: cam });
    }
    Ok(maps)
}
