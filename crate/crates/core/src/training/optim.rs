use crate::error::{FameError, Result};
use crate::layers::{ParamKind, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.6 }
    }
}

/// First and second moments per store entry (empty for buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| if e.kind.learnable() { vec![0.0; e.value.numel()] } else { Vec::new() })
            .collect();
        OptimState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One AdamW update. Decay `θ ← θ·(1 − lr·wd)` is applied to `Weight`
/// entries before, and independently of, the bias-corrected Adam step.
/// A missing gradient counts as zero.
pub fn adamw_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[Option<Vec<S>>],
    state: &mut OptimState,
    hp: &AdamWParams,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(FameError::Training(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (grad, entry) in grads.iter().zip(store.entries()) {
        if let Some(g) = grad {
            if g.len() != entry.value.numel() {
                return Err(FameError::Training(format!("gradient of {} has wrong length", entry.name)));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(FameError::Training(format!("non-finite gradient {bad} for {}", entry.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t));
    let keep = 1.0 - lr * hp.weight_decay;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let kind = store.entry(id).kind;
        if !kind.learnable() {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            let g = grads[i].as_ref().map_or(0.0, |g| g[j].as_f64());
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let mut theta = p.as_f64();
            if kind == ParamKind::Weight {
                theta *= keep;
            }
            theta -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
            *p = S::of(theta);
        }
    }
    Ok(())
}
