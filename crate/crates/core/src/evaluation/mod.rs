//! Attribution metrics, ROC curves, Grad-CAM and the ablation harness.

mod ablation;
mod gradcam;
mod metrics;
mod roc;

use std::time::Instant;

pub use ablation::{ablate, standard_variants, AblationRow, AblationTable, AblationVariant};
pub use gradcam::{grad_cam, Heatmap};
pub use metrics::{f1_score, strip_timing, ClassMetrics, MetricsReport};
pub use roc::{roc_auc, RocCurve, RocReport};

use crate::error::{FameError, Result};
use crate::model::FameModel;
use crate::synthdata::{Clip, DatasetManifest, Split};
use crate::tensor::Scalar;
use crate::training::clip_logits;

pub const EVAL_BATCH: usize = 16;

/// Eval-mode metrics over `clips`.
pub fn evaluate_clips<S: Scalar>(model: &FameModel<S>, clips: &[Clip]) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(FameError::Config("evaluation split is empty".into()));
    }
    let started = Instant::now();
    let logits = clip_logits(model, clips, EVAL_BATCH)?;
    let seconds = started.elapsed().as_secs_f64() / clips.len() as f64;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    MetricsReport::from_logits(&logits, &labels, model.config.classes, seconds)
}

/// Renders `split` of `manifest` in memory and evaluates it.
pub fn evaluate<S: Scalar>(model: &FameModel<S>, manifest: &DatasetManifest, split: Split) -> Result<MetricsReport> {
    evaluate_clips(model, &manifest.render_split(split)?)
}

#[cfg(test)]
mod tests;
