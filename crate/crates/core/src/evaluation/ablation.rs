use std::time::Instant;

use crate::attention::MeanPooling;
use crate::error::{FameError, Result};
use crate::model::{FameConfig, FameModel};
use crate::synthdata::Clip;
use crate::tensor::Scalar;
use crate::training::{accuracy, train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub config: FameConfig,
}

/// Baseline (mean pooling, no spatial mask), spatial only, temporal only and
/// the full model, all derived from `full`.
pub fn standard_variants(full: &FameConfig) -> Vec<AblationVariant> {
    let with = |name: &str, spatial: bool, temporal: &str| AblationVariant {
        name: name.into(),
        config: FameConfig { spatial_attention: spatial, temporal: temporal.into(), ..full.clone() },
    };
    vec![
        with("baseline", false, MeanPooling::NAME),
        with("spatial-only", true, MeanPooling::NAME),
        with("temporal-only", false, &full.temporal),
        with("full", true, &full.temporal),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `variant params accuracy` rows, then one `timing.` line per variant.
    pub fn to_text(&self, header: &[String]) -> String {
        let mut out = String::from("# fame-ablation v1\n");
        out.extend(header.iter().map(|h| format!("# {h}\n")));
        out.push_str("# variant\tparams\taccuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\n", r.name, r.params, r.accuracy));
        }
        for r in &self.rows {
            out.push_str(&format!("timing.{}.seconds = {:.3}\n", r.name, r.seconds));
        }
        out
    }
}

/// Trains every variant from `model_seed` with the same schedule and data
/// order, then scores it on `test_clips`.
pub fn ablate<S: Scalar>(
    variants: &[AblationVariant],
    train_clips: &[Clip],
    test_clips: &[Clip],
    class_weights: &[f64],
    cfg: &TrainConfig,
    model_seed: u64,
) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(FameError::Config(format!("ablation needs at least 2 variants, got {}", variants.len())));
    }
    if test_clips.is_empty() {
        return Err(FameError::Config("ablation test split is empty".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let started = Instant::now();
        let mut model = FameModel::<S>::build(&v.config, model_seed)?;
        train(&mut model, train_clips, &[], class_weights, cfg)?;
        rows.push(AblationRow {
            name: v.name.clone(),
            params: model.count_params(),
            accuracy: accuracy(&model, test_clips, cfg.batch_size)?,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(AblationTable { rows })
}
