//! Line-based `key = value` run configuration.

use std::path::PathBuf;

use crate::error::{FameError, Result};
use crate::model::{format_stages, parse_stages, FameConfig};
use crate::synthdata::{config_hash, DatasetSpec};
use crate::tensor::Precision;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything one command needs. `seed` drives model initialization and
/// training order; `data.seed` drives dataset synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: FameConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: FameConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Text,
    Stages,
    Mix,
    Precision,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Usize | Kind::U64 => "a non-negative integer",
            Kind::F64 => "a finite number",
            Kind::Bool => "true or false",
            Kind::Text => "text",
            Kind::Stages => "stage widths like 64,64/128,128",
            Kind::Mix => "three fractions like 1,0,0",
            Kind::Precision => "f32 or f64",
        }
    }
}

const KEYS: &[(&str, Kind)] = &[
    ("seed", Kind::U64),
    ("model.input_size", Kind::Usize),
    ("model.channels", Kind::Usize),
    ("model.frames", Kind::Usize),
    ("model.stages", Kind::Stages),
    ("model.lstm_hidden", Kind::Usize),
    ("model.temporal", Kind::Text),
    ("model.spatial_attention", Kind::Bool),
    ("model.spatial_hidden", Kind::Usize),
    ("model.classes", Kind::Usize),
    ("model.dropout", Kind::F64),
    ("model.alpha", Kind::F64),
    ("model.beta", Kind::F64),
    ("model.precision", Kind::Precision),
    ("train.epochs", Kind::Usize),
    ("train.batch_size", Kind::Usize),
    ("train.lr", Kind::F64),
    ("train.lr_decay", Kind::F64),
    ("train.decay_every", Kind::Usize),
    ("train.beta1", Kind::F64),
    ("train.beta2", Kind::F64),
    ("train.eps", Kind::F64),
    ("train.weight_decay", Kind::F64),
    ("train.flip", Kind::Bool),
    ("train.temporal_crop", Kind::Bool),
    ("data.classes", Kind::Usize),
    ("data.per_class", Kind::Usize),
    ("data.frames", Kind::Usize),
    ("data.size", Kind::Usize),
    ("data.mix", Kind::Mix),
    ("data.train_fraction", Kind::F64),
    ("data.strength", Kind::F64),
    ("data.seed", Kind::U64),
    ("paths.data", Kind::Text),
    ("paths.out", Kind::Text),
];

enum Value {
    Usize(usize),
    U64(u64),
    F64(f64),
    Bool(bool),
    Text(String),
    Stages(Vec<Vec<usize>>),
    Mix([f64; 3]),
    Precision(Precision),
}

fn parse_value(kind: Kind, raw: &str) -> Option<Value> {
    Some(match kind {
        Kind::Usize => Value::Usize(raw.parse().ok()?),
        Kind::U64 => Value::U64(raw.parse().ok()?),
        Kind::F64 => Value::F64(raw.parse::<f64>().ok().filter(|v| v.is_finite())?),
        Kind::Bool => Value::Bool(raw.parse().ok()?),
        Kind::Text => Value::Text(raw.to_string()),
        Kind::Stages => Value::Stages(parse_stages(raw)?),
        Kind::Mix => {
            let parts: Vec<f64> = raw.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
            Value::Mix(parts.try_into().ok()?)
        }
        Kind::Precision => Value::Precision(Precision::parse(raw)?),
    })
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn set(&mut self, key: &str, value: Value) {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match (key, value) {
            ("seed", Value::U64(v)) => {
                self.seed = v;
                t.seed = v;
            }
            ("model.input_size", Value::Usize(v)) => m.input_size = v,
            ("model.channels", Value::Usize(v)) => m.channels = v,
            ("model.frames", Value::Usize(v)) => m.frames = v,
            ("model.stages", Value::Stages(v)) => m.stages = v,
            ("model.lstm_hidden", Value::Usize(v)) => m.lstm_hidden = v,
            ("model.temporal", Value::Text(v)) => m.temporal = v,
            ("model.spatial_attention", Value::Bool(v)) => m.spatial_attention = v,
            ("model.spatial_hidden", Value::Usize(v)) => m.spatial_hidden = v,
            ("model.classes", Value::Usize(v)) => m.classes = v,
            ("model.dropout", Value::F64(v)) => m.dropout = v,
            ("model.alpha", Value::F64(v)) => m.alpha = v,
            ("model.beta", Value::F64(v)) => m.beta = v,
            ("model.precision", Value::Precision(v)) => m.precision = v,
            ("train.epochs", Value::Usize(v)) => t.epochs = v,
            ("train.batch_size", Value::Usize(v)) => t.batch_size = v,
            ("train.lr", Value::F64(v)) => t.lr = v,
            ("train.lr_decay", Value::F64(v)) => t.decay = v,
            ("train.decay_every", Value::Usize(v)) => t.decay_every = v,
            ("train.beta1", Value::F64(v)) => t.adam.beta1 = v,
            ("train.beta2", Value::F64(v)) => t.adam.beta2 = v,
            ("train.eps", Value::F64(v)) => t.adam.eps = v,
            ("train.weight_decay", Value::F64(v)) => t.adam.weight_decay = v,
            ("train.flip", Value::Bool(v)) => t.flip = v,
            ("train.temporal_crop", Value::Bool(v)) => t.temporal_crop = v,
            ("data.classes", Value::Usize(v)) => d.classes = v,
            ("data.per_class", Value::Usize(v)) => d.per_class = v,
            ("data.frames", Value::Usize(v)) => d.frames = v,
            ("data.size", Value::Usize(v)) => d.size = v,
            ("data.mix", Value::Mix(v)) => d.mix = v,
            ("data.train_fraction", Value::F64(v)) => d.train_fraction = v,
            ("data.strength", Value::F64(v)) => d.strength = v,
            ("data.seed", Value::U64(v)) => d.seed = v,
            ("paths.data", Value::Text(v)) => self.paths.data = Some(PathBuf::from(v)),
            ("paths.out", Value::Text(v)) => self.paths.out = Some(PathBuf::from(v)),
            (k, _) => unreachable!("key {k} paired with the wrong value kind"),
        }
    }

    fn get(&self, key: &str) -> Option<String> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        Some(match key {
            "seed" => self.seed.to_string(),
            "model.input_size" => m.input_size.to_string(),
            "model.channels" => m.channels.to_string(),
            "model.frames" => m.frames.to_string(),
            "model.stages" => format_stages(&m.stages),
            "model.lstm_hidden" => m.lstm_hidden.to_string(),
            "model.temporal" => m.temporal.clone(),
            "model.spatial_attention" => m.spatial_attention.to_string(),
            "model.spatial_hidden" => m.spatial_hidden.to_string(),
            "model.classes" => m.classes.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "model.alpha" => m.alpha.to_string(),
            "model.beta" => m.beta.to_string(),
            "model.precision" => m.precision.as_str().to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_decay" => t.decay.to_string(),
            "train.decay_every" => t.decay_every.to_string(),
            "train.beta1" => t.adam.beta1.to_string(),
            "train.beta2" => t.adam.beta2.to_string(),
            "train.eps" => t.adam.eps.to_string(),
            "train.weight_decay" => t.adam.weight_decay.to_string(),
            "train.flip" => t.flip.to_string(),
            "train.temporal_crop" => t.temporal_crop.to_string(),
            "data.classes" => d.classes.to_string(),
            "data.per_class" => d.per_class.to_string(),
            "data.frames" => d.frames.to_string(),
            "data.size" => d.size.to_string(),
            "data.mix" => join_f64(&d.mix),
            "data.train_fraction" => d.train_fraction.to_string(),
            "data.strength" => d.strength.to_string(),
            "data.seed" => d.seed.to_string(),
            "paths.data" => self.paths.data.as_ref()?.display().to_string(),
            "paths.out" => self.paths.out.as_ref()?.display().to_string(),
            _ => return None,
        })
    }

    /// Applies one `key = value` assignment.
    pub fn assign(&mut self, key: &str, raw: &str) -> Result<()> {
        let (_, kind) = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| FameError::Config(format!("unknown key {key:?}")))?;
        let value = parse_value(*kind, raw)
            .ok_or_else(|| FameError::Config(format!("{key}: expected {}, got {raw:?}", kind.describe())))?;
        self.set(key, value);
        Ok(())
    }

    /// Every set key, one `key = value` line each, in a fixed order. Parsing
    /// the result gives back an equal config.
    pub fn to_text(&self) -> String {
        self.lines_with_prefix("")
    }

    pub fn lines_with_prefix(&self, prefix: &str) -> String {
        KEYS.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(k, _)| self.get(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    /// Hash of the model, training, data and seed settings; paths are excluded.
    pub fn config_hash(&self) -> String {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("paths.")).collect::<Vec<_>>().join("\n");
        config_hash(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.classes != self.model.classes {
            return Err(FameError::Config(format!(
                "data.classes = {} but model.classes = {}",
                self.data.classes, self.model.classes
            )));
        }
        if self.data.frames < self.model.frames {
            return Err(FameError::Config(format!(
                "data.frames = {} is fewer than model.frames = {}",
                self.data.frames, self.model.frames
            )));
        }
        Ok(())
    }
}

/// Parses a config file. Unspecified keys keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let at_line = |message: String| FameError::ConfigLine { line, message };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| at_line(format!("expected `key = value`, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(at_line("missing key".into()));
        }
        if seen.iter().any(|k| k == key) {
            return Err(at_line(format!("{key} set twice")));
        }
        cfg.assign(key, value).map_err(|e| match e {
            FameError::Config(m) => at_line(m),
            other => other,
        })?;
        seen.push(key.to_string());
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.train.lr, c.train.batch_size, c.train.epochs, c.model.input_size), (0.01, 32, 150, 112));
        assert_eq!((c.train.adam.weight_decay, c.model.dropout, c.model.frames), (0.6, 0.0, 10));
    }

    #[test]
    fn single_override_changes_one_field() {
        let c = parse_config("# comment\n\ntrain.lr = 0.001   # trailing\n").unwrap();
        let want = RunConfig { train: TrainConfig { lr: 0.001, ..TrainConfig::default() }, ..RunConfig::default() };
        assert_eq!(c, want);
    }

    #[test]
    fn type_error_names_key_and_line() {
        let err = parse_config("seed = 1\ntrain.batch_size = yes\n").unwrap_err();
        match &err {
            FameError::ConfigLine { line, message } => {
                assert_eq!(*line, 2);
                assert!(message.contains("train.batch_size"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn syntax_unknown_and_duplicate_keys_are_rejected() {
        for (text, line) in [("model.frames 10", 1), ("\ntrain.nope = 1", 2), ("seed = 1\nseed = 2", 2), (" = 3", 1)] {
            match parse_config(text) {
                Err(FameError::ConfigLine { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn structured_values_parse() {
        let c = parse_config(
            "model.stages = 8/16,16/32\ndata.mix = 0.5,0.25,0.25\nmodel.precision = f32\npaths.out = runs/a\n",
        )
        .unwrap();
        assert_eq!(c.model.stages, vec![vec![8], vec![16, 16], vec![32]]);
        assert_eq!(c.data.mix, [0.5, 0.25, 0.25]);
        assert_eq!(c.model.precision, Precision::F32);
        assert_eq!(c.paths.out, Some(PathBuf::from("runs/a")));
        assert!(parse_config("data.mix = 1,0").is_err());
        assert!(parse_config("train.lr = inf").is_err());
    }

    #[test]
    fn seed_drives_training_order() {
        assert_eq!(parse_config("seed = 9").unwrap().train.seed, 9);
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = parse_config("paths.out = x").unwrap();
        assert_eq!(a.config_hash(), RunConfig::default().config_hash());
        assert_ne!(parse_config("seed = 1").unwrap().config_hash(), a.config_hash());
    }

    #[test]
    fn validation_cross_checks_sections() {
        assert!(parse_config("data.classes = 4").unwrap().validate().is_err());
        assert!(parse_config("data.frames = 5").unwrap().validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn text_round_trips(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            wd in 0.0f64..2.0,
            frames in 1usize..20,
            stages in prop::collection::vec(prop::collection::vec(1usize..64, 1..3), 1..4),
            flip in any::<bool>(),
        ) {
            let mut c = RunConfig::default();
            c.seed = seed;
            c.train.seed = seed;
            c.train.lr = lr;
            c.train.adam.weight_decay = wd;
            c.train.flip = flip;
            c.model.frames = frames;
            c.model.stages = stages;
            c.paths.data = Some("d".into());
            let text = c.to_text();
            prop_assert_eq!(parse_config(&text).unwrap(), c);
        }
    }
}
