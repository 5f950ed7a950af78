use proptest::prelude::*;

use super::*;
use crate::model::FameConfig;
use crate::synthdata::{generate_dataset, DatasetSpec};
use crate::training::TrainConfig;

fn one_hot(k: usize, classes: usize) -> Vec<f64> {
    (0..classes).map(|i| if i == k { 5.0 } else { 0.0 }).collect()
}

fn macro_f1_from_matrix(m: &[Vec<usize>]) -> f64 {
    let k = m.len();
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c] as f64;
        let fp: f64 = (0..k).filter(|&r| r != c).map(|r| m[r][c] as f64).sum();
        let fn_: f64 = (0..k).filter(|&p| p != c).map(|p| m[c][p] as f64).sum();
        total += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    }
    total / k as f64
}

fn tiny_model() -> FameConfig {
    FameConfig { frames: 3, stages: vec![vec![4], vec![8]], lstm_hidden: 4, ..FameConfig::toy() }
}

fn tiny_spec() -> DatasetSpec {
    DatasetSpec { classes: 2, per_class: 5, frames: 4, size: 16, seed: 2, ..DatasetSpec::default() }
}

#[test]
fn oracle_predictor_is_perfect() {
    let labels: Vec<usize> = (0..20).map(|i| i % 5).collect();
    let logits: Vec<Vec<f64>> = labels.iter().map(|&l| one_hot(l, 5)).collect();
    let r = MetricsReport::from_logits(&logits, &labels, 5, 0.0).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!((r.macro_f1, r.macro_auc), (1.0, Some(1.0)));
    for (i, row) in r.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), row[i]);
    }
}

#[test]
fn constant_predictor_fills_one_column() {
    let labels: Vec<usize> = (0..25).map(|i| i % 5).collect();
    let logits = vec![one_hot(3, 5); 25];
    let r = MetricsReport::from_logits(&logits, &labels, 5, 0.0).unwrap();
    assert_eq!(r.accuracy, 0.2);
    for row in &r.confusion {
        assert_eq!(row.iter().enumerate().filter(|(_, &n)| n > 0).map(|(j, _)| j).collect::<Vec<_>>(), vec![3]);
    }
    assert_eq!(r.macro_auc, Some(0.5));
}

#[test]
fn empty_input_is_a_config_error() {
    assert!(matches!(MetricsReport::from_logits(&[], &[], 3, 0.0), Err(FameError::Config(_))));
    let model = crate::model::FameModel::<f64>::build(&tiny_model(), 0).unwrap();
    assert!(matches!(evaluate_clips(&model, &[]), Err(FameError::Config(_))));
}

#[test]
fn text_report_carries_exact_values_and_separate_timing() {
    let labels = vec![0, 0, 1, 1, 2];
    let logits = vec![vec![2.0, 1.0, 0.0], vec![0.0, 1.5, 0.2], vec![0.1, 2.0, 0.3], vec![0.3, 0.2, 0.1], vec![0.0, 0.0, 3.0]];
    let r = MetricsReport::from_logits(&logits, &labels, 3, 0.25).unwrap();
    let text = r.to_text(&["seed=1".into()]);
    assert!(text.contains(&format!("macro.f1 = {}\n", r.macro_f1)));
    let parsed: f64 = text.lines().find_map(|l| l.strip_prefix("accuracy = ")).unwrap().parse().unwrap();
    assert_eq!(parsed, r.accuracy);
    assert_eq!(text.lines().last().unwrap(), "timing.seconds_per_clip = 0.25");
    assert!(!strip_timing(&text).contains("timing"));
    let r2 = MetricsReport { seconds_per_clip: 9.0, ..r.clone() };
    assert_eq!(strip_timing(&text), strip_timing(&r2.to_text(&["seed=1".into()])));
}

proptest! {
    #[test]
    fn report_invariants_hold(
        rows in prop::collection::vec((0usize..4, prop::collection::vec(-3.0f64..3.0, 4)), 1..40)
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let logits: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
        let r = MetricsReport::from_logits(&logits, &labels, 4, 0.0).unwrap();
        let trace: usize = (0..4).map(|k| r.confusion[k][k]).sum();
        prop_assert_eq!(r.accuracy, trace as f64 / labels.len() as f64);
        for (k, c) in r.per_class.iter().enumerate() {
            prop_assert_eq!(r.confusion[k].iter().sum::<usize>(), labels.iter().filter(|&&l| l == k).count());
            for v in [c.accuracy, c.precision, c.recall, c.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(c.f1, f1_score(c.precision, c.recall));
            prop_assert_eq!(c.auc.is_none(), r.auc_undefined.contains(&k));
        }
        prop_assert!((r.macro_f1 - macro_f1_from_matrix(&r.confusion)).abs() <= 1e-12);
    }
}

#[test]
fn gradcam_maps_are_normalized() {
    let m = generate_dataset(&tiny_spec()).unwrap();
    let clip = &m.render_split(Split::Test).unwrap()[0];
    let model = crate::model::FameModel::<f64>::build(&tiny_model(), 3).unwrap();
    let maps = grad_cam(&model, clip, 1).unwrap();
    assert_eq!(maps.len(), 3);
    for h in &maps {
        assert_eq!((h.width, h.height, h.data.len()), (8, 8, 64));
        assert!(h.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(h.max() == 1.0 || h.data.iter().all(|&v| v == 0.0));
    }
    assert!(maps.iter().any(|h| h.max() == 1.0));
    assert!(grad_cam(&model, clip, 2).is_err());
    let pgm = maps[0].to_pgm();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn zero_clip_head_gives_zero_maps() {
    let m = generate_dataset(&tiny_spec()).unwrap();
    let clip = &m.render_split(Split::Test).unwrap()[0];
    let mut model = crate::model::FameModel::<f64>::build(&tiny_model(), 3).unwrap();
    let w = model.store.find("head.clip.weight").unwrap();
    model.store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    for h in grad_cam(&model, clip, 0).unwrap() {
        assert!(h.data.iter().all(|&v| v == 0.0));
        assert_eq!(h.center_of_mass(), None);
    }
}

#[test]
fn center_of_mass_of_a_single_pixel() {
    let mut data = vec![0.0; 16];
    data[4 * 2 + 3] = 1.0;
    assert_eq!(Heatmap { width: 4, height: 4, data }.center_of_mass(), Some((3.0, 2.0)));
}

#[test]
fn ablation_rows_match_param_counts() {
    let m = generate_dataset(&tiny_spec()).unwrap();
    let train_clips = m.render_split(Split::Train).unwrap();
    let test_clips = m.render_split(Split::Test).unwrap();
    let variants = standard_variants(&tiny_model());
    let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, ["baseline", "spatial-only", "temporal-only", "full"]);
    let pair = [variants[0].clone(), variants[3].clone()];
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
    let table = ablate::<f64>(&pair, &train_clips, &test_clips, &[1.0, 1.0], &cfg, 0).unwrap();
    assert_eq!(table.rows.len(), 2);
    for (row, v) in table.rows.iter().zip(&pair) {
        assert_eq!(row.params, crate::model::FameModel::<f64>::build(&v.config, 0).unwrap().count_params());
    }
    assert!(table.row("full").unwrap().params > table.row("baseline").unwrap().params);
    assert!(ablate::<f64>(&pair[..1], &train_clips, &test_clips, &[1.0, 1.0], &cfg, 0).is_err());
    let text = table.to_text(&[]);
    assert!(text.contains("baseline\t") && text.contains("timing.full.seconds"));
}

#[test]
fn evaluate_is_deterministic() {
    let m = generate_dataset(&tiny_spec()).unwrap();
    let model = crate::model::FameModel::<f64>::build(&tiny_model(), 5).unwrap();
    let a = evaluate(&model, &m, Split::Test).unwrap();
    let b = evaluate(&model, &m, Split::Test).unwrap();
    assert_eq!(strip_timing(&a.to_text(&[])), strip_timing(&b.to_text(&[])));
    assert_eq!(a.samples, 2);
}
