use crate::error::{contract_err, FameError, Result};

/// One-vs-rest ROC staircase from `(0, 0)` to `(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` points, non-decreasing in both coordinates.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// Sweeps thresholds over distinct scores, highest first. Samples with
    /// equal scores enter together, giving one diagonal segment per tie group.
    /// `None` when either class is absent.
    pub fn from_scores(scores: &[f64], positive: &[bool]) -> Result<Option<Self>> {
        if scores.len() != positive.len() {
            return Err(contract_err!("{} scores for {} labels", scores.len(), positive.len()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(FameError::NonFinite(format!("ROC score {bad}")));
        }
        let n_pos = positive.iter().filter(|&&p| p).count();
        let n_neg = positive.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Ok(None);
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

        let mut points = vec![(0.0, 0.0)];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let s = scores[order[i]];
            while i < order.len() && scores[order[i]] == s {
                if positive[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        }
        let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        Ok(Some(RocCurve { points, auc }))
    }

    /// `fpr<TAB>tpr` lines after `#` header lines.
    pub fn to_tsv(&self, header: &[String]) -> String {
        let mut out: String = header.iter().map(|h| format!("# {h}\n")).collect();
        out.push_str("# fpr\ttpr\n");
        for (x, y) in &self.points {
            out.push_str(&format!("{x}\t{y}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocReport {
    /// Per class; `None` where the class has no positives or no negatives.
    pub curves: Vec<Option<RocCurve>>,
    /// Mean over defined classes.
    pub macro_auc: Option<f64>,
    /// Classes excluded from the macro.
    pub undefined: Vec<usize>,
}

/// One-vs-rest curves using column `k` of `probs` as the class-`k` score.
pub fn roc_auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<RocReport> {
    if probs.len() != labels.len() {
        return Err(contract_err!("{} score rows for {} labels", probs.len(), labels.len()));
    }
    if let Some(row) = probs.iter().find(|r| r.len() != classes) {
        return Err(contract_err!("score row of length {} for {classes} classes", row.len()));
    }
    let mut curves = Vec::with_capacity(classes);
    for k in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        curves.push(RocCurve::from_scores(&scores, &positive)?);
    }
    let undefined: Vec<usize> = (0..classes).filter(|&k| curves[k].is_none()).collect();
    let defined: Vec<f64> = curves.iter().flatten().map(|c| c.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RocReport { curves, macro_auc, undefined })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Fraction of positive–negative pairs ranked correctly, ties 0.5.
    fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn separated_scores_give_unit_auc() {
        let c = RocCurve::from_scores(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap().unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.points, vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
        let r = RocCurve::from_scores(&[0.1, 0.2, 0.8], &[true, true, false]).unwrap().unwrap();
        assert_eq!(r.auc, 0.0);
    }

    #[test]
    fn identical_scores_give_one_diagonal_segment() {
        let c = RocCurve::from_scores(&[0.4; 6], &[true, false, true, false, false, true]).unwrap().unwrap();
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(c.auc, 0.5);
    }

    #[test]
    fn missing_class_is_undefined_and_excluded() {
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.6, 0.3, 0.1]];
        let r = roc_auc(&probs, &[0, 1, 0], 3).unwrap();
        assert_eq!(r.undefined, vec![2]);
        assert!(r.curves[2].is_none());
        assert_eq!(r.macro_auc, Some(1.0));
        assert!(RocCurve::from_scores(&[f64::NAN], &[true]).is_err());
    }

    #[test]
    fn matches_pairwise_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = 30;
            // Coarse grid forces ties.
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            positive[0] = true;
            positive[1] = false;
            let c = RocCurve::from_scores(&scores, &positive).unwrap().unwrap();
            assert!((c.auc - mann_whitney(&scores, &positive)).abs() <= 1e-12);
        }
    }

    #[test]
    fn tsv_has_one_line_per_point() {
        let c = RocCurve::from_scores(&[0.9, 0.1], &[true, false]).unwrap().unwrap();
        let text = c.to_tsv(&["class=0".into()]);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), c.points.len());
        assert!(text.contains("\n0\t1\n"));
    }

    proptest! {
        #[test]
        fn curves_are_anchored_monotone_staircases(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0)).collect();
            let positive: Vec<bool> = data.iter().map(|d| d.1).collect();
            if let Some(c) = RocCurve::from_scores(&scores, &positive).unwrap() {
                prop_assert_eq!(c.points[0], (0.0, 0.0));
                prop_assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
                prop_assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
                prop_assert!((0.0..=1.0).contains(&c.auc));
                prop_assert!((c.auc - mann_whitney(&scores, &positive)).abs() <= 1e-12);
            }
        }
    }
}
