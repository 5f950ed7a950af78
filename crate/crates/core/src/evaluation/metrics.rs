use super::roc::{roc_auc, RocReport};
use crate::error::{contract_err, FameError, Result};
use crate::model::attribute;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    /// Fraction of this class's clips attributed to it.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest; `None` without positives or negatives.
    pub auc: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auc: Option<f64>,
    pub auc_undefined: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub roc: RocReport,
    pub seconds_per_clip: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Metrics from per-clip logits. Predictions are logit argmaxes and ROC
    /// scores the softmax probabilities.
    pub fn from_logits(logits: &[Vec<f64>], labels: &[usize], classes: usize, seconds_per_clip: f64) -> Result<Self> {
        if logits.is_empty() {
            return Err(FameError::Config("no samples to evaluate".into()));
        }
        if logits.len() != labels.len() {
            return Err(contract_err!("{} logit rows for {} labels", logits.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract_err!("label {bad} out of range for {classes} classes"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut probs = Vec::with_capacity(logits.len());
        for (row, &y) in logits.iter().zip(labels) {
            if row.len() != classes {
                return Err(contract_err!("logit row of length {} for {classes} classes", row.len()));
            }
            let (pred, p) = attribute(row);
            confusion[y][pred] += 1;
            probs.push(p);
        }
        let roc = roc_auc(&probs, labels, classes)?;
        Ok(Self::from_confusion(confusion, roc, seconds_per_clip))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>, roc: RocReport, seconds_per_clip: f64) -> Self {
        let classes = confusion.len();
        let samples: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let per_class: Vec<ClassMetrics> = (0..classes)
            .map(|k| {
                let support: usize = confusion[k].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[k]).sum();
                let recall = ratio(confusion[k][k], support);
                let precision = ratio(confusion[k][k], predicted);
                ClassMetrics {
                    accuracy: recall,
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    auc: roc.curves.get(k).and_then(|c| c.as_ref().map(|c| c.auc)),
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
        MetricsReport {
            classes,
            samples,
            accuracy: ratio(trace, samples),
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            macro_auc: roc.macro_auc,
            auc_undefined: roc.undefined.clone(),
            per_class,
            confusion,
            roc,
            seconds_per_clip,
        }
    }

    /// Key-value blocks, one per class, then the confusion matrix. Floats are
    /// written in shortest round-trip form. Timing sits on its own
    /// `timing.` line at the end.
    pub fn to_text(&self, header: &[String]) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |a| a.to_string());
        let mut out = String::from("# fame-metrics v1\n");
        out.extend(header.iter().map(|h| format!("# {h}\n")));
        out.push_str(&format!("classes = {}\nsamples = {}\naccuracy = {}\n", self.classes, self.samples, self.accuracy));
        out.push_str(&format!(
            "macro.precision = {}\nmacro.recall = {}\nmacro.f1 = {}\nmacro.auc = {}\n",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            opt(self.macro_auc)
        ));
        let undefined: Vec<String> = self.auc_undefined.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "auc.undefined = {}\n",
            if undefined.is_empty() { "none".into() } else { undefined.join(",") }
        ));
        for (k, c) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "\n[class {k}]\nsupport = {}\naccuracy = {}\nprecision = {}\nrecall = {}\nf1 = {}\nauc = {}\n",
                c.support,
                c.accuracy,
                c.precision,
                c.recall,
                c.f1,
                opt(c.auc)
            ));
        }
        out.push_str("\n[confusion]\n# rows: true class, columns: predicted class\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out.push_str(&format!("\ntiming.seconds_per_clip = {}\n", self.seconds_per_clip));
        out
    }
}

/// Drops `timing.` lines so reports can be compared byte for byte.
pub fn strip_timing(report: &str) -> String {
    report.lines().filter(|l| !l.starts_with("timing.")).map(|l| format!("{l}\n")).collect()
}
