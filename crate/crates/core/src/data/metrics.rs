use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::{LabelMask, VOID};
use crate::error::{Error, Result};

/// `counts[i * K + j]`: pixels with ground truth `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one prediction/ground-truth pair; void ground truth is skipped.
    pub fn add(&mut self, prediction: &LabelMask, truth: &LabelMask) -> Result<()> {
        if (prediction.height(), prediction.width()) != (truth.height(), truth.width()) {
            return Err(Error::shape(
                "evaluate",
                format!("{}x{}", truth.height(), truth.width()),
                format!("{}x{}", prediction.height(), prediction.width()),
            ));
        }
        let k = self.num_classes;
        for (&p, &t) in prediction.labels().iter().zip(truth.labels()) {
            if t == VOID {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= k || p >= k {
                return Err(Error::InvalidArgument(format!(
                    "label pair (truth {t}, prediction {p}) outside {k} classes"
                )));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("ConfusionMatrix::merge", self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Ground-truth pixels per class (`t_i`).
    pub fn truth_totals(&self) -> Vec<u64> {
        self.counts.chunks(self.num_classes).map(|r| r.iter().sum()).collect()
    }

    /// Predicted pixels per class.
    pub fn predicted_totals(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|j| (0..self.num_classes).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Intersection over union of one class; `None` when the class neither
    /// occurs nor is predicted.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let t = self.truth_totals()[class];
        let p = self.predicted_totals()[class];
        let c = self.get(class, class);
        let union = t + p - c;
        (union > 0).then(|| c as f64 / union as f64)
    }

    /// Mean IoU over the listed classes that have a defined IoU.
    pub fn mean_iou_over(&self, classes: &[usize]) -> Option<f64> {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.class_iou(c)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn metrics(&self) -> Result<Evaluation> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let t = self.truth_totals();
        let k = self.num_classes;
        let correct: u64 = (0..k).map(|i| self.get(i, i)).sum();
        let recalls: Vec<f64> = (0..k)
            .filter(|&i| t[i] > 0)
            .map(|i| self.get(i, i) as f64 / t[i] as f64)
            .collect();
        let per_class_iou: Vec<Option<f64>> = (0..k).map(|i| self.class_iou(i)).collect();
        let ious: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Ok(Evaluation {
            pixel_acc: correct as f64 / total as f64,
            mean_acc: recalls.iter().sum::<f64>() / recalls.len() as f64,
            iou: ious.iter().sum::<f64>() / ious.len() as f64,
            per_class_iou,
            confusion: self.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub pixel_acc: f64,
    /// Mean per-class recall over classes present in the ground truth.
    pub mean_acc: f64,
    /// Mean IoU over classes present in the ground truth or the prediction.
    pub iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Pixel accuracy, mean accuracy and mean IoU of `predictions` against
/// `ground_truth`, pairing masks by position.
pub fn evaluate(predictions: &[LabelMask], ground_truth: &[LabelMask], num_classes: usize) -> Result<Evaluation> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape("evaluate", ground_truth.len(), predictions.len()));
    }
    let parts = predictions
        .par_iter()
        .zip(ground_truth)
        .map(|(p, t)| {
            let mut cm = ConfusionMatrix::new(num_classes);
            cm.add(p, t)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(num_classes);
    for part in &parts {
        cm.merge(part)?;
    }
    cm.metrics()
}

/// Metric report with optional class names.
pub struct MetricReport<'a> {
    pub evaluation: &'a Evaluation,
    pub class_names: &'a [String],
}

impl MetricReport<'_> {
    fn name(&self, i: usize) -> String {
        self.class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"))
    }

    /// `metric<TAB>value` lines, then one `iou.<class>` line per class.
    pub fn to_tsv(&self) -> String {
        let e = self.evaluation;
        let mut s = String::from("metric\tvalue\n");
        for (k, v) in [("pixel_acc", e.pixel_acc), ("mean_acc", e.mean_acc), ("iou", e.iou)] {
            writeln!(s, "{k}\t{v:.6}").unwrap();
        }
        for (i, v) in e.per_class_iou.iter().enumerate() {
            let v = v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"));
            writeln!(s, "iou.{}\t{v}", self.name(i)).unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        let e = self.evaluation;
        let per_class: serde_json::Map<String, serde_json::Value> = e
            .per_class_iou
            .iter()
            .enumerate()
            .map(|(i, v)| (self.name(i), serde_json::json!(v)))
            .collect();
        let doc = serde_json::json!({
            "pixel_acc": e.pixel_acc,
            "mean_acc": e.mean_acc,
            "iou": e.iou,
            "per_class_iou": per_class,
            "confusion": e.confusion.counts.chunks(e.confusion.num_classes).collect::<Vec<_>>(),
        });
        serde_json::to_string_pretty(&doc).expect("serializable report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(labels: &[u8]) -> LabelMask {
        LabelMask::new(1, labels.len(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = mask(&[0, 1, 2, 2, VOID]);
        let e = evaluate(&[mask(&[0, 1, 2, 2, 0])], &[gt], 3).unwrap();
        assert_eq!((e.pixel_acc, e.mean_acc, e.iou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_two_class_case() {
        // c = [[3, 1], [2, 4]]
        let gt = mask(&[0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let pred = mask(&[0, 0, 0, 1, 0, 0, 1, 1, 1, 1]);
        let e = evaluate(&[pred], &[gt], 2).unwrap();
        assert_eq!(e.confusion.counts, vec![3, 1, 2, 4]);
        assert!((e.pixel_acc - 0.7).abs() < 1e-15);
        assert!((e.mean_acc - (3.0 / 4.0 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((e.iou - (3.0 / 6.0 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let e = evaluate(&[mask(&[0, 0])], &[mask(&[0, 0])], 4).unwrap();
        assert_eq!(e.iou, 1.0);
        assert_eq!(e.per_class_iou, vec![Some(1.0), None, None, None]);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(matches!(
            evaluate(&[mask(&[0])], &[mask(&[VOID])], 2),
            Err(Error::EmptyEvaluation)
        ));
        assert!(evaluate(&[mask(&[0, 1])], &[mask(&[0])], 2).is_err());
        assert!(evaluate(&[mask(&[2])], &[mask(&[0])], 2).is_err());
        assert!(evaluate(&[], &[mask(&[0])], 2).is_err());
    }

    #[test]
    fn reports_render() {
        let e = evaluate(&[mask(&[0, 1])], &[mask(&[0, 0])], 3).unwrap();
        let names = vec!["sky".to_owned()];
        let r = MetricReport {
            evaluation: &e,
            class_names: &names,
        };
        let tsv = r.to_tsv();
        assert!(tsv.contains("pixel_acc\t0.500000"));
        assert!(tsv.contains("iou.sky\t0.500000"));
        assert!(tsv.contains("iou.class2\tNA"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["iou"], serde_json::json!(e.iou));
        assert_eq!(json["per_class_iou"]["class2"], serde_json::Value::Null);
    }
}
