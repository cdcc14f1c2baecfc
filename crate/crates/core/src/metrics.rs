//! Segmentation quality measures: global accuracy, mIoU over an aggregated
//! confusion matrix, and the regularization effect (RE), a scaled total
//! variation of the predicted label map.

use crate::error::{Error, Result};
use crate::field::{Field3, LabelMap};
use crate::grid::tv_value;

/// Confusion counts indexed `[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        check_same_shape(pred, truth)?;
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::InvalidConfig(format!(
                    "label {} out of range for {} classes",
                    p.max(t),
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Percentage of correctly labelled pixels.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        100.0 * correct as f64 / total as f64
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..self.classes)
                    .filter(|&p| p != c)
                    .map(|p| self.count(c, p))
                    .sum();
                let fp: u64 = (0..self.classes)
                    .filter(|&t| t != c)
                    .map(|t| self.count(t, c))
                    .sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU in percent over the classes that occur.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        100.0 * present.iter().sum::<f64>() / present.len() as f64
    }
}

fn check_same_shape(pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::ShapeMismatch {
            what: "label maps".into(),
            expected: format!("{}x{}", truth.height(), truth.width()),
            got: format!("{}x{}", pred.height(), pred.width()),
        });
    }
    Ok(())
}

pub fn global_accuracy(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let correct = pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .filter(|(a, b)| a == b)
        .count();
    Ok(100.0 * correct as f64 / pred.len() as f64)
}

pub fn miou(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth)?;
    Ok(cm.miou())
}

/// How a label map is turned into a field before measuring its variation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReMode {
    /// The raw class indices as a single-channel image. Depends on the
    /// numbering of the classes.
    #[default]
    LabelIndex,
    /// Sum over per-class binary indicator maps.
    OneHot,
}

/// `100 / (N1 N2) * sum_ij |grad u_ij|` on the chosen representation.
pub fn regularization_effect(u: &LabelMap, mode: ReMode) -> f64 {
    let field = match mode {
        ReMode::LabelIndex => u.to_field(),
        ReMode::OneHot => u.one_hot(u.max_label() as usize + 1),
    };
    regularization_effect_field(&field)
}

/// RE of a real field; channels are summed.
pub fn regularization_effect_field(u: &Field3) -> f64 {
    100.0 * tv_value(u) / u.shape().pixels() as f64
}

/// One line of a robustness table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub noise_kind: String,
    pub level: f64,
    pub miou: f64,
    pub accuracy: f64,
    pub re: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "model,noise_kind,level,miou,accuracy,re";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.4},{:.4},{:.4}",
            self.model, self.noise_kind, self.level, self.miou, self.accuracy, self.re
        )
    }
}
