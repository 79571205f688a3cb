//! Confusion matrices, per-class IoU and grouped mIoU reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::IGNORE_ID;

/// Pixel counts indexed by `(truth, prediction)` over `classes` ids
/// (background included).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Pixels whose truth is [`IGNORE_ID`] are skipped.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Internal(format!(
                "prediction has {} pixels, labels {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_ID {
                continue;
            }
            let t = t as usize;
            if t >= self.classes || p >= self.classes {
                return Err(Error::Internal(format!(
                    "class id out of range: truth {t}, prediction {p}, {} classes",
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Internal(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// prediction and truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.true_positives(c);
        let denom = tp + self.false_positives(c) + self.false_negatives(c);
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: usize,
    pub class_name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: usize,
    pub seed: u64,
    pub config_hash: String,
    pub classes: Vec<ClassIou>,
    /// Background plus the stage-0 foreground classes.
    pub miou_initial: Option<f64>,
    pub miou_incremental: Option<f64>,
    pub miou_all: Option<f64>,
    pub pixel_accuracy: f64,
}

/// Mean of the defined IoUs among `ids`.
pub fn mean_iou(classes: &[ClassIou], ids: impl IntoIterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = ids.into_iter().filter_map(|c| classes.get(c).and_then(|x| x.iou)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Builds a report. Ids `0..=initial` form the initial group, the remaining
/// learned ids the incremental group. `names[c]` labels class `c`.
pub fn report(cm: &ConfusionMatrix, initial: usize, stage: usize, names: &[String]) -> Result<MetricsReport> {
    let pixel_accuracy = cm
        .pixel_accuracy()
        .ok_or_else(|| Error::Usage("empty confusion matrix".into()))?;
    let n = cm.classes();
    if names.len() != n || initial >= n {
        return Err(Error::Usage(format!(
            "{} names and {initial} initial classes for a {n}-class matrix",
            names.len()
        )));
    }
    let classes: Vec<ClassIou> = (0..n)
        .map(|c| ClassIou {
            class_id: c,
            class_name: names[c].clone(),
            tp: cm.true_positives(c),
            fp: cm.false_positives(c),
            fn_: cm.false_negatives(c),
            iou: cm.iou(c),
        })
        .collect();
    Ok(MetricsReport {
        stage,
        seed: 0,
        config_hash: String::new(),
        miou_initial: mean_iou(&classes, 0..=initial),
        miou_incremental: mean_iou(&classes, initial + 1..n),
        miou_all: mean_iou(&classes, 0..n),
        classes,
        pixel_accuracy,
    })
}

impl MetricsReport {
    /// `class_id,class_name,TP,FP,FN,IoU`; undefined IoUs are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,class_name,TP,FP,FN,IoU\n");
        for c in &self.classes {
            let iou = c.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(out, "{},{},{},{},{},{}", c.class_id, c.class_name, c.tp, c.fp, c.fn_, iou).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
