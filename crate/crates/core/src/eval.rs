//! Confusion matrices, per-class IoU and grouped mIoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, LabelMap, BACKGROUND, IGNORE};
use crate::error::{contract, Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ClassId>,
    pub counts: Vec<u64>,
    /// Predictions of this id are scored as background.
    pub unknown_id: Option<ClassId>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<ClassId>, unknown_id: Option<ClassId>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![0; k * k],
            unknown_id,
        }
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    fn index(&self, c: ClassId) -> Option<usize> {
        self.classes.iter().position(|&x| x == c)
    }

    pub fn get(&self, gt: ClassId, pred: ClassId) -> u64 {
        match (self.index(gt), self.index(pred)) {
            (Some(g), Some(p)) => self.counts[g * self.size() + p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, prediction: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (prediction.height, prediction.width) != (gt.height, gt.width) {
            return Err(contract("prediction and ground truth differ in shape"));
        }
        let k = self.size();
        for (&p, &g) in prediction.data.iter().zip(&gt.data) {
            if g == IGNORE {
                continue;
            }
            let gi = self
                .index(g)
                .ok_or_else(|| contract(format!("ground truth class {g} is not evaluated")))?;
            let p = if Some(p) == self.unknown_id { BACKGROUND } else { p };
            let pi = self
                .index(p)
                .ok_or_else(|| contract(format!("predicted class {p} is not evaluated")))?;
            self.counts[gi * k + pi] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(contract("confusion matrices cover different classes"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `None` when the class is absent from both ground truth and prediction.
    pub fn iou(&self, class: ClassId) -> Option<f64> {
        let i = self.index(class)?;
        let k = self.size();
        let tp = self.counts[i * k + i];
        let row: u64 = self.counts[i * k..(i + 1) * k].iter().sum();
        let col: u64 = (0..k).map(|r| self.counts[r * k + i]).sum();
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

/// Mean IoU over `subset`, skipping zero-denominator classes.
pub fn miou(cm: &ConfusionMatrix, subset: &[ClassId]) -> Result<f64> {
    if subset.is_empty() {
        return Err(contract("empty class subset"));
    }
    let vals: Vec<f64> = subset.iter().filter_map(|&c| cm.iou(c)).collect();
    if vals.is_empty() {
        return Err(Error::UndefinedMetric(format!("no class of {subset:?} was observed")));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsGroup {
    pub per_class: BTreeMap<ClassId, Option<f64>>,
    /// Classes seen at the first step.
    pub old: Option<f64>,
    /// Classes added afterwards.
    pub new: Option<f64>,
    /// Every seen class, background excluded.
    pub all: Option<f64>,
    pub all_with_bg: Option<f64>,
    /// Classes with no pixels in gt or prediction.
    pub excluded: Vec<ClassId>,
}

impl MetricsGroup {
    pub fn from_confusion(cm: &ConfusionMatrix, initial: &[ClassId], added: &[ClassId]) -> Self {
        let per_class: BTreeMap<ClassId, Option<f64>> = cm.classes.iter().map(|&c| (c, cm.iou(c))).collect();
        let excluded = per_class
            .iter()
            .filter(|(_, v)| v.is_none())
            .map(|(&c, _)| c)
            .collect();
        let non_empty = |s: &[ClassId]| if s.is_empty() { None } else { miou(cm, s).ok() };
        let all: Vec<ClassId> = initial.iter().chain(added).copied().collect();
        let with_bg: Vec<ClassId> = std::iter::once(BACKGROUND).chain(all.iter().copied()).collect();
        Self {
            old: non_empty(initial),
            new: non_empty(added),
            all: non_empty(&all),
            all_with_bg: non_empty(&with_bg),
            per_class,
            excluded,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn class_order_summary(values: &[f64]) -> Result<OrderSummary> {
    if values.len() < 2 {
        return Err(contract("summary needs at least two class orders"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(OrderSummary { mean, std: var.sqrt() })
}
