//! Unknown-class assignment and uncertainty-aware pseudo labels from the
//! frozen previous model's soft map.

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassPartition, LabelMap, IGNORE};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CertaintyMaps {
    pub height: usize,
    pub width: usize,
    /// Gap between the two highest scores.
    pub certainty: Vec<f64>,
    /// Gap between the highest and the lowest score.
    pub range: Vec<f64>,
    /// Soft map weighted by `1 − certainty`, K×H×W.
    pub uncertainty: Tensor,
    pub top_row: Vec<usize>,
    pub top_score: Vec<f64>,
}

impl CertaintyMaps {
    /// `u / Δ`, with `Δ = 0` read as 0.
    pub fn stability(&self, i: usize) -> f64 {
        stability_ratio(self.certainty[i], self.range[i])
    }
}

pub fn stability_ratio(u: f64, range: f64) -> f64 {
    if range > 0.0 {
        u / range
    } else {
        0.0
    }
}

/// Top score, second score, lowest score and argmax (first on ties).
pub fn pixel_extremes(probs: impl Iterator<Item = f64>) -> (f64, f64, f64, usize) {
    let (mut h, mut h2, mut l, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY, 0);
    for (r, p) in probs.enumerate() {
        if p > h {
            h2 = h;
            h = p;
            arg = r;
        } else if p > h2 {
            h2 = p;
        }
        l = l.min(p);
    }
    (h, h2, l, arg)
}

pub fn certainty_maps(soft_map: &Tensor) -> Result<CertaintyMaps> {
    let (k, h, w) = soft_map.chw()?;
    if k < 2 {
        return Err(contract("certainty needs at least two classes"));
    }
    let n = h * w;
    let d = soft_map.data();
    let mut out = CertaintyMaps {
        height: h,
        width: w,
        certainty: Vec::with_capacity(n),
        range: Vec::with_capacity(n),
        uncertainty: Tensor::zeros(vec![k, h, w]),
        top_row: Vec::with_capacity(n),
        top_score: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (top, second, low, arg) = pixel_extremes((0..k).map(|r| d[r * n + i]));
        out.certainty.push(top - second);
        out.range.push(top - low);
        out.top_row.push(arg);
        out.top_score.push(top);
    }
    let u = out.uncertainty.data_mut();
    for r in 0..k {
        for i in 0..n {
            u[r * n + i] = d[r * n + i] * (1.0 - out.certainty[i]);
        }
    }
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoThresholds {
    /// Confidence threshold on the top score.
    pub gamma: f64,
    /// Threshold on the stability ratio `u / Δ`.
    pub zeta_norm: f64,
}

impl Default for PseudoThresholds {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            zeta_norm: 0.2,
        }
    }
}

impl PseudoThresholds {
    /// From a ζ whose reciprocal thresholds the ratio.
    pub fn from_zeta(gamma: f64, zeta: f64) -> Self {
        Self {
            gamma,
            zeta_norm: 1.0 / zeta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(crate::error::config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.zeta_norm > 0.0 && self.zeta_norm <= 1.0) {
            return Err(crate::error::config(format!("zeta_norm {} outside (0, 1]", self.zeta_norm)));
        }
        Ok(())
    }
}

/// The argmax class of one pixel, relative to the current step.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Predicted {
    Background,
    Old,
    Other,
}

/// Background-predicted, unconfident and unstable.
pub fn is_unknown(pred: Predicted, top: f64, ratio: f64, th: PseudoThresholds) -> bool {
    pred == Predicted::Background && top < th.gamma && ratio < th.zeta_norm
}

/// Confident and stable old-class prediction; never fires for `Δ = 0`.
pub fn keeps_old(pred: Predicted, top: f64, ratio: f64, range: f64, th: PseudoThresholds) -> bool {
    pred == Predicted::Old && range > 0.0 && top >= th.gamma && ratio >= th.zeta_norm
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Branch {
    KeepOld,
    Unknown,
    Background,
}

/// Per-pixel pseudo-label rule from the top score, the top-two gap `u`
/// and the top-to-lowest range.
pub fn pixel_branch(
    pred: Predicted,
    top: f64,
    u: f64,
    range: f64,
    th: PseudoThresholds,
    unknown_modelling: bool,
) -> Branch {
    let ratio = stability_ratio(u, range);
    if keeps_old(pred, top, ratio, range, th) {
        Branch::KeepOld
    } else if unknown_modelling && is_unknown(pred, top, ratio, th) {
        Branch::Unknown
    } else {
        Branch::Background
    }
}

pub fn predicted(partition: &ClassPartition, class: ClassId) -> Predicted {
    if class == partition.background_id {
        Predicted::Background
    } else if partition.is_old(class) {
        Predicted::Old
    } else {
        Predicted::Other
    }
}

fn row_class(rows: &[ClassId], r: usize) -> Result<ClassId> {
    rows.get(r)
        .copied()
        .ok_or_else(|| contract(format!("soft map row {r} has no class")))
}

/// Unknown mask from a soft map whose rows are `rows`.
pub fn assign_unknown(
    soft_map: &Tensor,
    rows: &[ClassId],
    partition: &ClassPartition,
    th: PseudoThresholds,
) -> Result<Vec<bool>> {
    let maps = certainty_maps(soft_map)?;
    (0..maps.certainty.len())
        .map(|i| {
            let c = row_class(rows, maps.top_row[i])?;
            Ok(is_unknown(predicted(partition, c), maps.top_score[i], maps.stability(i), th))
        })
        .collect()
}

/// Three-way assignment per pixel: the old prediction when confident and
/// stable, unknown when background-predicted and ambiguous, else background.
/// `soft_map` comes from the frozen model with output rows `rows`.
pub fn pseudo_labels(
    soft_map: &Tensor,
    rows: &[ClassId],
    partition: &ClassPartition,
    th: PseudoThresholds,
    unknown_modelling: bool,
) -> Result<LabelMap> {
    if partition.step_index == 0 {
        return Err(contract("pseudo labels need a previous step"));
    }
    let maps = certainty_maps(soft_map)?;
    let mut data = Vec::with_capacity(maps.certainty.len());
    for i in 0..maps.certainty.len() {
        let c = row_class(rows, maps.top_row[i])?;
        let p = predicted(partition, c);
        data.push(match pixel_branch(p, maps.top_score[i], maps.certainty[i], maps.range[i], th, unknown_modelling) {
            Branch::KeepOld => c,
            Branch::Unknown => partition.unknown_id,
            Branch::Background => partition.background_id,
        });
    }
    Ok(LabelMap {
        height: maps.height,
        width: maps.width,
        data,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Gt,
    Pseudo,
    Unknown,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedLabelMap {
    pub labels: LabelMap,
    pub provenance: Vec<Provenance>,
}

impl FusedLabelMap {
    /// Labels for cross-entropy: unknown pixels become ignore.
    pub fn ce_labels(&self) -> LabelMap {
        let mut out = self.labels.clone();
        for (v, p) in out.data.iter_mut().zip(&self.provenance) {
            if *p == Provenance::Unknown {
                *v = IGNORE;
            }
        }
        out
    }

    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for p in &self.provenance {
            h[*p as usize] += 1;
        }
        h
    }
}

/// Current-class ground truth wins; every other pixel takes the pseudo value.
pub fn fuse_labels(pseudo: &LabelMap, gt: &LabelMap, partition: &ClassPartition) -> Result<FusedLabelMap> {
    if (pseudo.height, pseudo.width) != (gt.height, gt.width) {
        return Err(contract(format!(
            "pseudo {}×{} vs gt {}×{}",
            pseudo.height, pseudo.width, gt.height, gt.width
        )));
    }
    let mut data = Vec::with_capacity(gt.data.len());
    let mut provenance = Vec::with_capacity(gt.data.len());
    for (&g, &p) in gt.data.iter().zip(&pseudo.data) {
        let (v, src) = if partition.is_new(g) {
            (g, Provenance::Gt)
        } else if g == IGNORE {
            (IGNORE, Provenance::Gt)
        } else if p == partition.unknown_id {
            (p, Provenance::Unknown)
        } else if p == partition.background_id {
            (p, Provenance::Background)
        } else {
            (p, Provenance::Pseudo)
        };
        data.push(v);
        provenance.push(src);
    }
    Ok(FusedLabelMap {
        labels: LabelMap {
            height: gt.height,
            width: gt.width,
            data,
        },
        provenance,
    })
}

/// Ground truth alone, for training without pseudo labels.
pub fn gt_only(gt: &LabelMap) -> FusedLabelMap {
    let provenance = gt
        .data
        .iter()
        .map(|_| Provenance::Gt)
        .collect();
    FusedLabelMap {
        labels: gt.clone(),
        provenance,
    }
}
