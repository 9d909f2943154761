//! Disentangled distillation: prototype matching on semantic-invariant
//! channels, feature preserving with an asymmetric triplet hinge on
//! sample-specific channels, and their mean over distillation stages.
//!
//! Prototypes are stored over every channel of their stage. Losses project
//! them onto the semantic-invariant channels selected for the current batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{ClassId, ClassPartition, LabelMap};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// How prototype distances reduce over the projected channels.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoDistance {
    /// Squared Euclidean distance.
    Sum,
    /// Squared Euclidean distance divided by the channel count.
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoState {
    pub vector: Vec<f64>,
    pub updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub dim: usize,
    pub momentum: f64,
    pub current: BTreeMap<ClassId, ProtoState>,
    /// Prototypes frozen at the end of the previous step.
    pub frozen: BTreeMap<ClassId, Vec<f64>>,
    pub background: Option<Vec<f64>>,
    pub unknown: Option<ProtoState>,
}

impl PrototypeStore {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self {
            dim,
            momentum,
            current: BTreeMap::new(),
            frozen: BTreeMap::new(),
            background: None,
            unknown: None,
        }
    }

    fn blend(&self, state: Option<&ProtoState>, batch: &[f64]) -> ProtoState {
        match state {
            Some(s) => ProtoState {
                vector: s
                    .vector
                    .iter()
                    .zip(batch)
                    .map(|(o, b)| self.momentum * o + (1.0 - self.momentum) * b)
                    .collect(),
                updates: s.updates + 1,
            },
            None => ProtoState {
                vector: batch.to_vec(),
                updates: 1,
            },
        }
    }

    /// Running-average update from batch prototypes (values).
    pub fn commit(&mut self, batch: &BTreeMap<ClassId, Vec<f64>>, unknown: Option<&[f64]>) {
        for (&k, v) in batch {
            let next = self.blend(self.current.get(&k), v);
            self.current.insert(k, next);
        }
        if let Some(u) = unknown {
            self.unknown = Some(self.blend(self.unknown.as_ref(), u));
        }
    }

    /// Masked-average-pooling update from detached feature maps.
    pub fn update(
        &mut self,
        features: &[&Tensor],
        labels: &[LabelMap],
        partition: &ClassPartition,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant((*f).clone())).collect();
        let classes = partition.known_classes();
        let batch = batch_prototypes(&mut tape, &vars, labels, &classes)?;
        let unknown = batch_prototypes(&mut tape, &vars, labels, &[partition.unknown_id])?;
        let values = batch
            .iter()
            .map(|(&k, &v)| (k, tape.value(v).data().to_vec()))
            .collect();
        let u = unknown.get(&partition.unknown_id).map(|&v| tape.value(v).data().to_vec());
        self.commit(&values, u.as_deref());
        Ok(())
    }

    /// Current prototypes on the tape: the running average blended with this
    /// batch's (differentiable) prototype, or the stored value when absent.
    pub fn current_on_tape(&self, tape: &mut Tape, batch: &BTreeMap<ClassId, Var>) -> BTreeMap<ClassId, Var> {
        let mut out = BTreeMap::new();
        for (&k, s) in &self.current {
            if !batch.contains_key(&k) {
                out.insert(k, tape.constant(Tensor::vector(s.vector.clone())));
            }
        }
        for (&k, &b) in batch {
            let v = match self.current.get(&k) {
                Some(s) => {
                    let stored = tape.constant(Tensor::vector(s.vector.iter().map(|v| self.momentum * v).collect()));
                    let fresh = tape.scale(b, 1.0 - self.momentum);
                    tape.add(stored, fresh).expect("prototype dims")
                }
                None => b,
            };
            out.insert(k, v);
        }
        out
    }

    /// End-of-step maintenance: freeze the current prototypes and recompute
    /// the background prototype from every class and the unknown accumulator.
    pub fn end_step(&mut self) {
        self.frozen = self
            .current
            .iter()
            .map(|(&k, s)| (k, s.vector.clone()))
            .collect();
        let members: Vec<&Vec<f64>> = self
            .current
            .values()
            .map(|s| &s.vector)
            .chain(self.unknown.as_ref().map(|u| &u.vector))
            .collect();
        if members.is_empty() {
            return;
        }
        let mut bg = vec![0.0; self.dim];
        for m in &members {
            bg.iter_mut().zip(m.iter()).for_each(|(a, b)| *a += b);
        }
        bg.iter_mut().for_each(|v| *v /= members.len() as f64);
        self.background = Some(bg);
    }
}

/// Mean over images of each image's masked average of `features` at the
/// pixels labelled `k`. Classes absent from every image are skipped.
pub fn batch_prototypes(
    tape: &mut Tape,
    features: &[Var],
    labels: &[LabelMap],
    classes: &[ClassId],
) -> Result<BTreeMap<ClassId, Var>> {
    if features.len() != labels.len() {
        return Err(contract("one label map per feature map required"));
    }
    let mut out = BTreeMap::new();
    for &k in classes {
        let mut acc: Option<Var> = None;
        let mut n = 0;
        for (&f, l) in features.iter().zip(labels) {
            let (_, h, w) = tape.value(f).chw()?;
            if (h, w) != (l.height, l.width) {
                return Err(contract(format!(
                    "labels {}×{} do not match features {h}×{w}",
                    l.height, l.width
                )));
            }
            if !l.contains(k) {
                continue;
            }
            let mask: Vec<f64> = l.data.iter().map(|&v| if v == k { 1.0 } else { 0.0 }).collect();
            let m = tape.masked_mean(f, &mask)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, m)?,
                None => m,
            });
            n += 1;
        }
        if let Some(a) = acc {
            out.insert(k, tape.scale(a, 1.0 / n as f64));
        }
    }
    Ok(out)
}

fn squared_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)))
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SpmTerms {
    pub intra: Var,
    pub inter: Var,
    pub total: Var,
}

/// Prototype matching loss on the channels `si`.
///
/// `intra` is the mean squared distance of old-class prototypes to their
/// frozen predecessors; `inter` averages, over classes with a current
/// prototype, the inverse squared distances to every other frozen prototype
/// and to the background prototype (each stabilized by `eps`).
pub fn spm_loss(
    tape: &mut Tape,
    store: &PrototypeStore,
    current: &BTreeMap<ClassId, Var>,
    si: &[usize],
    partition: &ClassPartition,
    distance: ProtoDistance,
    eps: f64,
) -> Result<SpmTerms> {
    if partition.step_index > 0 {
        if store.background.is_none() {
            return Err(contract("prototype store has no background prototype"));
        }
        if let Some(k) = partition.old_classes.iter().find(|k| !store.frozen.contains_key(k)) {
            return Err(contract(format!("no frozen prototype for old class {k}")));
        }
    }
    if si.is_empty() {
        let z = tape.scalar(0.0);
        return Ok(SpmTerms {
            intra: z,
            inter: z,
            total: z,
        });
    }
    let scale = match distance {
        ProtoDistance::Sum => 1.0,
        ProtoDistance::Mean => (si.len() as f64).recip().sqrt(),
    };
    let project = |tape: &mut Tape, v: Var| -> Result<Var> {
        let s = tape.select(v, si)?;
        Ok(if scale == 1.0 { s } else { tape.scale(s, scale) })
    };
    let mut frozen = BTreeMap::new();
    for (&k, v) in &store.frozen {
        let c = tape.constant(Tensor::vector(v.clone()));
        frozen.insert(k, project(tape, c)?);
    }
    let bg = match &store.background {
        Some(b) => {
            let c = tape.constant(Tensor::vector(b.clone()));
            Some(project(tape, c)?)
        }
        None => None,
    };
    let mut projected = BTreeMap::new();
    for (&k, &v) in current {
        projected.insert(k, project(tape, v)?);
    }

    let mut intra_terms = Vec::new();
    for k in &partition.old_classes {
        if let (Some(&p), Some(&f)) = (projected.get(k), frozen.get(k)) {
            intra_terms.push(squared_distance(tape, p, f)?);
        } else {
            intra_terms.push(tape.scalar(0.0));
        }
    }
    let intra = match mean_of(tape, &intra_terms)? {
        Some(v) => v,
        None => tape.scalar(0.0),
    };

    let mut inter_terms = Vec::new();
    for k in partition.known_classes() {
        let Some(&p) = projected.get(&k) else { continue };
        let mut parts = Vec::new();
        for (&i, &f) in &frozen {
            if i != k {
                parts.push(f);
            }
        }
        parts.extend(bg);
        let mut acc: Option<Var> = None;
        for other in parts {
            let d = squared_distance(tape, p, other)?;
            let d = tape.add_scalar(d, eps);
            let one = tape.scalar(1.0);
            let r = tape.div(one, d)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, r)?,
                None => r,
            });
        }
        if let Some(a) = acc {
            inter_terms.push(a);
        }
    }
    let inter = match mean_of(tape, &inter_terms)? {
        Some(v) => v,
        None => tape.scalar(0.0),
    };
    let total = tape.add(intra, inter)?;
    Ok(SpmTerms { intra, inter, total })
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Triplet {
    pub class: ClassId,
    pub negative_class: ClassId,
    /// From the frozen model; constant on the tape.
    pub anchor: Var,
    pub positive: Var,
    pub negative: Var,
}

/// One triplet per class present in both maps. The negative is the current
/// model's class mean, among the other classes, closest to the anchor.
pub fn mine_triplets(
    tape: &mut Tape,
    anchors: &BTreeMap<ClassId, Var>,
    current: &BTreeMap<ClassId, Var>,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (&k, &a) in anchors {
        let Some(&p) = current.get(&k) else { continue };
        let av = tape.value(a).data().to_vec();
        let mut best: Option<(f64, ClassId, Var)> = None;
        for (&j, &n) in current {
            if j == k {
                continue;
            }
            let d: f64 = tape
                .value(n)
                .data()
                .iter()
                .zip(&av)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, j, n));
            }
        }
        if let Some((_, j, n)) = best {
            out.push(Triplet {
                class: k,
                negative_class: j,
                anchor: a,
                positive: p,
                negative: n,
            });
        }
    }
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SfpTerms {
    pub global: Var,
    pub triplet: Var,
    pub total: Var,
}

/// Feature preserving loss: mean over `(old, new)` pairs of the mean squared
/// difference, plus the mean triplet hinge
/// `max(d(a, p) − d(a, n) + margin, 0)` with squared Euclidean `d`.
pub fn sfp_loss(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
    triplets: &[Triplet],
    margin: f64,
) -> Result<SfpTerms> {
    let mut globals = Vec::with_capacity(pairs.len());
    for &(old, new) in pairs {
        let d = tape.sub(new, old)?;
        let sq = tape.square(d);
        globals.push(tape.mean(sq));
    }
    let global = match mean_of(tape, &globals)? {
        Some(v) => v,
        None => tape.scalar(0.0),
    };
    let mut hinges = Vec::with_capacity(triplets.len());
    for t in triplets {
        let dap = squared_distance(tape, t.anchor, t.positive)?;
        let dan = squared_distance(tape, t.anchor, t.negative)?;
        let diff = tape.sub(dap, dan)?;
        let shifted = tape.add_scalar(diff, margin);
        hinges.push(tape.relu(shifted));
    }
    let triplet = match mean_of(tape, &hinges)? {
        Some(v) => v,
        None => tape.scalar(0.0),
    };
    let total = tape.add(global, triplet)?;
    Ok(SfpTerms { global, triplet, total })
}

/// Mean over distillation stages of `spm_l + sfp_l`.
pub fn dd_loss(tape: &mut Tape, spm: &[Var], sfp: &[Var]) -> Result<Var> {
    if spm.is_empty() || spm.len() != sfp.len() {
        return Err(contract(format!(
            "distillation needs matching non-empty stage lists ({} vs {})",
            spm.len(),
            sfp.len()
        )));
    }
    let mut sums = Vec::with_capacity(spm.len());
    for (&a, &b) in spm.iter().zip(sfp) {
        sums.push(tape.add(a, b)?);
    }
    Ok(mean_of(tape, &sums)?.expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relevance::DEFAULT_EPS;

    fn vecvar(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    fn labels(data: Vec<ClassId>, w: usize) -> LabelMap {
        LabelMap {
            height: data.len() / w,
            width: w,
            data,
        }
    }

    #[test]
    fn constant_field_gives_constant_prototype() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![2, 1, 3], vec![0.5, 0.5, 0.5, -2.0, -2.0, -2.0]).unwrap());
        let p = batch_prototypes(&mut tape, &[f], &[labels(vec![4, 4, 4], 3)], &[4, 5]).unwrap();
        assert_eq!(tape.value(p[&4]).data(), &[0.5, -2.0]);
        assert!(!p.contains_key(&5));
    }

    #[test]
    fn two_pixel_masked_mean() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![2, 1, 3], vec![1.0, 0.0, 9.0, 0.0, 1.0, 9.0]).unwrap());
        let p = batch_prototypes(&mut tape, &[f], &[labels(vec![1, 1, 0], 3)], &[1]).unwrap();
        assert_eq!(tape.value(p[&1]).data(), &[0.5, 0.5]);
    }

    #[test]
    fn absent_class_keeps_prototype() {
        let p = ClassPartition::new(vec![], vec![1, 2], 0, 9, 0).unwrap();
        let mut store = PrototypeStore::new(1, 0.9);
        let f = Tensor::new(vec![1, 1, 2], vec![2.0, 3.0]).unwrap();
        store.update(&[&f], &[labels(vec![1, 1], 2)], &p).unwrap();
        store.update(&[&f], &[labels(vec![2, 2], 2)], &p).unwrap();
        assert_eq!(store.current[&1].vector, vec![2.5]);
        assert_eq!(store.current[&1].updates, 1);
        store.update(&[&f], &[labels(vec![1, 0], 2)], &p).unwrap();
        assert!((store.current[&1].vector[0] - (0.9 * 2.5 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn end_step_freezes_and_averages_background() {
        let mut store = PrototypeStore::new(2, 0.0);
        let mut b = BTreeMap::new();
        b.insert(1, vec![1.0, 0.0]);
        b.insert(2, vec![0.0, 1.0]);
        store.commit(&b, Some(&[1.0, 1.0]));
        store.end_step();
        assert_eq!(store.frozen[&1], vec![1.0, 0.0]);
        let bg = store.background.clone().unwrap();
        assert!((bg[0] - 2.0 / 3.0).abs() < 1e-15 && (bg[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matched_prototypes_have_zero_intra() {
        let mut store = PrototypeStore::new(2, 0.9);
        let mut b = BTreeMap::new();
        b.insert(1, vec![1.0, 2.0]);
        store.commit(&b, None);
        store.end_step();
        let p = ClassPartition::new(vec![1], vec![2], 0, 9, 1).unwrap();
        let mut tape = Tape::new();
        let cur = store.current_on_tape(&mut tape, &BTreeMap::new());
        let t = spm_loss(&mut tape, &store, &cur, &[0, 1], &p, ProtoDistance::Sum, DEFAULT_EPS).unwrap();
        assert_eq!(tape.scalar_value(t.intra), 0.0);
    }

    #[test]
    fn inter_term_arithmetic() {
        let mut store = PrototypeStore::new(2, 0.9);
        store.frozen.insert(2, vec![0.0, 1.0]);
        store.background = Some(vec![0.0, 0.0]);
        let p = ClassPartition::new(vec![], vec![1, 2], 0, 9, 0).unwrap();
        let mut tape = Tape::new();
        let mut cur = BTreeMap::new();
        cur.insert(1, vecvar(&mut tape, &[1.0, 0.0]));
        let t = spm_loss(&mut tape, &store, &cur, &[0, 1], &p, ProtoDistance::Sum, DEFAULT_EPS).unwrap();
        let expected = 1.0 / (2.0 + DEFAULT_EPS) + 1.0 / (1.0 + DEFAULT_EPS);
        assert!((tape.scalar_value(t.inter) - expected).abs() < 1e-15);
        assert_eq!(tape.scalar_value(t.intra), 0.0);
    }

    #[test]
    fn uninitialized_store_is_rejected() {
        let store = PrototypeStore::new(2, 0.9);
        let p = ClassPartition::new(vec![1], vec![2], 0, 9, 1).unwrap();
        let mut tape = Tape::new();
        assert!(spm_loss(&mut tape, &store, &BTreeMap::new(), &[0], &p, ProtoDistance::Sum, DEFAULT_EPS).is_err());
    }

    fn planted(dap: f64, dan: f64, m: f64) -> f64 {
        let mut tape = Tape::new();
        let a = vecvar(&mut tape, &[0.0]);
        let p = vecvar(&mut tape, &[dap.sqrt()]);
        let n = vecvar(&mut tape, &[dan.sqrt()]);
        let t = Triplet {
            class: 1,
            negative_class: 2,
            anchor: a,
            positive: p,
            negative: n,
        };
        let s = sfp_loss(&mut tape, &[], &[t], m).unwrap();
        tape.scalar_value(s.triplet)
    }

    #[test]
    fn hinge_arithmetic() {
        assert_eq!(planted(0.2, 0.9, 0.5), 0.0);
        assert!((planted(0.9, 0.2, 0.5) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn identical_bundles_leave_margin_hinge() {
        let mut tape = Tape::new();
        let old = tape.constant(Tensor::full(vec![2, 2, 2], 0.7));
        let new = tape.constant(Tensor::full(vec![2, 2, 2], 0.7));
        let mut anchors = BTreeMap::new();
        anchors.insert(1, vecvar(&mut tape, &[0.0, 0.0]));
        anchors.insert(2, vecvar(&mut tape, &[0.3, 0.0]));
        let current = anchors.clone();
        let triplets = mine_triplets(&mut tape, &anchors, &current).unwrap();
        assert_eq!(triplets.len(), 2);
        let s = sfp_loss(&mut tape, &[(old, new)], &triplets, 0.2).unwrap();
        assert_eq!(tape.scalar_value(s.global), 0.0);
        // d(a, n) = 0.09 for both classes
        assert!((tape.scalar_value(s.triplet) - (0.2 - 0.09)).abs() < 1e-12);
    }

    #[test]
    fn hardest_negative_is_closest() {
        let mut tape = Tape::new();
        let mut anchors = BTreeMap::new();
        anchors.insert(1, vecvar(&mut tape, &[0.0]));
        let mut current = BTreeMap::new();
        current.insert(1, vecvar(&mut tape, &[0.1]));
        current.insert(2, vecvar(&mut tape, &[5.0]));
        current.insert(3, vecvar(&mut tape, &[-1.0]));
        let t = mine_triplets(&mut tape, &anchors, &current).unwrap();
        assert_eq!(t[0].negative_class, 3);
        let lonely = mine_triplets(&mut tape, &anchors, &anchors).unwrap();
        assert!(lonely.is_empty());
    }

    #[test]
    fn dd_means_over_stages() {
        let mut tape = Tape::new();
        let v = |t: &mut Tape, x| t.scalar(x);
        let (a, b) = (v(&mut tape, 0.4), v(&mut tape, 0.6));
        let one = dd_loss(&mut tape, &[a], &[b]).unwrap();
        assert!((tape.scalar_value(one) - 1.0).abs() < 1e-15);
        let z = v(&mut tape, 0.0);
        let two = dd_loss(&mut tape, &[a, z], &[b, z]).unwrap();
        assert!((tape.scalar_value(two) - 0.5).abs() < 1e-15);
        let vv = v(&mut tape, 0.3);
        let many = dd_loss(&mut tape, &[vv; 5], &[vv; 5]).unwrap();
        assert!((tape.scalar_value(many) - 0.6).abs() < 1e-15);
        assert!(dd_loss(&mut tape, &[], &[]).is_err());
    }
}
