//! Incremental training: per-step loss assembly, SGD with momentum under a
//! poly learning-rate schedule, snapshot and prototype maintenance.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{
    restrict_labels, split_for_step, ClassId, ClassPartition, LabelMap, LabeledImage, TaskSchedule, IGNORE,
};
use crate::decouple::{channel_similarity, split_indices, SimilarityMetric};
use crate::distill::{batch_prototypes, dd_loss, mine_triplets, sfp_loss, spm_loss, ProtoDistance, PrototypeStore};
use crate::error::{config, contract, Error, Result};
use crate::eval::{ConfusionMatrix, MetricsGroup};
use crate::net::{FeatureBundle, ModelSnapshot, NetConfig, SegNetwork};
use crate::pseudo::{fuse_labels, gt_only, pseudo_labels, FusedLabelMap, PseudoThresholds};
use crate::relevance::{nsc_loss_on, old_class_rows, snapshot_relevance};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub nsc: f64,
    pub spm: f64,
    pub sfp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            nsc: 1.0,
            spm: 1.0,
            sfp: 1.0,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub spm: bool,
    pub sfp: bool,
    pub nsc: bool,
    /// Pseudo labels for old classes from the frozen model.
    pub upl: bool,
    /// Unknown-class modelling of ambiguous background.
    pub unknown: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Self {
            spm: on,
            sfp: on,
            nsc: on,
            upl: on,
            unknown: on,
        }
    }

    pub fn any(&self) -> bool {
        self.spm || self.sfp || self.nsc || self.upl || self.unknown
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalTerm {
    /// Every channel of each distilled stage.
    #[default]
    Embedding,
    /// Only the sample-specific channels of each stage.
    SampleSpecific,
    /// Stage embeddings plus the old rows of the logit map.
    EmbeddingAndLogits,
}

/// Which current prototypes prototype matching compares.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    /// Masked averages of the current batch.
    #[default]
    Batch,
    /// Running averages blended with the current batch.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepConfig {
    pub epochs: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub toggles: Toggles,
    /// Feature stages distilled by prototype matching and feature preserving.
    pub stages: Vec<usize>,
    pub rho: f64,
    pub thresholds: PseudoThresholds,
    pub similarity: SimilarityMetric,
    pub proto_momentum: f64,
    pub margin: f64,
    pub eps: f64,
    pub prototype_source: PrototypeSource,
    pub prototype_distance: ProtoDistance,
    /// What the global feature-preserving term compares.
    pub sfp_global: GlobalTerm,
    /// Recompute pseudo labels every epoch. The snapshot is frozen, so this
    /// yields the same labels.
    pub refresh_pseudo: bool,
    pub seed: u64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            batch_size: 8,
            weights: LossWeights::default(),
            toggles: Toggles::default(),
            stages: vec![1, 2],
            rho: 0.6,
            thresholds: PseudoThresholds::default(),
            similarity: SimilarityMetric::Cosine,
            proto_momentum: 0.9,
            margin: 0.2,
            eps: 1e-6,
            prototype_source: PrototypeSource::Batch,
            prototype_distance: ProtoDistance::Mean,
            sfp_global: GlobalTerm::Embedding,
            refresh_pseudo: false,
            seed: 0,
        }
    }
}

impl StepConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.poly_power >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(config("learning rate, poly power or momentum out of range"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.proto_momentum) || !(self.margin >= 0.0) || !(self.eps > 0.0) {
            return Err(config("prototype momentum, margin or eps out of range"));
        }
        self.thresholds.validate()?;
        let w = self.weights;
        if [w.ce, w.nsc, w.spm, w.sfp].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config("loss weights must be finite and non-negative"));
        }
        if self.distills() && self.stages.is_empty() {
            return Err(config("distillation needs at least one stage"));
        }
        if let Some(s) = self.stages.iter().find(|&&s| s >= net.widths.len()) {
            return Err(config(format!("distillation stage {s} outside a {}-stage network", net.widths.len())));
        }
        Ok(())
    }

    pub fn spm_active(&self) -> bool {
        self.toggles.spm && self.weights.spm != 0.0
    }

    pub fn sfp_active(&self) -> bool {
        self.toggles.sfp && self.weights.sfp != 0.0
    }

    pub fn nsc_active(&self) -> bool {
        self.toggles.nsc && self.weights.nsc != 0.0
    }

    pub fn distills(&self) -> bool {
        self.spm_active() || self.sfp_active()
    }

    /// `lr_0 · (1 − i / i_max)^power`.
    pub fn lr_at(&self, i: usize, i_max: usize) -> f64 {
        if i_max == 0 {
            return 0.0;
        }
        let frac = (1.0 - i as f64 / i_max as f64).max(0.0);
        self.lr * frac.powf(self.poly_power)
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: SegNetwork,
    pub snapshot: Option<ModelSnapshot>,
    /// One store per configured distillation stage.
    pub stores: Vec<PrototypeStore>,
    pub partition: ClassPartition,
    pub velocity: Vec<Tensor>,
    pub iteration: usize,
}

impl TrainState {
    pub fn initial(net: SegNetwork, partition: ClassPartition, cfg: &StepConfig) -> Result<Self> {
        if partition.step_index != 0 {
            return Err(contract("initial state needs a step-0 partition"));
        }
        if net.num_outputs() != partition.num_outputs() {
            return Err(contract("head rows do not match the partition"));
        }
        let stores = stores_for(&net, cfg);
        Ok(Self {
            velocity: zero_velocity(&net),
            net,
            snapshot: None,
            stores,
            partition,
            iteration: 0,
        })
    }

    /// Freezes the current model and extends the head for `partition`.
    pub fn begin_step(&mut self, partition: ClassPartition, seed: u64) -> Result<()> {
        if partition.step_index == 0 {
            return Err(contract("only steps after the first can begin incrementally"));
        }
        if partition.old_classes != self.partition.known_classes() {
            return Err(contract("partition does not continue the previous step"));
        }
        self.snapshot = Some(self.net.snapshot());
        self.net = self.net.extend_head(partition.new_classes.len(), seed)?;
        self.partition = partition;
        self.velocity = zero_velocity(&self.net);
        self.iteration = 0;
        Ok(())
    }
}

fn stores_for(net: &SegNetwork, cfg: &StepConfig) -> Vec<PrototypeStore> {
    cfg.stages
        .iter()
        .map(|&s| PrototypeStore::new(net.config().widths[s], cfg.proto_momentum))
        .collect()
}

fn zero_velocity(net: &SegNetwork) -> Vec<Tensor> {
    net.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect()
}

/// Per-image supervision prepared once per step.
#[derive(Clone, Debug)]
pub struct ImageCache {
    pub fused: FusedLabelMap,
    pub ce_targets: Vec<Option<usize>>,
    /// Fused labels at the resolution of each distillation stage.
    pub stage_labels: Vec<LabelMap>,
    pub old: Option<FeatureBundle>,
    pub old_relevance: Vec<Vec<f64>>,
}

pub fn upsample_labels(l: &LabelMap, factor: usize) -> LabelMap {
    let (h, w) = (l.height * factor, l.width * factor);
    let data = (0..h * w)
        .map(|i| l.data[(i / w / factor) * l.width + (i % w) / factor])
        .collect();
    LabelMap { height: h, width: w, data }
}

pub fn prepare_step(
    state: &TrainState,
    data: &[LabeledImage],
    cfg: &StepConfig,
) -> Result<Vec<ImageCache>> {
    let p = &state.partition;
    if p.step_index > 0 && state.snapshot.is_none() {
        return Err(contract("incremental step without a frozen snapshot"));
    }
    let stride = state.net.config().output_stride();
    let old_rows = match (&state.snapshot, cfg.nsc_active()) {
        (Some(s), true) => old_class_rows(p, s.net().num_outputs(), &p.old_classes)?,
        _ => Vec::new(),
    };
    data.iter()
        .map(|img| {
            let old = match &state.snapshot {
                Some(s) => Some(s.forward(&img.pixels)?),
                None => None,
            };
            let fused = match (&old, cfg.toggles.upl || cfg.toggles.unknown) {
                (Some(b), true) => {
                    let rows = &p.output_classes()[..b.logits.shape()[0]];
                    let mut pl = pseudo_labels(&b.soft_map, rows, p, cfg.thresholds, cfg.toggles.unknown)?;
                    if !cfg.toggles.upl {
                        pl.data.iter_mut().filter(|v| p.is_old(**v)).for_each(|v| *v = p.background_id);
                    }
                    fuse_labels(&upsample_labels(&pl, stride), &img.labels, p)?
                }
                _ => gt_only(&img.labels),
            };
            let ce_targets = fused
                .ce_labels()
                .data
                .iter()
                .map(|&c| if c == IGNORE { None } else { p.row_of(c) })
                .collect();
            let h = img.labels.height;
            let stage_labels = cfg
                .stages
                .iter()
                .map(|&s| {
                    let (_, sh, _) = state.net.config().stage_shapes(img.labels.height, img.labels.width)[s];
                    fused.labels.downsample_majority(h / sh)
                })
                .collect::<Result<_>>()?;
            let old_relevance = match (&state.snapshot, &old) {
                (Some(s), Some(b)) if !old_rows.is_empty() => snapshot_relevance(s, b, &old_rows, cfg.eps)?,
                _ => Vec::new(),
            };
            Ok(ImageCache {
                fused,
                ce_targets,
                stage_labels,
                old,
                old_relevance,
            })
        })
        .collect()
}

/// Taped loss terms of one batch. Inactive terms are `None`.
pub struct Objective {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub ce: Var,
    pub nsc: Option<Var>,
    pub spm: Vec<Var>,
    /// `(intra, inter)` parts of each stage's prototype matching term.
    pub spm_parts: Vec<(Var, Var)>,
    pub sfp: Vec<Var>,
    pub dd: Option<Var>,
    pub total: Var,
    /// Detached batch prototypes per stage, for the running averages.
    pub prototypes: Vec<BTreeMap<ClassId, Vec<f64>>>,
    pub unknown: Vec<Option<Vec<f64>>>,
}

fn mean_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(if vars.len() == 1 { acc } else { tape.scale(acc, 1.0 / vars.len() as f64) })
}

fn weighted(tape: &mut Tape, v: Var, w: f64) -> Var {
    if w == 1.0 {
        v
    } else {
        tape.scale(v, w)
    }
}

/// Builds every active loss term of one batch on a fresh tape.
pub fn build_objective(
    state: &TrainState,
    data: &[LabeledImage],
    cache: &[ImageCache],
    batch: &[usize],
    cfg: &StepConfig,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let net = &state.net;
    let p = &state.partition;
    let incremental = p.step_index > 0;
    let stride = net.config().output_stride();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let mut ce_terms = Vec::new();
    let mut nsc_terms = Vec::new();
    let mut stage_vars: Vec<Vec<Var>> = vec![Vec::new(); cfg.stages.len()];
    let mut logit_vars = Vec::new();
    let old_rows = match &state.snapshot {
        Some(s) if incremental && cfg.nsc_active() => old_class_rows(p, s.net().num_outputs(), &p.old_classes)?,
        _ => Vec::new(),
    };
    for &i in batch {
        let x = tape.constant(data[i].pixels.clone());
        let fv = net.forward_on(&mut tape, &bound, x)?;
        let up = tape.upsample_nearest(fv.logits(), stride)?;
        ce_terms.push(tape.softmax_cross_entropy(up, &cache[i].ce_targets)?);
        if !old_rows.is_empty() {
            nsc_terms.push(nsc_loss_on(
                &mut tape,
                net,
                &bound,
                &fv,
                &old_rows,
                &cache[i].old_relevance,
                cfg.eps,
            )?);
        }
        for (j, &s) in cfg.stages.iter().enumerate() {
            stage_vars[j].push(fv.stage(s));
        }
        logit_vars.push(fv.logits());
    }
    let ce = mean_vars(&mut tape, &ce_terms)?;
    let ce_w = weighted(&mut tape, ce, cfg.weights.ce);
    let mut total = ce_w;
    let nsc = if nsc_terms.is_empty() {
        None
    } else {
        let v = mean_vars(&mut tape, &nsc_terms)?;
        let w = weighted(&mut tape, v, cfg.weights.nsc);
        total = tape.add(total, w)?;
        Some(v)
    };

    let known = p.known_classes();
    let mut prototypes = Vec::with_capacity(cfg.stages.len());
    let mut unknown = Vec::with_capacity(cfg.stages.len());
    let (mut spm_terms, mut sfp_terms, mut spm_parts) = (Vec::new(), Vec::new(), Vec::new());
    let (mut spm_w, mut sfp_w) = (Vec::new(), Vec::new());
    for (j, vars) in stage_vars.iter().enumerate() {
        let labels: Vec<LabelMap> = batch.iter().map(|&i| cache[i].stage_labels[j].clone()).collect();
        let means = batch_prototypes(&mut tape, vars, &labels, &known)?;
        let unk = batch_prototypes(&mut tape, vars, &labels, &[p.unknown_id])?;
        prototypes.push(means.iter().map(|(&k, &v)| (k, tape.value(v).data().to_vec())).collect());
        unknown.push(unk.get(&p.unknown_id).map(|&v| tape.value(v).data().to_vec()));
        if !incremental || !cfg.distills() {
            continue;
        }
        let s = cfg.stages[j];
        let old: Vec<&Tensor> = batch
            .iter()
            .map(|&i| cache[i].old.as_ref().map(|b| b.stage(s)).ok_or_else(|| contract("missing old features")))
            .collect::<Result<_>>()?;
        let new_vals: Vec<Tensor> = vars.iter().map(|&v| tape.value(v).clone()).collect();
        let new_refs: Vec<&Tensor> = new_vals.iter().collect();
        let sim = channel_similarity(&new_refs, &old, cfg.similarity)?;
        let (si, ss) = split_indices(&sim, cfg.rho)?;
        let zero = tape.scalar(0.0);
        let spm = if cfg.spm_active() {
            let current = match cfg.prototype_source {
                PrototypeSource::Batch => means.clone(),
                PrototypeSource::Running => state.stores[j].current_on_tape(&mut tape, &means),
            };
            let t = spm_loss(&mut tape, &state.stores[j], &current, &si, p, cfg.prototype_distance, cfg.eps)?;
            spm_terms.push(t.total);
            spm_parts.push((t.intra, t.inter));
            weighted(&mut tape, t.total, cfg.weights.spm)
        } else {
            zero
        };
        let sfp = if cfg.sfp_active() {
            let old_vars: Vec<Var> = old.iter().map(|t| tape.constant((*t).clone())).collect();
            let mut pairs: Vec<(Var, Var)> = Vec::new();
            if cfg.sfp_global == GlobalTerm::SampleSpecific {
                if !ss.is_empty() {
                    for (&o, &n) in old_vars.iter().zip(vars) {
                        let (o, n) = (tape.select(o, &ss)?, tape.select(n, &ss)?);
                        pairs.push((o, n));
                    }
                }
            } else {
                pairs.extend(old_vars.iter().copied().zip(vars.iter().copied()));
            }
            if cfg.sfp_global == GlobalTerm::EmbeddingAndLogits {
                for (k, &i) in batch.iter().enumerate() {
                    let ol = cache[i].old.as_ref().expect("checked above").logits.clone();
                    let rows = ol.shape()[0];
                    let o = tape.constant(ol);
                    let n = tape.select(logit_vars[k], &(0..rows).collect::<Vec<_>>())?;
                    pairs.push((o, n));
                }
            }
            let mut triplets = Vec::new();
            if !ss.is_empty() {
                let old_means = batch_prototypes(&mut tape, &old_vars, &labels, &known)?;
                let mut anchors = BTreeMap::new();
                for (&k, &v) in &old_means {
                    anchors.insert(k, tape.select(v, &ss)?);
                }
                let mut current = BTreeMap::new();
                for (&k, &v) in &means {
                    current.insert(k, tape.select(v, &ss)?);
                }
                triplets = mine_triplets(&mut tape, &anchors, &current)?;
            }
            let t = sfp_loss(&mut tape, &pairs, &triplets, cfg.margin)?;
            sfp_terms.push(t.total);
            weighted(&mut tape, t.total, cfg.weights.sfp)
        } else {
            zero
        };
        spm_w.push(spm);
        sfp_w.push(sfp);
    }
    let dd = if spm_w.is_empty() {
        None
    } else {
        let v = dd_loss(&mut tape, &spm_w, &sfp_w)?;
        total = tape.add(total, v)?;
        Some(v)
    };
    Ok(Objective {
        params: bound.vars(),
        tape,
        ce,
        nsc,
        spm: spm_terms,
        spm_parts,
        sfp: sfp_terms,
        dd,
        total,
        prototypes,
        unknown,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub ce: f64,
    pub nsc: f64,
    pub spm: f64,
    pub spm_intra: f64,
    pub spm_inter: f64,
    pub sfp: f64,
    pub dd: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub old_classes: Vec<ClassId>,
    pub new_classes: Vec<ClassId>,
    pub samples: usize,
    pub iterations: usize,
    pub losses: Vec<LossRecord>,
    /// Pixel counts by label source: gt, pseudo, unknown, background.
    pub provenance: [usize; 4],
    /// Largest parameter change of the frozen snapshot over the step.
    pub snapshot_delta: f64,
    pub metrics: Option<MetricsGroup>,
    /// Wall-clock seconds; excluded from deterministic outputs.
    #[serde(skip)]
    pub seconds: f64,
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn finite(term: &str, iteration: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            iteration,
            value,
        })
    }
}

/// Trains the current model on one step's data.
pub fn run_step(state: &mut TrainState, data: &[LabeledImage], cfg: &StepConfig) -> Result<StepReport> {
    cfg.validate(state.net.config())?;
    let start = Instant::now();
    let p = state.partition.clone();
    let mut report = StepReport {
        step: p.step_index,
        old_classes: p.old_classes.clone(),
        new_classes: p.new_classes.clone(),
        samples: data.len(),
        ..StepReport::default()
    };
    if cfg.epochs == 0 || data.is_empty() {
        report.seconds = start.elapsed().as_secs_f64();
        return Ok(report);
    }
    if state.stores.len() != cfg.stages.len() {
        state.stores = stores_for(&state.net, cfg);
    }
    let frozen = state.snapshot.as_ref().map(|s| s.net().clone());
    let mut cache = prepare_step(state, data, cfg)?;
    for c in &cache {
        for (h, v) in report.provenance.iter_mut().zip(c.fused.histogram()) {
            *h += v;
        }
    }
    let batches = data.len().div_ceil(cfg.batch_size);
    let i_max = cfg.epochs * batches;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9 * (p.step_index as u64 + 1)));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.refresh_pseudo {
            cache = prepare_step(state, data, cfg)?;
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let it = state.iteration;
            let obj = build_objective(state, data, &cache, batch, cfg)?;
            let t = &obj.tape;
            let spm: Vec<f64> = obj.spm.iter().map(|&v| t.scalar_value(v)).collect();
            let sfp: Vec<f64> = obj.sfp.iter().map(|&v| t.scalar_value(v)).collect();
            let intra: Vec<f64> = obj.spm_parts.iter().map(|&(v, _)| t.scalar_value(v)).collect();
            let inter: Vec<f64> = obj.spm_parts.iter().map(|&(_, v)| t.scalar_value(v)).collect();
            let lr = cfg.lr_at(it, i_max);
            let rec = LossRecord {
                iteration: it,
                lr,
                ce: finite("ce", it, t.scalar_value(obj.ce))?,
                nsc: finite("nsc", it, obj.nsc.map_or(0.0, |v| t.scalar_value(v)))?,
                spm: finite("spm", it, mean_of(&spm))?,
                spm_intra: mean_of(&intra),
                spm_inter: mean_of(&inter),
                sfp: finite("sfp", it, mean_of(&sfp))?,
                dd: finite("dd", it, obj.dd.map_or(0.0, |v| t.scalar_value(v)))?,
                total: finite("total", it, t.scalar_value(obj.total))?,
            };
            let grads = t.backward(obj.total);
            for ((param, vel), var) in state.net.params_mut().into_iter().zip(&mut state.velocity).zip(&obj.params) {
                let g = grads.get(*var);
                for ((w, v), gi) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + gi;
                    *w -= lr * *v;
                }
            }
            for (j, store) in state.stores.iter_mut().enumerate() {
                store.commit(&obj.prototypes[j], obj.unknown[j].as_deref());
            }
            report.losses.push(rec);
            state.iteration += 1;
        }
    }
    for store in &mut state.stores {
        store.end_step();
    }
    report.iterations = report.losses.len();
    if let (Some(before), Some(now)) = (&frozen, &state.snapshot) {
        report.snapshot_delta = before.max_param_delta(now.net());
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Argmax class id per pixel, at input resolution.
pub fn predict(net: &SegNetwork, partition: &ClassPartition, image: &Tensor) -> Result<LabelMap> {
    let b = net.forward(image)?;
    let (k, h, w) = b.logits.chw()?;
    let classes = partition.output_classes();
    if k != classes.len() {
        return Err(contract("head rows do not match the partition"));
    }
    let d = b.logits.data();
    let n = h * w;
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for r in 1..k {
                if d[r * n + i] > d[best * n + i] {
                    best = r;
                }
            }
            classes[best]
        })
        .collect();
    Ok(upsample_labels(&LabelMap { height: h, width: w, data }, net.config().output_stride()))
}

/// Metrics on `val` over every class seen so far, split into the first
/// step's classes and those added later.
pub fn evaluate(
    net: &SegNetwork,
    partition: &ClassPartition,
    initial: &[ClassId],
    val: &[LabeledImage],
) -> Result<MetricsGroup> {
    let seen = partition.known_classes();
    let mut cm = ConfusionMatrix::new(partition.output_classes(), Some(partition.unknown_id));
    for img in val {
        let pred = predict(net, partition, &img.pixels)?;
        cm.accumulate(&pred, &restrict_labels(&img.labels, &seen))?;
    }
    let added: Vec<ClassId> = seen.iter().copied().filter(|c| !initial.contains(c)).collect();
    Ok(MetricsGroup::from_confusion(&cm, initial, &added))
}

/// Step-0 and incremental configurations of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub net: NetConfig,
    pub step: StepConfig,
    /// Epochs of the first step, if different.
    pub initial_epochs: Option<usize>,
    pub initial_lr: Option<f64>,
    pub unknown_id: ClassId,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            step: StepConfig::default(),
            initial_epochs: None,
            initial_lr: None,
            unknown_id: 254,
        }
    }
}

impl ScheduleConfig {
    pub fn for_step(&self, step: usize) -> StepConfig {
        let mut c = self.step.clone();
        if step == 0 {
            if let Some(e) = self.initial_epochs {
                c.epochs = e;
            }
            if let Some(lr) = self.initial_lr {
                c.lr = lr;
            }
        }
        c
    }
}

/// Runs the first step only and returns the resulting state.
pub fn run_initial(
    schedule: &TaskSchedule,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &ScheduleConfig,
) -> Result<(TrainState, StepReport)> {
    let p0 = schedule.partition(0, cfg.unknown_id)?;
    let net = SegNetwork::new(cfg.net.clone(), p0.num_outputs(), cfg.step.seed)?;
    let step_cfg = cfg.for_step(0);
    let mut state = TrainState::initial(net, p0, &step_cfg)?;
    let data = split_for_step(train, schedule, 0)?;
    let mut report = run_step(&mut state, &data, &step_cfg)?;
    report.metrics = Some(evaluate(&state.net, &state.partition, &schedule.steps[0], val)?);
    Ok((state, report))
}

/// Continues a schedule from `state` through every remaining step.
pub fn continue_schedule(
    state: TrainState,
    schedule: &TaskSchedule,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &ScheduleConfig,
) -> Result<(TrainState, Vec<StepReport>)> {
    continue_schedule_with(state, schedule, train, val, cfg, &mut |_, _| Ok(()))
}

/// As [`continue_schedule`], calling `on_step` after each evaluated step.
pub fn continue_schedule_with(
    mut state: TrainState,
    schedule: &TaskSchedule,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &ScheduleConfig,
    on_step: &mut dyn FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<(TrainState, Vec<StepReport>)> {
    let mut reports = Vec::new();
    for t in state.partition.step_index + 1..schedule.num_steps() {
        let pt = schedule.partition(t, cfg.unknown_id)?;
        let step_cfg = cfg.for_step(t);
        state.begin_step(pt, step_cfg.seed.wrapping_add(t as u64))?;
        let data = split_for_step(train, schedule, t)?;
        let mut report = run_step(&mut state, &data, &step_cfg)?;
        report.metrics = Some(evaluate(&state.net, &state.partition, &schedule.steps[0], val)?);
        on_step(&state, &report)?;
        reports.push(report);
    }
    Ok((state, reports))
}

pub fn run_schedule(
    schedule: &TaskSchedule,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &ScheduleConfig,
) -> Result<(TrainState, Vec<StepReport>)> {
    run_schedule_with(schedule, train, val, cfg, &mut |_, _| Ok(()))
}

pub fn run_schedule_with(
    schedule: &TaskSchedule,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &ScheduleConfig,
    on_step: &mut dyn FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<(TrainState, Vec<StepReport>)> {
    let (state, first) = run_initial(schedule, train, val, cfg)?;
    on_step(&state, &first)?;
    let (state, mut rest) = continue_schedule_with(state, schedule, train, val, cfg, on_step)?;
    rest.insert(0, first);
    Ok((state, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Protocol, SyntheticSceneSpec};

    fn toy() -> (TaskSchedule, Vec<LabeledImage>, Vec<LabeledImage>) {
        let spec = SyntheticSceneSpec::with_classes(3, 16, 16, 5);
        let train = generate_dataset(&spec, 12).unwrap();
        let val = generate_dataset(&SyntheticSceneSpec { seed: 6, ..spec }, 4).unwrap();
        let schedule = TaskSchedule {
            steps: vec![vec![1, 2], vec![3]],
            protocol: Protocol::Overlapped,
            data_ratio: 1.0,
        };
        (schedule, train, val)
    }

    fn small() -> ScheduleConfig {
        ScheduleConfig {
            net: NetConfig {
                widths: vec![4, 6, 8],
                ..NetConfig::default()
            },
            step: StepConfig {
                epochs: 1,
                batch_size: 4,
                ..StepConfig::default()
            },
            ..ScheduleConfig::default()
        }
    }

    #[test]
    fn poly_schedule_reaches_zero() {
        let c = StepConfig::default();
        assert_eq!(c.lr_at(0, 10), 0.01);
        assert_eq!(c.lr_at(10, 10), 0.0);
        let lrs: Vec<f64> = (0..=10).map(|i| c.lr_at(i, 10)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (s, train, _) = toy();
        let mut cfg = small();
        cfg.step.epochs = 0;
        let p0 = s.partition(0, 254).unwrap();
        let net = SegNetwork::new(cfg.net.clone(), p0.num_outputs(), 1).unwrap();
        let mut state = TrainState::initial(net.clone(), p0, &cfg.step).unwrap();
        let r = run_step(&mut state, &split_for_step(&train, &s, 0).unwrap(), &cfg.step).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(state.net, net);
    }

    #[test]
    fn two_step_run_keeps_snapshot_frozen() {
        let (s, train, val) = toy();
        let (state, reports) = run_schedule(&s, &train, &val, &small()).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[1].snapshot_delta, 0.0);
        assert!(reports.iter().flat_map(|r| &r.losses).all(|l| l.total.is_finite()));
        assert!(reports[1].losses.iter().any(|l| l.dd > 0.0));
        assert_eq!(state.net.num_outputs(), 4);
        assert!(state.stores.iter().all(|s| s.background.is_some()));
    }

    #[test]
    fn incremental_step_needs_snapshot() {
        let (s, train, _) = toy();
        let cfg = small();
        let p1 = s.partition(1, 254).unwrap();
        let net = SegNetwork::new(cfg.net.clone(), p1.num_outputs(), 1).unwrap();
        let mut state = TrainState {
            velocity: zero_velocity(&net),
            net,
            snapshot: None,
            stores: Vec::new(),
            partition: p1,
            iteration: 0,
        };
        let data = split_for_step(&train, &s, 1).unwrap();
        assert!(matches!(run_step(&mut state, &data, &cfg.step), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_match_disabled_terms() {
        let (s, train, val) = toy();
        let mut off = small();
        off.step.toggles = Toggles::all(false);
        let mut zero = small();
        zero.step.weights = LossWeights {
            ce: 1.0,
            nsc: 0.0,
            spm: 0.0,
            sfp: 0.0,
        };
        zero.step.toggles.upl = false;
        zero.step.toggles.unknown = false;
        let (a, _) = run_schedule(&s, &train, &val, &off).unwrap();
        let (b, _) = run_schedule(&s, &train, &val, &zero).unwrap();
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn label_upsampling_repeats_cells() {
        let l = LabelMap {
            height: 1,
            width: 2,
            data: vec![1, 2],
        };
        assert_eq!(upsample_labels(&l, 2).data, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }
}
