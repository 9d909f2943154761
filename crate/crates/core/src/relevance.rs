//! Layer-wise relevance propagation and the relevance-consistency loss.
//!
//! Relevance of a class is seeded with its logit map minus the class bias
//! and redistributed backwards with the z-rule `R_j = Σ_k a_j w_jk / z_k · R_k`,
//! where `z_k = Σ_j a_j w_jk` excludes the bias. At the head the seed equals
//! `z_k`, so the ratio is exactly 1 there. ReLU passes relevance through,
//! average pooling is treated as a linear layer with weights 1/4.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{ClassId, ClassPartition};
use crate::error::{contract, Error, Result};
use crate::net::{BoundNet, FeatureBundle, ForwardVars, Layer, ModelSnapshot, SegNetwork};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Conservation bookkeeping of one propagation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub kind: String,
    /// Total relevance entering the layer from above.
    pub relevance_out: f64,
    /// Total relevance handed to the layer below.
    pub relevance_in: f64,
    /// Denominators with `|z| ≤ 10·ε`.
    pub stabilized: usize,
    /// `relevance_out − relevance_in`.
    pub absorbed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceField {
    pub class_row: usize,
    /// Sum of the seed map (class logits without the bias).
    pub seed_total: f64,
    /// `(layer index, relevance at that layer's output)`, from the top down.
    /// `usize::MAX` marks the network input.
    pub layers: Vec<(usize, Tensor)>,
    pub stats: Vec<LayerStats>,
}

impl RelevanceField {
    /// Relevance at the last layer reached.
    pub fn terminal(&self) -> &Tensor {
        &self.layers.last().expect("field has the seed layer").1
    }

    /// True when no denominator on the path needed stabilization.
    pub fn fully_conserving(&self) -> bool {
        self.stats.iter().all(|s| s.stabilized == 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRelevanceVector {
    pub class_row: usize,
    pub g: Vec<f64>,
}

/// Where propagation stops.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Depth {
    DecouplingStage,
    Input,
}

/// Taped relevance chain.
pub struct TapedRelevance {
    pub layers: Vec<(usize, Var)>,
    pub stats: Vec<LayerStats>,
}

impl TapedRelevance {
    pub fn terminal(&self) -> Var {
        self.layers.last().expect("seed layer").1
    }
}

fn stabilized_count(z: &Tensor, eps: f64) -> usize {
    z.data().iter().filter(|v| v.abs() <= 10.0 * eps).count()
}

/// Applies the z-rule through one layer. `input` is the layer input
/// activation, `relevance` lives on the layer output.
pub fn propagate_layer(
    tape: &mut Tape,
    layer: &Layer,
    weight: Option<Var>,
    input: Var,
    relevance: Var,
    eps: f64,
) -> Result<(Var, usize)> {
    match layer {
        Layer::Relu => Ok((relevance, 0)),
        Layer::Conv(c) | Layer::Head(c) => {
            let w = weight.ok_or_else(|| contract("conv layer without bound weight"))?;
            let z = tape.conv2d(input, w, c.pad())?;
            let n = stabilized_count(tape.value(z), eps);
            let zs = tape.stabilize(z, eps);
            let s = tape.div(relevance, zs)?;
            let back = tape.conv2d_transpose(s, w, c.pad())?;
            Ok((tape.mul(input, back)?, n))
        }
        Layer::AvgPool => {
            let z = tape.avg_pool2(input)?;
            let n = stabilized_count(tape.value(z), eps);
            let zs = tape.stabilize(z, eps);
            let s = tape.div(relevance, zs)?;
            let back = tape.avg_unpool2(s)?;
            Ok((tape.mul(input, back)?, n))
        }
        other => Err(Error::Capability(format!(
            "relevance propagation does not support layer `{}`",
            other.kind()
        ))),
    }
}

/// Propagates the relevance of head row `row` from the logits down to `depth`.
pub fn propagate_on_tape(
    tape: &mut Tape,
    net: &SegNetwork,
    bound: &BoundNet,
    fv: &ForwardVars,
    row: usize,
    depth: Depth,
    eps: f64,
) -> Result<TapedRelevance> {
    let layers = net.layers();
    let head_idx = layers.len() - 1;
    if row >= net.num_outputs() {
        return Err(contract(format!(
            "class row {row} outside a {}-row head",
            net.num_outputs()
        )));
    }
    let stop = match depth {
        Depth::DecouplingStage => net.stage_ends()[net.decoupling_stage()] + 1,
        Depth::Input => 0,
    };
    let (head_w, _) = bound.layer(head_idx).ok_or_else(|| contract("head is not bound"))?;
    let row_w = tape.select(head_w, &[row])?;
    let head_in = fv.layer_input(head_idx);
    let mut relevance = tape.conv2d(head_in, row_w, 0)?;
    let mut out = vec![(head_idx, relevance)];
    let mut stats = Vec::new();
    for l in (stop..=head_idx).rev() {
        let input = fv.layer_input(l);
        let before = tape.value(relevance).sum();
        let (next, stabilized) = if l == head_idx {
            let (_, h, w) = tape.value(relevance).chw()?;
            let ones = tape.constant(Tensor::full(vec![1, h, w], 1.0));
            let spread = tape.conv2d_transpose(ones, row_w, 0)?;
            (tape.mul(input, spread)?, 0)
        } else {
            let weight = bound.layer(l).map(|(w, _)| w);
            propagate_layer(tape, &layers[l], weight, input, relevance, eps)?
        };
        let after = tape.value(next).sum();
        stats.push(LayerStats {
            layer: l,
            kind: layers[l].kind().into(),
            relevance_out: before,
            relevance_in: after,
            stabilized,
            absorbed: before - after,
        });
        relevance = next;
        out.push((l.checked_sub(1).unwrap_or(usize::MAX), relevance));
    }
    Ok(TapedRelevance { layers: out, stats })
}

/// Rebuilds the taped vars of a detached bundle as constants.
fn constant_forward(tape: &mut Tape, bundle: &FeatureBundle) -> ForwardVars {
    let input = tape.constant(bundle.input.clone());
    let outputs = bundle.activations.iter().map(|a| tape.constant(a.clone())).collect();
    ForwardVars {
        input,
        outputs,
        stage_ends: bundle.stage_ends.clone(),
    }
}

pub fn propagate_relevance(
    net: &SegNetwork,
    bundle: &FeatureBundle,
    row: usize,
    depth: Depth,
    eps: f64,
) -> Result<RelevanceField> {
    if bundle.activations.len() != net.layers().len()
        || bundle.logits.shape()[0] != net.num_outputs()
    {
        return Err(contract("feature bundle was not produced by this network"));
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let fv = constant_forward(&mut tape, bundle);
    let taped = propagate_on_tape(&mut tape, net, &bound, &fv, row, depth, eps)?;
    Ok(RelevanceField {
        class_row: row,
        seed_total: tape.value(taped.layers[0].1).sum(),
        layers: taped
            .layers
            .iter()
            .map(|&(l, v)| (l, tape.value(v).clone()))
            .collect(),
        stats: taped.stats,
    })
}

/// Per-channel spatial sum of the terminal relevance.
pub fn class_relevance(field: &RelevanceField) -> ClassRelevanceVector {
    let t = field.terminal();
    let c = t.shape()[0];
    ClassRelevanceVector {
        class_row: field.class_row,
        g: (0..c).map(|ch| t.channel(ch).iter().sum()).collect(),
    }
}

/// `(1/|C|) Σ_c ‖g_old − g_new‖²` with the old vectors as constants.
pub fn nsc_from_vectors(tape: &mut Tape, old: &[Vec<f64>], new: &[Var]) -> Result<Var> {
    if old.len() != new.len() {
        return Err(contract("old and new relevance lists differ in length"));
    }
    if old.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut total: Option<Var> = None;
    for (o, &n) in old.iter().zip(new) {
        let ov = tape.constant(Tensor::vector(o.clone()));
        let d = tape.sub(n, ov)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / old.len() as f64))
}

/// Head rows of the old classes, validated against the old head width.
pub fn old_class_rows(partition: &ClassPartition, old_head: usize, classes: &[ClassId]) -> Result<Vec<usize>> {
    classes
        .iter()
        .map(|&c| {
            let row = partition
                .row_of(c)
                .filter(|_| partition.is_old(c))
                .ok_or_else(|| contract(format!("class {c} is not an old class")))?;
            if row >= old_head {
                return Err(contract(format!("class {c} absent from the old head")));
            }
            Ok(row)
        })
        .collect()
}

/// Decoupling-stage relevance vectors of the frozen model for every row,
/// divided by the number of spatial positions as in [`nsc_loss_on`].
pub fn snapshot_relevance(
    old: &ModelSnapshot,
    bundle: &FeatureBundle,
    rows: &[usize],
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|&r| {
            propagate_relevance(old.net(), bundle, r, Depth::DecouplingStage, eps)
                .map(|f| {
                    let plane = f.terminal().len() / f.terminal().shape()[0];
                    class_relevance(&f).g.iter().map(|v| v / plane as f64).collect()
                })
        })
        .collect()
}

/// Relevance-consistency loss of the current model on one image, with the
/// frozen model's vectors given as constants. Relevance vectors are averaged
/// over spatial positions rather than summed, which keeps the loss on the
/// scale of the other terms independently of resolution.
pub fn nsc_loss_on(
    tape: &mut Tape,
    net: &SegNetwork,
    bound: &BoundNet,
    fv: &ForwardVars,
    rows: &[usize],
    old_vectors: &[Vec<f64>],
    eps: f64,
) -> Result<Var> {
    let mut new = Vec::with_capacity(rows.len());
    for &r in rows {
        let taped = propagate_on_tape(tape, net, bound, fv, r, Depth::DecouplingStage, eps)?;
        let t = taped.terminal();
        let plane = tape.value(t).len() / tape.value(t).shape()[0];
        let g = tape.sum_spatial(t);
        new.push(tape.scale(g, 1.0 / plane as f64));
    }
    nsc_from_vectors(tape, old_vectors, &new)
}

/// Value of the relevance-consistency loss for one image; 0 without old classes.
pub fn nsc_loss(
    old: &ModelSnapshot,
    new: &SegNetwork,
    image: &Tensor,
    partition: &ClassPartition,
    eps: f64,
) -> Result<f64> {
    if partition.old_classes.is_empty() {
        return Ok(0.0);
    }
    let rows = old_class_rows(partition, old.net().num_outputs(), &partition.old_classes)?;
    let old_bundle = old.forward(image)?;
    let old_g = snapshot_relevance(old, &old_bundle, &rows, eps)?;
    let mut tape = Tape::new();
    let bound = new.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let fv = new.forward_on(&mut tape, &bound, x)?;
    let loss = nsc_loss_on(&mut tape, new, &bound, &fv, &rows, &old_g, eps)?;
    Ok(tape.scalar_value(loss))
}

/// One row of a relevance dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub image: usize,
    pub class_id: ClassId,
    pub g: Vec<f64>,
}

pub fn relevance_dump(
    net: &SegNetwork,
    images: &[Tensor],
    partition: &ClassPartition,
    eps: f64,
) -> Result<Vec<RelevanceRecord>> {
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let bundle = net.forward(img)?;
        for c in partition.known_classes() {
            let row = partition.row_of(c).expect("known class has a row");
            if row >= net.num_outputs() {
                continue;
            }
            let field = propagate_relevance(net, &bundle, row, Depth::DecouplingStage, eps)?;
            out.push(RelevanceRecord {
                image: i,
                class_id: c,
                g: class_relevance(&field).g,
            });
        }
    }
    Ok(out)
}
