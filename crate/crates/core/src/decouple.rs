//! Channel-wise split of features into semantic-invariant (stable across
//! models) and sample-specific channels.

use serde::{Deserialize, Serialize};

use crate::data::round_half_up;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// Cosine similarity; zero-norm channels score 0.
    #[default]
    Cosine,
    /// Negative squared Euclidean distance.
    NegSquaredL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSimilarity {
    pub scores: Vec<f64>,
    pub metric: SimilarityMetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledEmbedding {
    pub si_indices: Vec<usize>,
    pub ss_indices: Vec<usize>,
    pub si_tensor: Tensor,
    pub ss_tensor: Tensor,
    pub ratio: f64,
}

impl DecoupledEmbedding {
    /// Inverse-permutes `si ⊕ ss` back onto the original channel order.
    pub fn reconstruct(&self) -> Tensor {
        let mut shape = self.si_tensor.shape().to_vec();
        let n = self.si_indices.len() + self.ss_indices.len();
        shape[0] = n;
        let plane: usize = shape[1..].iter().product();
        let mut data = vec![0.0; n * plane];
        for (src, idx) in [(&self.si_tensor, &self.si_indices), (&self.ss_tensor, &self.ss_indices)] {
            for (j, &c) in idx.iter().enumerate() {
                data[c * plane..(c + 1) * plane].copy_from_slice(src.channel(j));
            }
        }
        Tensor::new(shape, data).expect("reconstruction shape")
    }
}

fn score(a: &[f64], b: &[f64], metric: SimilarityMetric) -> f64 {
    match metric {
        SimilarityMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        }
        SimilarityMetric::NegSquaredL2 => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
    }
}

/// Per-channel similarity between current and old feature maps, averaged
/// over the batch.
pub fn channel_similarity(
    current: &[&Tensor],
    old: &[&Tensor],
    metric: SimilarityMetric,
) -> Result<ChannelSimilarity> {
    if current.is_empty() || current.len() != old.len() {
        return Err(contract("similarity needs equally sized non-empty batches"));
    }
    let channels = current[0].shape()[0];
    let mut scores = vec![0.0; channels];
    for (c, o) in current.iter().zip(old) {
        if c.shape() != o.shape() || c.shape()[0] != channels {
            return Err(contract(format!(
                "feature shapes differ: {:?} vs {:?}",
                c.shape(),
                o.shape()
            )));
        }
        for (ch, s) in scores.iter_mut().enumerate() {
            *s += score(c.channel(ch), o.channel(ch), metric);
        }
    }
    let n = current.len() as f64;
    scores.iter_mut().for_each(|s| *s /= n);
    Ok(ChannelSimilarity { scores, metric })
}

/// Channel indices ranked by descending score, ties by lower index.
pub fn rank_channels(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Size of the semantic-invariant set for `n` channels.
pub fn si_count(ratio: f64, n: usize) -> usize {
    round_half_up(ratio * n as f64).min(n)
}

/// Indices only: `(si, ss)`, both in ascending channel order.
pub fn split_indices(sim: &ChannelSimilarity, ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(contract(format!("ratio {ratio} outside [0, 1]")));
    }
    let order = rank_channels(&sim.scores);
    let k = si_count(ratio, order.len());
    let mut si = order[..k].to_vec();
    let mut ss = order[k..].to_vec();
    si.sort_unstable();
    ss.sort_unstable();
    Ok((si, ss))
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let data = idx.iter().flat_map(|&c| t.channel(c).iter().copied()).collect();
    Tensor::new(shape, data).expect("gather shape")
}

pub fn rank_and_split(sim: &ChannelSimilarity, embedding: &Tensor, ratio: f64) -> Result<DecoupledEmbedding> {
    if embedding.shape()[0] != sim.scores.len() {
        return Err(contract(format!(
            "{} scores for {} channels",
            sim.scores.len(),
            embedding.shape()[0]
        )));
    }
    let (si, ss) = split_indices(sim, ratio)?;
    Ok(DecoupledEmbedding {
        si_tensor: gather(embedding, &si),
        ss_tensor: gather(embedding, &ss),
        si_indices: si,
        ss_indices: ss,
        ratio,
    })
}
