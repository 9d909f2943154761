//! A small convolutional segmentation network with activation capture.
//!
//! Stages are `conv 3×3 → ReLU [→ 2×2 pool]`; a 1×1 convolution head maps
//! the final stage to one logit per output row (background first).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Max,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Zero weights, bias copied from the background row.
    ZeroBackgroundBias,
    /// Small Gaussian weights, zero bias.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub pool_after: Vec<bool>,
    pub kernel: usize,
    pub pooling: Pooling,
    /// Feature stage whose channels are decoupled and scored by relevance;
    /// defaults to the last stage.
    pub decoupling_stage: Option<usize>,
    pub head_init: HeadInit,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32],
            pool_after: vec![true, true, false],
            kernel: 3,
            pooling: Pooling::Avg,
            decoupling_stage: None,
            head_init: HeadInit::ZeroBackgroundBias,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(crate::error::config("network needs non-zero stage widths"));
        }
        if self.pool_after.len() != self.widths.len() {
            return Err(crate::error::config("pool_after must list one flag per stage"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(crate::error::config("kernel size must be odd"));
        }
        if self.decoupling_stage.is_some_and(|s| s >= self.widths.len()) {
            return Err(crate::error::config("decoupling stage out of range"));
        }
        Ok(())
    }

    pub fn decoupling_stage(&self) -> usize {
        self.decoupling_stage.unwrap_or(self.widths.len() - 1)
    }

    /// Spatial downsampling factor between input and logits.
    pub fn output_stride(&self) -> usize {
        1 << self.pool_after.iter().filter(|&&p| p).count()
    }

    /// Output extent of every stage for an `h × w` input.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (h, w);
        self.widths
            .iter()
            .zip(&self.pool_after)
            .map(|(&c, &pool)| {
                if pool {
                    h /= 2;
                    w /= 2;
                }
                (c, h, w)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `out × in × k × k`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn pad(&self) -> usize {
        self.weight.shape()[2] / 2
    }
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    AvgPool,
    MaxPool,
    Head(ConvLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::AvgPool => "avg_pool",
            Layer::MaxPool => "max_pool",
            Layer::Head(_) => "head",
        }
    }

    fn conv(&self) -> Option<&ConvLayer> {
        match self {
            Layer::Conv(c) | Layer::Head(c) => Some(c),
            _ => None,
        }
    }

    fn conv_mut(&mut self) -> Option<&mut ConvLayer> {
        match self {
            Layer::Conv(c) | Layer::Head(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetwork {
    config: NetConfig,
    layers: Vec<Layer>,
    /// Index of the last layer of each feature stage.
    stage_ends: Vec<usize>,
}

/// Parameters of a network placed on a tape, one `(weight, bias)` per conv layer.
pub struct BoundNet {
    params: Vec<Option<(Var, Var)>>,
}

impl BoundNet {
    pub fn layer(&self, i: usize) -> Option<(Var, Var)> {
        self.params[i]
    }

    /// Parameter vars in [`SegNetwork::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Per-layer vars of one forward pass on a tape.
pub struct ForwardVars {
    pub input: Var,
    /// Output of every layer; the last one is the logit map.
    pub outputs: Vec<Var>,
    pub stage_ends: Vec<usize>,
}

impl ForwardVars {
    pub fn logits(&self) -> Var {
        *self.outputs.last().expect("network has layers")
    }

    pub fn stage(&self, s: usize) -> Var {
        self.outputs[self.stage_ends[s]]
    }

    /// Input of layer `l`.
    pub fn layer_input(&self, l: usize) -> Var {
        if l == 0 {
            self.input
        } else {
            self.outputs[l - 1]
        }
    }
}

/// Everything one forward pass produces, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub input: Tensor,
    pub activations: Vec<Tensor>,
    pub stage_ends: Vec<usize>,
    pub decoupling_stage: usize,
    pub logits: Tensor,
    /// Per-pixel softmax over output rows.
    pub soft_map: Tensor,
}

impl FeatureBundle {
    pub fn stage(&self, s: usize) -> &Tensor {
        &self.activations[self.stage_ends[s]]
    }

    /// Feature map of the decoupling stage.
    pub fn features(&self) -> &Tensor {
        self.stage(self.decoupling_stage)
    }

    /// Row-major flattening of channel `c` of the decoupling stage.
    pub fn embedding(&self, c: usize) -> &[f64] {
        self.features().channel(c)
    }

    pub fn num_stages(&self) -> usize {
        self.stage_ends.len()
    }
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (k, h, w) = logits.chw()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![0.0; k * plane];
    for p in 0..plane {
        let max = (0..k).map(|c| x[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = (x[c * plane + p] - max).exp();
            out[c * plane + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * plane + p] /= z;
        }
    }
    Tensor::new(vec![k, h, w], out)
}

fn he_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

impl SegNetwork {
    /// He-initialised network with `num_outputs` head rows.
    pub fn new(config: NetConfig, num_outputs: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_outputs < 1 {
            return Err(contract("network needs at least one output row"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let mut layers = Vec::new();
        let mut stage_ends = Vec::new();
        let mut cin = config.in_channels;
        for (&c, &pool) in config.widths.iter().zip(&config.pool_after) {
            layers.push(Layer::Conv(ConvLayer {
                weight: he_normal(&mut rng, vec![c, cin, k, k], cin * k * k),
                bias: Tensor::zeros(vec![c]),
            }));
            layers.push(Layer::Relu);
            if pool {
                layers.push(match config.pooling {
                    Pooling::Avg => Layer::AvgPool,
                    Pooling::Max => Layer::MaxPool,
                });
            }
            stage_ends.push(layers.len() - 1);
            cin = c;
        }
        layers.push(Layer::Head(ConvLayer {
            weight: he_normal(&mut rng, vec![num_outputs, cin, 1, 1], cin),
            bias: Tensor::zeros(vec![num_outputs]),
        }));
        Ok(Self {
            config,
            layers,
            stage_ends,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn stage_ends(&self) -> &[usize] {
        &self.stage_ends
    }

    pub fn num_stages(&self) -> usize {
        self.stage_ends.len()
    }

    pub fn decoupling_stage(&self) -> usize {
        self.config
            .decoupling_stage
            .unwrap_or(self.stage_ends.len() - 1)
            .min(self.stage_ends.len() - 1)
    }

    pub fn head(&self) -> &ConvLayer {
        match self.layers.last() {
            Some(Layer::Head(h)) => h,
            _ => unreachable!("constructed with a head"),
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.head().out_channels()
    }

    /// All parameters: `(weight, bias)` of each conv layer in order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(Layer::conv)
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::conv_mut)
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut stage = 0;
        for l in &self.layers {
            match l {
                Layer::Conv(_) => {
                    names.push(format!("stage{stage}.weight"));
                    names.push(format!("stage{stage}.bias"));
                    stage += 1;
                }
                Layer::Head(_) => {
                    names.push("head.weight".into());
                    names.push("head.bias".into());
                }
                _ => {}
            }
        }
        names
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Places parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let params = self
            .layers
            .iter()
            .map(|l| {
                l.conv().map(|c| {
                    if trainable {
                        (tape.param(c.weight.clone()), tape.param(c.bias.clone()))
                    } else {
                        (tape.constant(c.weight.clone()), tape.constant(c.bias.clone()))
                    }
                })
            })
            .collect();
        BoundNet { params }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let (c, h, w) = input.chw()?;
        if c != self.config.in_channels {
            return Err(contract(format!(
                "image has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        let stride = self.config.output_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(contract(format!(
                "image extent {h}×{w} not divisible by output stride {stride}"
            )));
        }
        Ok(())
    }

    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundNet, input: Var) -> Result<ForwardVars> {
        self.check_input(tape.value(input))?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv(c) | Layer::Head(c) => {
                    let (w, b) = bound.layer(i).expect("conv layer is bound");
                    let z = tape.conv2d(x, w, c.pad())?;
                    tape.add_channel_bias(z, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::AvgPool => tape.avg_pool2(x)?,
                Layer::MaxPool => tape.max_pool2(x)?,
            };
            outputs.push(x);
        }
        Ok(ForwardVars {
            input,
            outputs,
            stage_ends: self.stage_ends.clone(),
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<FeatureBundle> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let fv = self.forward_on(&mut tape, &bound, x)?;
        Ok(self.bundle(&tape, &fv))
    }

    /// Copies the values of a taped forward pass into a [`FeatureBundle`].
    pub fn bundle(&self, tape: &Tape, fv: &ForwardVars) -> FeatureBundle {
        let activations: Vec<Tensor> = fv.outputs.iter().map(|&v| tape.value(v).clone()).collect();
        let logits = activations.last().expect("layers").clone();
        let soft_map = softmax_rows(&logits).expect("logits are C×H×W");
        FeatureBundle {
            input: tape.value(fv.input).clone(),
            activations,
            stage_ends: self.stage_ends.clone(),
            decoupling_stage: self.decoupling_stage(),
            logits,
            soft_map,
        }
    }

    /// Adds `new_class_count` head rows; existing rows are kept bit-exactly.
    pub fn extend_head(&self, new_class_count: usize, seed: u64) -> Result<SegNetwork> {
        if new_class_count == 0 {
            return Err(contract("head extension needs at least one new class"));
        }
        let mut out = self.clone();
        let init = self.config.head_init;
        let Some(Layer::Head(head)) = out.layers.last_mut() else {
            unreachable!("constructed with a head")
        };
        let (k, cin) = (head.out_channels(), head.in_channels());
        let mut w = head.weight.data().to_vec();
        let mut b = head.bias.data().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        for _ in 0..new_class_count {
            match init {
                HeadInit::ZeroBackgroundBias => {
                    w.extend(std::iter::repeat_n(0.0, cin));
                    b.push(b[0]);
                }
                HeadInit::Random => {
                    w.extend((0..cin).map(|_| normal.sample(&mut rng)));
                    b.push(0.0);
                }
            }
        }
        let rows = k + new_class_count;
        head.weight = Tensor::new(vec![rows, cin, 1, 1], w)?;
        head.bias = Tensor::new(vec![rows], b)?;
        Ok(out)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            net: self.clone(),
            frozen: true,
        }
    }

    /// Largest absolute parameter difference against another network of the same shape.
    pub fn max_param_delta(&self, other: &SegNetwork) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        let params = self.params();
        NetCheckpoint {
            version: NetCheckpoint::VERSION,
            config: self.config.clone(),
            manifest: self
                .param_names()
                .into_iter()
                .zip(&params)
                .map(|(name, t)| ParamEntry {
                    name,
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
            values: params.iter().map(|t| t.data().to_vec()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<SegNetwork> {
        if ckpt.version != NetCheckpoint::VERSION {
            return Err(contract(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let heads = ckpt
            .manifest
            .iter()
            .find(|e| e.name == "head.weight")
            .ok_or_else(|| contract("checkpoint has no head"))?
            .shape[0];
        let mut net = SegNetwork::new(ckpt.config.clone(), heads, 0)?;
        if net.param_names().len() != ckpt.manifest.len() {
            return Err(contract("checkpoint manifest does not match the configuration"));
        }
        let names = net.param_names();
        for (((slot, name), entry), values) in net
            .params_mut()
            .into_iter()
            .zip(names)
            .zip(&ckpt.manifest)
            .zip(&ckpt.values)
        {
            if entry.name != name || entry.shape != slot.shape() || entry.dtype != "f64" {
                return Err(contract(format!("checkpoint entry {} does not match {name}", entry.name)));
            }
            *slot = Tensor::new(entry.shape.clone(), values.clone())?;
        }
        Ok(net)
    }
}

/// A frozen deep copy of a network. Only forward passes are exposed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    net: SegNetwork,
    frozen: bool,
}

impl ModelSnapshot {
    pub fn net(&self) -> &SegNetwork {
        &self.net
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn forward(&self, input: &Tensor) -> Result<FeatureBundle> {
        self.net.forward(input)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        self.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// JSON-of-arrays parameter file with a layer manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub config: NetConfig,
    pub manifest: Vec<ParamEntry>,
    pub values: Vec<Vec<f64>>,
}

impl NetCheckpoint {
    pub const VERSION: u32 = 1;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.5, 0.2).unwrap();
        Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    /// Standalone shape calculator: each pooled stage halves both extents.
    fn expected_logit_shape(k: usize, h: usize, w: usize, pools: usize) -> Vec<usize> {
        vec![k, h >> pools, w >> pools]
    }

    #[test]
    fn reference_net_logit_shape() {
        let net = SegNetwork::new(NetConfig::default(), 6, 1).unwrap();
        let b = net.forward(&image(0)).unwrap();
        assert_eq!(b.logits.shape(), expected_logit_shape(6, 32, 32, 2).as_slice());
        assert_eq!(b.features().shape(), &[32, 8, 8]);
        assert_eq!(b.num_stages(), 3);
        assert_eq!(NetConfig::default().stage_shapes(32, 32), vec![(8, 16, 16), (16, 8, 8), (32, 8, 8)]);
    }

    #[test]
    fn zero_weights_give_uniform_soft_map() {
        let mut net = SegNetwork::new(NetConfig::default(), 4, 1).unwrap();
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = net.forward(&image(1)).unwrap();
        assert!(b.soft_map.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let net = SegNetwork::new(NetConfig::default(), 5, 3).unwrap();
        let a = net.forward(&image(2)).unwrap();
        let b = net.forward(&image(2)).unwrap();
        assert_eq!(a, b);
        let (k, h, w) = a.soft_map.chw().unwrap();
        for p in 0..h * w {
            let s: f64 = (0..k).map(|c| a.soft_map.data()[c * h * w + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.embedding(3), &a.features().data()[3 * 64..4 * 64]);
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let net = SegNetwork::new(NetConfig::default(), 2, 0).unwrap();
        let bad = Tensor::zeros(vec![1, 32, 32]);
        assert!(net.forward(&bad).is_err());
        let odd = Tensor::zeros(vec![3, 30, 30]);
        assert!(net.forward(&odd).is_err());
    }

    #[test]
    fn head_extension_preserves_old_rows() {
        let net = SegNetwork::new(NetConfig::default(), 6, 9).unwrap();
        let ext = net.extend_head(1, 0).unwrap();
        assert_eq!(ext.num_outputs(), 7);
        let (old, new) = (net.head(), ext.head());
        assert_eq!(&new.weight.data()[..old.weight.len()], old.weight.data());
        assert_eq!(&new.bias.data()[..6], old.bias.data());
        assert_eq!(new.bias.data()[6], old.bias.data()[0]);
        let x = image(4);
        let (a, b) = (net.forward(&x).unwrap(), ext.forward(&x).unwrap());
        assert_eq!(a.logits.data(), &b.logits.data()[..a.logits.len()]);
        assert!(net.extend_head(0, 0).is_err());
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut net = SegNetwork::new(NetConfig::default(), 3, 2).unwrap();
        let snap = net.snapshot();
        let x = image(5);
        assert_eq!(snap.forward(&x).unwrap(), net.forward(&x).unwrap());
        let before = snap.forward(&x).unwrap();
        net.params_mut()[0].data_mut()[0] += 0.5;
        assert_eq!(snap.forward(&x).unwrap(), before);
        assert_ne!(net.forward(&x).unwrap(), before);
        assert_eq!(snap.snapshot().forward(&x).unwrap(), before);
        assert!(snap.is_frozen());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let net = SegNetwork::new(NetConfig::default(), 4, 17).unwrap();
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back: NetCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = SegNetwork::from_checkpoint(&back).unwrap();
        for (a, b) in net.params().iter().zip(restored.params()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.manifest[0].name, "stage0.weight");
    }
}
