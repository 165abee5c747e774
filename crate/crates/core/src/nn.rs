//! Network building blocks: the encoder / residual-stack / decoder
//! generator with indexed-layer partial forward passes, and the patch
//! discriminator.
//!
//! Layer indexing is 1-based and exhaustive: layers `1..=n_enc` are
//! encoder convolutions, `n_enc+1..=n_enc+n_res` are residual blocks
//! (one block counts as one layer), and the rest are decoder layers.
//! A layer's emitted activation (after its normalization and
//! nonlinearity) is what partial forwards return.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{ActKind, Element, PadMode, Tape, Tensor, Var};

/// Epsilon used by every instance-normalization layer.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Standard deviation of the zero-mean Gaussian parameter init.
pub const INIT_STD: f64 = 0.02;

fn default_one() -> usize {
    1
}

/// Architecture of a generator: `n_enc` encoder convolutions, `n_res`
/// residual blocks, `n_dec` decoder layers, with a doubling/halving
/// channel plan anchored at `base_channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_enc: usize,
    pub n_res: usize,
    pub n_dec: usize,
    pub base_channels: usize,
    #[serde(default = "default_one")]
    pub in_channels: usize,
    #[serde(default = "default_one")]
    pub out_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_enc: 3,
            n_res: 9,
            n_dec: 3,
            base_channels: 64,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl GeneratorSpec {
    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_enc < 1 || self.n_dec < 1 {
            return Err(Error::Config(
                "generator needs at least one encoder and one decoder layer".into(),
            ));
        }
        if self.n_enc != self.n_dec {
            return Err(Error::Config(format!(
                "generator needs n_enc == n_dec so output extents match the input, got {} vs {}",
                self.n_enc, self.n_dec
            )));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config("generator channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Total layer count `L = n_enc + n_res + n_dec`.
    pub fn total_layers(&self) -> usize {
        self.n_enc + self.n_res + self.n_dec
    }

    /// Spatial downsampling factor between the input and the residual
    /// stack: every encoder layer after the first halves the extent.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.n_enc - 1)
    }

    /// Output channel count of layer `i` (1-based, `i <= L`).
    pub fn channels_at(&self, i: usize) -> Result<usize> {
        let l = self.total_layers();
        if i < 1 || i > l {
            return Err(Error::InvalidArg(format!(
                "layer index {i} out of range 1..={l}"
            )));
        }
        let widest = self.base_channels << (self.n_enc - 1);
        Ok(if i <= self.n_enc {
            self.base_channels << (i - 1)
        } else if i <= self.n_enc + self.n_res {
            widest
        } else {
            let j = i - self.n_enc - self.n_res; // decoder position, 1-based
            if j < self.n_dec {
                widest >> j
            } else {
                self.out_channels
            }
        })
    }
}

/// Post-convolution nonlinearity of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerAct {
    Relu,
    LeakyRelu(f64),
    Tanh,
    None,
}

impl LayerAct {
    fn apply<E: Element>(self, tape: &mut Tape<E>, v: Var) -> Result<Var> {
        match self {
            LayerAct::Relu => tape.activation(v, ActKind::Relu),
            LayerAct::LeakyRelu(s) => tape.activation(v, ActKind::LeakyRelu(s)),
            LayerAct::Tanh => tape.activation(v, ActKind::Tanh),
            LayerAct::None => Ok(v),
        }
    }
}

/// Per-side spatial padding specification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub pads: [usize; 4], // top, bottom, left, right
    pub mode: PadMode,
}

impl Padding {
    pub fn symmetric(p: usize, mode: PadMode) -> Self {
        Padding { pads: [p; 4], mode }
    }
}

/// Kind-agnostic description of one layer.
#[derive(Clone, Debug)]
pub(crate) enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        padding: Padding,
        norm: bool,
        act: LayerAct,
    },
    TConv {
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: bool,
        act: LayerAct,
    },
    Res,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerPlan {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// The full per-layer plan for a generator spec.
pub(crate) fn layer_plans(spec: &GeneratorSpec) -> Vec<LayerPlan> {
    let mut plans = Vec::with_capacity(spec.total_layers());
    let mut prev = spec.in_channels;
    for i in 1..=spec.total_layers() {
        let out_ch = spec.channels_at(i).expect("index in range");
        let kind = if i <= spec.n_enc {
            if i == 1 {
                LayerKind::Conv {
                    kernel: 7,
                    stride: 1,
                    padding: Padding::symmetric(3, PadMode::Reflect),
                    norm: true,
                    act: LayerAct::Relu,
                }
            } else {
                LayerKind::Conv {
                    kernel: 3,
                    stride: 2,
                    padding: Padding::symmetric(1, PadMode::Reflect),
                    norm: true,
                    act: LayerAct::Relu,
                }
            }
        } else if i <= spec.n_enc + spec.n_res {
            LayerKind::Res
        } else if i < spec.total_layers() {
            // fractional-stride upsampling; kernel 4 doubles the extent
            // exactly under out = (H-1)*stride - 2*padding + kernel
            LayerKind::TConv {
                kernel: 4,
                stride: 2,
                padding: 1,
                norm: true,
                act: LayerAct::Relu,
            }
        } else {
            LayerKind::Conv {
                kernel: 7,
                stride: 1,
                padding: Padding::symmetric(3, PadMode::Reflect),
                norm: false,
                act: LayerAct::Tanh,
            }
        };
        plans.push(LayerPlan {
            kind,
            in_ch: prev,
            out_ch,
        });
        prev = out_ch;
    }
    plans
}

/// One named parameter tensor of a layer.
pub struct ParamRef<'a, E: Element> {
    pub name: &'static str,
    pub tensor: &'a Tensor<E>,
}

/// A built layer holding its parameters.
#[derive(Clone, Debug)]
pub enum GenLayer<E: Element> {
    Conv {
        weight: Tensor<E>,
        bias: Tensor<E>,
        stride: usize,
        padding: Padding,
        norm: bool,
        act: LayerAct,
    },
    TConv {
        weight: Tensor<E>,
        bias: Tensor<E>,
        stride: usize,
        padding: usize,
        norm: bool,
        act: LayerAct,
    },
    Res {
        conv1_weight: Tensor<E>,
        conv1_bias: Tensor<E>,
        conv2_weight: Tensor<E>,
        conv2_bias: Tensor<E>,
        /// 1x1 projection reconciling a widened input with the block's
        /// output channels; present only when in_ch != out_ch.
        skip: Option<(Tensor<E>, Tensor<E>)>,
    },
}

fn gaussian<E: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng))).expect("non-empty shape")
}

impl<E: Element> GenLayer<E> {
    /// Builds a layer from its plan with seeded Gaussian weights and zero
    /// biases. `rng` is the layer's dedicated stream.
    pub(crate) fn build(plan: &LayerPlan, rng: &mut ChaCha8Rng) -> Self {
        match plan.kind {
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                norm,
                act,
            } => GenLayer::Conv {
                weight: gaussian(rng, vec![plan.out_ch, plan.in_ch, kernel, kernel], INIT_STD),
                bias: Tensor::zeros(vec![plan.out_ch]).unwrap(),
                stride,
                padding,
                norm,
                act,
            },
            LayerKind::TConv {
                kernel,
                stride,
                padding,
                norm,
                act,
            } => GenLayer::TConv {
                weight: gaussian(rng, vec![plan.in_ch, plan.out_ch, kernel, kernel], INIT_STD),
                bias: Tensor::zeros(vec![plan.out_ch]).unwrap(),
                stride,
                padding,
                norm,
                act,
            },
            LayerKind::Res => {
                let skip = if plan.in_ch != plan.out_ch {
                    Some((
                        gaussian(rng, vec![plan.out_ch, plan.in_ch, 1, 1], INIT_STD),
                        Tensor::zeros(vec![plan.out_ch]).unwrap(),
                    ))
                } else {
                    None
                };
                GenLayer::Res {
                    conv1_weight: gaussian(rng, vec![plan.out_ch, plan.in_ch, 3, 3], INIT_STD),
                    conv1_bias: Tensor::zeros(vec![plan.out_ch]).unwrap(),
                    conv2_weight: gaussian(rng, vec![plan.out_ch, plan.out_ch, 3, 3], INIT_STD),
                    conv2_bias: Tensor::zeros(vec![plan.out_ch]).unwrap(),
                    skip,
                }
            }
        }
    }

    /// Applies the layer on the tape. Parameters are registered as leaves
    /// with `train` deciding whether they receive gradients.
    pub fn apply(&self, tape: &mut Tape<E>, x: Var, train: bool) -> Result<Var> {
        match self {
            GenLayer::Conv {
                weight,
                bias,
                stride,
                padding,
                norm,
                act,
            } => {
                let w = tape.leaf(weight.clone(), train);
                let b = tape.leaf(bias.clone(), train);
                let padded = if padding.pads == [0; 4] {
                    x
                } else {
                    tape.pad(x, padding.pads, padding.mode)?
                };
                let mut v = tape.conv2d_nopad(padded, w, b, *stride)?;
                if *norm {
                    v = tape.instance_norm(v, INSTANCE_NORM_EPS)?;
                }
                act.apply(tape, v)
            }
            GenLayer::TConv {
                weight,
                bias,
                stride,
                padding,
                norm,
                act,
            } => {
                let w = tape.leaf(weight.clone(), train);
                let b = tape.leaf(bias.clone(), train);
                let mut v = tape.conv2d_transpose(x, w, b, *stride, *padding)?;
                if *norm {
                    v = tape.instance_norm(v, INSTANCE_NORM_EPS)?;
                }
                act.apply(tape, v)
            }
            GenLayer::Res {
                conv1_weight,
                conv1_bias,
                conv2_weight,
                conv2_bias,
                skip,
            } => {
                let w1 = tape.leaf(conv1_weight.clone(), train);
                let b1 = tape.leaf(conv1_bias.clone(), train);
                let w2 = tape.leaf(conv2_weight.clone(), train);
                let b2 = tape.leaf(conv2_bias.clone(), train);
                let mut h = tape.conv2d(x, w1, b1, 1, 1, PadMode::Reflect)?;
                h = tape.instance_norm(h, INSTANCE_NORM_EPS)?;
                h = tape.activation(h, ActKind::Relu)?;
                h = tape.conv2d(h, w2, b2, 1, 1, PadMode::Reflect)?;
                h = tape.instance_norm(h, INSTANCE_NORM_EPS)?;
                let s = match skip {
                    Some((sw, sb)) => {
                        let swv = tape.leaf(sw.clone(), train);
                        let sbv = tape.leaf(sb.clone(), train);
                        tape.conv2d(x, swv, sbv, 1, 0, PadMode::Zero)?
                    }
                    None => x,
                };
                tape.add(h, s)
            }
        }
    }

    /// Named parameter tensors, in a stable order.
    pub fn params(&self) -> Vec<ParamRef<'_, E>> {
        match self {
            GenLayer::Conv { weight, bias, .. } | GenLayer::TConv { weight, bias, .. } => vec![
                ParamRef {
                    name: "weight",
                    tensor: weight,
                },
                ParamRef {
                    name: "bias",
                    tensor: bias,
                },
            ],
            GenLayer::Res {
                conv1_weight,
                conv1_bias,
                conv2_weight,
                conv2_bias,
                skip,
            } => {
                let mut v = vec![
                    ParamRef {
                        name: "conv1_weight",
                        tensor: conv1_weight,
                    },
                    ParamRef {
                        name: "conv1_bias",
                        tensor: conv1_bias,
                    },
                    ParamRef {
                        name: "conv2_weight",
                        tensor: conv2_weight,
                    },
                    ParamRef {
                        name: "conv2_bias",
                        tensor: conv2_bias,
                    },
                ];
                if let Some((sw, sb)) = skip {
                    v.push(ParamRef {
                        name: "skip_weight",
                        tensor: sw,
                    });
                    v.push(ParamRef {
                        name: "skip_bias",
                        tensor: sb,
                    });
                }
                v
            }
        }
    }

    /// Mutable access in the same order as [`GenLayer::params`].
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<E>)> {
        match self {
            GenLayer::Conv { weight, bias, .. } | GenLayer::TConv { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            GenLayer::Res {
                conv1_weight,
                conv1_bias,
                conv2_weight,
                conv2_bias,
                skip,
            } => {
                let mut v = vec![
                    ("conv1_weight", conv1_weight),
                    ("conv1_bias", conv1_bias),
                    ("conv2_weight", conv2_weight),
                    ("conv2_bias", conv2_bias),
                ];
                if let Some((sw, sb)) = skip {
                    v.push(("skip_weight", sw));
                    v.push(("skip_bias", sb));
                }
                v
            }
        }
    }
}

/// Feature maps emitted by layer `source_layer` of stream `stream_id`
/// (1..K one-to-one, K+1 many-to-one), tied to a tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub source_layer: usize,
    pub stream_id: usize,
}

/// Encoder - residual stack - decoder generator with indexed layers.
#[derive(Clone, Debug)]
pub struct Generator<E: Element> {
    spec: GeneratorSpec,
    layers: Vec<GenLayer<E>>,
}

impl<E: Element> Generator<E> {
    /// Deterministic construction from a spec and seed.
    pub fn build(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = layer_plans(&spec)
            .iter()
            .enumerate()
            .map(|(idx, plan)| {
                let mut rng = substream(seed, &[0x67656e, idx as u64 + 1]);
                GenLayer::build(plan, &mut rng)
            })
            .collect();
        Ok(Generator { spec, layers })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn total_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[GenLayer<E>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GenLayer<E>] {
        &mut self.layers
    }

    fn validate_input(&self, tape: &Tape<E>, x: Var) -> Result<()> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let f = self.spec.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "generator input extents must be multiples of {f}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Applies layers `from..=to` (1-based, inclusive) to `v`.
    pub fn apply_layers(
        &self,
        tape: &mut Tape<E>,
        v: Var,
        from: usize,
        to: usize,
        train: bool,
    ) -> Result<Var> {
        let l = self.total_layers();
        if from < 1 || to > l || from > to {
            return Err(Error::InvalidArg(format!(
                "layer span {from}..={to} out of range 1..={l}"
            )));
        }
        let mut v = v;
        for layer in &self.layers[from - 1..to] {
            v = layer.apply(tape, v, train)?;
        }
        Ok(v)
    }

    /// Full forward pass; output is co-shaped with the input and bounded
    /// to (-1, 1) by the final tanh.
    pub fn forward(&self, tape: &mut Tape<E>, x: Var, train: bool) -> Result<Var> {
        self.validate_input(tape, x)?;
        self.apply_layers(tape, x, 1, self.total_layers(), train)
    }

    /// Partial forward up to layer `i` (its emitted activation),
    /// `1 <= i <= L-1`.
    pub fn forward_to_layer(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        i: usize,
        stream_id: usize,
        train: bool,
    ) -> Result<FeatureMap> {
        let l = self.total_layers();
        if i < 1 || i >= l {
            return Err(Error::InvalidArg(format!(
                "fusion layer index {i} out of range 1..={}",
                l - 1
            )));
        }
        self.validate_input(tape, x)?;
        let var = self.apply_layers(tape, x, 1, i, train)?;
        Ok(FeatureMap {
            var,
            source_layer: i,
            stream_id,
        })
    }

    /// Applies the remaining layers `i+1..=L` to a partial activation.
    pub fn forward_from_layer(
        &self,
        tape: &mut Tape<E>,
        v: Var,
        i: usize,
        train: bool,
    ) -> Result<Var> {
        self.apply_layers(tape, v, i + 1, self.total_layers(), train)
    }

    /// Visits `(name, tensor)` for every parameter; names are
    /// `layer{k}/{param}` with `k` the 1-based layer index.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (idx, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                f(format!("layer{}/{}", idx + 1, p.name), p.tensor);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.params_mut() {
                f(format!("layer{}/{}", idx + 1, name), t);
            }
        }
    }
}

/// Patch discriminator architecture: `n_layers` 4x4 convolutions with
/// strides 2,...,2,1,1, channels doubling from `base_channels`, leaky-relu
/// activations, instance norm on the middle layers, and a raw patch-map
/// output (no squashing; scores feed the least-squares loss).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub n_layers: usize,
    pub in_channels: usize,
    pub base_channels: usize,
}

impl DiscriminatorSpec {
    pub fn new(in_channels: usize, base_channels: usize) -> Self {
        DiscriminatorSpec {
            n_layers: 5,
            in_channels,
            base_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config("discriminator needs at least 2 layers".into()));
        }
        if self.in_channels < 1 || self.base_channels < 1 {
            return Err(Error::Config("discriminator channel counts must be >= 1".into()));
        }
        Ok(())
    }

    fn out_channels(&self, j: usize) -> usize {
        if j == self.n_layers {
            1
        } else {
            self.base_channels << (j - 1).min(3)
        }
    }

    fn stride(&self, j: usize) -> usize {
        if j + 2 <= self.n_layers {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<E: Element> {
    spec: DiscriminatorSpec,
    layers: Vec<GenLayer<E>>,
}

impl<E: Element> Discriminator<E> {
    pub fn build(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.n_layers);
        let mut prev = spec.in_channels;
        for j in 1..=spec.n_layers {
            let out_ch = spec.out_channels(j);
            let stride = spec.stride(j);
            // stride-1 layers keep the extent via asymmetric padding
            let padding = if stride == 2 {
                Padding::symmetric(1, PadMode::Zero)
            } else {
                Padding {
                    pads: [1, 2, 1, 2],
                    mode: PadMode::Zero,
                }
            };
            let act = if j == spec.n_layers {
                LayerAct::None
            } else {
                LayerAct::LeakyRelu(0.2)
            };
            let norm = j > 1 && j < spec.n_layers;
            let plan = LayerPlan {
                kind: LayerKind::Conv {
                    kernel: 4,
                    stride,
                    padding,
                    norm,
                    act,
                },
                in_ch: prev,
                out_ch,
            };
            let mut rng = substream(seed, &[0x64697363, j as u64]);
            layers.push(GenLayer::build(&plan, &mut rng));
            prev = out_ch;
        }
        Ok(Discriminator { spec, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[GenLayer<E>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GenLayer<E>] {
        &mut self.layers
    }

    /// Channel-concatenates conditioning images then the candidate and
    /// runs the conv stack, returning the raw patch map.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        conditioning: &[Var],
        candidate: Var,
        train: bool,
    ) -> Result<Var> {
        let mut inputs = conditioning.to_vec();
        inputs.push(candidate);
        let stacked = tape.concat_channels(&inputs)?;
        let (_, c, _, _) = tape.value(stacked).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} stacked input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let mut v = stacked;
        for layer in &self.layers {
            v = layer.apply(tape, v, train)?;
        }
        Ok(v)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (idx, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                f(format!("layer{}/{}", idx + 1, p.name), p.tensor);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.params_mut() {
                f(format!("layer{}/{}", idx + 1, name), t);
            }
        }
    }
}

/// Maps image intensities `[0,1]` into the network range `(-1,1)`.
pub fn to_model_range<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    let two = E::from_f64(2.0);
    t.map(|v| two * v - E::one())
}

/// Maps network outputs back to `[0,1]`, clamping the tanh range.
pub fn from_model_range<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    t.map(|v| {
        let u = (v + E::one()) * half;
        if u < E::zero() {
            E::zero()
        } else if u > E::one() {
            E::one()
        } else {
            u
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn param_fingerprint<E: Element>(g: &Generator<E>) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        g.visit_params(&mut |name, t| {
            let mut bytes = Vec::new();
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            out.push((name, bytes));
        });
        out
    }

    #[test]
    fn default_spec_builds_fifteen_layers_with_documented_channels() {
        let spec = GeneratorSpec::default();
        let gen = Generator::<f32>::build(spec, 7).unwrap();
        assert_eq!(gen.total_layers(), 15);
        let expected: Vec<usize> = [64, 128, 256]
            .into_iter()
            .chain(std::iter::repeat(256).take(9))
            .chain([128, 64, 1])
            .collect();
        let got: Vec<usize> = (1..=15).map(|i| spec.channels_at(i).unwrap()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn many_to_one_spec_accepts_k_channels() {
        let spec = GeneratorSpec::default().with_in_channels(2);
        let gen = Generator::<f32>::build(spec, 3).unwrap();
        match &gen.layers()[0] {
            GenLayer::Conv { weight, .. } => assert_eq!(weight.shape(), &[64, 2, 7, 7]),
            other => panic!("first layer should be a conv, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = GeneratorSpec {
            n_res: 2,
            base_channels: 4,
            ..GeneratorSpec::default()
        };
        let a = Generator::<f32>::build(spec, 99).unwrap();
        let b = Generator::<f32>::build(spec, 99).unwrap();
        let c = Generator::<f32>::build(spec, 100).unwrap();
        assert_eq!(param_fingerprint(&a), param_fingerprint(&b));
        assert_ne!(param_fingerprint(&a), param_fingerprint(&c));
    }

    #[test]
    fn generator_forward_preserves_shape_and_is_finite() {
        let spec = GeneratorSpec {
            n_res: 2,
            base_channels: 4,
            ..GeneratorSpec::default()
        };
        let gen = Generator::<f32>::build(spec, 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 16, 16], |i| (i as f32 * 0.37).sin()).unwrap());
        let y = gen.forward(&mut tape, x, false).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 16, 16]);
        assert!(out.all_finite());
        assert!(out.data().iter().all(|&v| -1.0 < v && v < 1.0));
    }

    #[test]
    fn indivisible_extents_name_required_multiple() {
        let spec = GeneratorSpec {
            n_res: 1,
            base_channels: 2,
            ..GeneratorSpec::default()
        };
        let gen = Generator::<f32>::build(spec, 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 18, 18]).unwrap());
        let err = gen.forward(&mut tape, x, false).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"), "got: {err}");
    }

    #[test]
    fn partial_then_rest_equals_full_forward_bitwise() {
        let spec = GeneratorSpec {
            n_res: 3,
            base_channels: 4,
            ..GeneratorSpec::default()
        };
        let gen = Generator::<f32>::build(spec, 11).unwrap();
        let input = Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i * 13 % 29) as f32) / 29.0).unwrap();
        let mut t1 = Tape::new();
        let x1 = t1.constant(input.clone());
        let full = gen.forward(&mut t1, x1, false).unwrap();
        for i in [1usize, 3, 4, 6, 8] {
            let mut t2 = Tape::new();
            let x2 = t2.constant(input.clone());
            let fm = gen.forward_to_layer(&mut t2, x2, i, 1, false).unwrap();
            let rest = gen.forward_from_layer(&mut t2, fm.var, i, false).unwrap();
            assert_eq!(
                t2.value(rest).data(),
                t1.value(full).data(),
                "composition differs at split {i}"
            );
        }
    }

    #[test]
    fn feature_map_extents_follow_channel_plan() {
        let spec = GeneratorSpec::default(); // L = 15
        let gen = Generator::<f32>::build(spec, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 16, 16]).unwrap());
        // i = n_enc: encoder output, widest channels at quarter extent
        let fm = gen.forward_to_layer(&mut tape, x, 3, 1, false).unwrap();
        assert_eq!(tape.value(fm.var).shape(), &[1, 256, 4, 4]);
        // i = 13: first decoder layer done, extents halve back
        let fm = gen.forward_to_layer(&mut tape, x, 13, 1, false).unwrap();
        assert_eq!(tape.value(fm.var).shape(), &[1, 128, 8, 8]);
    }

    #[test]
    fn discriminator_patch_extents_and_channel_contract() {
        // one-to-one conditioning: 2 input channels
        let disc = Discriminator::<f32>::build(DiscriminatorSpec::new(2, 64), 1).unwrap();
        let mut tape = Tape::new();
        let cond = tape.constant(Tensor::zeros(vec![1, 1, 64, 64]).unwrap());
        let cand = tape.constant(Tensor::full(vec![1, 1, 64, 64], 0.1).unwrap());
        let patch = disc.forward(&mut tape, &[cond], cand, false).unwrap();
        assert_eq!(tape.value(patch).shape(), &[1, 1, 8, 8]);
        assert!(tape.value(patch).all_finite());

        // K+1 channels for the many-to-one / joint discriminator
        let disc3 = Discriminator::<f32>::build(DiscriminatorSpec::new(3, 16), 1).unwrap();
        let mut tape = Tape::new();
        let c1 = tape.constant(Tensor::zeros(vec![1, 1, 16, 16]).unwrap());
        let c2 = tape.constant(Tensor::zeros(vec![1, 1, 16, 16]).unwrap());
        let cand = tape.constant(Tensor::zeros(vec![1, 1, 16, 16]).unwrap());
        let patch = disc3.forward(&mut tape, &[c1, c2], cand, false).unwrap();
        assert_eq!(tape.value(patch).shape(), &[1, 1, 2, 2]);

        // wrong channel total is rejected
        let mut tape = Tape::new();
        let c1 = tape.constant(Tensor::zeros(vec![1, 1, 16, 16]).unwrap());
        let cand = tape.constant(Tensor::zeros(vec![1, 1, 16, 16]).unwrap());
        assert!(disc3.forward(&mut tape, &[c1], cand, false).is_err());
    }

    #[test]
    fn rebuild_same_seed_same_forward() {
        let spec = GeneratorSpec {
            n_res: 1,
            base_channels: 3,
            ..GeneratorSpec::default()
        };
        let input = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f32).cos()).unwrap();
        let mut outs = Vec::new();
        for _ in 0..2 {
            let gen = Generator::<f32>::build(spec, 77).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let y = gen.forward(&mut tape, x, false).unwrap();
            outs.push(tape.value(y).to_vec());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn range_mapping_roundtrip() {
        let t = Tensor::<f64>::from_fn(vec![5], |i| i as f64 / 4.0).unwrap();
        let m = to_model_range(&t);
        assert_eq!(m.data()[0], -1.0);
        assert_eq!(m.data()[4], 1.0);
        let back = from_model_range(&m);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
