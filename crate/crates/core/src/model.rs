//! Multi-stream model assembly: K one-to-one streams, one many-to-one
//! stream, the concatenation fusion block at layer `i`, and the joint
//! network whose depth is determined by the fusion position.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    layer_plans, Discriminator, DiscriminatorSpec, FeatureMap, GenLayer, Generator, GeneratorSpec,
};
use crate::rng::derive_seed;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Where the fusion block sits relative to the generator stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRegime {
    Early,
    Intermediate,
    Late,
}

/// Fusion position `i` (1..=L-1) and source-contrast count `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub i: usize,
    pub k: usize,
}

impl FusionConfig {
    pub fn new(i: usize, k: usize) -> Self {
        FusionConfig { i, k }
    }

    pub fn validate(&self, spec: &GeneratorSpec) -> Result<()> {
        let l = spec.total_layers();
        if self.i < 1 || self.i >= l {
            return Err(Error::InvalidArg(format!(
                "fusion position {} out of range 1..={}",
                self.i,
                l - 1
            )));
        }
        if self.k < 1 {
            return Err(Error::InvalidArg("need at least one source contrast".into()));
        }
        Ok(())
    }

    /// Early inside the encoder (`0 < i < n_enc`), intermediate inside the
    /// residual stack (`n_enc <= i < n_enc+n_res`), late in the decoder.
    pub fn regime(&self, spec: &GeneratorSpec) -> FusionRegime {
        if self.i < spec.n_enc {
            FusionRegime::Early
        } else if self.i < spec.n_enc + spec.n_res {
            FusionRegime::Intermediate
        } else {
            FusionRegime::Late
        }
    }
}

/// Fused-input channel count at position `i`: the K one-to-one maps plus
/// the many-to-one map, each `C_i` channels wide.
pub fn joint_input_channels(i: usize, k: usize, spec: &GeneratorSpec) -> Result<usize> {
    Ok((k + 1) * spec.channels_at(i)?)
}

/// Coarse layer classification used to verify joint-network arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerType {
    Conv,
    Res,
    UpConv,
}

fn layer_type<E: Element>(l: &GenLayer<E>) -> LayerType {
    match l {
        GenLayer::Conv { .. } => LayerType::Conv,
        GenLayer::TConv { .. } => LayerType::UpConv,
        GenLayer::Res { .. } => LayerType::Res,
    }
}

/// The joint network: generator layers `i+1..=L` with the first layer
/// widened to accept the fused channel count, plus fresh parameters.
#[derive(Clone, Debug)]
pub struct JointNetwork<E: Element> {
    pub fusion_i: usize,
    layers: Vec<GenLayer<E>>,
}

impl<E: Element> JointNetwork<E> {
    pub fn build(spec: &GeneratorSpec, k: usize, fusion_i: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let l = spec.total_layers();
        if fusion_i < 1 || fusion_i >= l {
            return Err(Error::InvalidArg(format!(
                "fusion position {fusion_i} out of range 1..={}",
                l - 1
            )));
        }
        let mut plans = layer_plans(spec)[fusion_i..].to_vec();
        plans[0].in_ch = joint_input_channels(fusion_i, k, spec)?;
        let layers = plans
            .iter()
            .enumerate()
            .map(|(idx, plan)| {
                let mut rng = crate::rng::substream(seed, &[0x6a6f696e74, idx as u64 + 1]);
                GenLayer::build(plan, &mut rng)
            })
            .collect();
        Ok(JointNetwork { fusion_i, layers })
    }

    pub fn layers(&self) -> &[GenLayer<E>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GenLayer<E>] {
        &mut self.layers
    }

    pub fn layer_types(&self) -> Vec<LayerType> {
        self.layers.iter().map(layer_type).collect()
    }

    /// Input channel count of the first (widened) layer.
    pub fn input_channels(&self) -> usize {
        match &self.layers[0] {
            GenLayer::Conv { weight, .. } => weight.shape()[1],
            GenLayer::TConv { weight, .. } => weight.shape()[0],
            GenLayer::Res { conv1_weight, .. } => conv1_weight.shape()[1],
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, fused: Var, train: bool) -> Result<Var> {
        let mut v = fused;
        for layer in &self.layers {
            v = layer.apply(tape, v, train)?;
        }
        Ok(v)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (idx, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                f(
                    format!("layer{}/{}", self.fusion_i + idx + 1, p.name),
                    p.tensor,
                );
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.params_mut() {
                f(format!("layer{}/{}", self.fusion_i + idx + 1, name), t);
            }
        }
    }
}

/// One generator/discriminator pair.
#[derive(Clone, Debug)]
pub struct Stream<E: Element> {
    pub gen: Generator<E>,
    pub disc: Discriminator<E>,
}

/// The assembled multi-stream model.
#[derive(Clone, Debug)]
pub struct MultiStreamModel<E: Element> {
    /// K one-to-one streams, index m = stream id m+1.
    pub streams: Vec<Stream<E>>,
    /// The (K+1)-th stream taking all sources channel-stacked.
    pub many: Stream<E>,
    pub fusion: FusionConfig,
    pub joint: JointNetwork<E>,
    pub joint_disc: Discriminator<E>,
    pub gen_spec: GeneratorSpec,
    /// Source contrast labels, in stream order.
    pub sources: Vec<String>,
    /// Target contrast label.
    pub target: String,
}

impl<E: Element> MultiStreamModel<E> {
    /// Builds K+1 streams plus the joint network, all deterministically
    /// seeded. `gen_spec.in_channels`/`out_channels` are forced to the
    /// stream roles (1 and K source channels in, 1 out). Discriminator
    /// width follows `gen_spec.base_channels`.
    pub fn assemble(
        k: usize,
        gen_spec: GeneratorSpec,
        fusion: FusionConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut spec = gen_spec;
        spec.in_channels = 1;
        spec.out_channels = 1;
        spec.validate()?;
        fusion.validate(&spec)?;
        if fusion.k != k {
            return Err(Error::InvalidArg(format!(
                "fusion config says K={} but {k} sources were requested",
                fusion.k
            )));
        }
        let base = spec.base_channels;
        let mut streams = Vec::with_capacity(k);
        for m in 1..=k {
            streams.push(Stream {
                gen: Generator::build(spec, derive_seed(seed, &[1, m as u64]))?,
                disc: Discriminator::build(
                    DiscriminatorSpec::new(2, base),
                    derive_seed(seed, &[2, m as u64]),
                )?,
            });
        }
        let many = Stream {
            gen: Generator::build(
                spec.with_in_channels(k),
                derive_seed(seed, &[1, k as u64 + 1]),
            )?,
            disc: Discriminator::build(
                DiscriminatorSpec::new(k + 1, base),
                derive_seed(seed, &[2, k as u64 + 1]),
            )?,
        };
        let joint =
            JointNetwork::build(&spec, k, fusion.i, derive_seed(seed, &[3, fusion.i as u64]))?;
        let joint_disc = Discriminator::build(
            DiscriminatorSpec::new(k + 1, base),
            derive_seed(seed, &[4, fusion.i as u64]),
        )?;
        Ok(MultiStreamModel {
            streams,
            many,
            fusion,
            joint,
            joint_disc,
            gen_spec: spec,
            sources: (1..=k).map(|m| format!("src{m}")).collect(),
            target: "target".into(),
        })
    }

    pub fn with_roles(mut self, sources: Vec<String>, target: String) -> Result<Self> {
        if sources.len() != self.fusion.k {
            return Err(Error::Config(format!(
                "{} source labels for K={}",
                sources.len(),
                self.fusion.k
            )));
        }
        self.sources = sources;
        self.target = target;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.fusion.k
    }

    /// Concatenates the K+1 feature maps in the fixed stream order
    /// (1..K then K+1). Wrong count, order metadata, or fusion layer is
    /// rejected rather than silently reordered.
    pub fn fuse(&self, tape: &mut Tape<E>, maps: &[FeatureMap]) -> Result<Var> {
        let k = self.k();
        if maps.len() != k + 1 {
            return Err(Error::InvalidArg(format!(
                "fusion needs exactly K+1 = {} feature maps, got {}",
                k + 1,
                maps.len()
            )));
        }
        for (idx, fm) in maps.iter().enumerate() {
            let expect = idx + 1;
            if fm.stream_id != expect {
                return Err(Error::InvalidArg(format!(
                    "fusion order violated: position {idx} holds stream {} but must hold stream {expect}",
                    fm.stream_id
                )));
            }
            if fm.source_layer != self.fusion.i {
                return Err(Error::InvalidArg(format!(
                    "feature map from stream {} was taken at layer {} but fusion sits at layer {}",
                    fm.stream_id, fm.source_layer, self.fusion.i
                )));
            }
        }
        let vars: Vec<Var> = maps.iter().map(|m| m.var).collect();
        tape.concat_channels(&vars)
    }

    /// Runs every stream up to the fusion layer and returns the K+1
    /// feature maps in stream order.
    pub fn stream_features(
        &self,
        tape: &mut Tape<E>,
        sources: &[Var],
        train: bool,
    ) -> Result<Vec<FeatureMap>> {
        let k = self.k();
        if sources.len() != k {
            return Err(Error::InvalidArg(format!(
                "model expects {k} sources, got {}",
                sources.len()
            )));
        }
        let mut maps = Vec::with_capacity(k + 1);
        for (m, (&src, stream)) in sources.iter().zip(&self.streams).enumerate() {
            maps.push(stream.gen.forward_to_layer(tape, src, self.fusion.i, m + 1, train)?);
        }
        let stacked = tape.concat_channels(sources)?;
        maps.push(self.many.gen.forward_to_layer(
            tape,
            stacked,
            self.fusion.i,
            k + 1,
            train,
        )?);
        Ok(maps)
    }

    /// End-to-end synthesis on an existing tape: streams to layer `i`,
    /// fusion, joint network. Inputs and output are in the network range
    /// (-1, 1).
    pub fn synthesize_on(
        &self,
        tape: &mut Tape<E>,
        sources: &[Var],
        train_streams: bool,
        train_joint: bool,
    ) -> Result<Var> {
        let maps = self.stream_features(tape, sources, train_streams)?;
        let fused = self.fuse(tape, &maps)?;
        self.joint.forward(tape, fused, train_joint)
    }

    /// Inference entry point over plain tensors (network range).
    pub fn synthesize(&self, sources: &[Tensor<E>]) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = sources.iter().map(|s| tape.constant(s.clone())).collect();
        let out = self.synthesize_on(&mut tape, &vars, false, false)?;
        Ok(tape.value(out).clone())
    }

    /// All parameters with checkpoint-stable names: `stream{m}/layer{k}/..`
    /// for generators (m = K+1 is the many-to-one stream), `disc{m}/..`
    /// for stream discriminators, `joint/..` and `discJ/..` for the joint
    /// network and its discriminator.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (m, s) in self.streams.iter().enumerate() {
            s.gen
                .visit_params(&mut |n, t| f(format!("stream{}/{}", m + 1, n), t));
            s.disc
                .visit_params(&mut |n, t| f(format!("disc{}/{}", m + 1, n), t));
        }
        let kp1 = self.k() + 1;
        self.many
            .gen
            .visit_params(&mut |n, t| f(format!("stream{kp1}/{n}"), t));
        self.many
            .disc
            .visit_params(&mut |n, t| f(format!("disc{kp1}/{n}"), t));
        self.joint.visit_params(&mut |n, t| f(format!("joint/{n}"), t));
        self.joint_disc
            .visit_params(&mut |n, t| f(format!("discJ/{n}"), t));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (m, s) in self.streams.iter_mut().enumerate() {
            s.gen
                .visit_params_mut(&mut |n, t| f(format!("stream{}/{}", m + 1, n), t));
            s.disc
                .visit_params_mut(&mut |n, t| f(format!("disc{}/{}", m + 1, n), t));
        }
        let kp1 = self.fusion.k + 1;
        self.many
            .gen
            .visit_params_mut(&mut |n, t| f(format!("stream{kp1}/{n}"), t));
        self.many
            .disc
            .visit_params_mut(&mut |n, t| f(format!("disc{kp1}/{n}"), t));
        self.joint
            .visit_params_mut(&mut |n, t| f(format!("joint/{n}"), t));
        self.joint_disc
            .visit_params_mut(&mut |n, t| f(format!("discJ/{n}"), t));
    }

    /// SHA-256 over the K+1 streams' generator parameters (names and
    /// little-endian bytes), for reuse checks across sweep cells.
    pub fn stream_param_hash(&self) -> String {
        let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
        {
            let mut add = |name: String, t: &Tensor<E>| {
                let mut bytes = Vec::with_capacity(t.numel() * 8);
                for &v in t.data() {
                    v.write_le(&mut bytes);
                }
                entries.push((name, bytes));
            };
            for (m, s) in self.streams.iter().enumerate() {
                s.gen
                    .visit_params(&mut |n, t| add(format!("stream{}/{}", m + 1, n), t));
            }
            self.many
                .gen
                .visit_params(&mut |n, t| add(format!("stream{}/{}", self.fusion.k + 1, n), t));
        }
        hash_entries(entries)
    }

    /// Hash over every parameter in the model.
    pub fn full_param_hash(&self) -> String {
        let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
        self.visit_params(&mut |name, t| {
            let mut bytes = Vec::with_capacity(t.numel() * 8);
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            entries.push((name, bytes));
        });
        hash_entries(entries)
    }
}

fn hash_entries(mut entries: Vec<(String, Vec<u8>)>) -> String {
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, bytes) in entries {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(&bytes);
    }
    format!("{:x}", hasher.finalize())
}
