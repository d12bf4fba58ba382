//! Layered classifier/encoder graphs executed on the tape.
//!
//! A `NetworkGraph` is a list of layers, each reading the output of an
//! earlier node (node 0 is the network input), so residual connections
//! and skip projections are plain node references. Designated tap layers
//! expose flattened per-sample feature vectors for the similarity path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{NodeId, Tape};
use super::Tensor;
use crate::error::{CoreError, CoreResult};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum LayerOp {
    Conv2d { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    Softplus,
    ChannelAffine,
    /// Adds the output of node `other` (0 = input, i+1 = layer i).
    ResidualAdd { other: usize },
    GlobalAvgPool,
    Flatten,
    Linear { out_features: usize },
}

impl LayerOp {
    fn name(&self) -> &'static str {
        match self {
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::Relu => "relu",
            LayerOp::Softplus => "softplus",
            LayerOp::ChannelAffine => "channel_affine",
            LayerOp::ResidualAdd { .. } => "residual_add",
            LayerOp::GlobalAvgPool => "global_avg_pool",
            LayerOp::Flatten => "flatten",
            LayerOp::Linear { .. } => "linear",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Layer {
    pub op: LayerOp,
    /// Node index feeding this layer; defaults to the previous output.
    pub input: usize,
}

/// Named parameter tensors with momentum slots.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Tensor,
    velocity: Vec<f32>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> CoreResult<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::Config(format!("duplicate parameter name {name}")));
        }
        let velocity = vec![0.0; value.numel()];
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, velocity });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> CoreResult<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter {name}")))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(CoreError::Shape(format!(
                "parameter {name}: stored shape {:?} vs new {:?}",
                self.entries[i].value.shape(),
                value.shape()
            )));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub(crate) fn apply_sgd(
        &mut self,
        grads: &super::tape::Gradients,
        lr: f32,
        momentum: f32,
    ) -> CoreResult<()> {
        for entry in &mut self.entries {
            let g = grads.get(&entry.name).ok_or_else(|| {
                CoreError::Config(format!("no gradient for parameter {}", entry.name))
            })?;
            if !g.all_finite() {
                return Err(CoreError::NonFinite(format!(
                    "gradient of parameter {} is not finite; step rejected",
                    entry.name
                )));
            }
            let p = entry.value.data_mut();
            for ((pv, vv), &gv) in p.iter_mut().zip(entry.velocity.iter_mut()).zip(g.data()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Tape node ids of the parameters bound for one forward/backward pass.
pub struct TapeBindings {
    ids: BTreeMap<String, NodeId>,
}

impl TapeBindings {
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}

/// Result of a recorded forward pass.
pub struct ForwardPass {
    /// Final layer output (logits for classifiers, responses for encoders).
    pub output: NodeId,
    /// Flattened [batch, features] node per tap layer.
    pub taps: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct NetworkGraph {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    taps: Vec<usize>,
    params: ParamStore,
    /// Shape of every node (index 0 = input) for a batch of one.
    node_shapes: Vec<Vec<usize>>,
}

impl NetworkGraph {
    /// Builds the graph, validating wiring and initializing parameters
    /// (He-normal weights, zero biases, unit affine scales).
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        taps: Vec<usize>,
        rng: &mut Rng,
    ) -> CoreResult<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut params = ParamStore::new();
        let mut shapes: Vec<Vec<usize>> =
            vec![vec![1, input_shape[0], input_shape[1], input_shape[2]]];

        for (i, layer) in layers.iter().enumerate() {
            if layer.input >= shapes.len() {
                return Err(CoreError::Config(format!(
                    "layer {i} ({}) reads node {} but only {} exist",
                    layer.op.name(),
                    layer.input,
                    shapes.len()
                )));
            }
            let in_shape = shapes[layer.input].clone();
            let out_shape = match &layer.op {
                LayerOp::Conv2d { out_channels, kernel, stride, pad } => {
                    if in_shape.len() != 4 {
                        return Err(CoreError::Shape(format!(
                            "layer {i}: conv2d needs 4-d input, got {in_shape:?}"
                        )));
                    }
                    let (c, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel || *stride == 0 {
                        return Err(CoreError::Shape(format!(
                            "layer {i}: conv2d kernel {kernel} stride {stride} pad {pad} on {h}x{w}"
                        )));
                    }
                    let fan_in = c * kernel * kernel;
                    let std = (2.0 / fan_in as f32).sqrt();
                    params.insert(
                        &format!("layer{i:02}.weight"),
                        Tensor::rand_normal(&[*out_channels, c, *kernel, *kernel], 0.0, std, rng),
                    )?;
                    params.insert(&format!("layer{i:02}.bias"), Tensor::zeros(&[*out_channels]))?;
                    let oh = (h + 2 * pad - kernel) / stride + 1;
                    let ow = (w + 2 * pad - kernel) / stride + 1;
                    vec![1, *out_channels, oh, ow]
                }
                LayerOp::Relu | LayerOp::Softplus => in_shape,
                LayerOp::ChannelAffine => {
                    if in_shape.len() != 4 {
                        return Err(CoreError::Shape(format!(
                            "layer {i}: channel_affine needs 4-d input, got {in_shape:?}"
                        )));
                    }
                    let c = in_shape[1];
                    params.insert(&format!("layer{i:02}.scale"), Tensor::filled(&[c], 1.0))?;
                    params.insert(&format!("layer{i:02}.bias"), Tensor::zeros(&[c]))?;
                    in_shape
                }
                LayerOp::ResidualAdd { other } => {
                    if *other >= shapes.len() {
                        return Err(CoreError::Config(format!(
                            "layer {i}: residual_add reads node {other} but only {} exist",
                            shapes.len()
                        )));
                    }
                    if shapes[*other] != in_shape {
                        return Err(CoreError::Shape(format!(
                            "layer {i}: residual_add shapes differ: {:?} vs {:?}",
                            in_shape, shapes[*other]
                        )));
                    }
                    in_shape
                }
                LayerOp::GlobalAvgPool => {
                    if in_shape.len() != 4 {
                        return Err(CoreError::Shape(format!(
                            "layer {i}: global_avg_pool needs 4-d input, got {in_shape:?}"
                        )));
                    }
                    vec![1, in_shape[1]]
                }
                LayerOp::Flatten => {
                    let d: usize = in_shape[1..].iter().product();
                    vec![1, d]
                }
                LayerOp::Linear { out_features } => {
                    if in_shape.len() != 2 {
                        return Err(CoreError::Shape(format!(
                            "layer {i}: linear needs 2-d input (flatten or pool first), got {in_shape:?}"
                        )));
                    }
                    let d = in_shape[1];
                    let std = (2.0 / d as f32).sqrt();
                    params.insert(
                        &format!("layer{i:02}.weight"),
                        Tensor::rand_normal(&[*out_features, d], 0.0, std, rng),
                    )?;
                    params.insert(&format!("layer{i:02}.bias"), Tensor::zeros(&[*out_features]))?;
                    vec![1, *out_features]
                }
            };
            shapes.push(out_shape);
        }

        for &t in &taps {
            if t >= layers.len() {
                return Err(CoreError::Config(format!(
                    "tap index {t} out of range ({} layers)",
                    layers.len()
                )));
            }
        }

        Ok(NetworkGraph { input_shape, layers, taps, params, node_shapes: shapes })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Output feature count of the final layer (class count for classifiers).
    pub fn output_features(&self) -> usize {
        let s = self.node_shapes.last().expect("at least input node");
        *s.last().expect("non-empty shape")
    }

    /// Registers every parameter on `tape` for one training step.
    pub fn bind(&self, tape: &mut Tape) -> TapeBindings {
        let mut ids = BTreeMap::new();
        for (name, value) in self.params.iter() {
            ids.insert(name.to_string(), tape.param(name, value));
        }
        TapeBindings { ids }
    }

    /// Records the forward pass for `input` (a [n,c,h,w] node already on
    /// the tape) and returns logits plus flattened tap features.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        binds: &TapeBindings,
        input: NodeId,
    ) -> CoreResult<ForwardPass> {
        let shape = tape.shape(input).to_vec();
        let want = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        if shape.len() != 4 || shape[1] != want[0] || shape[2] != want[1] || shape[3] != want[2] {
            return Err(CoreError::Shape(format!(
                "network input: expected [n, {}, {}, {}], got {:?}",
                want[0], want[1], want[2], shape
            )));
        }
        let batch = shape[0];

        let nodes = self.forward_nodes(tape, binds, input)?;

        let mut taps = Vec::with_capacity(self.taps.len());
        for &t in &self.taps {
            let id = nodes[t + 1];
            let s = tape.shape(id).to_vec();
            let d: usize = s[1..].iter().product();
            taps.push(tape.reshape(id, vec![batch, d])?);
        }
        Ok(ForwardPass { output: *nodes.last().expect("output node"), taps })
    }

    fn apply_layer(
        &self,
        tape: &mut Tape,
        binds: &TapeBindings,
        i: usize,
        layer: &Layer,
        src: NodeId,
        batch: usize,
    ) -> CoreResult<NodeId> {
        let pname = |suffix: &str| format!("layer{i:02}.{suffix}");
        match &layer.op {
            LayerOp::Conv2d { stride, pad, .. } => {
                let w = binds.node(&pname("weight")).expect("bound weight");
                let b = binds.node(&pname("bias")).expect("bound bias");
                tape.conv2d(src, w, b, *stride, *pad)
            }
            LayerOp::Relu => Ok(tape.relu(src)),
            LayerOp::Softplus => Ok(tape.softplus(src)),
            LayerOp::ChannelAffine => {
                let s = binds.node(&pname("scale")).expect("bound scale");
                let b = binds.node(&pname("bias")).expect("bound bias");
                tape.channel_affine(src, s, b)
            }
            // Handled in forward_nodes where the full node list is in scope.
            LayerOp::ResidualAdd { .. } => unreachable!("residual handled by forward_nodes"),
            LayerOp::GlobalAvgPool => tape.global_avg_pool(src),
            LayerOp::Flatten => {
                let s = tape.shape(src).to_vec();
                let d: usize = s[1..].iter().product();
                tape.reshape(src, vec![batch, d])
            }
            LayerOp::Linear { .. } => {
                let w = binds.node(&pname("weight")).expect("bound weight");
                let b = binds.node(&pname("bias")).expect("bound bias");
                tape.linear(src, w, b)
            }
        }
    }

    /// Inference convenience: runs a throwaway tape, returning logits and
    /// flattened tap features as plain tensors.
    pub fn infer(&self, batch: &Tensor) -> CoreResult<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let input = tape.input(batch);
        let binds = self.bind(&mut tape);
        let pass = self.forward_on(&mut tape, &binds, input)?;
        let logits = tape.value_tensor(pass.output);
        let taps = pass.taps.iter().map(|&t| tape.value_tensor(t)).collect();
        Ok((logits, taps))
    }
}

impl NetworkGraph {
    /// Runs every layer, returning all node ids (index 0 = input).
    /// ResidualAdd resolves its second operand against this list.
    fn forward_nodes(
        &self,
        tape: &mut Tape,
        binds: &TapeBindings,
        input: NodeId,
    ) -> CoreResult<Vec<NodeId>> {
        let mut nodes: Vec<NodeId> = Vec::with_capacity(self.layers.len() + 1);
        nodes.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let src = nodes[layer.input];
            let out = match &layer.op {
                LayerOp::ResidualAdd { other } => tape.add(src, nodes[*other]),
                _ => self.apply_layer(tape, binds, i, layer, src, tape.shape(input)[0]),
            }
            .map_err(|e| CoreError::Shape(format!("layer {i} ({}): {e}", layer.op.name())))?;
            nodes.push(out);
        }
        Ok(nodes)
    }
}

/// Stacks [n,h,w] grayscale images into the [n,1,h,w] layout networks eat.
pub fn image_batch(images: &Tensor) -> CoreResult<Tensor> {
    let s = images.shape();
    match s.len() {
        3 => images.clone().reshaped(vec![s[0], 1, s[1], s[2]]),
        4 => Ok(images.clone()),
        _ => Err(CoreError::Shape(format!("image batch must be 3-d or 4-d, got {s:?}"))),
    }
}

/// Gathers rows `ids` of an [n,h,w] image stack into a [b,1,h,w] batch.
pub fn gather_images(images: &Tensor, ids: &[usize]) -> CoreResult<Tensor> {
    let s = images.shape();
    if s.len() != 3 {
        return Err(CoreError::Shape(format!("image stack must be [n,h,w], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(ids.len() * h * w);
    for &i in ids {
        if i >= n {
            return Err(CoreError::Data(format!("image index {i} out of {n}")));
        }
        data.extend_from_slice(&images.data()[i * h * w..(i + 1) * h * w]);
    }
    Tensor::new(vec![ids.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(rng: &mut Rng) -> NetworkGraph {
        NetworkGraph::new(
            [1, 4, 4],
            vec![
                Layer { op: LayerOp::Conv2d { out_channels: 2, kernel: 3, stride: 1, pad: 1 }, input: 0 },
                Layer { op: LayerOp::Relu, input: 1 },
                Layer { op: LayerOp::GlobalAvgPool, input: 2 },
                Layer { op: LayerOp::Linear { out_features: 3 }, input: 3 },
            ],
            vec![1],
            rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_weight_network_gives_equal_logits() {
        let mut rng = Rng::new(0);
        let mut net = tiny_net(&mut rng);
        let names: Vec<String> = net.params().names().map(String::from).collect();
        for name in names {
            let shape = net.params().get(&name).unwrap().shape().to_vec();
            net.params_mut().set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let batch = Tensor::rand_uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let (logits, _) = net.infer(&batch).unwrap();
        for row in 0..2 {
            let r = &logits.data()[row * 3..(row + 1) * 3];
            assert!(r.iter().all(|&v| v == r[0]), "logits not uniform: {r:?}");
        }
    }

    #[test]
    fn tap_features_equal_input_for_identity_conv() {
        let mut rng = Rng::new(1);
        let mut net = NetworkGraph::new(
            [1, 3, 3],
            vec![Layer { op: LayerOp::Conv2d { out_channels: 1, kernel: 1, stride: 1, pad: 0 }, input: 0 }],
            vec![0],
            &mut rng,
        )
        .unwrap();
        net.params_mut().set("layer00.weight", Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        net.params_mut().set("layer00.bias", Tensor::zeros(&[1])).unwrap();
        let batch = Tensor::rand_uniform(&[2, 1, 3, 3], 0.0, 1.0, &mut rng);
        let (_, taps) = net.infer(&batch).unwrap();
        assert_eq!(taps[0].shape(), &[2, 9]);
        assert_eq!(taps[0].data(), batch.data());
    }

    #[test]
    fn wrong_input_shape_names_problem() {
        let mut rng = Rng::new(2);
        let net = tiny_net(&mut rng);
        let bad = Tensor::zeros(&[2, 1, 5, 5]);
        let err = net.infer(&bad).unwrap_err();
        assert!(format!("{err}").contains("network input"));
    }

    #[test]
    fn residual_add_shape_mismatch_rejected() {
        let mut rng = Rng::new(3);
        let res = NetworkGraph::new(
            [1, 4, 4],
            vec![
                Layer { op: LayerOp::Conv2d { out_channels: 2, kernel: 3, stride: 1, pad: 1 }, input: 0 },
                Layer { op: LayerOp::ResidualAdd { other: 0 }, input: 1 },
            ],
            vec![],
            &mut rng,
        );
        assert!(res.is_err());
    }

    #[test]
    fn residual_add_preserves_shape_and_value() {
        let mut rng = Rng::new(4);
        let mut net = NetworkGraph::new(
            [1, 2, 2],
            vec![
                Layer { op: LayerOp::Conv2d { out_channels: 1, kernel: 1, stride: 1, pad: 0 }, input: 0 },
                Layer { op: LayerOp::ResidualAdd { other: 0 }, input: 1 },
            ],
            vec![1],
            &mut rng,
        )
        .unwrap();
        // Zero conv: residual output equals the input itself.
        net.params_mut().set("layer00.weight", Tensor::zeros(&[1, 1, 1, 1])).unwrap();
        let batch = Tensor::rand_uniform(&[1, 1, 2, 2], -1.0, 1.0, &mut rng);
        let (out, taps) = net.infer(&batch).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(taps[0].data(), batch.data());
    }
}
