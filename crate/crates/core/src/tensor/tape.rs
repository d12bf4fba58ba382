//! Reverse-mode automatic differentiation on a recorded operation tape.
//!
//! Forward builders append one node per result and record the primitive;
//! `backward` replays the records in reverse (reverse topological order by
//! construction) accumulating vector-Jacobian products. Parameters are
//! registered by name; after a backward pass every registered parameter
//! has a gradient of its own shape, zero-filled if the loss never touched
//! it.

use std::collections::BTreeMap;

use super::{col2im_acc, im2col, mm_a_bt_acc, mm_acc, mm_at_b_acc, Tensor};
use crate::error::{CoreError, CoreResult};

pub type NodeId = usize;

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
}

enum Op {
    Conv2d { x: NodeId, w: NodeId, b: NodeId, out: NodeId, stride: usize, pad: usize },
    Relu { x: NodeId, out: NodeId },
    Softplus { x: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Div { a: NodeId, b: NodeId, out: NodeId },
    Sqrt { x: NodeId, out: NodeId },
    Clamp { x: NodeId, lo: f32, hi: f32, out: NodeId },
    Arctanh { x: NodeId, out: NodeId },
    MaxConst { x: NodeId, c: f32, out: NodeId },
    ScaleConst { x: NodeId, c: f32, out: NodeId },
    ChannelAffine { x: NodeId, scale: NodeId, bias: NodeId, out: NodeId },
    GlobalAvgPool { x: NodeId, out: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId, out: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f32>, out: NodeId },
    ConcatRows { a: NodeId, b: NodeId, out: NodeId },
    MeanRows { x: NodeId, out: NodeId },
    SubRow { x: NodeId, row: NodeId, out: NodeId },
    RowDot { a: NodeId, b: NodeId, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
    MeanAll { x: NodeId, out: NodeId },
    SoftmaxVec { x: NodeId, out: NodeId },
    IndexScalar { x: NodeId, index: usize, out: NodeId },
    MulScalar { x: NodeId, s: NodeId, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
}

/// Gradient registry produced by a backward pass: one tensor per
/// registered parameter, keyed by name.
#[derive(Debug, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Name of the first parameter with a NaN/Inf gradient entry, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, g)| !g.all_finite())
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    params: Vec<(String, NodeId)>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Non-parameter leaf (inputs, constants, targets).
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push_node(t.shape().to_vec(), t.data().to_vec())
    }

    /// Parameter leaf; registered so `param_grads` reports it.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let id = self.push_node(t.shape().to_vec(), t.data().to_vec());
        self.params.push((name.to_string(), id));
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id].data
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].data.clone())
            .expect("node invariant")
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient accumulated at `id` by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn expect_shape(&self, id: NodeId, ndim: usize, what: &str) -> CoreResult<&[usize]> {
        let s = &self.nodes[id].shape;
        if s.len() != ndim {
            return Err(CoreError::Shape(format!(
                "{what}: expected {ndim}-d tensor, got shape {s:?}"
            )));
        }
        Ok(s)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> CoreResult<Vec<usize>> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(CoreError::Shape(format!(
                "{what}: operand shapes differ: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(self.nodes[a].shape.clone())
    }

    // ---- forward builders -------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> CoreResult<NodeId> {
        let xs = self.expect_shape(x, 4, "conv2d input")?.to_vec();
        let ws = self.expect_shape(w, 4, "conv2d weight")?.to_vec();
        let bs = self.expect_shape(b, 1, "conv2d bias")?.to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if stride == 0 {
            return Err(CoreError::Config("conv2d stride must be >= 1".into()));
        }
        if wc != c || bs[0] != f {
            return Err(CoreError::Shape(format!(
                "conv2d: input channels {c} vs weight {wc}, bias {} vs filters {f}",
                bs[0]
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(CoreError::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let ckk = c * kh * kw;
        let mut out = vec![0.0f32; n * f * oh * ow];
        let mut col = vec![0.0f32; ckk * oh * ow];
        let (xd, wdat, bd) = (&self.nodes[x].data, &self.nodes[w].data, &self.nodes[b].data);
        for i in 0..n {
            im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, oh, ow, &mut col);
            let out_i = &mut out[i * f * oh * ow..(i + 1) * f * oh * ow];
            mm_acc(wdat, &col, out_i, f, ckk, oh * ow);
            for fi in 0..f {
                let bias = bd[fi];
                for v in &mut out_i[fi * oh * ow..(fi + 1) * oh * ow] {
                    *v += bias;
                }
            }
        }
        let out_id = self.push_node(vec![n, f, oh, ow], out);
        self.ops.push(Op::Conv2d { x, w, b, out: out_id, stride, pad });
        Ok(out_id)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x].data.iter().map(|&v| v.max(0.0)).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x]
            .data
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::Softplus { x, out });
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let shape = self.same_shape(a, b, "add")?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = self.push_node(shape, data);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let shape = self.same_shape(a, b, "sub")?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = self.push_node(shape, data);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let shape = self.same_shape(a, b, "mul")?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = self.push_node(shape, data);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let shape = self.same_shape(a, b, "div")?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x / y)
            .collect();
        let out = self.push_node(shape, data);
        self.ops.push(Op::Div { a, b, out });
        Ok(out)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x].data.iter().map(|&v| v.sqrt()).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::Sqrt { x, out });
        out
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> CoreResult<NodeId> {
        if !(lo < hi) {
            return Err(CoreError::Config(format!("clamp bounds [{lo}, {hi}] invalid")));
        }
        let data = self.nodes[x].data.iter().map(|&v| v.clamp(lo, hi)).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::Clamp { x, lo, hi, out });
        Ok(out)
    }

    /// Inverse hyperbolic tangent; inputs must already be inside (-1, 1),
    /// callers clamp first.
    pub fn arctanh(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x]
            .data
            .iter()
            .map(|&v| 0.5 * ((1.0 + v) / (1.0 - v)).ln())
            .collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::Arctanh { x, out });
        out
    }

    pub fn max_const(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.nodes[x].data.iter().map(|&v| v.max(c)).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::MaxConst { x, c, out });
        out
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::ScaleConst { x, c, out });
        out
    }

    /// Per-channel affine y = x * scale[c] + bias[c] on a [n,c,h,w] tensor.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, bias: NodeId) -> CoreResult<NodeId> {
        let xs = self.expect_shape(x, 4, "channel_affine input")?.to_vec();
        let ss = self.expect_shape(scale, 1, "channel_affine scale")?.to_vec();
        let bs = self.expect_shape(bias, 1, "channel_affine bias")?.to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if ss[0] != c || bs[0] != c {
            return Err(CoreError::Shape(format!(
                "channel_affine: {c} channels, scale {} bias {}",
                ss[0], bs[0]
            )));
        }
        let plane = h * w;
        let mut data = vec![0.0f32; n * c * plane];
        let (xd, sd, bd) = (&self.nodes[x].data, &self.nodes[scale].data, &self.nodes[bias].data);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let (s, b) = (sd[ch], bd[ch]);
                for j in 0..plane {
                    data[base + j] = xd[base + j] * s + b;
                }
            }
        }
        let out = self.push_node(xs, data);
        self.ops.push(Op::ChannelAffine { x, scale, bias, out });
        Ok(out)
    }

    /// [n,c,h,w] -> [n,c] spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> CoreResult<NodeId> {
        let xs = self.expect_shape(x, 4, "global_avg_pool input")?.to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = &self.nodes[x].data;
        let mut data = vec![0.0f32; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let mut acc = 0.0f32;
                for j in 0..plane {
                    acc += xd[base + j];
                }
                data[i * c + ch] = acc / plane as f32;
            }
        }
        let out = self.push_node(vec![n, c], data);
        self.ops.push(Op::GlobalAvgPool { x, out });
        Ok(out)
    }

    /// y = x w^T + b with x [n,d], w [m,d], b [m].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let xs = self.expect_shape(x, 2, "linear input")?.to_vec();
        let ws = self.expect_shape(w, 2, "linear weight")?.to_vec();
        let bs = self.expect_shape(b, 1, "linear bias")?.to_vec();
        let (n, d) = (xs[0], xs[1]);
        let (m, wd) = (ws[0], ws[1]);
        if wd != d || bs[0] != m {
            return Err(CoreError::Shape(format!(
                "linear: input dim {d} vs weight {wd}, bias {} vs out {m}",
                bs[0]
            )));
        }
        let mut data = vec![0.0f32; n * m];
        mm_a_bt_acc(&self.nodes[x].data, &self.nodes[w].data, &mut data, n, d, m);
        let bd = &self.nodes[b].data;
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += bd[j];
            }
        }
        let out = self.push_node(vec![n, m], data);
        self.ops.push(Op::Linear { x, w, b, out });
        Ok(out)
    }

    /// Mean cross-entropy of softmax(logits) against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> CoreResult<NodeId> {
        let ls = self.expect_shape(logits, 2, "softmax_cross_entropy logits")?.to_vec();
        let (n, k) = (ls[0], ls[1]);
        if targets.len() != n {
            return Err(CoreError::Shape(format!(
                "softmax_cross_entropy: {n} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(CoreError::Data(format!("target class {t} out of range (k={k})")));
        }
        let ld = &self.nodes[logits].data;
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= (probs[i * k + targets[i]].max(1e-30) as f64).ln();
        }
        let out = self.push_node(vec![1], vec![(loss / n as f64) as f32]);
        self.ops.push(Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs, out });
        Ok(out)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let sa = self.expect_shape(a, 2, "concat_rows lhs")?.to_vec();
        let sb = self.expect_shape(b, 2, "concat_rows rhs")?.to_vec();
        if sa[1] != sb[1] {
            return Err(CoreError::Shape(format!(
                "concat_rows: column counts differ ({} vs {})",
                sa[1], sb[1]
            )));
        }
        let mut data = Vec::with_capacity((sa[0] + sb[0]) * sa[1]);
        data.extend_from_slice(&self.nodes[a].data);
        data.extend_from_slice(&self.nodes[b].data);
        let out = self.push_node(vec![sa[0] + sb[0], sa[1]], data);
        self.ops.push(Op::ConcatRows { a, b, out });
        Ok(out)
    }

    /// Column means: [r,d] -> [d].
    pub fn mean_rows(&mut self, x: NodeId) -> CoreResult<NodeId> {
        let xs = self.expect_shape(x, 2, "mean_rows input")?.to_vec();
        let (r, d) = (xs[0], xs[1]);
        let xd = &self.nodes[x].data;
        let mut data = vec![0.0f32; d];
        for i in 0..r {
            for j in 0..d {
                data[j] += xd[i * d + j];
            }
        }
        for v in &mut data {
            *v /= r as f32;
        }
        let out = self.push_node(vec![d], data);
        self.ops.push(Op::MeanRows { x, out });
        Ok(out)
    }

    /// Broadcast row subtraction: [r,d] - [d].
    pub fn sub_row(&mut self, x: NodeId, row: NodeId) -> CoreResult<NodeId> {
        let xs = self.expect_shape(x, 2, "sub_row input")?.to_vec();
        let rs = self.expect_shape(row, 1, "sub_row row")?.to_vec();
        if xs[1] != rs[0] {
            return Err(CoreError::Shape(format!(
                "sub_row: {} columns vs row length {}",
                xs[1], rs[0]
            )));
        }
        let (r, d) = (xs[0], xs[1]);
        let (xd, rd) = (&self.nodes[x].data, &self.nodes[row].data);
        let mut data = vec![0.0f32; r * d];
        for i in 0..r {
            for j in 0..d {
                data[i * d + j] = xd[i * d + j] - rd[j];
            }
        }
        let out = self.push_node(xs, data);
        self.ops.push(Op::SubRow { x, row, out });
        Ok(out)
    }

    /// Per-row dot products of two [r,d] tensors -> [r].
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let shape = self.same_shape(a, b, "row_dot")?;
        if shape.len() != 2 {
            return Err(CoreError::Shape(format!("row_dot expects 2-d tensors, got {shape:?}")));
        }
        let (r, d) = (shape[0], shape[1]);
        let (ad, bd) = (&self.nodes[a].data, &self.nodes[b].data);
        let mut data = vec![0.0f32; r];
        for i in 0..r {
            let mut acc = 0.0f32;
            for j in 0..d {
                acc += ad[i * d + j] * bd[i * d + j];
            }
            data[i] = acc;
        }
        let out = self.push_node(vec![r], data);
        self.ops.push(Op::RowDot { a, b, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.nodes[x].data.iter().sum();
        let out = self.push_node(vec![1], vec![s]);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].data.len();
        let s: f32 = self.nodes[x].data.iter().sum();
        let out = self.push_node(vec![1], vec![s / n as f32]);
        self.ops.push(Op::MeanAll { x, out });
        out
    }

    /// Softmax over a 1-d tensor.
    pub fn softmax_vec(&mut self, x: NodeId) -> CoreResult<NodeId> {
        self.expect_shape(x, 1, "softmax_vec input")?;
        let xd = &self.nodes[x].data;
        let m = xd.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut data: Vec<f32> = xd.iter().map(|&v| (v - m).exp()).collect();
        let z: f32 = data.iter().sum();
        for v in &mut data {
            *v /= z;
        }
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::SoftmaxVec { x, out });
        Ok(out)
    }

    /// Extracts element `index` of a flat tensor as a scalar node.
    pub fn index_scalar(&mut self, x: NodeId, index: usize) -> CoreResult<NodeId> {
        if index >= self.nodes[x].data.len() {
            return Err(CoreError::Shape(format!(
                "index_scalar: index {index} out of {} elements",
                self.nodes[x].data.len()
            )));
        }
        let v = self.nodes[x].data[index];
        let out = self.push_node(vec![1], vec![v]);
        self.ops.push(Op::IndexScalar { x, index, out });
        Ok(out)
    }

    /// Broadcast multiply by a scalar node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> CoreResult<NodeId> {
        if self.nodes[s].data.len() != 1 {
            return Err(CoreError::Shape("mul_scalar: multiplier must be scalar".into()));
        }
        let sv = self.nodes[s].data[0];
        let data = self.nodes[x].data.iter().map(|&v| v * sv).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.ops.push(Op::MulScalar { x, s, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> CoreResult<NodeId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.nodes[x].data.len() {
            return Err(CoreError::Shape(format!(
                "reshape: node shape {:?} to {shape:?}",
                self.nodes[x].shape
            )));
        }
        let data = self.nodes[x].data.clone();
        let out = self.push_node(shape, data);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss node. Rejected for non-scalar nodes.
    pub fn backward(&mut self, loss: NodeId) -> CoreResult<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(CoreError::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        if self.backward_done {
            return Err(CoreError::Config("backward already run on this tape".into()));
        }
        self.backward_done = true;
        self.grads[loss] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    /// Gradient registry for all registered parameters (zeros where the
    /// loss did not reach the parameter).
    pub fn param_grads(&self) -> Gradients {
        let mut map = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.nodes[*id].shape.clone();
            let data = match &self.grads[*id] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[*id].data.len()],
            };
            map.insert(name.clone(), Tensor::new(shape, data).expect("grad shape"));
        }
        Gradients { map }
    }

    fn acc(&mut self, id: NodeId, contrib: &[f32]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contrib.iter()) {
                    *gv += cv;
                }
            }
            None => self.grads[id] = Some(contrib.to_vec()),
        }
    }

    fn acc_owned(&mut self, id: NodeId, contrib: Vec<f32>) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(contrib.into_iter()) {
                    *gv += cv;
                }
            }
            None => self.grads[id] = Some(contrib),
        }
    }

    fn backward_op(&mut self, idx: usize) {
        // Take the output gradient up front; ops whose output gradient never
        // materialized contribute nothing.
        macro_rules! out_grad {
            ($out:expr) => {
                match &self.grads[$out] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }

        match &self.ops[idx] {
            Op::Conv2d { x, w, b, out, stride, pad } => {
                let (x, w, b, out, stride, pad) = (*x, *w, *b, *out, *stride, *pad);
                let dy = out_grad!(out);
                let xs = self.nodes[x].shape.clone();
                let ws = self.nodes[w].shape.clone();
                let os = self.nodes[out].shape.clone();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow) = (os[2], os[3]);
                let ckk = c * kh * kw;

                let mut db = vec![0.0f32; f];
                let mut dw = vec![0.0f32; f * ckk];
                let mut dx = vec![0.0f32; n * c * h * wd];
                let mut col = vec![0.0f32; ckk * oh * ow];
                let mut dcol = vec![0.0f32; ckk * oh * ow];
                let xd = &self.nodes[x].data;
                let wdat = &self.nodes[w].data;
                for i in 0..n {
                    let dy_i = &dy[i * f * oh * ow..(i + 1) * f * oh * ow];
                    for fi in 0..f {
                        let mut acc = 0.0f32;
                        for v in &dy_i[fi * oh * ow..(fi + 1) * oh * ow] {
                            acc += v;
                        }
                        db[fi] += acc;
                    }
                    im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, oh, ow, &mut col);
                    mm_a_bt_acc(dy_i, &col, &mut dw, f, oh * ow, ckk);
                    dcol.fill(0.0);
                    mm_at_b_acc(wdat, dy_i, &mut dcol, f, ckk, oh * ow);
                    col2im_acc(&dcol, c, h, wd, kh, kw, stride, pad, oh, ow, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                }
                self.acc_owned(x, dx);
                self.acc_owned(w, dw);
                self.acc_owned(b, db);
            }
            Op::Relu { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let dx: Vec<f32> = self.nodes[x]
                    .data
                    .iter()
                    .zip(dy.iter())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc_owned(x, dx);
            }
            Op::Softplus { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let dx: Vec<f32> = self.nodes[x]
                    .data
                    .iter()
                    .zip(dy.iter())
                    .map(|(&xv, &g)| g / (1.0 + (-xv).exp()))
                    .collect();
                self.acc_owned(x, dx);
            }
            Op::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let dy = out_grad!(out);
                self.acc(a, &dy);
                self.acc(b, &dy);
            }
            Op::Sub { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let dy = out_grad!(out);
                self.acc(a, &dy);
                let neg: Vec<f32> = dy.iter().map(|&g| -g).collect();
                self.acc_owned(b, neg);
            }
            Op::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let dy = out_grad!(out);
                let da: Vec<f32> = dy.iter().zip(self.nodes[b].data.iter()).map(|(&g, &bv)| g * bv).collect();
                let db: Vec<f32> = dy.iter().zip(self.nodes[a].data.iter()).map(|(&g, &av)| g * av).collect();
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::Div { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let dy = out_grad!(out);
                let da: Vec<f32> = dy.iter().zip(self.nodes[b].data.iter()).map(|(&g, &bv)| g / bv).collect();
                let db: Vec<f32> = dy
                    .iter()
                    .zip(self.nodes[out].data.iter().zip(self.nodes[b].data.iter()))
                    .map(|(&g, (&ov, &bv))| -g * ov / bv)
                    .collect();
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::Sqrt { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let dx: Vec<f32> = dy
                    .iter()
                    .zip(self.nodes[out].data.iter())
                    .map(|(&g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.acc_owned(x, dx);
            }
            Op::Clamp { x, lo, hi, out } => {
                let (x, lo, hi, out) = (*x, *lo, *hi, *out);
                let dy = out_grad!(out);
                let dx: Vec<f32> = self.nodes[x]
                    .data
                    .iter()
                    .zip(dy.iter())
                    .map(|(&xv, &g)| if xv > lo && xv < hi { g } else { 0.0 })
                    .collect();
                self.acc_owned(x, dx);
            }
            Op::Arctanh { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let dx: Vec<f32> = self.nodes[x]
                    .data
                    .iter()
                    .zip(dy.iter())
                    .map(|(&xv, &g)| g / (1.0 - xv * xv))
                    .collect();
                self.acc_owned(x, dx);
            }
            Op::MaxConst { x, c, out } => {
                let (x, c, out) = (*x, *c, *out);
                let dy = out_grad!(out);
                let dx: Vec<f32> = self.nodes[x]
                    .data
                    .iter()
                    .zip(dy.iter())
                    .map(|(&xv, &g)| if xv > c { g } else { 0.0 })
                    .collect();
                self.acc_owned(x, dx);
            }
            Op::ScaleConst { x, c, out } => {
                let (x, c, out) = (*x, *c, *out);
                let dy = out_grad!(out);
                let dx: Vec<f32> = dy.iter().map(|&g| g * c).collect();
                self.acc_owned(x, dx);
            }
            Op::ChannelAffine { x, scale, bias, out } => {
                let (x, scale, bias, out) = (*x, *scale, *bias, *out);
                let dy = out_grad!(out);
                let xs = self.nodes[x].shape.clone();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let sd = self.nodes[scale].data.clone();
                let xd = &self.nodes[x].data;
                let mut dx = vec![0.0f32; n * c * plane];
                let mut ds = vec![0.0f32; c];
                let mut dbv = vec![0.0f32; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let s = sd[ch];
                        let (mut as_, mut ab) = (0.0f32, 0.0f32);
                        for j in 0..plane {
                            let g = dy[base + j];
                            dx[base + j] = g * s;
                            as_ += g * xd[base + j];
                            ab += g;
                        }
                        ds[ch] += as_;
                        dbv[ch] += ab;
                    }
                }
                self.acc_owned(x, dx);
                self.acc_owned(scale, ds);
                self.acc_owned(bias, dbv);
            }
            Op::GlobalAvgPool { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let xs = self.nodes[x].shape.clone();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let inv = 1.0 / plane as f32;
                let mut dx = vec![0.0f32; n * c * plane];
                for i in 0..n {
                    for ch in 0..c {
                        let g = dy[i * c + ch] * inv;
                        let base = (i * c + ch) * plane;
                        for j in 0..plane {
                            dx[base + j] = g;
                        }
                    }
                }
                self.acc_owned(x, dx);
            }
            Op::Linear { x, w, b, out } => {
                let (x, w, b, out) = (*x, *w, *b, *out);
                let dy = out_grad!(out);
                let xs = self.nodes[x].shape.clone();
                let ws = self.nodes[w].shape.clone();
                let (n, d) = (xs[0], xs[1]);
                let m = ws[0];
                let mut dx = vec![0.0f32; n * d];
                mm_acc(&dy, &self.nodes[w].data, &mut dx, n, m, d);
                let mut dw = vec![0.0f32; m * d];
                mm_at_b_acc(&dy, &self.nodes[x].data, &mut dw, n, m, d);
                let mut db = vec![0.0f32; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += dy[i * m + j];
                    }
                }
                self.acc_owned(x, dx);
                self.acc_owned(w, dw);
                self.acc_owned(b, db);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs, out } => {
                let logits = *logits;
                let out = *out;
                let dy = out_grad!(out);
                let g = dy[0];
                let ls = self.nodes[logits].shape.clone();
                let (n, k) = (ls[0], ls[1]);
                let inv_n = 1.0 / n as f32;
                let mut dl = probs.clone();
                let targets = targets.clone();
                for i in 0..n {
                    dl[i * k + targets[i]] -= 1.0;
                }
                for v in &mut dl {
                    *v *= g * inv_n;
                }
                self.acc_owned(logits, dl);
            }
            Op::ConcatRows { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let dy = out_grad!(out);
                let na = self.nodes[a].data.len();
                self.acc(a, &dy[..na]);
                self.acc(b, &dy[na..]);
            }
            Op::MeanRows { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let xs = self.nodes[x].shape.clone();
                let (r, d) = (xs[0], xs[1]);
                let inv = 1.0 / r as f32;
                let mut dx = vec![0.0f32; r * d];
                for i in 0..r {
                    for j in 0..d {
                        dx[i * d + j] = dy[j] * inv;
                    }
                }
                self.acc_owned(x, dx);
            }
            Op::SubRow { x, row, out } => {
                let (x, row, out) = (*x, *row, *out);
                let dy = out_grad!(out);
                let xs = self.nodes[x].shape.clone();
                let (r, d) = (xs[0], xs[1]);
                let mut drow = vec![0.0f32; d];
                for i in 0..r {
                    for j in 0..d {
                        drow[j] -= dy[i * d + j];
                    }
                }
                self.acc(x, &dy);
                self.acc_owned(row, drow);
            }
            Op::RowDot { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let dy = out_grad!(out);
                let xs = self.nodes[a].shape.clone();
                let (r, d) = (xs[0], xs[1]);
                let mut da = vec![0.0f32; r * d];
                let mut db = vec![0.0f32; r * d];
                let (ad, bd) = (&self.nodes[a].data, &self.nodes[b].data);
                for i in 0..r {
                    let g = dy[i];
                    for j in 0..d {
                        da[i * d + j] = g * bd[i * d + j];
                        db[i * d + j] = g * ad[i * d + j];
                    }
                }
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::SumAll { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let dx = vec![dy[0]; self.nodes[x].data.len()];
                self.acc_owned(x, dx);
            }
            Op::MeanAll { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let n = self.nodes[x].data.len();
                let dx = vec![dy[0] / n as f32; n];
                self.acc_owned(x, dx);
            }
            Op::SoftmaxVec { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                let p = self.nodes[out].data.clone();
                let dot: f32 = dy.iter().zip(p.iter()).map(|(&g, &pv)| g * pv).sum();
                let dx: Vec<f32> = dy.iter().zip(p.iter()).map(|(&g, &pv)| pv * (g - dot)).collect();
                self.acc_owned(x, dx);
            }
            Op::IndexScalar { x, index, out } => {
                let (x, index, out) = (*x, *index, *out);
                let dy = out_grad!(out);
                let mut dx = vec![0.0f32; self.nodes[x].data.len()];
                dx[index] = dy[0];
                self.acc_owned(x, dx);
            }
            Op::MulScalar { x, s, out } => {
                let (x, s, out) = (*x, *s, *out);
                let dy = out_grad!(out);
                let sv = self.nodes[s].data[0];
                let dx: Vec<f32> = dy.iter().map(|&g| g * sv).collect();
                let ds: f32 = dy.iter().zip(self.nodes[x].data.iter()).map(|(&g, &xv)| g * xv).sum();
                self.acc_owned(x, dx);
                self.acc_owned(s, vec![ds]);
            }
            Op::Reshape { x, out } => {
                let (x, out) = (*x, *out);
                let dy = out_grad!(out);
                self.acc(x, &dy);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradients() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let b = tape.param("b", &Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(a, a).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.0);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads.get("a").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::scalar(2.0));
        let _unused = tape.param("unused", &Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let loss = tape.mul(a, a).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads.get("a").unwrap().data(), &[4.0]);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn identity_conv_passes_input_through() {
        // 1x1 conv, single channel, identity kernel: output equals input.
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let w = tape.input(&Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.input(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn conv_shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.input(&Tensor::zeros(&[3, 1, 3, 3])); // wrong in-channels
        let b = tape.input(&Tensor::zeros(&[3]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(format!("{err}").contains("channels"));
    }

    #[test]
    fn softmax_cross_entropy_matches_hand_value() {
        let mut tape = Tape::new();
        let logits = tape.input(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let expect = (2.0f32).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn double_backward_rejected() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::scalar(1.0));
        let loss = tape.mul(a, a).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }
}
