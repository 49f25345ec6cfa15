//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! The op set is closed: exactly the primitives the encoder/decoder,
//! discriminator, classifier and transformer need, plus the stop-gradient
//! and straight-through estimators required by the quantization losses.
//! Forward evaluation is eager; `backward` replays the tape in reverse.

use crate::array::Array;
use crate::error::{Result, SvqaError};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add,
    Sub,
    Mul,
    AddBias,
    Scale(f64),
    Matmul,
    BatchedMatmul,
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    SoftmaxLast,
    LayerNorm { eps: f64 },
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    Sum,
    Mean,
    Mse,
    CrossEntropyLogits { targets: Vec<usize> },
    BceLogits { targets: Array },
    Embedding { ids: Vec<usize> },
    Reshape,
    Transpose { perm: Vec<usize> },
    Concat { axis: usize },
    SliceRows { start: usize, end: usize },
    MeanPool2d,
    L2NormalizeRows { eps: f64 },
    MulScalarNode,
    StopGradient,
    StraightThrough,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::BatchedMatmul => "batched_matmul",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::SoftmaxLast => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Mse => "mse",
            Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
            Op::BceLogits { .. } => "bce_logits",
            Op::Embedding { .. } => "embedding",
            Op::Reshape => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::MeanPool2d => "mean_pool2d",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::MulScalarNode => "mul_scalar_node",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array> {
        self.grads[id.0].take()
    }
}

fn shape_panic(op: &str, detail: String) -> ! {
    panic!("shape mismatch in {op}: {detail}");
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Scan all node values for NaN/Inf; names the first offending op.
    pub fn validate_finite(&self) -> Result<()> {
        for n in &self.nodes {
            if !n.value.data.iter().all(|v| v.is_finite()) {
                return Err(SvqaError::NonFinite {
                    op: n.op.name().to_string(),
                });
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        id
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf { requires_grad: true }, vec![], value)
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf { requires_grad: false }, vec![], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            shape_panic("add", format!("{:?} vs {:?}", va.shape, vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Array::new(va.shape.clone(), data);
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            shape_panic("sub", format!("{:?} vs {:?}", va.shape, vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Array::new(va.shape.clone(), data);
        self.push(Op::Sub, vec![a, b], out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            shape_panic("mul", format!("{:?} vs {:?}", va.shape, vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Array::new(va.shape.clone(), data);
        self.push(Op::Mul, vec![a, b], out)
    }

    /// x of shape [.., d] plus bias of shape [d], broadcast over leading axes.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let d = *vx.shape.last().unwrap_or(&0);
        if vb.shape != vec![d] {
            shape_panic("add_bias", format!("{:?} vs {:?}", vx.shape, vb.shape));
        }
        let mut data = vx.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vb.data[i % d];
        }
        let out = Array::new(vx.shape.clone(), data);
        self.push(Op::AddBias, vec![x, b], out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v * c);
        self.push(Op::Scale(c), vec![x], out)
    }

    /// 2-D matrix product [n,k] x [k,m] -> [n,m].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0) {
            shape_panic("matmul", format!("{:?} x {:?}", va.shape, vb.shape));
        }
        let (n, k, m) = (va.dim(0), va.dim(1), vb.dim(1));
        let out = matmul_raw(&va.data, &vb.data, n, k, m);
        self.push(Op::Matmul, vec![a, b], Array::new(vec![n, m], out))
    }

    /// Batched matrix product [b,n,k] x [b,k,m] -> [b,n,m].
    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1) {
            shape_panic("batched_matmul", format!("{:?} x {:?}", va.shape, vb.shape));
        }
        let (bs, n, k, m) = (va.dim(0), va.dim(1), va.dim(2), vb.dim(2));
        let mut out = vec![0.0; bs * n * m];
        for i in 0..bs {
            let block = matmul_raw(
                &va.data[i * n * k..(i + 1) * n * k],
                &vb.data[i * k * m..(i + 1) * k * m],
                n,
                k,
                m,
            );
            out[i * n * m..(i + 1) * n * m].copy_from_slice(&block);
        }
        self.push(Op::BatchedMatmul, vec![a, b], Array::new(vec![bs, n, m], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.max(0.0));
        self.push(Op::Relu, vec![x], out)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(gelu_fwd);
        self.push(Op::Gelu, vec![x], out)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(f64::tanh);
        self.push(Op::Tanh, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(sigmoid_fwd);
        self.push(Op::Sigmoid, vec![x], out)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(f64::exp);
        self.push(Op::Exp, vec![x], out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape.last().expect("softmax needs rank >= 1");
        let mut data = vx.data.clone();
        for row in data.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Array::new(vx.shape.clone(), data);
        self.push(Op::SoftmaxLast, vec![x], out)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = *vx.shape.last().expect("layer_norm needs rank >= 1");
        if vg.shape != vec![d] || vb.shape != vec![d] {
            shape_panic("layer_norm", format!("{:?}, {:?}, {:?}", vx.shape, vg.shape, vb.shape));
        }
        let mut data = vx.data.clone();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = vg.data[j] * ((*v - mean) * inv) + vb.data[j];
            }
        }
        let out = Array::new(vx.shape.clone(), data);
        self.push(Op::LayerNorm { eps }, vec![x, gain, bias], out)
    }

    /// 2-D convolution: x [B,C,H,W], w [O,C,kh,kw], bias [O].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if vx.rank() != 4 || vw.rank() != 4 || vx.dim(1) != vw.dim(1) || vb.shape != vec![vw.dim(0)] {
            shape_panic("conv2d", format!("x {:?}, w {:?}, b {:?}", vx.shape, vw.shape, vb.shape));
        }
        let out = conv2d_fwd(vx, vw, vb, stride, pad);
        self.push(Op::Conv2d { stride, pad }, vec![x, w, b], out)
    }

    /// Transposed 2-D convolution: x [B,C,H,W], w [C,O,kh,kw], bias [O].
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if vx.rank() != 4 || vw.rank() != 4 || vx.dim(1) != vw.dim(0) || vb.shape != vec![vw.dim(1)] {
            shape_panic(
                "conv_transpose2d",
                format!("x {:?}, w {:?}, b {:?}", vx.shape, vw.shape, vb.shape),
            );
        }
        let out = conv_transpose2d_fwd(vx, vw, vb, stride, pad);
        self.push(Op::ConvTranspose2d { stride, pad }, vec![x, w, b], out)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Op::Sum, vec![x], Array::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean, vec![x], Array::scalar(s))
    }

    /// Mean squared error between two same-shape arrays, scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            shape_panic("mse", format!("{:?} vs {:?}", va.shape, vb.shape));
        }
        let n = va.len() as f64;
        let s: f64 = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::Mse, vec![a, b], Array::scalar(s / n))
    }

    /// Mean negative log-likelihood of `targets` under softmax(logits [N,C]).
    pub fn cross_entropy_logits(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let v = &self.nodes[logits.0].value;
        if v.rank() != 2 || v.dim(0) != targets.len() {
            shape_panic(
                "cross_entropy_logits",
                format!("logits {:?}, {} targets", v.shape, targets.len()),
            );
        }
        let c = v.dim(1);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < c, "cross_entropy_logits: target {t} out of range {c}");
            let row = &v.data[r * c..(r + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let out = Array::scalar(total / targets.len() as f64);
        self.push(
            Op::CrossEntropyLogits {
                targets: targets.to_vec(),
            },
            vec![logits],
            out,
        )
    }

    /// Mean binary cross-entropy with logits against a constant target array.
    pub fn bce_logits(&mut self, logits: NodeId, targets: &Array) -> NodeId {
        let v = &self.nodes[logits.0].value;
        if v.shape != targets.shape {
            shape_panic("bce_logits", format!("{:?} vs {:?}", v.shape, targets.shape));
        }
        let n = v.len() as f64;
        let s: f64 = v
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(
            Op::BceLogits {
                targets: targets.clone(),
            },
            vec![logits],
            Array::scalar(s / n),
        )
    }

    /// Row gather: weight [V,d], ids -> [len(ids), d].
    pub fn embedding(&mut self, weight: NodeId, ids: &[usize]) -> NodeId {
        let w = &self.nodes[weight.0].value;
        if w.rank() != 2 {
            shape_panic("embedding", format!("weight {:?}", w.shape));
        }
        let (v, d) = (w.dim(0), w.dim(1));
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "embedding: id {i} out of range {v}");
            data.extend_from_slice(&w.data[i * d..(i + 1) * d]);
        }
        self.push(
            Op::Embedding { ids: ids.to_vec() },
            vec![weight],
            Array::new(vec![ids.len(), d], data),
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.len() {
            shape_panic("reshape", format!("{:?} -> {:?}", v.shape, shape));
        }
        let out = Array::new(shape, v.data.clone());
        self.push(Op::Reshape, vec![x], out)
    }

    pub fn transpose(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let v = &self.nodes[x.0].value;
        if perm.len() != v.rank() {
            shape_panic("transpose", format!("{:?} with perm {:?}", v.shape, perm));
        }
        let out = transpose_raw(v, perm);
        self.push(Op::Transpose { perm: perm.to_vec() }, vec![x], out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        assert!(!xs.is_empty(), "concat of zero arrays");
        let first = &self.nodes[xs[0].0].value;
        let rank = first.rank();
        assert!(axis < rank, "concat axis {axis} out of rank {rank}");
        let mut out_shape = first.shape.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let v = &self.nodes[x.0].value;
            for d in 0..rank {
                if d != axis && v.shape[d] != first.shape[d] {
                    shape_panic("concat", format!("{:?} vs {:?}", v.shape, first.shape));
                }
            }
            out_shape[axis] += v.shape[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for &x in xs {
            let v = &self.nodes[x.0].value;
            let a = v.shape[axis];
            for o in 0..outer {
                let src = &v.data[o * a * inner..(o + 1) * a * inner];
                let dst_start = (o * total_axis + offset) * inner;
                data[dst_start..dst_start + a * inner].copy_from_slice(src);
            }
            offset += a;
        }
        self.push(Op::Concat { axis }, xs.to_vec(), Array::new(out_shape, data))
    }

    /// Take rows [start, end) along axis 0.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        let rows = v.dim(0);
        assert!(start <= end && end <= rows, "slice_rows {start}..{end} of {rows}");
        let inner: usize = v.shape[1..].iter().product();
        let mut shape = v.shape.clone();
        shape[0] = end - start;
        let data = v.data[start * inner..end * inner].to_vec();
        self.push(Op::SliceRows { start, end }, vec![x], Array::new(shape, data))
    }

    /// Global average pool: [B,C,H,W] -> [B,C].
    pub fn mean_pool2d(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        if v.rank() != 4 {
            shape_panic("mean_pool2d", format!("{:?}", v.shape));
        }
        let (b, c, h, w) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        let hw = (h * w) as f64;
        let mut data = vec![0.0; b * c];
        for i in 0..b * c {
            data[i] = v.data[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw;
        }
        self.push(Op::MeanPool2d, vec![x], Array::new(vec![b, c], data))
    }

    /// Normalize each row of [N,d] to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let eps = 1e-12;
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 {
            shape_panic("l2_normalize_rows", format!("{:?}", v.shape));
        }
        let d = v.dim(1);
        let mut data = v.data.clone();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let out = Array::new(v.shape.clone(), data);
        self.push(Op::L2NormalizeRows { eps }, vec![x], out)
    }

    /// Multiply an array elementwise by a scalar node (e.g. a learned temperature).
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        assert_eq!(vs.len(), 1, "mul_scalar_node: scalar operand required");
        let c = vs.data[0];
        let out = vx.map(|v| v * c);
        self.push(Op::MulScalarNode, vec![x, s], out)
    }

    /// Forward identity, backward zero.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.clone();
        self.push(Op::StopGradient, vec![x], out)
    }

    /// Forward returns `quantized`; backward routes the incoming gradient
    /// unchanged to `pre_quant` and nothing to `quantized`.
    pub fn straight_through(&mut self, quantized: NodeId, pre_quant: NodeId) -> NodeId {
        let (vq, vp) = (&self.nodes[quantized.0].value, &self.nodes[pre_quant.0].value);
        if vq.shape != vp.shape {
            shape_panic("straight_through", format!("{:?} vs {:?}", vq.shape, vp.shape));
        }
        let out = vq.clone();
        self.push(Op::StraightThrough, vec![quantized, pre_quant], out)
    }

    /// Reverse pass from a scalar loss. Panics if `loss` is not scalar.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::new(
            self.nodes[loss.0].value.shape.clone(),
            vec![1.0],
        ));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            // Leaf gradients are results; interior gradients are only needed once.
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    /// Constants never need gradients; skipping them avoids the dW work for
    /// frozen networks (e.g. the perceptual net inside the codebook loss).
    fn needs_grad(&self, id: NodeId) -> bool {
        !matches!(
            self.nodes[id.0].op,
            Op::Leaf {
                requires_grad: false
            }
        )
    }

    fn accumulate(grads: &mut [Option<Array>], id: NodeId, delta: Array) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Array, grads: &mut Vec<Option<Array>>) {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        let val = |id: &NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add => {
                Self::accumulate(grads, inputs[0], g.clone());
                Self::accumulate(grads, inputs[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, inputs[0], g.clone());
                Self::accumulate(grads, inputs[1], g.map(|v| -v));
            }
            Op::Mul => {
                let (a, b) = (val(&inputs[0]), val(&inputs[1]));
                let da = Array::new(
                    g.shape.clone(),
                    g.data.iter().zip(&b.data).map(|(gv, bv)| gv * bv).collect(),
                );
                let db = Array::new(
                    g.shape.clone(),
                    g.data.iter().zip(&a.data).map(|(gv, av)| gv * av).collect(),
                );
                Self::accumulate(grads, inputs[0], da);
                Self::accumulate(grads, inputs[1], db);
            }
            Op::AddBias => {
                let d = *g.shape.last().unwrap();
                let mut db = vec![0.0; d];
                for (i, gv) in g.data.iter().enumerate() {
                    db[i % d] += gv;
                }
                Self::accumulate(grads, inputs[0], g.clone());
                Self::accumulate(grads, inputs[1], Array::new(vec![d], db));
            }
            Op::Scale(c) => {
                Self::accumulate(grads, inputs[0], g.map(|v| v * c));
            }
            Op::Matmul => {
                let (a, b) = (val(&inputs[0]), val(&inputs[1]));
                let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
                // dA = g . B^T ; dB = A^T . g
                if self.needs_grad(inputs[0]) {
                    let bt = transpose2(&b.data, k, m);
                    let da = matmul_raw(&g.data, &bt, n, m, k);
                    Self::accumulate(grads, inputs[0], Array::new(vec![n, k], da));
                }
                if self.needs_grad(inputs[1]) {
                    let at = transpose2(&a.data, n, k);
                    let db = matmul_raw(&at, &g.data, k, n, m);
                    Self::accumulate(grads, inputs[1], Array::new(vec![k, m], db));
                }
            }
            Op::BatchedMatmul => {
                let (a, b) = (val(&inputs[0]), val(&inputs[1]));
                let (bs, n, k, m) = (a.dim(0), a.dim(1), a.dim(2), b.dim(2));
                let mut da = vec![0.0; bs * n * k];
                let mut db = vec![0.0; bs * k * m];
                for i in 0..bs {
                    let gi = &g.data[i * n * m..(i + 1) * n * m];
                    let ai = &a.data[i * n * k..(i + 1) * n * k];
                    let bi = &b.data[i * k * m..(i + 1) * k * m];
                    let bt = transpose2(bi, k, m);
                    da[i * n * k..(i + 1) * n * k].copy_from_slice(&matmul_raw(gi, &bt, n, m, k));
                    let at = transpose2(ai, n, k);
                    db[i * k * m..(i + 1) * k * m].copy_from_slice(&matmul_raw(&at, gi, k, n, m));
                }
                Self::accumulate(grads, inputs[0], Array::new(vec![bs, n, k], da));
                Self::accumulate(grads, inputs[1], Array::new(vec![bs, k, m], db));
            }
            Op::Relu => {
                let x = val(&inputs[0]);
                let dx = Array::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                Self::accumulate(grads, inputs[0], dx);
            }
            Op::Gelu => {
                let x = val(&inputs[0]);
                let dx = Array::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect(),
                );
                Self::accumulate(grads, inputs[0], dx);
            }
            Op::Tanh => {
                let y = &node.value;
                let dx = Array::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect(),
                );
                Self::accumulate(grads, inputs[0], dx);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let dx = Array::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                );
                Self::accumulate(grads, inputs[0], dx);
            }
            Op::Exp => {
                let y = &node.value;
                let dx = Array::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * yv)
                        .collect(),
                );
                Self::accumulate(grads, inputs[0], dx);
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let d = *y.shape.last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, inputs[0], Array::new(y.shape.clone(), dx));
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (val(&inputs[0]), val(&inputs[1]));
                let d = *x.shape.last().unwrap();
                let rows = x.len() / d;
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gain.data[j];
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gain.data[j];
                        dx[r * d + j] = inv
                            * (dxhat - sum_dxhat / d as f64 - xhat * sum_dxhat_xhat / d as f64);
                    }
                }
                Self::accumulate(grads, inputs[0], Array::new(x.shape.clone(), dx));
                Self::accumulate(grads, inputs[1], Array::new(vec![d], dgain));
                Self::accumulate(grads, inputs[2], Array::new(vec![d], dbias));
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (val(&inputs[0]), val(&inputs[1]));
                let need = [
                    self.needs_grad(inputs[0]),
                    self.needs_grad(inputs[1]),
                    self.needs_grad(inputs[2]),
                ];
                let (dx, dw, db) = conv2d_bwd(x, w, g, *stride, *pad, need);
                if let Some(dx) = dx {
                    Self::accumulate(grads, inputs[0], dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, inputs[1], dw);
                }
                if let Some(db) = db {
                    Self::accumulate(grads, inputs[2], db);
                }
            }
            Op::ConvTranspose2d { stride, pad } => {
                let (x, w) = (val(&inputs[0]), val(&inputs[1]));
                let need = [
                    self.needs_grad(inputs[0]),
                    self.needs_grad(inputs[1]),
                    self.needs_grad(inputs[2]),
                ];
                let (dx, dw, db) = conv_transpose2d_bwd(x, w, g, *stride, *pad, need);
                if let Some(dx) = dx {
                    Self::accumulate(grads, inputs[0], dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, inputs[1], dw);
                }
                if let Some(db) = db {
                    Self::accumulate(grads, inputs[2], db);
                }
            }
            Op::Sum => {
                let x = val(&inputs[0]);
                Self::accumulate(grads, inputs[0], Array::full(&x.shape, g.data[0]));
            }
            Op::Mean => {
                let x = val(&inputs[0]);
                let c = g.data[0] / x.len() as f64;
                Self::accumulate(grads, inputs[0], Array::full(&x.shape, c));
            }
            Op::Mse => {
                let (a, b) = (val(&inputs[0]), val(&inputs[1]));
                let c = 2.0 * g.data[0] / a.len() as f64;
                let da: Vec<f64> = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| c * (x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                Self::accumulate(grads, inputs[0], Array::new(a.shape.clone(), da));
                Self::accumulate(grads, inputs[1], Array::new(b.shape.clone(), db));
            }
            Op::CrossEntropyLogits { targets } => {
                let logits = val(&inputs[0]);
                let c = logits.dim(1);
                let n = targets.len() as f64;
                let mut dx = vec![0.0; logits.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &logits.data[r * c..(r + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        dx[r * c + j] = g.data[0] * (p - if j == t { 1.0 } else { 0.0 }) / n;
                    }
                }
                Self::accumulate(grads, inputs[0], Array::new(logits.shape.clone(), dx));
            }
            Op::BceLogits { targets } => {
                let logits = val(&inputs[0]);
                let n = logits.len() as f64;
                let dx: Vec<f64> = logits
                    .data
                    .iter()
                    .zip(&targets.data)
                    .map(|(&x, &t)| g.data[0] * (sigmoid_fwd(x) - t) / n)
                    .collect();
                Self::accumulate(grads, inputs[0], Array::new(logits.shape.clone(), dx));
            }
            Op::Embedding { ids } => {
                let w = val(&inputs[0]);
                let d = w.dim(1);
                let mut dw = vec![0.0; w.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dw[id * d + j] += g.data[r * d + j];
                    }
                }
                Self::accumulate(grads, inputs[0], Array::new(w.shape.clone(), dw));
            }
            Op::Reshape => {
                let x = val(&inputs[0]);
                Self::accumulate(
                    grads,
                    inputs[0],
                    Array::new(x.shape.clone(), g.data.clone()),
                );
            }
            Op::Transpose { perm } => {
                // Gradient flows through the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = transpose_raw(g, &inv);
                Self::accumulate(grads, inputs[0], dx);
            }
            Op::Concat { axis } => {
                let rank = g.rank();
                let outer: usize = g.shape[..*axis].iter().product();
                let inner: usize = g.shape[*axis + 1..].iter().product();
                let total_axis = g.shape[*axis];
                let _ = rank;
                let mut offset = 0;
                for inp in inputs {
                    let v = val(inp);
                    let a = v.shape[*axis];
                    let mut dx = vec![0.0; v.len()];
                    for o in 0..outer {
                        let src_start = (o * total_axis + offset) * inner;
                        dx[o * a * inner..(o + 1) * a * inner]
                            .copy_from_slice(&g.data[src_start..src_start + a * inner]);
                    }
                    Self::accumulate(grads, *inp, Array::new(v.shape.clone(), dx));
                    offset += a;
                }
            }
            Op::SliceRows { start, end } => {
                let x = val(&inputs[0]);
                let inner: usize = x.shape[1..].iter().product();
                let mut dx = vec![0.0; x.len()];
                dx[start * inner..end * inner].copy_from_slice(&g.data);
                Self::accumulate(grads, inputs[0], Array::new(x.shape.clone(), dx));
            }
            Op::MeanPool2d => {
                let x = val(&inputs[0]);
                let (h, w) = (x.dim(2), x.dim(3));
                let hw = (h * w) as f64;
                let mut dx = vec![0.0; x.len()];
                for (i, chunk) in dx.chunks_mut(h * w).enumerate() {
                    let gv = g.data[i] / hw;
                    for v in chunk.iter_mut() {
                        *v = gv;
                    }
                }
                Self::accumulate(grads, inputs[0], Array::new(x.shape.clone(), dx));
            }
            Op::L2NormalizeRows { eps } => {
                let x = val(&inputs[0]);
                let y = &node.value;
                let d = x.dim(1);
                let mut dx = vec![0.0; x.len()];
                for r in 0..x.dim(0) {
                    let xr = &x.data[r * d..(r + 1) * d];
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(*eps);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                Self::accumulate(grads, inputs[0], Array::new(x.shape.clone(), dx));
            }
            Op::MulScalarNode => {
                let (x, s) = (val(&inputs[0]), val(&inputs[1]));
                let c = s.data[0];
                Self::accumulate(grads, inputs[0], g.map(|v| v * c));
                let ds: f64 = g.data.iter().zip(&x.data).map(|(gv, xv)| gv * xv).sum();
                Self::accumulate(grads, inputs[1], Array::new(s.shape.clone(), vec![ds]));
            }
            Op::StopGradient => {}
            Op::StraightThrough => {
                // All gradient to pre_quant, none to the quantized branch.
                Self::accumulate(grads, inputs[1], g.clone());
            }
        }
    }
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn transpose2(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let do_row = |i: usize, row_out: &mut [f64]| {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, bv) in row_out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n * k * m >= 1 << 18 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| do_row(i, row));
    } else {
        for (i, row) in out.chunks_mut(m).enumerate() {
            do_row(i, row);
        }
    }
    out
}

fn transpose_raw(v: &Array, perm: &[usize]) -> Array {
    let rank = v.rank();
    let in_shape = &v.shape;
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out = vec![0.0; v.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *o = v.data[src];
        // odometer increment over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array::new(out_shape, out)
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn conv2d_fwd(x: &Array, w: &Array, bias: &Array, stride: usize, pad: usize) -> Array {
    let (bs, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oc, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let mut out = vec![0.0; bs * oc * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(bo, plane)| {
            let (b, o) = (bo / oc, bo % oc);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.data[o];
                    for cc in 0..c {
                        for ki in 0..kh {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = &x.data
                                [((b * c + cc) * h + y as usize) * wd..((b * c + cc) * h + y as usize + 1) * wd];
                            let wrow = &w.data[((o * c + cc) * kh + ki) * kw..((o * c + cc) * kh + ki + 1) * kw];
                            for (kj, wv) in wrow.iter().enumerate() {
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                acc += xrow[xj as usize] * wv;
                            }
                        }
                    }
                    plane[i * ow + j] = acc;
                }
            }
        });
    Array::new(vec![bs, oc, oh, ow], out)
}

fn conv2d_bwd(
    x: &Array,
    w: &Array,
    g: &Array,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> (Option<Array>, Option<Array>, Option<Array>) {
    let (bs, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oc, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (oh, ow) = (g.dim(2), g.dim(3));

    let db = need[2].then(|| {
        let mut db = vec![0.0; oc];
        for b in 0..bs {
            for o in 0..oc {
                db[o] += g.data[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow]
                    .iter()
                    .sum::<f64>();
            }
        }
        Array::new(vec![oc], db)
    });

    // dX: parallel over batch, each batch plane disjoint.
    let dx = need[0].then(|| {
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(c * h * wd).enumerate().for_each(|(b, dxb)| {
        for o in 0..oc {
            let gplane = &g.data[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gplane[i * ow + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for cc in 0..c {
                        for ki in 0..kh {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                dxb[(cc * h + y as usize) * wd + xj as usize] +=
                                    gv * w.data[((o * c + cc) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    });
    Array::new(x.shape.clone(), dx)
    });

    // dW: parallel over output channel, each disjoint.
    let dw = need[1].then(|| {
    let mut dw = vec![0.0; w.len()];
    dw.par_chunks_mut(c * kh * kw).enumerate().for_each(|(o, dwo)| {
        for b in 0..bs {
            let gplane = &g.data[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gplane[i * ow + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for cc in 0..c {
                        for ki in 0..kh {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                dwo[(cc * kh + ki) * kw + kj] +=
                                    gv * x.data[((b * c + cc) * h + y as usize) * wd + xj as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Array::new(w.shape.clone(), dw)
    });

    (dx, dw, db)
}

fn conv_transpose2d_fwd(x: &Array, w: &Array, bias: &Array, stride: usize, pad: usize) -> Array {
    let (bs, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (_, oc, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; bs * oc * oh * ow];
    out.par_chunks_mut(oc * oh * ow).enumerate().for_each(|(b, outb)| {
        for (i, v) in outb.iter_mut().enumerate() {
            let o = i / (oh * ow);
            *v = bias.data[o];
        }
        for cc in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x.data[((b * c + cc) * h + i) * wd + j];
                    if xv == 0.0 {
                        continue;
                    }
                    for o in 0..oc {
                        for ki in 0..kh {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= oh as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if xx < 0 || xx >= ow as isize {
                                    continue;
                                }
                                outb[(o * oh + y as usize) * ow + xx as usize] +=
                                    xv * w.data[((cc * oc + o) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    });
    Array::new(vec![bs, oc, oh, ow], out)
}

fn conv_transpose2d_bwd(
    x: &Array,
    w: &Array,
    g: &Array,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> (Option<Array>, Option<Array>, Option<Array>) {
    let (bs, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (_, oc, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (oh, ow) = (g.dim(2), g.dim(3));

    let db = need[2].then(|| {
        let mut db = vec![0.0; oc];
        for b in 0..bs {
            for o in 0..oc {
                db[o] += g.data[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow]
                    .iter()
                    .sum::<f64>();
            }
        }
        Array::new(vec![oc], db)
    });

    let dx = need[0].then(|| {
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(c * h * wd).enumerate().for_each(|(b, dxb)| {
        for cc in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for o in 0..oc {
                        for ki in 0..kh {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= oh as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if xx < 0 || xx >= ow as isize {
                                    continue;
                                }
                                acc += g.data[((b * oc + o) * oh + y as usize) * ow + xx as usize]
                                    * w.data[((cc * oc + o) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    dxb[(cc * h + i) * wd + j] = acc;
                }
            }
        }
    });
    Array::new(x.shape.clone(), dx)
    });

    let dw = need[1].then(|| {
    let mut dw = vec![0.0; w.len()];
    dw.par_chunks_mut(oc * kh * kw).enumerate().for_each(|(cc, dwc)| {
        for b in 0..bs {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x.data[((b * c + cc) * h + i) * wd + j];
                    if xv == 0.0 {
                        continue;
                    }
                    for o in 0..oc {
                        for ki in 0..kh {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= oh as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if xx < 0 || xx >= ow as isize {
                                    continue;
                                }
                                dwc[(o * kh + ki) * kw + kj] +=
                                    xv * g.data[((b * oc + o) * oh + y as usize) * ow + xx as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Array::new(w.shape.clone(), dw)
    });

    (dx, dw, db)
}
