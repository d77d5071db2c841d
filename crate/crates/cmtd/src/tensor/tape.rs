//! Recorded-tape reverse-mode differentiation.
//!
//! A [`Tape`] appends one node per executed operation; nodes are therefore
//! already topologically ordered and a backward sweep visits each exactly
//! once, in reverse. Gradients accumulate per node, so fan-out (the same
//! tensor feeding several ops) is handled by summation.

use super::kernels::{
    col2im_acc, im2col, logsumexp_rows, matmul, matmul_acc, matmul_nt, matmul_tn_acc,
    softmax_rows, ConvGeom,
};
use super::{Tensor, TensorError};
use crate::rng::SplitMix64;

pub type NodeId = usize;

/// Zero-padding mode for stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// No padding; output extent shrinks by kernel-1.
    Valid,
    /// Pad by (kernel-1)/2 so the output extent matches the input.
    Same,
}

/// The recorded operation set. Each kind has a forward rule and a gradient
/// rule; gradient rules are checked against finite differences in the test
/// suites.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// inputs: x (N,C,H,W), w (F,C,K,K), b (F); stride 1
    Conv2d { padding: Padding },
    /// 2x2 window, stride 2; odd trailing rows/columns are dropped
    MaxPool,
    Relu,
    /// inputs: x (N,...) flattened to (N,D), w (D,U), b (U)
    Dense,
    /// row-wise on (K) or (N,K)
    Softmax,
    /// guarded: input clamped to >= 1e-300 before the log
    Log,
    Add,
    Sub,
    ElementwiseMul,
    ScalarMul(f64),
    Tanh,
    /// pass-through gradient inside [lo, hi], boundary counts as inside
    Clip { lo: f64, hi: f64 },
    Sum,
    Mean,
    /// inputs: logits (N,K), targets (N,K); mean over rows of
    /// sum_k y_k * (logsumexp(z) - z_k)
    CrossEntropyWithLogits,
    Negate,
    /// active in training mode only; mask drawn from the tape seed
    Dropout { rate: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool => "maxpool",
            OpKind::Relu => "relu",
            OpKind::Dense => "dense",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::Tanh => "tanh",
            OpKind::Clip { .. } => "clip",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropyWithLogits => "cross_entropy_with_logits",
            OpKind::Negate => "negate",
            OpKind::Dropout { .. } => "dropout",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Conv2d { .. } | OpKind::Dense => 3,
            OpKind::Add | OpKind::Sub | OpKind::ElementwiseMul | OpKind::CrossEntropyWithLogits => {
                2
            }
            _ => 1,
        }
    }
}

enum Saved {
    None,
    /// input flat index chosen per pooled cell
    PoolArgmax(Vec<u32>),
    /// softmax probabilities of the logits input
    CeProbs(Vec<f64>),
}

struct Node {
    op: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

/// Gradients produced by a backward sweep, keyed by tape node.
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient for a tensor recorded on the tape. Present for every node
    /// with `requires_grad` (zero tensors for unused ones).
    pub fn grad(&self, t: &Tensor) -> Result<&Tensor, TensorError> {
        let id = t.node().ok_or(TensorError::NotOnTape)?;
        self.by_node(id)
    }

    pub fn by_node(&self, id: NodeId) -> Result<&Tensor, TensorError> {
        self.grads
            .get(id)
            .and_then(|g| g.as_ref())
            .ok_or(TensorError::NotOnTape)
    }
}

/// Recorded computation graph. Single-writer: all ops go through
/// `&mut self`. Frozen models share read-only weights across tapes.
pub struct Tape {
    nodes: Vec<Node>,
    train_mode: bool,
    seed: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            train_mode: false,
            seed: 0,
        }
    }

    /// Training-mode tape; `seed` drives dropout masks.
    pub fn for_training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train_mode: true,
            seed,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a graph input and returns its tape handle.
    pub fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> Tensor {
        let id = self.nodes.len();
        let value = tensor.detached();
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: value.clone(),
            saved: Saved::None,
            requires_grad,
        });
        value.with_node(id, requires_grad)
    }

    fn input_ids(&self, op: &OpKind, inputs: &[&Tensor]) -> Result<Vec<NodeId>, TensorError> {
        if inputs.len() != op.arity() {
            return Err(TensorError::ShapeMismatch {
                op: op.name().into(),
                shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
                reason: format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        inputs
            .iter()
            .map(|t| {
                let id = t.node().ok_or(TensorError::NotOnTape)?;
                if id >= self.nodes.len() {
                    return Err(TensorError::NotOnTape);
                }
                Ok(id)
            })
            .collect()
    }

    /// Executes `op` on tensors already recorded on this tape and appends
    /// the result. Output values are checked finite.
    pub fn apply(&mut self, op: OpKind, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let ids = self.input_ids(&op, inputs)?;
        let out_id = self.nodes.len();
        let (value, saved) = self.forward(&op, inputs, out_id)?;
        if value.values().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.name().into(),
            });
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        self.nodes.push(Node {
            op: Some(op),
            inputs: ids,
            value: value.clone(),
            saved,
            requires_grad,
        });
        Ok(value.with_node(out_id, requires_grad))
    }

    // ── convenience wrappers ────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::ElementwiseMul, &[a, b])
    }
    pub fn scalar_mul(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        self.apply(OpKind::ScalarMul(c), &[a])
    }
    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn negate(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Negate, &[a])
    }
    pub fn clip(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Clip { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn dropout(&mut self, a: &Tensor, rate: f64) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Dropout { rate }, &[a])
    }
    pub fn maxpool(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::MaxPool, &[a])
    }
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        padding: Padding,
    ) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Conv2d { padding }, &[x, w, b])
    }
    pub fn dense(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Dense, &[x, w, b])
    }
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: &Tensor,
        targets: &Tensor,
    ) -> Result<Tensor, TensorError> {
        self.apply(OpKind::CrossEntropyWithLogits, &[logits, targets])
    }

    fn shape_err(op: &OpKind, inputs: &[&Tensor], reason: impl Into<String>) -> TensorError {
        TensorError::ShapeMismatch {
            op: op.name().into(),
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
            reason: reason.into(),
        }
    }

    fn forward(
        &self,
        op: &OpKind,
        inputs: &[&Tensor],
        out_id: NodeId,
    ) -> Result<(Tensor, Saved), TensorError> {
        match op {
            OpKind::Add | OpKind::Sub | OpKind::ElementwiseMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(Self::shape_err(op, inputs, "operand shapes differ"));
                }
                let values = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(&x, &y)| match op {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                Ok((Tensor::new(a.shape().to_vec(), values)?, Saved::None))
            }
            OpKind::ScalarMul(c) => {
                let values = inputs[0].values().iter().map(|&x| c * x).collect();
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::Relu => {
                let values = inputs[0].values().iter().map(|&x| x.max(0.0)).collect();
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::Tanh => {
                let values = inputs[0].values().iter().map(|&x| x.tanh()).collect();
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::Negate => {
                let values = inputs[0].values().iter().map(|&x| -x).collect();
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::Log => {
                let values = inputs[0]
                    .values()
                    .iter()
                    .map(|&x| x.max(1e-300).ln())
                    .collect();
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::Clip { lo, hi } => {
                if lo > hi {
                    return Err(TensorError::BadParameter {
                        op: "clip".into(),
                        reason: format!("lo {lo} > hi {hi}"),
                    });
                }
                let values = inputs[0]
                    .values()
                    .iter()
                    .map(|&x| x.clamp(*lo, *hi))
                    .collect();
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::Sum => Ok((
                Tensor::scalar(inputs[0].values().iter().sum()),
                Saved::None,
            )),
            OpKind::Mean => {
                let n = inputs[0].len() as f64;
                Ok((
                    Tensor::scalar(inputs[0].values().iter().sum::<f64>() / n),
                    Saved::None,
                ))
            }
            OpKind::Softmax => {
                let (rows, cols) = Self::rows_cols(op, inputs)?;
                let values = softmax_rows(inputs[0].values(), rows, cols);
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(TensorError::BadParameter {
                        op: "dropout".into(),
                        reason: format!("rate {rate} outside [0, 1)"),
                    });
                }
                if !self.train_mode || *rate == 0.0 {
                    return Ok((inputs[0].detached(), Saved::None));
                }
                let mask = self.dropout_mask(out_id, *rate, inputs[0].len());
                let values = inputs[0]
                    .values()
                    .iter()
                    .zip(&mask)
                    .map(|(&x, &m)| x * m)
                    .collect();
                Ok((Tensor::new(inputs[0].shape().to_vec(), values)?, Saved::None))
            }
            OpKind::MaxPool => {
                let x = inputs[0];
                if x.shape().len() != 4 {
                    return Err(Self::shape_err(op, inputs, "expected (N,C,H,W)"));
                }
                let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                if h < 2 || w < 2 {
                    return Err(Self::shape_err(op, inputs, "spatial extent below 2x2"));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut values = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0u32; n * c * oh * ow];
                let xs = x.values();
                for img in 0..n * c {
                    let plane = img * h * w;
                    let out_plane = img * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_idx = plane + (2 * oy) * w + 2 * ox;
                            let mut best = xs[best_idx];
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                            values[out_plane + oy * ow + ox] = best;
                            argmax[out_plane + oy * ow + ox] = best_idx as u32;
                        }
                    }
                }
                Ok((
                    Tensor::new(vec![n, c, oh, ow], values)?,
                    Saved::PoolArgmax(argmax),
                ))
            }
            OpKind::Conv2d { padding } => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                if x.shape().len() != 4 || w.shape().len() != 4 || b.shape().len() != 1 {
                    return Err(Self::shape_err(op, inputs, "expected (N,C,H,W), (F,C,K,K), (F)"));
                }
                let geom = Self::conv_geom(x, w, *padding)
                    .ok_or_else(|| Self::shape_err(op, inputs, "kernel larger than padded input"))?;
                if w.shape()[1] != geom.channels_in || w.shape()[2] != w.shape()[3] {
                    return Err(Self::shape_err(op, inputs, "kernel channels do not match input"));
                }
                if b.shape()[0] != geom.filters {
                    return Err(Self::shape_err(op, inputs, "bias length does not match filters"));
                }
                let n = x.shape()[0];
                let per_in = geom.channels_in * geom.height * geom.width;
                let per_out = geom.filters * geom.out_h * geom.out_w;
                let mut values = vec![0.0; n * per_out];
                let mut cols = vec![0.0; geom.out_h * geom.out_w * geom.patch_len()];
                for ex in 0..n {
                    im2col(&x.values()[ex * per_in..(ex + 1) * per_in], &geom, &mut cols);
                    // (F, patch) x (out_h*out_w, patch)^T -> (F, out_h*out_w)
                    let out = matmul_nt(
                        w.values(),
                        &cols,
                        geom.filters,
                        geom.patch_len(),
                        geom.out_h * geom.out_w,
                    );
                    let dst = &mut values[ex * per_out..(ex + 1) * per_out];
                    dst.copy_from_slice(&out);
                    for f in 0..geom.filters {
                        let bias = b.values()[f];
                        for v in &mut dst[f * geom.out_h * geom.out_w..(f + 1) * geom.out_h * geom.out_w]
                        {
                            *v += bias;
                        }
                    }
                }
                Ok((
                    Tensor::new(vec![n, geom.filters, geom.out_h, geom.out_w], values)?,
                    Saved::None,
                ))
            }
            OpKind::Dense => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let n = x.shape()[0];
                let d: usize = x.shape()[1..].iter().product();
                if w.shape().len() != 2 || w.shape()[0] != d {
                    return Err(Self::shape_err(op, inputs, "weight rows != flattened input"));
                }
                let u = w.shape()[1];
                if b.shape() != [u] {
                    return Err(Self::shape_err(op, inputs, "bias length != units"));
                }
                let mut values = matmul(x.values(), w.values(), n, d, u);
                for row in values.chunks_mut(u) {
                    for (v, &bias) in row.iter_mut().zip(b.values()) {
                        *v += bias;
                    }
                }
                Ok((Tensor::new(vec![n, u], values)?, Saved::None))
            }
            OpKind::CrossEntropyWithLogits => {
                let (z, y) = (inputs[0], inputs[1]);
                if z.shape() != y.shape() {
                    return Err(Self::shape_err(op, inputs, "logits and targets differ"));
                }
                let (rows, cols) = Self::rows_cols(op, inputs)?;
                let lse = logsumexp_rows(z.values(), rows, cols);
                let probs = softmax_rows(z.values(), rows, cols);
                let mut loss = 0.0;
                for r in 0..rows {
                    for k in 0..cols {
                        let yk = y.values()[r * cols + k];
                        if yk != 0.0 {
                            loss += yk * (lse[r] - z.values()[r * cols + k]);
                        }
                    }
                }
                Ok((Tensor::scalar(loss / rows as f64), Saved::CeProbs(probs)))
            }
        }
    }

    fn rows_cols(op: &OpKind, inputs: &[&Tensor]) -> Result<(usize, usize), TensorError> {
        match inputs[0].shape() {
            [k] => Ok((1, *k)),
            [n, k] => Ok((*n, *k)),
            _ => Err(Self::shape_err(op, inputs, "expected rank 1 or 2")),
        }
    }

    fn conv_geom(x: &Tensor, w: &Tensor, padding: Padding) -> Option<ConvGeom> {
        let kernel = w.shape()[2];
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        };
        ConvGeom::new(x.shape()[1], x.shape()[2], x.shape()[3], w.shape()[0], kernel, pad)
    }

    fn dropout_mask(&self, node_id: NodeId, rate: f64, len: usize) -> Vec<f64> {
        let mut rng = SplitMix64::derive(self.seed, node_id as u64);
        let keep = 1.0 - rate;
        (0..len)
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }

    /// Reverse sweep from a scalar output. Returns a gradient per
    /// `requires_grad` node; nodes not reached by the sweep get zeros.
    pub fn backward(&self, output: &Tensor) -> Result<GradientMap, TensorError> {
        let out_id = output.node().ok_or(TensorError::NotOnTape)?;
        if out_id >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        if !self.nodes[out_id].value.is_scalar() {
            return Err(TensorError::NonScalarBackward(
                self.nodes[out_id].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out_id] = Some(vec![1.0]);

        for id in (0..=out_id).rev() {
            let Some(go) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(op) = &node.op {
                self.propagate(op, node, id, &go, &mut grads);
            }
            if node.requires_grad {
                grads[id] = Some(go);
            }
        }

        let map = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                match grads[id].take() {
                    Some(g) => Some(Tensor::new(shape, g).expect("gradient shape")),
                    None => Some(Tensor::zeros(shape)),
                }
            })
            .collect();
        Ok(GradientMap { grads: map })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, add: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn propagate(
        &self,
        op: &OpKind,
        node: &Node,
        node_id: NodeId,
        go: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let wants = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        match op {
            OpKind::Add | OpKind::Sub => {
                for (slot, sign) in [(0usize, 1.0), (1, if matches!(op, OpKind::Sub) { -1.0 } else { 1.0 })] {
                    if wants(slot) {
                        Self::accumulate(grads, node.inputs[slot], go.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(go) {
                                *gi += sign * gv;
                            }
                        });
                    }
                }
            }
            OpKind::ElementwiseMul => {
                let (a, b) = (input(0).values().to_vec(), input(1).values().to_vec());
                if wants(0) {
                    Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                        for ((gi, &gv), &bv) in g.iter_mut().zip(go).zip(&b) {
                            *gi += gv * bv;
                        }
                    });
                }
                if wants(1) {
                    Self::accumulate(grads, node.inputs[1], go.len(), |g| {
                        for ((gi, &gv), &av) in g.iter_mut().zip(go).zip(&a) {
                            *gi += gv * av;
                        }
                    });
                }
            }
            OpKind::ScalarMul(c) => {
                if wants(0) {
                    Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                        for (gi, &gv) in g.iter_mut().zip(go) {
                            *gi += c * gv;
                        }
                    });
                }
            }
            OpKind::Negate => {
                if wants(0) {
                    Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                        for (gi, &gv) in g.iter_mut().zip(go) {
                            *gi -= gv;
                        }
                    });
                }
            }
            OpKind::Relu => {
                if wants(0) {
                    let x = input(0).values();
                    Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                        for ((gi, &gv), &xv) in g.iter_mut().zip(go).zip(x) {
                            if xv > 0.0 {
                                *gi += gv;
                            }
                        }
                    });
                }
            }
            OpKind::Tanh => {
                if wants(0) {
                    let y = node.value.values();
                    Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                        for ((gi, &gv), &yv) in g.iter_mut().zip(go).zip(y) {
                            *gi += gv * (1.0 - yv * yv);
                        }
                    });
                }
            }
            OpKind::Log => {
                if wants(0) {
                    let x = input(0).values();
                    Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                        for ((gi, &gv), &xv) in g.iter_mut().zip(go).zip(x) {
                            *gi += gv / xv.max(1e-300);
                        }
                    });
                }
            }
            OpKind::Clip { lo, hi } => {
                if wants(0) {
                    let x = input(0).values();
                    Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                        for ((gi, &gv), &xv) in g.iter_mut().zip(go).zip(x) {
                            if xv >= *lo && xv <= *hi {
                                *gi += gv;
                            }
                        }
                    });
                }
            }
            OpKind::Sum => {
                if wants(0) {
                    let len = input(0).len();
                    Self::accumulate(grads, node.inputs[0], len, |g| {
                        for gi in g.iter_mut() {
                            *gi += go[0];
                        }
                    });
                }
            }
            OpKind::Mean => {
                if wants(0) {
                    let len = input(0).len();
                    let scale = go[0] / len as f64;
                    Self::accumulate(grads, node.inputs[0], len, |g| {
                        for gi in g.iter_mut() {
                            *gi += scale;
                        }
                    });
                }
            }
            OpKind::Softmax => {
                if wants(0) {
                    let s = node.value.values();
                    let cols = *node.value.shape().last().unwrap();
                    let rows = s.len() / cols;
                    Self::accumulate(grads, node.inputs[0], s.len(), |g| {
                        for r in 0..rows {
                            let sr = &s[r * cols..(r + 1) * cols];
                            let gor = &go[r * cols..(r + 1) * cols];
                            let dot: f64 = sr.iter().zip(gor).map(|(&a, &b)| a * b).sum();
                            for ((gi, &sv), &gv) in
                                g[r * cols..(r + 1) * cols].iter_mut().zip(sr).zip(gor)
                            {
                                *gi += sv * (gv - dot);
                            }
                        }
                    });
                }
            }
            OpKind::Dropout { rate } => {
                if wants(0) {
                    if !self.train_mode || *rate == 0.0 {
                        Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(go) {
                                *gi += gv;
                            }
                        });
                    } else {
                        let mask = self.dropout_mask(node_id, *rate, go.len());
                        Self::accumulate(grads, node.inputs[0], go.len(), |g| {
                            for ((gi, &gv), &m) in g.iter_mut().zip(go).zip(&mask) {
                                *gi += gv * m;
                            }
                        });
                    }
                }
            }
            OpKind::MaxPool => {
                if wants(0) {
                    let Saved::PoolArgmax(argmax) = &node.saved else {
                        unreachable!("maxpool saved argmax")
                    };
                    let len = input(0).len();
                    Self::accumulate(grads, node.inputs[0], len, |g| {
                        for (cell, &src) in argmax.iter().enumerate() {
                            g[src as usize] += go[cell];
                        }
                    });
                }
            }
            OpKind::Conv2d { padding } => {
                let (x, w) = (input(0), input(1));
                let geom = Self::conv_geom(x, w, *padding).expect("validated in forward");
                let n = x.shape()[0];
                let per_in = geom.channels_in * geom.height * geom.width;
                let per_out = geom.filters * geom.out_h * geom.out_w;
                let spatial = geom.out_h * geom.out_w;
                let mut cols = vec![0.0; spatial * geom.patch_len()];

                let mut dw = if wants(1) { Some(vec![0.0; w.len()]) } else { None };
                let mut dx = if wants(0) { Some(vec![0.0; x.len()]) } else { None };
                let mut db = if wants(2) { Some(vec![0.0; geom.filters]) } else { None };

                for ex in 0..n {
                    let g_ex = &go[ex * per_out..(ex + 1) * per_out];
                    if dw.is_some() || dx.is_some() {
                        im2col(&x.values()[ex * per_in..(ex + 1) * per_in], &geom, &mut cols);
                    }
                    if let Some(dw) = dw.as_mut() {
                        // dW(F,patch) += G(F,spatial) * cols(spatial,patch)
                        matmul_acc(g_ex, &cols, geom.filters, spatial, geom.patch_len(), dw);
                    }
                    if let Some(db) = db.as_mut() {
                        for f in 0..geom.filters {
                            db[f] += g_ex[f * spatial..(f + 1) * spatial].iter().sum::<f64>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols(spatial,patch) = G^T(spatial,F) * W(F,patch)
                        let mut dcols = vec![0.0; spatial * geom.patch_len()];
                        matmul_tn_acc(g_ex, w.values(), geom.filters, spatial, geom.patch_len(), &mut dcols);
                        col2im_acc(&dcols, &geom, &mut dx[ex * per_in..(ex + 1) * per_in]);
                    }
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, node.inputs[1], dw.len(), |g| {
                        for (gi, dv) in g.iter_mut().zip(dw) {
                            *gi += dv;
                        }
                    });
                }
                if let Some(dx) = dx {
                    Self::accumulate(grads, node.inputs[0], dx.len(), |g| {
                        for (gi, dv) in g.iter_mut().zip(dx) {
                            *gi += dv;
                        }
                    });
                }
                if let Some(db) = db {
                    Self::accumulate(grads, node.inputs[2], db.len(), |g| {
                        for (gi, dv) in g.iter_mut().zip(db) {
                            *gi += dv;
                        }
                    });
                }
            }
            OpKind::Dense => {
                let (x, w) = (input(0), input(1));
                let n = x.shape()[0];
                let d: usize = x.shape()[1..].iter().product();
                let u = w.shape()[1];
                if wants(1) {
                    let mut dw = vec![0.0; d * u];
                    matmul_tn_acc(x.values(), go, n, d, u, &mut dw);
                    Self::accumulate(grads, node.inputs[1], d * u, |g| {
                        for (gi, dv) in g.iter_mut().zip(dw) {
                            *gi += dv;
                        }
                    });
                }
                if wants(0) {
                    let dx = matmul_nt(go, w.values(), n, u, d);
                    Self::accumulate(grads, node.inputs[0], n * d, |g| {
                        for (gi, dv) in g.iter_mut().zip(dx) {
                            *gi += dv;
                        }
                    });
                }
                if wants(2) {
                    Self::accumulate(grads, node.inputs[2], u, |g| {
                        for row in go.chunks(u) {
                            for (gi, &gv) in g.iter_mut().zip(row) {
                                *gi += gv;
                            }
                        }
                    });
                }
            }
            OpKind::CrossEntropyWithLogits => {
                let Saved::CeProbs(probs) = &node.saved else {
                    unreachable!("ce saved probs")
                };
                let (z, y) = (input(0), input(1));
                let cols = *z.shape().last().unwrap();
                let rows = z.len() / cols;
                let scale = go[0] / rows as f64;
                if wants(0) {
                    let yv = y.values();
                    Self::accumulate(grads, node.inputs[0], z.len(), |g| {
                        for r in 0..rows {
                            let ysum: f64 = yv[r * cols..(r + 1) * cols].iter().sum();
                            for k in 0..cols {
                                let idx = r * cols + k;
                                g[idx] += scale * (probs[idx] * ysum - yv[idx]);
                            }
                        }
                    });
                }
                if wants(1) {
                    let lse = logsumexp_rows(z.values(), rows, cols);
                    let zv = z.values();
                    Self::accumulate(grads, node.inputs[1], y.len(), |g| {
                        for r in 0..rows {
                            for k in 0..cols {
                                g[r * cols + k] += scale * (lse[r] - zv[r * cols + k]);
                            }
                        }
                    });
                }
            }
        }
    }

    /// FNV-1a hash of the discrete activation pattern recorded on the
    /// tape: relu sign bits, maxpool argmax choices, and clip regions.
    /// Two nearby inputs with equal fingerprints lie on the same smooth
    /// piece of the network, so central differences are valid between
    /// them; a mismatch means a kink was crossed.
    pub fn activation_fingerprint(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut feed = |byte: u8| {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for node in &self.nodes {
            match &node.op {
                Some(OpKind::Relu) => {
                    for &v in self.nodes[node.inputs[0]].value.values() {
                        feed(u8::from(v > 0.0));
                    }
                }
                Some(OpKind::Clip { lo, hi }) => {
                    for &v in self.nodes[node.inputs[0]].value.values() {
                        feed(if v < *lo {
                            0
                        } else if v > *hi {
                            2
                        } else {
                            1
                        });
                    }
                }
                Some(OpKind::MaxPool) => {
                    let Saved::PoolArgmax(argmax) = &node.saved else {
                        continue;
                    };
                    for &idx in argmax {
                        for byte in idx.to_le_bytes() {
                            feed(byte);
                        }
                    }
                }
                _ => {}
            }
        }
        hash
    }

    /// Smallest distance to a gradient discontinuity observed on the tape:
    /// relu inputs near 0, runner-up gaps in maxpool windows, clip inputs
    /// near a bound. Infinite when no such op is recorded.
    pub fn min_kink_distance(&self) -> f64 {
        let mut dist = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Some(OpKind::Relu) => {
                    let x = &self.nodes[node.inputs[0]].value;
                    for &v in x.values() {
                        dist = dist.min(v.abs());
                    }
                }
                Some(OpKind::Clip { lo, hi }) => {
                    let x = &self.nodes[node.inputs[0]].value;
                    for &v in x.values() {
                        if lo.is_finite() {
                            dist = dist.min((v - lo).abs());
                        }
                        if hi.is_finite() {
                            dist = dist.min((v - hi).abs());
                        }
                    }
                }
                Some(OpKind::MaxPool) => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let [n, c, h, w] =
                        [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                    let xs = x.values();
                    for img in 0..n * c {
                        let plane = img * h * w;
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let mut vals = [0.0f64; 4];
                                for (slot, (dy, dx)) in
                                    [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                                {
                                    vals[slot] = xs[plane + (2 * oy + dy) * w + 2 * ox + dx];
                                }
                                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                dist = dist.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        dist
    }
}
