//! Define-by-run reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Graph`] is a tape: builder methods evaluate eagerly, record the
//! operation, and validate shapes and finiteness as they go. Graphs are
//! rebuilt per batch and confined to one thread; [`Graph::backward`] walks
//! the tape in reverse and returns exact gradients for every
//! requires-gradient leaf. Gradients for a constant input are simply not
//! computed, which is what makes frozen-parameter inner loops cheap.

use crate::error::{AgatError, Result};
use crate::ops::{self, RasterParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// x [..., D] plus a [D] bias broadcast over leading dims.
    AddBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SqNorm(NodeId),
    MaxPool2(NodeId),
    Reshape(NodeId),
    AffineGrid {
        theta: NodeId,
        h: usize,
        w: usize,
    },
    GridSample {
        x: NodeId,
        grid: NodeId,
    },
    GaussBlur {
        x: NodeId,
        sigma: NodeId,
    },
    BroadcastScalar(NodeId),
    SliceCol {
        x: NodeId,
        col: usize,
    },
    ScalePerSample {
        x: NodeId,
        s: NodeId,
    },
    SoftShapes {
        alpha: NodeId,
        colors: NodeId,
        params: RasterParams,
    },
    /// Mean softmax cross-entropy of `logits` against constant probability
    /// rows, computed via log-sum-exp.
    CrossEntropy {
        logits: NodeId,
        target: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SqNorm(..) => "sq_norm",
            Op::MaxPool2(..) => "max_pool2",
            Op::Reshape(..) => "reshape",
            Op::AffineGrid { .. } => "affine_grid",
            Op::GridSample { .. } => "grid_sample",
            Op::GaussBlur { .. } => "gauss_blur",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SliceCol { .. } => "slice_col",
            Op::ScalePerSample { .. } => "scale_per_sample",
            Op::SoftShapes { .. } => "soft_shapes",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    label: Option<String>,
}

/// Gradients keyed by node id; requires-gradient leaves unreachable from the
/// output hold zero tensors.
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Panics if `id` was not a requires-gradient leaf of the graph that
    /// produced this map.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("no gradient recorded for node")
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn describe(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        match &n.label {
            Some(l) => format!("node #{} ({}, \"{}\")", id.0, n.op.name(), l),
            None => format!("node #{} ({})", id.0, n.op.name()),
        }
    }

    /// Bind a tensor as a leaf. Gradients are tracked only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool, label: &str) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            label: if label.is_empty() {
                None
            } else {
                Some(label.to_string())
            },
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false, "")
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        value.check_finite(&format!("node #{} ({})", id.0, op.name()))?;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            label: None,
        });
        Ok(id)
    }

    fn same_shape(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AgatError::shape(
                ctx,
                format!(
                    "{} has {:?}, {} has {:?}",
                    self.describe(a),
                    self.value(a).shape(),
                    self.describe(b),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        self.push(Op::Add(a, b), v, self.requires_grad(a) || self.requires_grad(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        self.push(Op::Sub(a, b), v, self.requires_grad(a) || self.requires_grad(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        self.push(Op::Mul(a, b), v, self.requires_grad(a) || self.requires_grad(b))
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::MulConst(a, c), v, self.requires_grad(a))
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AgatError::shape(
                "matmul",
                format!(
                    "{} {:?} x {} {:?}",
                    self.describe(a),
                    sa,
                    self.describe(b),
                    sb
                ),
            ));
        }
        let v = ops::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v, self.requires_grad(a) || self.requires_grad(b))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let d = *self.value(x).shape().last().unwrap();
        if self.value(b).shape() != [d] {
            return Err(AgatError::shape(
                "add_bias",
                format!(
                    "bias {} {:?} against last dim {}",
                    self.describe(b),
                    self.value(b).shape(),
                    d
                ),
            ));
        }
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, bias) in row.iter_mut().zip(&bd) {
                *o += bias;
            }
        }
        self.push(Op::AddBias(x, b), v, self.requires_grad(x) || self.requires_grad(b))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || self.value(b).shape() != [sw[0]] {
            return Err(AgatError::shape(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, self.value(b).shape()),
            ));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(AgatError::shape(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", sw, sx),
            ));
        }
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, v, rg)
    }

    // -- activations -------------------------------------------------------

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, self.requires_grad(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(Op::Sigmoid(a), v, self.requires_grad(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax(self.value(a));
        self.push(Op::Softmax(a), v, self.requires_grad(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v, self.requires_grad(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, self.requires_grad(a))
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v, self.requires_grad(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(Op::Mean(a), v, self.requires_grad(a))
    }

    /// Squared L2 norm of the whole tensor.
    pub fn sq_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        self.push(Op::SqNorm(a), v, self.requires_grad(a))
    }

    // -- structure ---------------------------------------------------------

    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(AgatError::shape(
                "max_pool2",
                format!("{} has {:?}", self.describe(a), s),
            ));
        }
        let v = ops::maxpool2(self.value(a));
        self.push(Op::MaxPool2(a), v, self.requires_grad(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push(Op::Reshape(a), v, self.requires_grad(a))
    }

    /// Broadcast a scalar node across `shape`.
    pub fn broadcast_scalar(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(AgatError::shape(
                "broadcast_scalar",
                format!("{} is not scalar", self.describe(s)),
            ));
        }
        let v = Tensor::filled(shape, self.value(s).item());
        self.push(Op::BroadcastScalar(s), v, self.requires_grad(s))
    }

    /// Column `col` of a [B,D] matrix as a [B] vector.
    pub fn slice_col(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || col >= s[1] {
            return Err(AgatError::shape(
                "slice_col",
                format!("col {} of {} {:?}", col, self.describe(x), s),
            ));
        }
        let d = s[1];
        let v = Tensor::from_vec(
            self.value(x)
                .data()
                .iter()
                .skip(col)
                .step_by(d)
                .cloned()
                .collect(),
        );
        self.push(Op::SliceCol { x, col }, v, self.requires_grad(x))
    }

    /// Scale each axis-0 slice of `x` by the matching entry of `s` ([B]).
    pub fn scale_per_sample(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let b = self.value(x).shape()[0];
        if self.value(s).shape() != [b] {
            return Err(AgatError::shape(
                "scale_per_sample",
                format!(
                    "scales {:?} against batch {}",
                    self.value(s).shape(),
                    b
                ),
            ));
        }
        let per = self.value(x).len() / b;
        let sd = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (bi, chunk) in v.data_mut().chunks_mut(per).enumerate() {
            for o in chunk {
                *o *= sd[bi];
            }
        }
        self.push(
            Op::ScalePerSample { x, s },
            v,
            self.requires_grad(x) || self.requires_grad(s),
        )
    }

    // -- image primitives ---------------------------------------------------

    pub fn affine_grid(&mut self, theta: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let s = self.value(theta).shape();
        if s.len() != 2 || s[1] != 6 {
            return Err(AgatError::shape(
                "affine_grid",
                format!("theta {} has {:?}, want [B,6]", self.describe(theta), s),
            ));
        }
        let v = ops::affine_grid(self.value(theta), h, w);
        self.push(Op::AffineGrid { theta, h, w }, v, self.requires_grad(theta))
    }

    pub fn grid_sample(&mut self, x: NodeId, grid: NodeId) -> Result<NodeId> {
        let (sx, sg) = (self.value(x).shape(), self.value(grid).shape());
        if sx.len() != 4 || sg.len() != 4 || sg[0] != sx[0] || sg[3] != 2 {
            return Err(AgatError::shape(
                "grid_sample",
                format!("x {:?}, grid {:?}", sx, sg),
            ));
        }
        let v = ops::grid_sample(self.value(x), self.value(grid));
        self.push(
            Op::GridSample { x, grid },
            v,
            self.requires_grad(x) || self.requires_grad(grid),
        )
    }

    /// Separable Gaussian blur; `sigma` is a [B] node, differentiable.
    pub fn gauss_blur(&mut self, x: NodeId, sigma: NodeId) -> Result<NodeId> {
        let b = self.value(x).shape()[0];
        if self.value(sigma).shape() != [b] {
            return Err(AgatError::shape(
                "gauss_blur",
                format!("sigma {:?} against batch {}", self.value(sigma).shape(), b),
            ));
        }
        if self.value(sigma).data().iter().any(|&s| s < 0.0) {
            return Err(AgatError::shape("gauss_blur", "negative sigma"));
        }
        let v = ops::gauss_blur(self.value(x), self.value(sigma).data());
        self.push(
            Op::GaussBlur { x, sigma },
            v,
            self.requires_grad(x) || self.requires_grad(sigma),
        )
    }

    pub fn soft_shapes(
        &mut self,
        alpha: NodeId,
        colors: NodeId,
        params: RasterParams,
    ) -> Result<NodeId> {
        let (sa, sc) = (self.value(alpha).shape(), self.value(colors).shape());
        if sa.len() != 2 || sa[1] != 6 || sc != [sa[0], 3] {
            return Err(AgatError::shape(
                "soft_shapes",
                format!("alpha {:?}, colors {:?}", sa, sc),
            ));
        }
        let v = ops::soft_shapes(self.value(alpha), self.value(colors), &params);
        let rg = self.requires_grad(alpha);
        self.push(Op::SoftShapes { alpha, colors, params }, v, rg)
    }

    /// Mean softmax cross-entropy of `logits` [B,K] against constant target
    /// probability rows [B,K] (log-sum-exp form). The target must not
    /// require gradients: it is a detached distribution by contract.
    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (sl, st) = (self.value(logits).shape(), self.value(target).shape());
        if sl.len() != 2 || sl != st {
            return Err(AgatError::shape(
                "cross_entropy",
                format!("logits {:?} vs target {:?}", sl, st),
            ));
        }
        if self.requires_grad(target) {
            return Err(AgatError::shape(
                "cross_entropy",
                "target distribution must be constant",
            ));
        }
        let k = sl[1];
        let b = sl[0];
        let mut total = 0.0;
        for (xrow, trow) in self
            .value(logits)
            .data()
            .chunks(k)
            .zip(self.value(target).data().chunks(k))
        {
            let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xrow.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            let dot: f64 = xrow.iter().zip(trow).map(|(x, t)| x * t).sum();
            total += lse - dot;
        }
        let v = Tensor::scalar(total / b as f64);
        self.push(Op::CrossEntropy { logits, target }, v, self.requires_grad(logits))
    }

    /// Hash of every branch decision taken during the forward pass: ReLU
    /// input signs, pooling argmax cells, and bilinear sampling cells.
    /// Finite-difference probes whose signature differs between x+h and x-h
    /// straddle a kink and are meaningless; gradient checks skip them.
    pub fn nonsmooth_signature(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut feed = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for &v in self.value(a).data() {
                        feed(u8::from(v > 0.0));
                    }
                }
                Op::MaxPool2(a) => {
                    let x = self.value(a);
                    let (hh, ww) = (x.shape()[2], x.shape()[3]);
                    let planes = x.shape()[0] * x.shape()[1];
                    let xd = x.data();
                    for p in 0..planes {
                        let off = p * hh * ww;
                        for yo in 0..hh / 2 {
                            for xo in 0..ww / 2 {
                                let i = off + 2 * yo * ww + 2 * xo;
                                let cell = [i, i + 1, i + ww, i + ww + 1];
                                let mut best = 0u8;
                                for (k, &c) in cell.iter().enumerate().skip(1) {
                                    if xd[c] > xd[cell[best as usize]] {
                                        best = k as u8;
                                    }
                                }
                                feed(best);
                            }
                        }
                    }
                }
                Op::GridSample { x, grid } => {
                    let (hh, ww) = (self.value(x).shape()[2], self.value(x).shape()[3]);
                    for pair in self.value(grid).data().chunks(2) {
                        let ix = (pair[0] + 1.0) * 0.5 * (ww - 1) as f64;
                        let iy = (pair[1] + 1.0) * 0.5 * (hh - 1) as f64;
                        feed(ix.floor() as i64 as u8);
                        feed(iy.floor() as i64 as u8);
                    }
                }
                _ => {}
            }
        }
        h
    }

    // -- backward -----------------------------------------------------------

    /// Exact reverse-mode gradients of the scalar `out` for every
    /// requires-gradient leaf.
    pub fn backward(&self, out: NodeId) -> Result<GradientMap> {
        if !self.value(out).is_scalar() {
            return Err(AgatError::shape(
                "backward",
                format!(
                    "{} has shape {:?}, expected a scalar output",
                    self.describe(out),
                    self.value(out).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));

        for i in (0..=out.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let u = grads[i].take().unwrap();
            self.accumulate(&self.nodes[i].op, i, &u, &mut grads);
            // keep gradients for leaves; interior node grads are transient
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(u);
            }
        }

        // unreachable requires-grad leaves get zeros
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }

        Ok(GradientMap { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, op: &Op, _at: usize, u: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, u.clone());
                self.acc(grads, b, u.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, u.clone());
                self.acc(grads, b, u.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let g = Tensor::new(
                        u.shape().to_vec(),
                        u.data()
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(x, y)| x * y)
                            .collect(),
                    )
                    .unwrap();
                    self.acc(grads, a, g);
                }
                if self.requires_grad(b) {
                    let g = Tensor::new(
                        u.shape().to_vec(),
                        u.data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(x, y)| x * y)
                            .collect(),
                    )
                    .unwrap();
                    self.acc(grads, b, g);
                }
            }
            Op::MulConst(a, c) => self.acc(grads, a, u.map(|v| v * c)),
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    self.acc(grads, a, ops::matmul_backward_a(self.value(b), u));
                }
                if self.requires_grad(b) {
                    self.acc(grads, b, ops::matmul_backward_b(self.value(a), u));
                }
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(x) {
                    self.acc(grads, x, u.clone());
                }
                if self.requires_grad(b) {
                    let d = *self.value(x).shape().last().unwrap();
                    let mut gb = vec![0.0; d];
                    for row in u.data().chunks(d) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    self.acc(grads, b, Tensor::from_vec(gb));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                if self.requires_grad(x) {
                    let gx = ops::conv2d_backward_x(
                        self.value(x).shape(),
                        self.value(w),
                        u,
                        stride,
                        pad,
                    );
                    self.acc(grads, x, gx);
                }
                if self.requires_grad(w) || self.requires_grad(b) {
                    let (gw, gb) = ops::conv2d_backward_wb(
                        self.value(x),
                        self.value(w).shape(),
                        u,
                        stride,
                        pad,
                    );
                    self.acc(grads, w, gw);
                    self.acc(grads, b, gb);
                }
            }
            Op::Relu(a) => {
                let g = Tensor::new(
                    u.shape().to_vec(),
                    u.data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(uv, &xv)| if xv > 0.0 { *uv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                self.acc(grads, a, g);
            }
            Op::Sigmoid(a) => {
                let y = self.value(NodeId(_at));
                let g = Tensor::new(
                    u.shape().to_vec(),
                    u.data()
                        .iter()
                        .zip(y.data())
                        .map(|(uv, &yv)| uv * yv * (1.0 - yv))
                        .collect(),
                )
                .unwrap();
                self.acc(grads, a, g);
            }
            Op::Softmax(a) => {
                let y = self.value(NodeId(_at));
                self.acc(grads, a, ops::softmax_backward(y, u));
            }
            Op::Log(a) => {
                let g = Tensor::new(
                    u.shape().to_vec(),
                    u.data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(uv, &xv)| uv / xv)
                        .collect(),
                )
                .unwrap();
                self.acc(grads, a, g);
            }
            Op::Exp(a) => {
                let y = self.value(NodeId(_at));
                let g = Tensor::new(
                    u.shape().to_vec(),
                    u.data()
                        .iter()
                        .zip(y.data())
                        .map(|(uv, &yv)| uv * yv)
                        .collect(),
                )
                .unwrap();
                self.acc(grads, a, g);
            }
            Op::Sum(a) => {
                let g = Tensor::filled(self.value(a).shape(), u.item());
                self.acc(grads, a, g);
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                let g = Tensor::filled(self.value(a).shape(), u.item() / n);
                self.acc(grads, a, g);
            }
            Op::SqNorm(a) => {
                let s = 2.0 * u.item();
                self.acc(grads, a, self.value(a).map(|v| v * s));
            }
            Op::MaxPool2(a) => {
                self.acc(grads, a, ops::maxpool2_backward(self.value(a), u));
            }
            Op::Reshape(a) => {
                let g = u
                    .clone()
                    .reshaped(self.value(a).shape().to_vec())
                    .expect("reshape adjoint");
                self.acc(grads, a, g);
            }
            Op::AffineGrid { theta, h, w } => {
                self.acc(grads, theta, ops::affine_grid_backward(u, h, w));
            }
            Op::GridSample { x, grid } => {
                let (gx, gg) = ops::grid_sample_backward(self.value(x), self.value(grid), u);
                if self.requires_grad(x) {
                    self.acc(grads, x, gx);
                }
                if self.requires_grad(grid) {
                    self.acc(grads, grid, gg);
                }
            }
            Op::GaussBlur { x, sigma } => {
                let (gx, gs) = ops::gauss_blur_backward(
                    self.value(x),
                    self.value(sigma).data(),
                    u,
                    self.requires_grad(x),
                    self.requires_grad(sigma),
                );
                if let Some(gx) = gx {
                    self.acc(grads, x, gx);
                }
                if let Some(gs) = gs {
                    self.acc(grads, sigma, Tensor::from_vec(gs));
                }
            }
            Op::BroadcastScalar(s) => {
                self.acc(grads, s, Tensor::scalar(u.data().iter().sum()));
            }
            Op::SliceCol { x, col } => {
                let d = self.value(x).shape()[1];
                let mut g = Tensor::zeros(self.value(x).shape());
                for (bi, &uv) in u.data().iter().enumerate() {
                    g.data_mut()[bi * d + col] = uv;
                }
                self.acc(grads, x, g);
            }
            Op::ScalePerSample { x, s } => {
                let b = self.value(x).shape()[0];
                let per = self.value(x).len() / b;
                if self.requires_grad(x) {
                    let sd = self.value(s).data();
                    let mut g = u.clone();
                    for (bi, chunk) in g.data_mut().chunks_mut(per).enumerate() {
                        for o in chunk {
                            *o *= sd[bi];
                        }
                    }
                    self.acc(grads, x, g);
                }
                if self.requires_grad(s) {
                    let xd = self.value(x).data();
                    let gs: Vec<f64> = (0..b)
                        .map(|bi| {
                            u.data()[bi * per..(bi + 1) * per]
                                .iter()
                                .zip(&xd[bi * per..(bi + 1) * per])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.acc(grads, s, Tensor::from_vec(gs));
                }
            }
            Op::SoftShapes {
                alpha,
                colors,
                ref params,
            } => {
                let ga =
                    ops::soft_shapes_backward(self.value(alpha), self.value(colors), params, u);
                self.acc(grads, alpha, ga);
            }
            Op::CrossEntropy { logits, target } => {
                let sm = ops::softmax(self.value(logits));
                let b = self.value(logits).shape()[0] as f64;
                let scale = u.item() / b;
                let g = Tensor::new(
                    sm.shape().to_vec(),
                    sm.data()
                        .iter()
                        .zip(self.value(target).data())
                        .map(|(p, t)| (p - t) * scale)
                        .collect(),
                )
                .unwrap();
                self.acc(grads, logits, g);
            }
        }
    }
}
