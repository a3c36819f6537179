//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every backward rule is itself expressed with graph operations, so the
//! gradients returned by [`Graph::backward`] with `create_graph = true` are
//! ordinary nodes that can be differentiated again. The attack objective
//! relies on this: it differentiates a distance between parameter gradients
//! with respect to the input images.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::value::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
struct ConvAttrs {
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv { input: Var, weight: Var, attrs: ConvAttrs },
    ConvGradInput { grad_out: Var, weight: Var, attrs: ConvAttrs },
    ConvGradWeight { input: Var, grad_out: Var, attrs: ConvAttrs },
    Expand { src: Var, outer: usize, inner: usize },
    ReduceExpand { src: Var, outer: usize, inner: usize },
    Reshape(Var),
    Upsample2(Var),
    SumPool2(Var),
    Diff { src: Var, along_w: bool },
    DiffAdjoint { src: Var, along_w: bool },
    LogSoftmax(Var),
}

impl Op {
    fn parents(&self) -> ([Option<Var>; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([None, None], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => ([Some(a), Some(b)], 2),
            Conv { input, weight, .. } => ([Some(input), Some(weight)], 2),
            ConvGradInput { grad_out, weight, .. } => ([Some(grad_out), Some(weight)], 2),
            ConvGradWeight { input, grad_out, .. } => ([Some(input), Some(grad_out)], 2),
            Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | Exp(a) | Sqrt(a) | Transpose(a)
            | Reshape(a) | Upsample2(a) | SumPool2(a) | LogSoftmax(a) => ([Some(a), None], 1),
            Expand { src, .. } | ReduceExpand { src, .. } | Diff { src, .. } | DiffAdjoint { src, .. } => {
                ([Some(src), None], 1)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    variable: bool,
}

/// A single-threaded tape of operations and their forward values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients may be requested for.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, false)
    }

    pub fn is_variable(&self, v: Var) -> bool {
        self.nodes[v.0].variable
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push_node(&mut self, op: Op, value: Tensor, variable: bool) -> Var {
        self.nodes.push(Node { op, value, variable });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push_node(op, Tensor::from_parts(shape, data), false)
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::arg(format!("{kind:?} needs a second operand")));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
        }
    }

    /// Aligns binary operands: identical shapes, or a rank-0 operand that is
    /// broadcast explicitly (so its gradient is the matching reduction).
    fn align(&mut self, a: Var, b: Var, what: &str) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            Ok((a, b))
        } else if sa.is_empty() {
            Ok((self.broadcast_scalar(a, &sb), b))
        } else if sb.is_empty() {
            Ok((a, self.broadcast_scalar(b, &sa)))
        } else {
            Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")))
        }
    }

    fn broadcast_scalar(&mut self, s: Var, shape: &[usize]) -> Var {
        let inner = shape.iter().product();
        self.expand_raw(s, 1, inner, shape.to_vec())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b, "add")?;
        Ok(self.add_raw(a, b))
    }

    fn add_raw(&mut self, a: Var, b: Var) -> Var {
        let data = self.zip(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape, data)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b, "sub")?;
        Ok(self.sub_raw(a, b))
    }

    fn sub_raw(&mut self, a: Var, b: Var) -> Var {
        let data = self.zip(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub(a, b), shape, data)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b, "mul")?;
        Ok(self.mul_raw(a, b))
    }

    fn mul_raw(&mut self, a: Var, b: Var) -> Var {
        let data = self.zip(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), shape, data)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b, "div")?;
        Ok(self.div_raw(a, b))
    }

    fn div_raw(&mut self, a: Var, b: Var) -> Var {
        let data = self.zip(a, b, |x, y| x / y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Div(a, b), shape, data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.unary(a, |x| x * c);
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape, data)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.unary(a, |x| x + c);
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a), shape, data)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape, data)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.unary(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape, data)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.unary(a, f64::exp);
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape, data)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.unary(a, f64::sqrt);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sqrt(a), shape, data)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul inner extents differ: {sa:?} · {sb:?}")));
        }
        Ok(self.matmul_raw(a, b))
    }

    fn matmul_raw(&mut self, a: Var, b: Var) -> Var {
        let (m, k, n) = (self.shape(a)[0], self.shape(a)[1], self.shape(b)[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {:?}", self.shape(a))));
        }
        Ok(self.transpose_raw(a))
    }

    fn transpose_raw(&mut self, a: Var) -> Var {
        let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
        let data = kernels::transpose(r, c, self.data(a));
        self.push(Op::Transpose(a), vec![c, r], data)
    }

    // ---- convolution ---------------------------------------------------

    fn conv_geom(input: &[usize], weight: &[usize], attrs: ConvAttrs) -> ConvGeom {
        ConvGeom {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: weight[0],
            kernel: weight[2],
            stride: attrs.stride,
            padding: attrs.padding,
        }
    }

    /// Zero-padded 2-D cross-correlation of NCHW input with OCkk kernels.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d needs NCHW input and OCkk kernels, got {si:?} and {sw:?}"
            )));
        }
        if sw[2] != sw[3] {
            return Err(Error::dim(format!("conv2d kernels must be square, got {sw:?}")));
        }
        if si[1] != sw[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {si:?} vs kernels {sw:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be at least 1"));
        }
        let k = sw[2];
        if si[2] + 2 * padding < k || si[3] + 2 * padding < k {
            return Err(Error::dim(format!(
                "kernel {k}x{k} larger than padded input {}x{} (padding {padding})",
                si[2] + 2 * padding,
                si[3] + 2 * padding
            )));
        }
        Ok(self.conv_raw(input, weight, ConvAttrs { stride, padding }))
    }

    fn conv_raw(&mut self, input: Var, weight: Var, attrs: ConvAttrs) -> Var {
        let g = Self::conv_geom(self.shape(input), self.shape(weight), attrs);
        let data = kernels::conv2d(&g, self.data(input), self.data(weight));
        self.push(
            Op::Conv { input, weight, attrs },
            vec![g.batch, g.out_channels, g.out_h(), g.out_w()],
            data,
        )
    }

    fn conv_grad_input_raw(&mut self, grad_out: Var, weight: Var, attrs: ConvAttrs, in_h: usize, in_w: usize) -> Var {
        let (so, sw) = (self.shape(grad_out), self.shape(weight));
        let g = ConvGeom {
            batch: so[0],
            in_channels: sw[1],
            in_h,
            in_w,
            out_channels: sw[0],
            kernel: sw[2],
            stride: attrs.stride,
            padding: attrs.padding,
        };
        debug_assert_eq!((g.out_h(), g.out_w()), (so[2], so[3]));
        let data = kernels::conv2d_grad_input(&g, self.data(grad_out), self.data(weight));
        self.push(Op::ConvGradInput { grad_out, weight, attrs }, vec![g.batch, g.in_channels, in_h, in_w], data)
    }

    fn conv_grad_weight_raw(&mut self, input: Var, grad_out: Var, attrs: ConvAttrs, kernel: usize) -> Var {
        let (si, so) = (self.shape(input), self.shape(grad_out));
        let g = ConvGeom {
            batch: si[0],
            in_channels: si[1],
            in_h: si[2],
            in_w: si[3],
            out_channels: so[1],
            kernel,
            stride: attrs.stride,
            padding: attrs.padding,
        };
        let data = kernels::conv2d_grad_weight(&g, self.data(input), self.data(grad_out));
        self.push(
            Op::ConvGradWeight { input, grad_out, attrs },
            vec![g.out_channels, g.in_channels, kernel, kernel],
            data,
        )
    }

    // ---- broadcasting helpers ------------------------------------------

    fn expand_raw(&mut self, src: Var, outer: usize, inner: usize, shape: Vec<usize>) -> Var {
        let data = kernels::expand(self.data(src), outer, inner);
        self.push(Op::Expand { src, outer, inner }, shape, data)
    }

    fn reduce_expand_raw(&mut self, src: Var, outer: usize, inner: usize, shape: Vec<usize>) -> Var {
        let mid = shape.iter().product();
        let data = kernels::reduce_expand(self.data(src), outer, mid, inner);
        self.push(Op::ReduceExpand { src, outer, inner }, shape, data)
    }

    /// Adds a per-channel bias: `b[C]` onto NCHW input, or `b[K]` onto N×K.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let (outer, mid, inner) = match sx.len() {
            2 => (sx[0], sx[1], 1),
            4 => (sx[0], sx[1], sx[2] * sx[3]),
            _ => return Err(Error::dim(format!("bias_add needs rank 2 or 4 input, got {sx:?}"))),
        };
        if sb != [mid] {
            return Err(Error::dim(format!("bias shape {sb:?} does not match input {sx:?}")));
        }
        let tiled = self.expand_raw(bias, outer, inner, sx);
        Ok(self.add_raw(x, tiled))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        self.reduce_expand_raw(a, 1, n, Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reduce(&mut self, kind: Reduction, a: Var) -> Var {
        match kind {
            Reduction::Sum => self.sum(a),
            Reduction::Mean => self.mean(a),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        Ok(self.reshape_raw(a, shape))
    }

    fn reshape_raw(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let data = self.data(a).to_vec();
        self.push(Op::Reshape(a), shape, data)
    }

    // ---- image ops -----------------------------------------------------

    fn planes_hw(&self, a: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::dim(format!("{what} needs NCHW input, got {s:?}")));
        }
        Ok((s[0] * s[1], s[2], s[3]))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        self.planes_hw(a, "upsample2")?;
        Ok(self.upsample2_raw(a))
    }

    fn upsample2_raw(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let data = kernels::upsample2(self.data(a), s[0] * s[1], s[2], s[3]);
        self.push(Op::Upsample2(a), vec![s[0], s[1], 2 * s[2], 2 * s[3]], data)
    }

    fn sumpool2_raw(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let data = kernels::sumpool2(self.data(a), s[0] * s[1], s[2], s[3]);
        self.push(Op::SumPool2(a), vec![s[0], s[1], s[2] / 2, s[3] / 2], data)
    }

    /// Forward difference along width (`along_w`) or height of NCHW input.
    pub fn diff(&mut self, a: Var, along_w: bool) -> Result<Var> {
        let (_, h, w) = self.planes_hw(a, "diff")?;
        if (along_w && w < 2) || (!along_w && h < 2) {
            return Err(Error::dim(format!("diff needs an extent of at least 2, got {:?}", self.shape(a))));
        }
        Ok(self.diff_raw(a, along_w))
    }

    fn diff_raw(&mut self, a: Var, along_w: bool) -> Var {
        let mut s = self.shape(a).to_vec();
        let data = kernels::diff(self.data(a), s[0] * s[1], s[2], s[3], along_w);
        if along_w {
            s[3] -= 1;
        } else {
            s[2] -= 1;
        }
        self.push(Op::Diff { src: a, along_w }, s, data)
    }

    fn diff_adjoint_raw(&mut self, a: Var, along_w: bool) -> Var {
        let mut s = self.shape(a).to_vec();
        if along_w {
            s[3] += 1;
        } else {
            s[2] += 1;
        }
        let data = kernels::diff_adjoint(self.data(a), s[0] * s[1], s[2], s[3], along_w);
        self.push(Op::DiffAdjoint { src: a, along_w }, s, data)
    }

    // ---- classification ------------------------------------------------

    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("log_softmax needs N×K logits, got {s:?}")));
        }
        let data = kernels::log_softmax(self.data(logits), s[0], s[1]);
        Ok(self.push(Op::LogSoftmax(logits), s, data))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("cross entropy needs N×K logits, got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::arg(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
        }
        let mut onehot = vec![0.0; n * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = 1.0;
        }
        let lsm = self.log_softmax(logits)?;
        let mask = self.constant(Tensor::from_parts(s, onehot));
        let picked = self.mul_raw(lsm, mask);
        let total = self.sum(picked);
        Ok(self.scale(total, -1.0 / n as f64))
    }

    // ---- differentiation -----------------------------------------------

    /// Gradients of the rank-0 `output` with respect to each of `wrt`.
    ///
    /// Variables that `output` does not depend on receive zero gradients.
    /// With `create_graph`, the returned nodes stay connected to the graph
    /// and can be differentiated again; otherwise they are detached
    /// constants and the intermediate backward nodes are discarded.
    pub fn backward(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !self.value(output).is_scalar() {
            return Err(Error::arg(format!(
                "backward needs a rank-0 output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = output.0 + 1;
        let mut reaches = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reaches[w.0] = true;
            }
        }
        for i in 0..n {
            if !reaches[i] {
                let (ps, np) = self.nodes[i].op.parents();
                reaches[i] = ps[..np].iter().flatten().any(|p| reaches[p.0]);
            }
        }
        let mut needed = vec![false; n];
        needed[output.0] = true;
        for i in (0..n).rev() {
            if needed[i] {
                let (ps, np) = self.nodes[i].op.parents();
                for p in ps[..np].iter().flatten() {
                    needed[p.0] = true;
                }
            }
        }

        let mark = self.nodes.len();
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[output.0] = Some(self.constant(Tensor::scalar(1.0)));
        for i in (0..n).rev() {
            if !(needed[i] && reaches[i]) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            for (parent, contrib) in self.vjp(Var(i), g, &reaches) {
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(acc) => self.add_raw(acc, contrib),
                });
            }
        }

        let result: Vec<Var> = wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = self.value(*w).zeros_like();
                    self.constant(z)
                }
            })
            .collect();
        if create_graph {
            return Ok(result);
        }
        let values: Vec<Tensor> = result.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values.into_iter().map(|t| self.constant(t)).collect())
    }

    /// Convenience wrapper returning detached gradient values.
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let grads = self.backward(output, wrt, false)?;
        let values = grads.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }

    /// Contributions of node `v`'s upstream gradient `g` to each parent
    /// that lies on a path from a differentiation target.
    fn vjp(&mut self, v: Var, g: Var, reaches: &[bool]) -> Vec<(Var, Var)> {
        let op = self.nodes[v.0].op.clone();
        let want = |p: Var| reaches[p.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, self.scale(g, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, self.mul_raw(g, b)));
                }
                if want(b) {
                    out.push((b, self.mul_raw(g, a)));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    out.push((a, self.div_raw(g, b)));
                }
                if want(b) {
                    let t = self.mul_raw(g, v);
                    let t = self.div_raw(t, b);
                    out.push((b, self.scale(t, -1.0)));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c))),
            Op::AddScalar(a) => out.push((a, g)),
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                out.push((a, self.mul_raw(g, mask)));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.scale(v, -1.0);
                let one_minus = self.add_scalar(one_minus, 1.0);
                let slope = self.mul_raw(v, one_minus);
                out.push((a, self.mul_raw(g, slope)));
            }
            Op::Exp(a) => out.push((a, self.mul_raw(g, v))),
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5);
                out.push((a, self.div_raw(half, v)));
            }
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose_raw(b);
                    out.push((a, self.matmul_raw(g, bt)));
                }
                if want(b) {
                    let at = self.transpose_raw(a);
                    out.push((b, self.matmul_raw(at, g)));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose_raw(g))),
            Op::Conv { input, weight, attrs } => {
                if want(input) {
                    let (h, w) = (self.shape(input)[2], self.shape(input)[3]);
                    out.push((input, self.conv_grad_input_raw(g, weight, attrs, h, w)));
                }
                if want(weight) {
                    let k = self.shape(weight)[2];
                    out.push((weight, self.conv_grad_weight_raw(input, g, attrs, k)));
                }
            }
            Op::ConvGradInput { grad_out, weight, attrs } => {
                // g has the shape of the convolution input.
                if want(grad_out) {
                    out.push((grad_out, self.conv_raw(g, weight, attrs)));
                }
                if want(weight) {
                    let k = self.shape(weight)[2];
                    out.push((weight, self.conv_grad_weight_raw(g, grad_out, attrs, k)));
                }
            }
            Op::ConvGradWeight { input, grad_out, attrs } => {
                // g has the shape of the kernels.
                if want(input) {
                    let (h, w) = (self.shape(input)[2], self.shape(input)[3]);
                    out.push((input, self.conv_grad_input_raw(grad_out, g, attrs, h, w)));
                }
                if want(grad_out) {
                    out.push((grad_out, self.conv_raw(input, g, attrs)));
                }
            }
            Op::Expand { src, outer, inner } => {
                let shape = self.shape(src).to_vec();
                out.push((src, self.reduce_expand_raw(g, outer, inner, shape)));
            }
            Op::ReduceExpand { src, outer, inner } => {
                let shape = self.shape(src).to_vec();
                out.push((src, self.expand_raw(g, outer, inner, shape)));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.reshape_raw(g, shape)));
            }
            Op::Upsample2(a) => out.push((a, self.sumpool2_raw(g))),
            Op::SumPool2(a) => out.push((a, self.upsample2_raw(g))),
            Op::Diff { src, along_w } => out.push((src, self.diff_adjoint_raw(g, along_w))),
            Op::DiffAdjoint { src, along_w } => out.push((src, self.diff_raw(g, along_w))),
            Op::LogSoftmax(a) => {
                let s = self.shape(a).to_vec();
                let (rows, cols) = (s[0], s[1]);
                let row_sums = self.reduce_expand_raw(g, 1, cols, vec![rows]);
                let row_sums = self.expand_raw(row_sums, 1, cols, s);
                let probs = self.exp(v);
                let t = self.mul_raw(probs, row_sums);
                out.push((a, self.sub_raw(g, t)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let r = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.elementwise(Elementwise::Relu, r, None).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![3, 2]).unwrap());
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        assert!(g.elementwise(Elementwise::Mul, a, None).is_err());
    }

    #[test]
    fn scalar_broadcast_and_its_gradient() {
        let mut g = Graph::new();
        let s = g.variable(Tensor::scalar(2.0));
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.mul(s, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
        let total = g.sum(y);
        let grad = g.gradients(total, &[s]).unwrap();
        assert_eq!(grad[0].item(), 6.0);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let a = g.variable(t(&[1], &[3.0]));
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.gradients(s, &[a]).unwrap()[0].data(), &[6.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]).unwrap());
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);

        let z = g.constant(Tensor::zeros(vec![2, 1, 3, 3]).unwrap());
        let x = g.constant(Tensor::new(vec![1, 1, 5, 5], (0..25).map(f64::from).collect()).unwrap());
        let y = g.conv2d(x, z, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let big = g.constant(Tensor::ones(vec![1, 1, 5, 5]).unwrap());
        let small = g.constant(Tensor::ones(vec![1, 1, 2, 2]).unwrap());
        assert!(matches!(g.conv2d(small, big, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_output_extent_formula() {
        let mut g = Graph::new();
        for (h, k, s, p) in [(32, 3, 2, 1), (7, 3, 1, 0), (8, 5, 3, 2), (5, 5, 1, 0)] {
            let x = g.constant(Tensor::zeros(vec![1, 1, h, h]).unwrap());
            let w = g.constant(Tensor::zeros(vec![1, 1, k, k]).unwrap());
            let y = g.conv2d(x, w, s, p).unwrap();
            assert_eq!(g.shape(y)[2], (h + 2 * p - k) / s + 1);
        }
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let a = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.reduce(Reduction::Sum, a);
        assert_eq!(g.value(s).item(), 6.0);
        assert!(g.value(s).is_scalar());
        let b = g.constant(t(&[2], &[2.0, 4.0]));
        let m = g.reduce(Reduction::Mean, b);
        assert_eq!(g.value(m).item(), 3.0);
        assert_eq!(g.gradients(s, &[a]).unwrap()[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let z = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let ce = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-9);
        assert!(matches!(g.softmax_cross_entropy(z, &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits = [0.3, -1.2, 2.0, 0.5, 0.1, -0.7];
        let labels = [2usize, 0];
        let z = g.variable(t(&[2, 3], &logits));
        let ce = g.softmax_cross_entropy(z, &labels).unwrap();
        let grad = g.gradients(ce, &[z]).unwrap().remove(0);
        for r in 0..2 {
            let row = &logits[r * 3..r * 3 + 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let p = row[c].exp() / denom;
                let expected = (p - if c == labels[r] { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad.data()[r * 3 + c] - expected).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(a, &[a], false), Err(Error::Argument(_))));
    }

    #[test]
    fn unreached_variable_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        let b = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(a);
        let grads = g.gradients(s, &[a, b]).unwrap();
        assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d1 = g.backward(x3, &[x], true).unwrap()[0];
        assert_eq!(g.value(d1).item(), 12.0);
        let d2 = g.backward(d1, &[x], false).unwrap()[0];
        assert_eq!(g.value(d2).item(), 12.0);
    }

    #[test]
    fn detached_backward_leaves_graph_compact() {
        let mut g = Graph::new();
        let x = g.variable(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let y = g.sigmoid(x);
        let s = g.sum(y);
        let before = g.len();
        let grads = g.backward(s, &[x], false).unwrap();
        assert_eq!(g.len(), before + 1);
        assert!(!g.is_variable(grads[0]));
    }

    #[test]
    fn forward_values_unchanged_by_backward() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[0.2, -0.4, 0.9]));
        let y = g.sigmoid(x);
        let before = g.value(y).clone();
        let s = g.sum(y);
        let _ = g.backward(s, &[x], true).unwrap();
        assert_eq!(g.value(y), &before);
    }
}
