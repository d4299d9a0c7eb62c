use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Broadcast(Var),
    Reshape(Var),
    TransposeLast2(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, pad: usize },
    AvgPool2(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-step differentiation tape. Nodes are appended in evaluation order,
/// so parents always precede children.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require grad or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable leaves.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Input strides aligned to the output rank, 0 on broadcast axes.
fn broadcast_strides(input: &[usize], output: &[usize]) -> Vec<usize> {
    let rank = output.len();
    let offset = rank - input.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 && output[i + offset] != 1 {
            0
        } else {
            acc
        };
        acc *= input[i];
    }
    strides
}

/// Calls `run(out_start, in_start, len, in_stride)` for maximal contiguous
/// runs of a broadcast; `in_stride` is 0 (repeat) or 1 (copy).
fn for_each_broadcast_run(
    input: &[usize],
    output: &[usize],
    mut run: impl FnMut(usize, usize, usize, usize),
) {
    let strides = broadcast_strides(input, output);
    // collapse trailing axes into one run while they stay all-repeat or all-contiguous
    let rank = output.len();
    let mut inner = 1usize;
    let mut kind: Option<usize> = None;
    let mut split = rank;
    while split > 0 {
        let d = split - 1;
        if output[d] == 1 {
            split -= 1;
            continue;
        }
        let this = if strides[d] == 0 {
            0
        } else if strides[d] == inner {
            1
        } else {
            break;
        };
        match kind {
            None => kind = Some(this),
            Some(k) if k != this => break,
            _ => {}
        }
        inner *= output[d];
        split -= 1;
    }
    let in_stride = kind.unwrap_or(1);
    let outer_dims = &output[..split];
    let outer_total: usize = outer_dims.iter().product();
    let mut idx = vec![0usize; split];
    let mut src = 0usize;
    for o in 0..outer_total {
        run(o * inner, src, inner, in_stride);
        for d in (0..split).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < outer_dims[d] {
                break;
            }
            src -= strides[d] * outer_dims[d];
            idx[d] = 0;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor that receives gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Brings `a` and `b` to a common shape, inserting broadcast nodes.
    fn conform(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_shape(&sa, &sb).ok_or_else(|| {
            shape_err(op, format!("operands {sa:?} and {sb:?} do not broadcast"))
        })?;
        let a = if sa == target { a } else { self.broadcast_to(a, &target)? };
        let b = if sb == target { b } else { self.broadcast_to(b, &target)? };
        Ok((a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(Var, Var) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (a, b) = self.conform(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, make(a, b), rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let value = softmax_last(t, false)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let value = softmax_last(t, true)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape (rank-1 inputs give shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() {
            return Err(shape_err("sum_axis", format!("axis {axis} on {:?}", t.shape())));
        }
        let (outer, len, inner) = outer_inner(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (y, &v) in dst.iter_mut().zip(src) {
                    *y += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        match broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(shape_err(
                    "broadcast_to",
                    format!("cannot broadcast {src:?} to {shape:?}"),
                ))
            }
        }
        let total: usize = shape.iter().product();
        let mut out = vec![0.0; total];
        let d = self.nodes[x.0].value.data();
        for_each_broadcast_run(&src, shape, |o, i, len, stride| {
            if stride == 0 {
                out[o..o + len].fill(d[i]);
            } else {
                out[o..o + len].copy_from_slice(&d[i..i + len]);
            }
        });
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() < 2 {
            return Err(shape_err("transpose", format!("rank < 2: {:?}", t.shape())));
        }
        let r = t.rank();
        let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
        let batch = t.len() / (m * n);
        let out = transpose_data(t.data(), batch, m, n);
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TransposeLast2(x), rg))
    }

    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::gemm_nn(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Stride-1 convolution of `[n,c_in,h,w]` by `[c_out,c_in,kh,kw]` with
    /// `pad` zeros on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let geom = conv_geom(&sx, &sk, pad)?;
        let (n, c_out) = (sx[0], sk[0]);
        let xv = self.nodes[x.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let out = kernels::conv_forward(xv, kv, geom, n, c_out);
        let shape = vec![n, c_out, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, k, pad }, rg))
    }

    /// Mean over non-overlapping 2×2 windows of a `[n,c,h,w]` tensor.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(shape_err(
                "avg_pool2",
                format!("expected [n,c,h,w] with even h,w, got {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.nodes[x.0].value.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xo in 0..ow {
                    let i = 2 * y * w + 2 * xo;
                    out[(p * oh + y) * ow + xo] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool2(x), rg))
    }

    /// Rows of a `[vocab, dim]` table selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-D, got {s:?}")));
        }
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id sequence"));
        }
        let (vocab, dim) = (s[0], s[1]);
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "token id",
                    value: id.to_string(),
                    valid: format!("0..{vocab}"),
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![ids.len(), dim], out), op, rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| shape_err("concat", "no operands"))?;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("operand {s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err(
                "narrow",
                format!("range {start}..{} of axis {axis} on {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = outer_inner(&s, axis);
        let d = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow { x, axis, start }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if let Some(s) = self.slot(grads, *b) {
                    for (o, &d) in s.data_mut().iter_mut().zip(gd) {
                        *o -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &d), &x) in s.data_mut().iter_mut().zip(gd).zip(vb) {
                        *o += d * x;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, &d), &x) in s.data_mut().iter_mut().zip(gd).zip(va) {
                        *o += d * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &d), &x) in s.data_mut().iter_mut().zip(gd).zip(vb) {
                        *o += d / x;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (i, o) in s.data_mut().iter_mut().enumerate() {
                        *o -= gd[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    for (o, &d) in s.data_mut().iter_mut().zip(gd) {
                        *o += c * d;
                    }
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g),
            Op::Relu(x) => self.elementwise(grads, *x, gd, |i, _| if y[i] > 0.0 { 1.0 } else { 0.0 }),
            Op::Tanh(x) => self.elementwise(grads, *x, gd, |i, _| 1.0 - y[i] * y[i]),
            Op::Sigmoid(x) => self.elementwise(grads, *x, gd, |i, _| y[i] * (1.0 - y[i])),
            Op::Exp(x) => self.elementwise(grads, *x, gd, |i, _| y[i]),
            Op::Log(x) => self.elementwise(grads, *x, gd, |_, xi| 1.0 / xi),
            Op::Square(x) => self.elementwise(grads, *x, gd, |_, xi| 2.0 * xi),
            Op::Clamp(x, lo, hi) => self.elementwise(grads, *x, gd, |_, xi| {
                if xi >= *lo && xi <= *hi {
                    1.0
                } else {
                    0.0
                }
            }),
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    let out = s.data_mut();
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[r * n + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    let out = s.data_mut();
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            out[r * n + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let d = gd[0];
                    for o in s.data_mut() {
                        *o += d;
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (outer, len, inner) = outer_inner(&shape, *axis);
                if let Some(s) = self.slot(grads, *x) {
                    let out = s.data_mut();
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let dst = &mut out[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (t, &v) in dst.iter_mut().zip(src) {
                                *t += v;
                            }
                        }
                    }
                }
            }
            Op::Broadcast(x) => {
                let src = self.nodes[x.0].value.shape().to_vec();
                let dst = node.value.shape().to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    let out = s.data_mut();
                    for_each_broadcast_run(&src, &dst, |o, i, len, stride| {
                        if stride == 0 {
                            out[i] += gd[o..o + len].iter().sum::<f64>();
                        } else {
                            for (t, &v) in out[i..i + len].iter_mut().zip(&gd[o..o + len]) {
                                *t += v;
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.nodes[x.0].requires_grad {
                    match &mut grads[x.0] {
                        Some(s) => s.add_assign_slice(gd),
                        empty => {
                            let shape = self.nodes[x.0].value.shape().to_vec();
                            *empty = Some(Tensor::from_parts(shape, gd.to_vec()));
                        }
                    }
                }
            }
            Op::TransposeLast2(x) => {
                let s_out = node.value.shape();
                let r = s_out.len();
                let (m, n) = (s_out[r - 2], s_out[r - 1]);
                let batch = gd.len() / (m * n);
                if let Some(s) = self.slot(grads, *x) {
                    s.add_assign_slice(&transpose_data(gd, batch, m, n));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (
                    self.nodes[a.0].value.shape().to_vec(),
                    self.nodes[b.0].value.shape().to_vec(),
                );
                let (batch, m, k, n) = matmul_dims(&sa, &sb).expect("validated in forward");
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    let out = s.data_mut();
                    for bi in 0..batch {
                        kernels::gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &vb[bi * k * n..(bi + 1) * k * n],
                            &mut out[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    let out = s.data_mut();
                    for bi in 0..batch {
                        kernels::gemm_tn(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut out[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
            }
            Op::Conv2d { x, k, pad } => {
                let (sx, sk) = (
                    self.nodes[x.0].value.shape().to_vec(),
                    self.nodes[k.0].value.shape().to_vec(),
                );
                let geom = conv_geom(&sx, &sk, *pad).expect("validated in forward");
                let (n, c_out) = (sx[0], sk[0]);
                let (xv, kv) = (val(*x), val(*k));
                let need_x = self.nodes[x.0].requires_grad;
                let need_k = self.nodes[k.0].requires_grad;
                let (dx, dk) = kernels::conv_backward(xv, kv, gd, geom, n, c_out, need_x, need_k);
                if let (Some(dk), Some(s)) = (dk, self.slot(grads, *k)) {
                    s.add_assign_slice(&dk);
                }
                if let (Some(dx), Some(s)) = (dx, self.slot(grads, *x)) {
                    s.add_assign_slice(&dx);
                }
            }
            Op::AvgPool2(x) => {
                let s_in = self.nodes[x.0].value.shape().to_vec();
                let (planes, h, w) = (s_in[0] * s_in[1], s_in[2], s_in[3]);
                let (oh, ow) = (h / 2, w / 2);
                if let Some(s) = self.slot(grads, *x) {
                    let out = s.data_mut();
                    for p in 0..planes {
                        for yy in 0..oh {
                            for xo in 0..ow {
                                let d = 0.25 * gd[(p * oh + yy) * ow + xo];
                                let i = p * h * w + 2 * yy * w + 2 * xo;
                                out[i] += d;
                                out[i + 1] += d;
                                out[i + w] += d;
                                out[i + w + 1] += d;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.nodes[table.0].value.shape()[1];
                if let Some(s) = self.slot(grads, *table) {
                    let out = s.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            out[id * dim + j] += gd[r * dim + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = outer_inner(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if let Some(s) = self.slot(grads, p) {
                        let out = s.data_mut();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                out[dst + t] += gd[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s_in = self.nodes[x.0].value.shape().to_vec();
                let (outer, full, inner) = outer_inner(&s_in, *axis);
                let len = node.value.shape()[*axis];
                if let Some(s) = self.slot(grads, *x) {
                    let out = s.data_mut();
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            out[dst + t] += gd[src + t];
                        }
                    }
                }
            }
        }
    }

    /// `grad_x += g ⊙ local(i, x_i)`.
    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        gd: &[f64],
        local: impl Fn(usize, f64) -> f64,
    ) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let xv = self.nodes[x.0].value.data();
        match &mut grads[x.0] {
            Some(s) => {
                for (i, o) in s.data_mut().iter_mut().enumerate() {
                    *o += gd[i] * local(i, xv[i]);
                }
            }
            empty => {
                let data = (0..gd.len()).map(|i| gd[i] * local(i, xv[i])).collect();
                *empty = Some(Tensor::from_parts(self.nodes[x.0].value.shape().to_vec(), data));
            }
        }
    }

    /// Adds `g` into the gradient of `v`, taking a copy when it is the first contribution.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(s) => s.add_assign(g),
            empty => *empty = Some(g.clone()),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax (or log-softmax) over the last axis.
pub(crate) fn softmax_last(t: &Tensor, log: bool) -> Result<Tensor> {
    let n = *t.shape().last().unwrap();
    if !t.all_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for r in 0..d.len() / n {
        let row = &d[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let dst = &mut out[r * n..(r + 1) * n];
        if log {
            let lz = z.ln();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = v - max - lz;
            }
        } else {
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - max).exp() / z;
            }
        }
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}

fn transpose_data(d: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let src = &d[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => Ok((*b, *m, *k, *n)),
        _ => Err(shape_err(
            "matmul",
            format!("lhs {sa:?} and rhs {sb:?} (expected [m,k]·[k,n] or [b,m,k]·[b,k,n])"),
        )),
    }
}

fn conv_geom(sx: &[usize], sk: &[usize], pad: usize) -> Result<ConvGeom> {
    let ok = sx.len() == 4
        && sk.len() == 4
        && sx[1] == sk[1]
        && sx[2] + 2 * pad >= sk[2]
        && sx[3] + 2 * pad >= sk[3];
    if !ok {
        return Err(shape_err(
            "conv2d",
            format!("input {sx:?} with kernel {sk:?} and padding {pad} (expected [n,c,h,w] and [o,c,kh,kw])"),
        ));
    }
    Ok(ConvGeom {
        c_in: sx[1],
        h: sx[2],
        w: sx[3],
        kh: sk[2],
        kw: sk[3],
        pad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_gives_window_sums() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let k = g.constant(Tensor::ones([1, 1, 2, 2]));
        let y = g.conv2d(x, k, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_padding_keeps_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([2, 3, 5, 5]));
        let k = g.constant(Tensor::ones([4, 3, 3, 3]));
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5, 5]);
        // corner sees a 2×2 window in each of 3 channels
        assert_eq!(g.value(y).data()[0], 12.0);
        assert_eq!(g.value(y).data()[6], 27.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.3, -1.2, 2.0]));
        let s = g.softmax(x).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones([3]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let c = g.constant(Tensor::ones([3]));
        let s = g.sum(c);
        assert!(matches!(g.backward(s), Err(Error::Detached)));
    }

    #[test]
    fn shape_errors_name_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones([2, 3]));
        let b = g.constant(Tensor::ones([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::ones([4]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones([2, 3]));
        let b = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn detached_copy_receives_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let build = |g: &mut Graph, x: Var| {
            let s = g.tanh(x);
            let sq = g.square(s);
            g.sum(sq)
        };
        let x0 = t(&[3], &[0.1, -0.4, 0.9]);
        let mut g1 = Graph::new();
        let x1 = g1.leaf(x0.clone());
        let l1 = build(&mut g1, x1);
        let once = g1.backward(l1).unwrap().get(x1).unwrap().clone();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(x0);
        let a = build(&mut g2, x2);
        let b = build(&mut g2, x2);
        let l2 = g2.add(a, b).unwrap();
        let twice = g2.backward(l2).unwrap().get(x2).unwrap().clone();
        for (o, t2) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * o, *t2);
        }
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }
}
