//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; nodes are
//! created in topological order, so `backward` is a single reverse sweep.

use std::ops::Range;

use super::tensor::{dot, matmul_at_acc, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        lanes: Lanes,
        temperature: f64,
    },
    LogSoftmax {
        x: Var,
        lanes: Lanes,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        src: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        inv_norm: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentSoftmax {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    SegmentWeightedSum {
        x: Var,
        w: Var,
        segments: Vec<Range<usize>>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Decomposition of a tensor into independent 1-D lanes along one axis.
#[derive(Clone, Copy, Debug)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if shape.is_empty() {
            return Err(dim_err!("cannot reduce along an axis of a scalar"));
        }
        if axis >= shape.len() {
            return Err(dim_err!("axis {} out of range for shape {:?}", axis, shape));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok(Self {
            outer,
            len: shape[axis],
            inner,
        })
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat indices of lane `l`.
    fn indices(&self, l: usize) -> impl Iterator<Item = usize> {
        let (o, i) = (l / self.inner, l % self.inner);
        let base = o * self.len * self.inner + i;
        let stride = self.inner;
        (0..self.len).map(move |j| base + j * stride)
    }
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (p2, n) = self.value(b).dims2()?;
        if p != p2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, p, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (n, p2) = self.value(b).dims2()?;
        if p != p2 {
            return Err(dim_err!(
                "matmul_bt inner dimensions differ: {:?} · {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, p, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{} needs equal shapes, got {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    /// Adds the vector `b[n]` to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).numel() != n {
            return Err(dim_err!(
                "row broadcast of {:?} onto {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, b), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| gelu(v).0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `exp(x/τ)` normalized along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let lanes = Lanes::new(self.shape(x), axis)?;
        let out = lane_softmax(self.value(x).data(), lanes, temperature, false);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                lanes,
                temperature,
            },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let lanes = Lanes::new(self.shape(x), axis)?;
        let out = lane_softmax(self.value(x).data(), lanes, temperature, true);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LogSoftmax {
                x,
                lanes,
                temperature,
            },
            rg,
        ))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then
    /// applies the affine `gain`/`bias` (both of row length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.value(x).dims2()?;
        if n == 0 {
            return Err(dim_err!("layer_norm over zero-length rows"));
        }
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(dim_err!(
                "layer_norm gain {:?} / bias {:?} do not match row length {}",
                self.shape(gain),
                self.shape(bias),
                n
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `out[i] = x.flat[src[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, src: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xs = self.value(x).data();
        if let Some(&bad) = src.iter().find(|&&i| i >= xs.len()) {
            return Err(dim_err!("gather index {} out of range for {:?}", bad, self.shape(x)));
        }
        let out = src.iter().map(|&i| xs[i]).collect();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather { x, src }, rg))
    }

    /// Maximum along `axis`; ties go to the lowest index and the gradient is
    /// routed to that single element. Entries with `exclude[flat] == true`
    /// never win.
    pub fn max_along(&mut self, x: Var, axis: usize, exclude: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let lanes = Lanes::new(&shape, axis)?;
        if lanes.len == 0 {
            return Err(dim_err!("max over an empty axis of {:?}", shape));
        }
        if let Some(mask) = exclude {
            if mask.len() != self.value(x).numel() {
                return Err(dim_err!("max mask length {} vs {:?}", mask.len(), shape));
            }
        }
        let xs = self.value(x).data();
        let mut src = Vec::with_capacity(lanes.count());
        for l in 0..lanes.count() {
            let mut best: Option<usize> = None;
            for i in lanes.indices(l) {
                if exclude.is_some_and(|m| m[i]) {
                    continue;
                }
                if best.is_none_or(|b| xs[i] > xs[b]) {
                    best = Some(i);
                }
            }
            src.push(best.ok_or_else(|| dim_err!("every entry of a max lane is masked"))?);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.gather(x, src, out_shape)
    }

    /// Maximum of a 1-D tensor with the index attaining it.
    pub fn max_reduce(&mut self, x: Var) -> Result<(Var, usize)> {
        if self.shape(x).len() != 1 {
            return Err(dim_err!("max_reduce expects a vector, got {:?}", self.shape(x)));
        }
        let v = self.max_along(x, 0, None)?;
        let arg = match &self.nodes[v.0].op {
            Op::Gather { src, .. } => src[0],
            _ => unreachable!(),
        };
        Ok((v, arg))
    }

    /// For each row segment of `x[R×C]`, the column-wise maximum over the
    /// segment's rows: output `[segments×C]`.
    pub fn segment_max_rows(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        check_segments(segments, r)?;
        let xs = self.value(x).data();
        let mut src = Vec::with_capacity(segments.len() * c);
        for seg in segments {
            for col in 0..c {
                let mut best = seg.start * c + col;
                for row in seg.clone().skip(1) {
                    let i = row * c + col;
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                src.push(best);
            }
        }
        self.gather(x, src, vec![segments.len(), c])
    }

    /// Scales each row to unit L2 norm; zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut inv_norm = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let norm = dot(row, row).sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("row {r} has a non-finite norm")));
            }
            if norm == 0.0 {
                return Err(Error::DegenerateInput(format!("row {r} has zero norm")));
            }
            let inv = 1.0 / norm;
            inv_norm.push(inv);
            for c in 0..n {
                out[r * n + c] = row[c] * inv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { x, inv_norm }, rg))
    }

    /// Multi-head scaled dot-product self-attention, restricted to blocks of
    /// rows: row `i` only attends to rows in its own segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
    ) -> Result<Var> {
        let (r, z) = self.value(q).dims2()?;
        if self.value(k).dims2()? != (r, z) || self.value(v).dims2()? != (r, z) {
            return Err(dim_err!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || z % heads != 0 {
            return Err(Error::Parameter(format!(
                "width {z} not divisible by {heads} heads"
            )));
        }
        check_segments(segments, r)?;
        let dh = z / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; r * z];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len() * s.len()).sum::<usize>() * heads);
        let mut row_buf = Vec::new();
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for a in 0..len {
                    let qa = &qs[(seg.start + a) * z..][cols.clone()];
                    row_buf.clear();
                    for b in 0..len {
                        let kb = &ks[(seg.start + b) * z..][cols.clone()];
                        row_buf.push(dot(qa, kb) * scale);
                    }
                    let max = row_buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in row_buf.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let out_row = &mut out[(seg.start + a) * z..][cols.clone()];
                    for (b, s) in row_buf.iter_mut().enumerate() {
                        *s /= total;
                        let vb = &vs[(seg.start + b) * z..][cols.clone()];
                        for (o, &vv) in out_row.iter_mut().zip(vb) {
                            *o += *s * vv;
                        }
                    }
                    probs.extend_from_slice(&row_buf);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(r, z, out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Softmax of a column vector (`[R]` or `[R×1]`) within each segment.
    pub fn segment_softmax(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let n = self.value(x).numel();
        if self.value(x).cols() != 1 && self.shape(x).len() != 1 {
            return Err(dim_err!("segment_softmax expects a column, got {:?}", self.shape(x)));
        }
        check_segments(segments, n)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; n];
        for seg in segments {
            let max = xs[seg.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in seg.clone() {
                out[i] = (xs[i] - max).exp();
                total += out[i];
            }
            for o in &mut out[seg.clone()] {
                *o /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// `out[s] = Σ_{r ∈ segment s} w[r] · x[r]` for `x[R×z]`, `w` of length R.
    pub fn segment_weighted_sum(&mut self, x: Var, w: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (r, z) = self.value(x).dims2()?;
        if self.value(w).numel() != r {
            return Err(dim_err!(
                "weights {:?} do not match {} rows",
                self.shape(w),
                r
            ));
        }
        check_segments(segments, r)?;
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; segments.len() * z];
        for (s, seg) in segments.iter().enumerate() {
            let out_row = &mut out[s * z..(s + 1) * z];
            for row in seg.clone() {
                for (o, &xv) in out_row.iter_mut().zip(&xs[row * z..(row + 1) * z]) {
                    *o += ws[row] * xv;
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::matrix(segments.len(), z, out)?,
            Op::SegmentWeightedSum {
                x,
                w,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Populates gradients of the scalar `loss` for every node that requires
    /// them. Replaces the results of any earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.cols();
                acc!(*a, |buf| {
                    let d = matmul_bt_raw(g, val(*b), m, n, p);
                    add_into(buf, &d);
                });
                acc!(*b, |buf| {
                    matmul_at_acc(buf, val(*a), g, m, p, n);
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, p) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.rows();
                acc!(*a, |buf| {
                    let d = matmul_raw(g, val(*b), m, n, p);
                    add_into(buf, &d);
                });
                acc!(*b, |buf| {
                    matmul_at_acc(buf, g, val(*a), m, n, p);
                });
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2().unwrap();
                acc!(*x, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |buf| { add_into(buf, g); });
                acc!(*b, |buf| { add_into(buf, g); });
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| { add_into(buf, g); });
                acc!(*b, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc!(*a, |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                acc!(*b, |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc!(*x, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                });
            }
            Op::AddScalar(x) => {
                acc!(*x, |buf| { add_into(buf, g); });
            }
            Op::AddRow(x, b) => {
                acc!(*x, |buf| { add_into(buf, g); });
                let n = nodes[b.0].value.numel();
                acc!(*b, |buf| {
                    for row in g.chunks(n.max(1)) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Gelu(x) => {
                acc!(*x, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(val(*x)) {
                        *o += gv * gelu(xv).1;
                    }
                });
            }
            Op::Relu(x) => {
                acc!(*x, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(val(*x)) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                lanes,
                temperature,
            } => {
                let y = node.value.data();
                acc!(*x, |buf| {
                    for l in 0..lanes.count() {
                        let s: f64 = lanes.indices(l).map(|i| y[i] * g[i]).sum();
                        for i in lanes.indices(l) {
                            buf[i] += y[i] * (g[i] - s) / temperature;
                        }
                    }
                });
            }
            Op::LogSoftmax {
                x,
                lanes,
                temperature,
            } => {
                let y = node.value.data();
                acc!(*x, |buf| {
                    for l in 0..lanes.count() {
                        let s: f64 = lanes.indices(l).map(|i| g[i]).sum();
                        for i in lanes.indices(l) {
                            buf[i] += (g[i] - y[i].exp() * s) / temperature;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = nodes[gain.0].value.numel();
                let gv = val(*gain);
                acc!(*gain, |buf| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            buf[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc!(*bias, |buf| {
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                });
                acc!(*x, |buf| {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hr).map(|(d, h)| d * h).sum();
                        let out = &mut buf[r * n..(r + 1) * n];
                        for c in 0..n {
                            out[c] += inv_std[r] / nf * (nf * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                });
            }
            Op::Gather { x, src } => {
                acc!(*x, |buf| {
                    for (&i, &gv) in src.iter().zip(g) {
                        buf[i] += gv;
                    }
                });
            }
            Op::NormalizeRows { x, inv_norm } => {
                let y = node.value.data();
                let n = node.value.cols();
                acc!(*x, |buf| {
                    for (r, inv) in inv_norm.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let proj = dot(yr, gr);
                        for c in 0..n {
                            buf[r * n + c] += (gr[c] - yr[c] * proj) * inv;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (r, z) = node.value.dims2().unwrap();
                let dh = z / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; r * z];
                let mut dk = vec![0.0; r * z];
                let mut dv = vec![0.0; r * z];
                let mut offset = 0;
                let mut dp = Vec::new();
                for seg in segments {
                    let len = seg.len();
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for a in 0..len {
                            let p = &probs[offset..offset + len];
                            offset += len;
                            let ga = &g[(seg.start + a) * z..][cols.clone()];
                            dp.clear();
                            for (b, &pb) in p.iter().enumerate() {
                                let row_b = (seg.start + b) * z;
                                dp.push(dot(ga, &vs[row_b..][cols.clone()]));
                                let dvb = &mut dv[row_b..][cols.clone()];
                                for (o, &gv) in dvb.iter_mut().zip(ga) {
                                    *o += pb * gv;
                                }
                            }
                            let centre: f64 = p.iter().zip(&dp).map(|(pp, d)| pp * d).sum();
                            let row_a = (seg.start + a) * z;
                            for b in 0..len {
                                let ds = p[b] * (dp[b] - centre) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let row_b = (seg.start + b) * z;
                                for c in cols.clone() {
                                    dq[row_a + c] += ds * ks[row_b + c];
                                    dk[row_b + c] += ds * qs[row_a + c];
                                }
                            }
                        }
                    }
                }
                acc!(*q, |buf| { add_into(buf, &dq); });
                acc!(*k, |buf| { add_into(buf, &dk); });
                acc!(*v, |buf| { add_into(buf, &dv); });
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = node.value.data();
                acc!(*x, |buf| {
                    for seg in segments {
                        let s: f64 = seg.clone().map(|i| y[i] * g[i]).sum();
                        for i in seg.clone() {
                            buf[i] += y[i] * (g[i] - s);
                        }
                    }
                });
            }
            Op::SegmentWeightedSum { x, w, segments } => {
                let z = node.value.cols();
                let (xs, ws) = (val(*x), val(*w));
                acc!(*x, |buf| {
                    for (s, seg) in segments.iter().enumerate() {
                        let gs = &g[s * z..(s + 1) * z];
                        for row in seg.clone() {
                            for (o, &gv) in buf[row * z..(row + 1) * z].iter_mut().zip(gs) {
                                *o += ws[row] * gv;
                            }
                        }
                    }
                });
                acc!(*w, |buf| {
                    for (s, seg) in segments.iter().enumerate() {
                        let gs = &g[s * z..(s + 1) * z];
                        for row in seg.clone() {
                            buf[row] += dot(&xs[row * z..(row + 1) * z], gs);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc!(*x, |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` takes no
/// gradient.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

fn check_segments(segments: &[Range<usize>], rows: usize) -> Result<()> {
    for s in segments {
        if s.is_empty() {
            return Err(dim_err!("empty segment {:?}", s));
        }
        if s.end > rows {
            return Err(dim_err!("segment {:?} exceeds {} rows", s, rows));
        }
    }
    Ok(())
}

fn lane_softmax(xs: &[f64], lanes: Lanes, temperature: f64, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    for l in 0..lanes.count() {
        let max = lanes
            .indices(l)
            .map(|i| xs[i] / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = lanes
            .indices(l)
            .map(|i| (xs[i] / temperature - max).exp())
            .sum();
        let log_total = total.ln();
        for i in lanes.indices(l) {
            let shifted = xs[i] / temperature - max;
            out[i] = if log {
                shifted - log_total
            } else {
                shifted.exp() / total
            };
        }
    }
    out
}

/// GELU (tanh form) and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}
