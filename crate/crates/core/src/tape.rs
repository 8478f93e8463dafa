//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward pass records ops onto a fresh [`Tape`]; [`Tape::backward`]
//! replays them in reverse creation order, which is a valid reverse
//! topological order because an op can only consume already-recorded nodes.
//! Traversal is therefore deterministic given identical recording order.
//!
//! A [`Var`] is an index into the tape. Values are f64 throughout so that
//! finite-difference checks are decisive.

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Recip { a: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    Exp { a: Var },
    Log { a: Var },
    Tanh { a: Var },
    Sqrt { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    SoftmaxLast { a: Var },
    LayerNormLast { a: Var, eps: f64 },
    Conv1dDepthwise { x: Var, k: Var },
    Conv1d { x: Var, k: Var },
    Conv2d { x: Var, k: Var, h: usize, w: usize },
    Conv2dDepthwise { x: Var, k: Var, h: usize, w: usize },
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    ConcatLast { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape { a: Var },
    StraightThroughOneHot { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
}

/// Records a computation and computes gradients for it.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if populated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape matches value")
        })
    }

    /// Pushes an input that does not need a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Pushes an input that participates in differentiation.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y)
    }

    fn broadcast_binary(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let kind = broadcast_kind(opname, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let value = match kind {
            Broadcast::Same => {
                let out: Vec<f64> = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(sa.clone(), out)?
            }
            Broadcast::RhsSuffix => {
                let bl = db.len();
                let out: Vec<f64> = da
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i % bl]))
                    .collect();
                Tensor::new(sa.clone(), out)?
            }
            Broadcast::LhsSuffix => {
                let al = da.len();
                let out: Vec<f64> = db
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(da[i % al], y))
                    .collect();
                Tensor::new(sb.clone(), out)?
            }
        };
        let rg = self.rg2(a, b);
        let op = match opname {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(value, rg, op))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Recip { a }, |x| 1.0 / x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar { a }, |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::MulScalar { a, c }, |x| x * c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp { a }, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log { a }, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh { a }, f64::tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt { a }, f64::sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu { a }, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu { a }, gelu_forward)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, op))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg2(a, b);
        Ok(self.push(value, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: sa.to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let da = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Transpose { a }))
    }

    // ── row-wise ops ────────────────────────────────────────────────────

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        for (row_in, row_out) in da.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            softmax_row(row_in, row_out);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::SoftmaxLast { a }))
    }

    /// Layer normalization over the last axis, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        for (row_in, row_out) in da.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - mean) * rstd;
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::LayerNormLast { a, eps }))
    }

    // ── convolutions (odd kernel, zero padding, stride 1) ───────────────

    /// Depthwise 1-D convolution: x is [n, c], k is [c, kw].
    pub fn conv1d_depthwise(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[0] || sk[1] % 2 == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_depthwise",
                lhs: sx,
                rhs: sk,
            });
        }
        let (n, c, kw) = (sx[0], sx[1], sk[1]);
        let pad = kw / 2;
        let (dx, dk) = (self.data(x), self.data(k));
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..kw {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xrow = &dx[src as usize * c..src as usize * c + c];
                let orow = &mut out[i * c..i * c + c];
                for ch in 0..c {
                    orow[ch] += xrow[ch] * dk[ch * kw + j];
                }
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg2(x, k);
        Ok(self.push(value, rg, Op::Conv1dDepthwise { x, k }))
    }

    /// Full 1-D convolution: x is [n, cin], k is [cout, cin, kw].
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sx[1] != sk[1] || sk[2] % 2 == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (n, cin) = (sx[0], sx[1]);
        let (cout, kw) = (sk[0], sk[2]);
        let pad = kw / 2;
        let (dx, dk) = (self.data(x), self.data(k));
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            for j in 0..kw {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xrow = &dx[src as usize * cin..src as usize * cin + cin];
                for o in 0..cout {
                    let krow = &dk[o * cin * kw + j..];
                    let mut acc = 0.0;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        acc += xv * krow[ci * kw];
                    }
                    out[i * cout + o] += acc;
                }
            }
        }
        let value = Tensor::new(vec![n, cout], out)?;
        let rg = self.rg2(x, k);
        Ok(self.push(value, rg, Op::Conv1d { x, k }))
    }

    /// Full 2-D convolution on a grid of tokens: x is [h*w, cin] in row-major
    /// grid order, k is [cout, cin, kh, kw].
    pub fn conv2d(&mut self, x: Var, k: Var, h: usize, w: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 2
            || sk.len() != 4
            || sx[0] != h * w
            || sx[1] != sk[1]
            || sk[2] % 2 == 0
            || sk[3] % 2 == 0
        {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (cin, cout, kh, kw) = (sx[1], sk[0], sk[2], sk[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let (dx, dk) = (self.data(x), self.data(k));
        let mut out = vec![0.0; h * w * cout];
        for r in 0..h {
            for s in 0..w {
                let orow = &mut out[(r * w + s) * cout..(r * w + s) * cout + cout];
                for a in 0..kh {
                    let rr = r as isize + a as isize - ph as isize;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for b in 0..kw {
                        let ss = s as isize + b as isize - pw as isize;
                        if ss < 0 || ss >= w as isize {
                            continue;
                        }
                        let xrow =
                            &dx[(rr as usize * w + ss as usize) * cin..][..cin];
                        for (o, ov) in orow.iter_mut().enumerate() {
                            let kbase = ((o * cin) * kh + a) * kw + b;
                            let mut acc = 0.0;
                            for (ci, &xv) in xrow.iter().enumerate() {
                                acc += xv * dk[kbase + ci * kh * kw];
                            }
                            *ov += acc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![h * w, cout], out)?;
        let rg = self.rg2(x, k);
        Ok(self.push(value, rg, Op::Conv2d { x, k, h, w }))
    }

    /// Depthwise 2-D convolution: x is [h*w, c], k is [c, kh, kw].
    pub fn conv2d_depthwise(&mut self, x: Var, k: Var, h: usize, w: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 2
            || sk.len() != 3
            || sx[0] != h * w
            || sx[1] != sk[0]
            || sk[1] % 2 == 0
            || sk[2] % 2 == 0
        {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_depthwise",
                lhs: sx,
                rhs: sk,
            });
        }
        let (c, kh, kw) = (sk[0], sk[1], sk[2]);
        let (ph, pw) = (kh / 2, kw / 2);
        let (dx, dk) = (self.data(x), self.data(k));
        let mut out = vec![0.0; h * w * c];
        for r in 0..h {
            for s in 0..w {
                let orow = &mut out[(r * w + s) * c..(r * w + s) * c + c];
                for a in 0..kh {
                    let rr = r as isize + a as isize - ph as isize;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for b in 0..kw {
                        let ss = s as isize + b as isize - pw as isize;
                        if ss < 0 || ss >= w as isize {
                            continue;
                        }
                        let xrow = &dx[(rr as usize * w + ss as usize) * c..][..c];
                        for ch in 0..c {
                            orow[ch] += xrow[ch] * dk[(ch * kh + a) * kw + b];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![h * w, c], out)?;
        let rg = self.rg2(x, k);
        Ok(self.push(value, rg, Op::Conv2dDepthwise { x, k, h, w }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadArgument {
                op: if mean { "mean_axis" } else { "sum_axis" },
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let da = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += da[base + i];
                }
            }
        }
        if mean {
            let s = 1.0 / len as f64;
            for v in &mut out {
                *v *= s;
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let rg = self.nodes[a.0].requires_grad;
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        Ok(self.push(value, rg, op))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), rg, Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), rg, Op::MeanAll { a }))
    }

    // ── shape surgery ───────────────────────────────────────────────────

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::BadArgument {
                op: "concat_last",
                reason: "no inputs".into(),
            });
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut total_last = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp[..sp.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            total_last += *sp.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total_last];
        let mut col = 0;
        for &p in parts {
            let d = self.shape(p).last().copied().unwrap();
            let dp = self.data(p);
            for r in 0..rows {
                out[r * total_last + col..r * total_last + col + d]
                    .copy_from_slice(&dp[r * d..r * d + d]);
            }
            col += d;
        }
        let mut shape = lead;
        shape.push(total_last);
        let value = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            value,
            rg,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns [start, start+len) of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if start + len > d || len == 0 {
            return Err(TensorError::BadArgument {
                op: "slice_cols",
                reason: format!("slice [{start}, {}) out of last dim {d}", start + len),
            });
        }
        let rows = self.data(a).len() / d;
        let da = self.data(a);
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&da[r * d + start..r * d + start + len]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let value = Tensor::new(new_shape, out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::SliceCols { a, start }))
    }

    /// Gathers rows of a 2-D tensor by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape,
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::BadArgument {
                op: "gather_rows",
                reason: format!("row index {bad} out of range {r}"),
            });
        }
        let da = self.data(a);
        let mut out = vec![0.0; idx.len() * c];
        for (j, &i) in idx.iter().enumerate() {
            out[j * c..(j + 1) * c].copy_from_slice(&da[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != self.data(a).len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.data(a).len(),
            });
        }
        let value = Tensor::new(shape, self.data(a).to_vec())?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    // ── special ops ─────────────────────────────────────────────────────

    /// Row-wise one-hot of the argmax with an identity backward rule: the
    /// forward value is hard, the gradient is passed through to the soft
    /// input untouched (straight-through estimator).
    pub fn straight_through_onehot(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "straight_through_onehot",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        for (row_in, row_out) in da.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            row_out[argmax(row_in)] = 1.0;
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::StraightThroughOneHot { a }))
    }

    /// Inverted dropout with an explicit pre-drawn mask of {0, 1/(1-p)}.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl rand::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self
            .data(a)
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Dropout { a, mask }))
    }

    /// Hard codes (row-wise argmax) of a recorded value; plain inspection,
    /// records nothing.
    pub fn argmax_rows(&self, a: Var) -> Vec<usize> {
        let d = self.shape(a).last().copied().unwrap_or(1);
        self.data(a).chunks_exact(d).map(argmax).collect()
    }

    // ── compositions ────────────────────────────────────────────────────

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) for every reachable node that requires a
    /// gradient. `loss` must be scalar. A tape can only run backward once;
    /// re-record the forward pass to differentiate again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lshape = self.shape(loss);
        if self.data(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: lshape.to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(&self.nodes, &mut grads, i, &g);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn grad_buf<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Applies one op's vector-Jacobian product, reading node values
/// immutably and accumulating into the separate gradient arena.
fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = {
                let s = nodes[a.0].value.shape();
                (s[0], s[1])
            };
            let n = nodes[b.0].value.shape()[1];
            if wants(nodes, *a) {
                let bd = nodes[b.0].value.data();
                let ga = grad_buf(nodes, grads, *a);
                matmul_nt(g, bd, m, n, k, ga);
            }
            if wants(nodes, *b) {
                let ad = nodes[a.0].value.data();
                let gb = grad_buf(nodes, grads, *b);
                matmul_tn(ad, g, m, k, n, gb);
            }
        }
        Op::Transpose { a } => {
            if wants(nodes, *a) {
                let (c, r) = {
                    let s = nodes[i].value.shape();
                    (s[0], s[1])
                };
                let ga = grad_buf(nodes, grads, *a);
                for j in 0..c {
                    for t in 0..r {
                        ga[t * c + j] += g[j * r + t];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            acc_broadcast(nodes, grads, *a, g, 1.0);
            acc_broadcast(nodes, grads, *b, g, 1.0);
        }
        Op::Sub { a, b } => {
            acc_broadcast(nodes, grads, *a, g, 1.0);
            acc_broadcast(nodes, grads, *b, g, -1.0);
        }
        Op::Mul { a, b } => {
            if wants(nodes, *a) {
                let bd = nodes[b.0].value.data();
                acc_broadcast_scaled_by(nodes, grads, *a, g, bd);
            }
            if wants(nodes, *b) {
                let ad = nodes[a.0].value.data();
                acc_broadcast_scaled_by(nodes, grads, *b, g, ad);
            }
        }
        Op::Recip { a } => {
            if wants(nodes, *a) {
                let y = nodes[i].value.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *gva -= gv * yv * yv;
                }
            }
        }
        Op::AddScalar { a } => {
            if wants(nodes, *a) {
                let ga = grad_buf(nodes, grads, *a);
                for (gva, gv) in ga.iter_mut().zip(g) {
                    *gva += gv;
                }
            }
        }
        Op::MulScalar { a, c } => {
            if wants(nodes, *a) {
                let c = *c;
                let ga = grad_buf(nodes, grads, *a);
                for (gva, gv) in ga.iter_mut().zip(g) {
                    *gva += c * gv;
                }
            }
        }
        Op::Exp { a } => {
            if wants(nodes, *a) {
                let y = nodes[i].value.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *gva += gv * yv;
                }
            }
        }
        Op::Log { a } => {
            if wants(nodes, *a) {
                let x = nodes[a.0].value.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    *gva += gv / xv;
                }
            }
        }
        Op::Tanh { a } => {
            if wants(nodes, *a) {
                let y = nodes[i].value.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *gva += gv * (1.0 - yv * yv);
                }
            }
        }
        Op::Sqrt { a } => {
            if wants(nodes, *a) {
                let y = nodes[i].value.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *gva += gv * 0.5 / yv;
                }
            }
        }
        Op::Relu { a } => {
            if wants(nodes, *a) {
                let x = nodes[a.0].value.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *gva += gv;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            if wants(nodes, *a) {
                let x = nodes[a.0].value.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    *gva += gv * gelu_backward(*xv);
                }
            }
        }
        Op::SoftmaxLast { a } => {
            if wants(nodes, *a) {
                let y = &nodes[i].value;
                let d = y.shape().last().copied().unwrap();
                let ydata = y.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((yrow, grow), garow) in ydata
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(ga.chunks_exact_mut(d))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for ((gva, &yv), &gv) in garow.iter_mut().zip(yrow).zip(grow) {
                        *gva += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNormLast { a, eps } => {
            if wants(nodes, *a) {
                let x = &nodes[a.0].value;
                let d = x.shape().last().copied().unwrap();
                let eps = *eps;
                let xdata = x.data();
                let ga = grad_buf(nodes, grads, *a);
                for ((xrow, grow), garow) in xdata
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(ga.chunks_exact_mut(d))
                {
                    let df = d as f64;
                    let mean = xrow.iter().sum::<f64>() / df;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / df;
                    let mut gxhat = 0.0;
                    for (&gv, &xv) in grow.iter().zip(xrow) {
                        gxhat += gv * (xv - mean) * rstd;
                    }
                    gxhat /= df;
                    for ((gva, &gv), &xv) in garow.iter_mut().zip(grow).zip(xrow) {
                        let xhat = (xv - mean) * rstd;
                        *gva += rstd * (gv - gmean - xhat * gxhat);
                    }
                }
            }
        }
        Op::Conv1dDepthwise { x, k } => {
            let (n, c) = {
                let s = nodes[x.0].value.shape();
                (s[0], s[1])
            };
            let kw = nodes[k.0].value.shape()[1];
            let pad = kw / 2;
            if wants(nodes, *x) {
                let kd = nodes[k.0].value.data();
                let gx = grad_buf(nodes, grads, *x);
                for i2 in 0..n {
                    for j in 0..kw {
                        let src = i2 as isize + j as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        for ch in 0..c {
                            gx[src as usize * c + ch] += g[i2 * c + ch] * kd[ch * kw + j];
                        }
                    }
                }
            }
            if wants(nodes, *k) {
                let xd = nodes[x.0].value.data();
                let gk = grad_buf(nodes, grads, *k);
                for i2 in 0..n {
                    for j in 0..kw {
                        let src = i2 as isize + j as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        for ch in 0..c {
                            gk[ch * kw + j] += g[i2 * c + ch] * xd[src as usize * c + ch];
                        }
                    }
                }
            }
        }
        Op::Conv1d { x, k } => {
            let (n, cin) = {
                let s = nodes[x.0].value.shape();
                (s[0], s[1])
            };
            let (cout, kw) = {
                let s = nodes[k.0].value.shape();
                (s[0], s[2])
            };
            let pad = kw / 2;
            if wants(nodes, *x) {
                let kd = nodes[k.0].value.data();
                let gx = grad_buf(nodes, grads, *x);
                for i2 in 0..n {
                    for j in 0..kw {
                        let src = i2 as isize + j as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        for o in 0..cout {
                            let gv = g[i2 * cout + o];
                            for ci in 0..cin {
                                gx[src as usize * cin + ci] += gv * kd[(o * cin + ci) * kw + j];
                            }
                        }
                    }
                }
            }
            if wants(nodes, *k) {
                let xd = nodes[x.0].value.data();
                let gk = grad_buf(nodes, grads, *k);
                for i2 in 0..n {
                    for j in 0..kw {
                        let src = i2 as isize + j as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        for o in 0..cout {
                            let gv = g[i2 * cout + o];
                            for ci in 0..cin {
                                gk[(o * cin + ci) * kw + j] += gv * xd[src as usize * cin + ci];
                            }
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, k, h, w } => {
            let (h, w) = (*h, *w);
            let cin = nodes[x.0].value.shape()[1];
            let (cout, kh, kw) = {
                let s = nodes[k.0].value.shape();
                (s[0], s[2], s[3])
            };
            let (ph, pw) = (kh / 2, kw / 2);
            if wants(nodes, *x) {
                let kd = nodes[k.0].value.data();
                let gx = grad_buf(nodes, grads, *x);
                conv2d_back_x(g, kd, gx, h, w, cin, cout, kh, kw, ph, pw);
            }
            if wants(nodes, *k) {
                let xd = nodes[x.0].value.data();
                let gk = grad_buf(nodes, grads, *k);
                conv2d_back_k(g, xd, gk, h, w, cin, cout, kh, kw, ph, pw);
            }
        }
        Op::Conv2dDepthwise { x, k, h, w } => {
            let (h, w) = (*h, *w);
            let c = nodes[x.0].value.shape()[1];
            let (kh, kw) = {
                let s = nodes[k.0].value.shape();
                (s[1], s[2])
            };
            let (ph, pw) = (kh / 2, kw / 2);
            if wants(nodes, *x) {
                let kd = nodes[k.0].value.data();
                let gx = grad_buf(nodes, grads, *x);
                for r in 0..h {
                    for s2 in 0..w {
                        for a2 in 0..kh {
                            let rr = r as isize + a2 as isize - ph as isize;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for bb in 0..kw {
                                let ss = s2 as isize + bb as isize - pw as isize;
                                if ss < 0 || ss >= w as isize {
                                    continue;
                                }
                                let src = (rr as usize * w + ss as usize) * c;
                                let dst = (r * w + s2) * c;
                                for ch in 0..c {
                                    gx[src + ch] += g[dst + ch] * kd[(ch * kh + a2) * kw + bb];
                                }
                            }
                        }
                    }
                }
            }
            if wants(nodes, *k) {
                let xd = nodes[x.0].value.data();
                let gk = grad_buf(nodes, grads, *k);
                for r in 0..h {
                    for s2 in 0..w {
                        for a2 in 0..kh {
                            let rr = r as isize + a2 as isize - ph as isize;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for bb in 0..kw {
                                let ss = s2 as isize + bb as isize - pw as isize;
                                if ss < 0 || ss >= w as isize {
                                    continue;
                                }
                                let src = (rr as usize * w + ss as usize) * c;
                                let dst = (r * w + s2) * c;
                                for ch in 0..c {
                                    gk[(ch * kh + a2) * kw + bb] += g[dst + ch] * xd[src + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            if wants(nodes, *a) {
                let shape = nodes[a.0].value.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let ga = grad_buf(nodes, grads, *a);
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let gbase = o * inner;
                        for i2 in 0..inner {
                            ga[base + i2] += g[gbase + i2] * scale;
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if wants(nodes, *a) {
                let gv = g[0];
                let ga = grad_buf(nodes, grads, *a);
                for v in ga.iter_mut() {
                    *v += gv;
                }
            }
        }
        Op::MeanAll { a } => {
            if wants(nodes, *a) {
                let n = nodes[a.0].value.numel();
                let gv = g[0] / n as f64;
                let ga = grad_buf(nodes, grads, *a);
                for v in ga.iter_mut() {
                    *v += gv;
                }
            }
        }
        Op::ConcatLast { parts } => {
            let total_last = nodes[i].value.shape().last().copied().unwrap();
            let rows = nodes[i].value.numel() / total_last;
            let mut col = 0;
            for &p in parts {
                let d = nodes[p.0].value.shape().last().copied().unwrap();
                if wants(nodes, p) {
                    let gp = grad_buf(nodes, grads, p);
                    for r in 0..rows {
                        for j in 0..d {
                            gp[r * d + j] += g[r * total_last + col + j];
                        }
                    }
                }
                col += d;
            }
        }
        Op::SliceCols { a, start } => {
            if wants(nodes, *a) {
                let d = nodes[a.0].value.shape().last().copied().unwrap();
                let len = nodes[i].value.shape().last().copied().unwrap();
                let rows = nodes[i].value.numel() / len;
                let start = *start;
                let ga = grad_buf(nodes, grads, *a);
                for r in 0..rows {
                    for j in 0..len {
                        ga[r * d + start + j] += g[r * len + j];
                    }
                }
            }
        }
        Op::GatherRows { a, idx } => {
            if wants(nodes, *a) {
                let c = nodes[a.0].value.shape()[1];
                let ga = grad_buf(nodes, grads, *a);
                for (j, &ri) in idx.iter().enumerate() {
                    for t in 0..c {
                        ga[ri * c + t] += g[j * c + t];
                    }
                }
            }
        }
        Op::Reshape { a } | Op::StraightThroughOneHot { a } => {
            if wants(nodes, *a) {
                let ga = grad_buf(nodes, grads, *a);
                for (gva, gv) in ga.iter_mut().zip(g) {
                    *gva += gv;
                }
            }
        }
        Op::Dropout { a, mask } => {
            if wants(nodes, *a) {
                let ga = grad_buf(nodes, grads, *a);
                for ((gva, gv), m) in ga.iter_mut().zip(g).zip(mask) {
                    *gva += gv * m;
                }
            }
        }
    }
}

/// Adds `scale * g` into the gradient of `v`, reducing over leading axes
/// when `v` is the broadcast (smaller) operand.
fn acc_broadcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], scale: f64) {
    if !wants(nodes, v) {
        return;
    }
    let vlen = nodes[v.0].value.numel();
    let gv = grad_buf(nodes, grads, v);
    if vlen == g.len() {
        for (a, b) in gv.iter_mut().zip(g) {
            *a += scale * b;
        }
    } else {
        for (i, b) in g.iter().enumerate() {
            gv[i % vlen] += scale * b;
        }
    }
}

/// Adds `g * other` into the gradient of `v` (for Mul), handling the case
/// where either side was broadcast.
fn acc_broadcast_scaled_by(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    g: &[f64],
    other: &[f64],
) {
    let vlen = nodes[v.0].value.numel();
    let olen = other.len();
    let gv = grad_buf(nodes, grads, v);
    if vlen == g.len() {
        for (i, b) in g.iter().enumerate() {
            gv[i] += b * other[i % olen];
        }
    } else {
        for (i, b) in g.iter().enumerate() {
            gv[i % vlen] += b * other[i % olen];
        }
    }
}

enum Broadcast {
    Same,
    RhsSuffix,
    LhsSuffix,
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        return Ok(Broadcast::RhsSuffix);
    }
    if lhs.len() < rhs.len() && rhs.ends_with(lhs) {
        return Ok(Broadcast::LhsSuffix);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_row(row_in: &[f64], row_out: &mut [f64]) {
    let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in row_out.iter_mut().zip(row_in) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in row_out.iter_mut() {
        *o *= inv;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_backward(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ── matmul kernels (also used by backward) ──────────────────────────────

/// out[m,n] += A[m,k] @ B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,k] += G[m,n] @ B[k,n]^T  (B stored row-major as [k,n])
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += A[m,k]^T @ G[m,n]
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_back_x(
    g: &[f64],
    kd: &[f64],
    gx: &mut [f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) {
    for r in 0..h {
        for s in 0..w {
            for a in 0..kh {
                let rr = r as isize + a as isize - ph as isize;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for b in 0..kw {
                    let ss = s as isize + b as isize - pw as isize;
                    if ss < 0 || ss >= w as isize {
                        continue;
                    }
                    let src = (rr as usize * w + ss as usize) * cin;
                    let dst = (r * w + s) * cout;
                    for o in 0..cout {
                        let gv = g[dst + o];
                        for ci in 0..cin {
                            gx[src + ci] += gv * kd[((o * cin + ci) * kh + a) * kw + b];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_back_k(
    g: &[f64],
    xd: &[f64],
    gk: &mut [f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) {
    for r in 0..h {
        for s in 0..w {
            for a in 0..kh {
                let rr = r as isize + a as isize - ph as isize;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for b in 0..kw {
                    let ss = s as isize + b as isize - pw as isize;
                    if ss < 0 || ss >= w as isize {
                        continue;
                    }
                    let src = (rr as usize * w + ss as usize) * cin;
                    let dst = (r * w + s) * cout;
                    for o in 0..cout {
                        let gv = g[dst + o];
                        for ci in 0..cin {
                            gk[((o * cin + ci) * kh + a) * kw + b] += gv * xd[src + ci];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);

        // Independent oracle: straight-line exp / sum.
        let inp: [f64; 3] = [1.0, 2.0, 3.0];
        let exps: Vec<f64> = inp.iter().map(|v| v.exp()).collect();
        let s: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / s).collect();

        let x = tape.constant(Tensor::new(vec![3], inp.to_vec()).unwrap());
        let y = tape.softmax(x).unwrap();
        for (a, b) in tape.data(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // Matches the frozen oracle evaluation to displayed precision.
        assert!((tape.data(y)[0] - 0.09003057).abs() < 1e-8);
        assert!((tape.data(y)[1] - 0.24472847).abs() < 1e-8);
        assert!((tape.data(y)[2] - 0.66524096).abs() < 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one_strictly_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[
            vec![3.0, -2.0, 0.5, 9.0],
            vec![-40.0, 2.0, 2.0, 1.0],
        ]));
        let y = tape.softmax(x).unwrap();
        for row in tape.data(y).chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t2(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]));
        let a = t2(&[vec![2.0, -1.0], vec![0.25, 8.0], vec![3.0, 7.0]]);
        let av = tape.constant(a.clone());
        let y = tape.matmul(eye, av).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b).unwrap_err() {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn second_backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.backward(l).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn constant_loss_leaves_grads_untouched() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::scalar(5.0));
        let l = tape.sum_all(c).unwrap();
        tape.backward(l).unwrap();
        // Convention: unreachable gradients stay unpopulated (None).
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[vec![1.0, 4.0, -2.0, 0.5], vec![10.0, 10.5, 9.0, 12.0]]));
        let y = tape.layer_norm(x, 1e-12).unwrap();
        for row in tape.data(y).chunks_exact(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn broadcast_add_reduces_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let b = tape.leaf(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.data(y), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn straight_through_is_hard_forward_identity_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![0.2, 0.5, 0.3], vec![0.7, 0.1, 0.2]]));
        let y = tape.straight_through_onehot(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let w = tape.constant(t2(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum_all(p).unwrap();
        tape.backward(l).unwrap();
        // Identity Jacobian: gradient equals the readout weights.
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let y = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(y), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn determinism_same_inputs_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(t2(&[vec![0.3, -0.7, 1.1], vec![2.0, 0.0, -1.0]]));
            let w = tape.constant(t2(&[vec![0.5, 1.0], vec![-0.25, 0.75], vec![2.0, -2.0]]));
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax(y).unwrap();
            let l = tape.mean_all(s).unwrap();
            (tape.data(y).to_vec(), tape.data(s).to_vec(), tape.data(l)[0])
        };
        let (y1, s1, l1) = run();
        let (y2, s2, l2) = run();
        assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(s1.iter().zip(&s2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(l1.to_bits(), l2.to_bits());
    }
}
