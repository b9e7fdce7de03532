use super::kernels::{self, ConvGeometry, MatRef};
use super::{Tensor, TensorError};

/// Lower bound applied to `log` inputs.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Scale(Var, f64),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
        c_out: usize,
        /// Unfolded input per image; empty when the kernel is constant.
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    SliceRows {
        input: Var,
        offset: usize,
    },
    LogSoftmax {
        input: Var,
        cols: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Record of every operation in one forward pass, in creation order.
///
/// Creation order is a topological order: an operation can only consume
/// vars that already exist. [`Tape::backward`] walks the records in
/// reverse, visiting each once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    strict: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` accumulate
    /// gradients on [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether `v` links back to parent operations for differentiation.
    pub fn has_grad_node(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Gradient of a leaf, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if self.strict && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Results that cannot reach a differentiable leaf are stored as
        // plain constants; no record is needed for them.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- elementwise -------------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>), TensorError> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok((Bcast::Same, sa.shape().to_vec()))
        } else if sa.is_scalar() {
            Ok((Bcast::LhsScalar, sb.shape().to_vec()))
        } else if sb.is_scalar() {
            Ok((Bcast::RhsScalar, sa.shape().to_vec()))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.shape().to_vec(),
                rhs: sb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Bcast) -> Op,
    ) -> Result<Var, TensorError> {
        let (bc, shape) = self.bcast(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match bc {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
            Bcast::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
        };
        self.push(name, Tensor::from_parts(shape, data), make(a, b, bc), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let src = self.value(a);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect());
        self.push(name, value, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log with inputs clamped below at [`LOG_EPS`].
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, |x| x.max(LOG_EPS).ln(), Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var, TensorError> {
        self.unary("clamp_min", a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// Copy of `a` detached from the tape: same value, no gradient record,
    /// `requires_grad == false` whatever `a` was.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), 0.0, &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a vector of length `d` to every row of a tensor whose last
    /// extent is `d`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&1);
        if tb.numel() != d || tx.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data: Vec<f64> = tx
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_row_bias", value, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Adds `bias[c]` to every element of channel `c` of a `c x h x w` or
    /// `n x c x h x w` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let channel_axis = match tx.rank() {
            3 => 0,
            4 => 1,
            _ => {
                return Err(TensorError::Rank {
                    op: "add_channel_bias",
                    expected: "3 or 4",
                    shape: tx.shape().to_vec(),
                })
            }
        };
        let c = tx.shape()[channel_axis];
        if tb.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let plane: usize = tx.shape()[channel_axis + 1..].iter().product();
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_channel_bias", value, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// Direct 2-D cross-correlation.
    ///
    /// `x` is `c_in x h x w` (or batched `n x c_in x h x w`), `kernel` is
    /// `c_out x c_in x kh x kw`. Output extents are
    /// `floor((h + 2*padding - kh) / stride) + 1` and likewise for width.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let batched = match tx.rank() {
            3 => false,
            4 => true,
            _ => {
                return Err(TensorError::Rank {
                    op: "conv2d",
                    expected: "3 or 4",
                    shape: tx.shape().to_vec(),
                })
            }
        };
        let (batch, xs) = if batched {
            (tx.shape()[0], &tx.shape()[1..])
        } else {
            (1, tx.shape())
        };
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        if tk.rank() != 4 || tk.shape()[1] != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (c_out, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        if stride == 0 {
            return Err(TensorError::InvalidGeometry {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::InvalidGeometry {
                op: "conv2d",
                reason: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (k_len, p_len) = (geom.patch_len(), geom.out_len());
        let in_len = c_in * h * w;
        let mut out = vec![0.0; batch * c_out * p_len];
        // The unfolded input is kept for the kernel gradient when one is
        // needed; otherwise a single image-sized buffer is reused.
        let keep = self.nodes[kernel.0].requires_grad;
        let mut cols = vec![0.0; if keep { batch } else { 1 } * k_len * p_len];
        for i in 0..batch {
            let c = if keep { i } else { 0 };
            let cols_i = &mut cols[c * k_len * p_len..(c + 1) * k_len * p_len];
            kernels::im2col(&geom, &tx.data()[i * in_len..(i + 1) * in_len], cols_i);
            kernels::gemm(
                MatRef::new(tk.data(), c_out, k_len),
                MatRef::new(cols_i, k_len, p_len),
                0.0,
                &mut out[i * c_out * p_len..(i + 1) * c_out * p_len],
            );
        }
        let cols = if keep { cols } else { Vec::new() };
        let shape = if batched {
            vec![batch, c_out, geom.out_h, geom.out_w]
        } else {
            vec![c_out, geom.out_h, geom.out_w]
        };
        let op = Op::Conv2d {
            input: x,
            kernel,
            geom,
            batch,
            c_out,
            cols,
        };
        self.push("conv2d", Tensor::from_parts(shape, out), op, &[x, kernel])
    }

    /// Non-overlapping `size x size` max pooling over the last two axes.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(TensorError::Rank {
                op: "max_pool2d",
                expected: ">= 2",
                shape: tx.shape().to_vec(),
            });
        }
        let r = tx.rank();
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        if size == 0 || size > h || size > w {
            return Err(TensorError::InvalidGeometry {
                op: "max_pool2d",
                reason: format!("window {size} on {h}x{w} input"),
            });
        }
        let planes = tx.numel() / (h * w);
        let (out, argmax) = kernels::max_pool(tx.data(), planes, h, w, size);
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = h / size;
        shape[r - 1] = w / size;
        self.push("max_pool2d", Tensor::from_parts(shape, out), Op::MaxPool2d { input: x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidShape(Vec::new()))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() == 0 || len == 0 || start + len > t.shape()[0] {
            return Err(TensorError::OutOfBounds {
                start,
                end: start + len,
                extent: t.shape().first().copied().unwrap_or(0),
            });
        }
        let row: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let op = Op::SliceRows {
            input: x,
            offset: start * row,
        };
        self.push("slice_rows", Tensor::from_parts(shape, data), op, &[x])
    }

    /// Row-wise log-softmax over the last axis, stabilised by subtracting
    /// the row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::Rank {
                op: "log_softmax",
                expected: ">= 1",
                shape: t.shape().to_vec(),
            });
        }
        let cols = *t.shape().last().unwrap();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("log_softmax", value, Op::LogSoftmax { input: x, cols }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    // ----- reverse pass ------------------------------------------------

    /// Propagates d(loss)/d(leaf) into every reachable leaf that requires
    /// gradients. Gradients accumulate across calls until
    /// [`zero_grads`](Self::zero_grads).
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    leaf_grads.push((id, g));
                }
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        for (id, g) in leaf_grads {
            match &mut self.nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(a) {
                    let ga = self.slot(grads, a);
                    if bc == Bcast::LhsScalar {
                        ga[0] += g.iter().sum::<f64>();
                    } else {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
                if self.rg(b) {
                    let gb = self.slot(grads, b);
                    if bc == Bcast::RhsScalar {
                        gb[0] += sign * g.iter().sum::<f64>();
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Mul(a, b, bc) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let at = |d: &[f64], scalar: bool, i: usize| if scalar { d[0] } else { d[i] };
                let (sa, sb) = (bc == Bcast::LhsScalar, bc == Bcast::RhsScalar);
                if self.rg(a) {
                    let ga = self.slot(grads, a);
                    for (i, gi) in g.iter().enumerate() {
                        ga[if sa { 0 } else { i }] += gi * at(vb, sb, i);
                    }
                }
                if self.rg(b) {
                    let gb = self.slot(grads, b);
                    for (i, gi) in g.iter().enumerate() {
                        gb[if sb { 0 } else { i }] += gi * at(va, sa, i);
                    }
                }
            }
            &Op::Div(a, b, bc) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let at = |d: &[f64], scalar: bool, i: usize| if scalar { d[0] } else { d[i] };
                let (sa, sb) = (bc == Bcast::LhsScalar, bc == Bcast::RhsScalar);
                if self.rg(a) {
                    let ga = self.slot(grads, a);
                    for (i, gi) in g.iter().enumerate() {
                        ga[if sa { 0 } else { i }] += gi / at(vb, sb, i);
                    }
                }
                if self.rg(b) {
                    let gb = self.slot(grads, b);
                    for (i, gi) in g.iter().enumerate() {
                        let y = at(vb, sb, i);
                        gb[if sb { 0 } else { i }] -= gi * at(va, sa, i) / (y * y);
                    }
                }
            }
            &Op::Neg(a) => {
                let ga = self.slot(grads, a);
                ga.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            &Op::Exp(a) => {
                let out = node.value.data();
                let ga = self.slot(grads, a);
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * y;
                }
            }
            &Op::Log(a) => {
                let va = self.value(a).data();
                let ga = self.slot(grads, a);
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(va) {
                    if v > LOG_EPS {
                        *x += gi / v;
                    }
                }
            }
            &Op::Relu(a) => {
                let va = self.value(a).data();
                let ga = self.slot(grads, a);
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(va) {
                    if v > 0.0 {
                        *x += gi;
                    }
                }
            }
            &Op::Scale(a, c) => {
                let ga = self.slot(grads, a);
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            &Op::ClampMin(a, lo) => {
                let va = self.value(a).data();
                let ga = self.slot(grads, a);
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(va) {
                    if v > lo {
                        *x += gi;
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gm = MatRef::new(g, m, n);
                if self.rg(a) {
                    let ga = self.slot(grads, a);
                    kernels::gemm(gm, MatRef::t(tb.data(), k, n), 1.0, ga);
                }
                if self.rg(b) {
                    let gb = self.slot(grads, b);
                    kernels::gemm(MatRef::t(ta.data(), m, k), gm, 1.0, gb);
                }
            }
            &Op::AddRowBias(x, bias) => {
                if self.rg(x) {
                    let gx = self.slot(grads, x);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if self.rg(bias) {
                    let gb = self.slot(grads, bias);
                    let d = gb.len();
                    for row in g.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::AddChannelBias(x, bias) => {
                if self.rg(x) {
                    let gx = self.slot(grads, x);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if self.rg(bias) {
                    let shape = node.value.shape();
                    let axis = shape.len() - 3;
                    let c = shape[axis];
                    let plane: usize = shape[axis + 1..].iter().product();
                    let gb = self.slot(grads, bias);
                    for (i, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                c_out,
                cols,
            } => {
                let (input, kernel, batch, c_out) = (*input, *kernel, *batch, *c_out);
                let tk = self.value(kernel);
                let (k_len, p_len) = (geom.patch_len(), geom.out_len());
                let in_len = geom.c_in * geom.h * geom.w;
                if self.rg(kernel) {
                    let mut gk = vec![0.0; tk.numel()];
                    for i in 0..batch {
                        let gi = &g[i * c_out * p_len..(i + 1) * c_out * p_len];
                        let cols_i = &cols[i * k_len * p_len..(i + 1) * k_len * p_len];
                        kernels::gemm(MatRef::new(gi, c_out, p_len), MatRef::t(cols_i, k_len, p_len), 1.0, &mut gk);
                    }
                    let slot = self.slot(grads, kernel);
                    slot.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
                }
                if self.rg(input) {
                    let mut buf = vec![0.0; k_len * p_len];
                    let gx = self.slot(grads, input);
                    for i in 0..batch {
                        let gi = &g[i * c_out * p_len..(i + 1) * c_out * p_len];
                        kernels::gemm(MatRef::t(tk.data(), c_out, k_len), MatRef::new(gi, c_out, p_len), 0.0, &mut buf);
                        kernels::col2im_add(geom, &buf, &mut gx[i * in_len..(i + 1) * in_len]);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let gx = self.slot(grads, *input);
                for (gi, &idx) in g.iter().zip(argmax) {
                    gx[idx] += gi;
                }
            }
            &Op::Reshape(x) => {
                let gx = self.slot(grads, x);
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        let gp = self.slot(grads, p);
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { input, offset } => {
                let gx = self.slot(grads, input);
                gx[offset..offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            &Op::LogSoftmax { input, cols } => {
                let out = node.value.data();
                let gx = self.slot(grads, input);
                for ((gx_row, g_row), y_row) in gx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(out.chunks_exact(cols))
                {
                    let total: f64 = g_row.iter().sum();
                    for ((a, gi), y) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *a += gi - y.exp() * total;
                    }
                }
            }
            &Op::Sum(x) => {
                let gx = self.slot(grads, x);
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            &Op::Mean(x) => {
                let gx = self.slot(grads, x);
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|a| *a += g[0] / n);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[1.0, 2.0, 3.0]));
        let err = tape.mul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "mul",
                lhs: vec![2],
                rhs: vec![3]
            }
        );
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn scalar_broadcasts_both_sides() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0, 3.0]));
        let s = tape.param(Tensor::scalar(2.0));
        let y = tape.div(s, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 1.0, 2.0 / 3.0]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        let gs = tape.grad(s).unwrap();
        assert!((gs.item() - (1.0 + 0.5 + 1.0 / 3.0)).abs() < 1e-15);
        let gx = tape.grad(x).unwrap();
        assert!((gx.data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn strict_mode_rejects_non_finite() {
        let mut tape = Tape::strict();
        let a = tape.constant(t(&[1000.0]));
        assert_eq!(tape.exp(a).unwrap_err(), TensorError::NonFinite { op: "exp" });
        let mut lax = Tape::new();
        let a = lax.constant(t(&[1000.0]));
        let e = lax.exp(a).unwrap();
        assert!(lax.value(e).data()[0].is_infinite());
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[&[0.3, -1.5], &[2.25, 7.0]]).unwrap());
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
        let x = tape.constant(Tensor::new(vec![1, 4, 4], img.clone()).unwrap());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4]);
        assert_eq!(tape.value(y).data(), &img[..]);
    }

    #[test]
    fn conv_all_ones_three_by_three() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_output_extent_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 9, 7]));
        let k = tape.constant(Tensor::zeros(&[4, 3, 3, 2]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        // (9 + 2 - 3) / 2 + 1 = 5, (7 + 2 - 2) / 2 + 1 = 4
        assert_eq!(tape.value(y).shape(), &[2, 4, 5, 4]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(TensorError::InvalidGeometry { .. })));
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn log_softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0, 0.0]]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        // -log(1 + e + e^2) = -2.40760596444438...
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let want = [1.0 - lse, 2.0 - lse, 3.0 - lse];
        for (v, w) in tape.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }
        assert!((tape.value(y).data()[0] + 2.40761).abs() < 1e-5);
    }

    #[test]
    fn stop_gradient_detaches() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.5, -2.0, 3.0]));
        let d = tape.stop_gradient(x);
        assert_eq!(tape.value(d).data(), tape.value(x).data());
        assert!(!tape.requires_grad(d));
        assert!(!tape.has_grad_node(d));

        // y = sum(sg(x) * x) => dy/dx = x, not 2x
        let p = tape.mul(d, x).unwrap();
        let y = tape.sum(p).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.5, -2.0, 3.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);

        tape.zero_grads();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0]));
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.backward(y), Err(TensorError::NotScalar(vec![2])));
    }

    #[test]
    fn constants_carry_no_record() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0]));
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
        assert!(!tape.has_grad_node(b));
        let p = tape.param(t(&[1.0]));
        let c = tape.add(b, p).unwrap();
        assert!(tape.requires_grad(c));
        assert!(tape.has_grad_node(c));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        let s = tape.slice_rows(c, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
        assert!(tape.slice_rows(c, 2, 2).is_err());
    }
}
