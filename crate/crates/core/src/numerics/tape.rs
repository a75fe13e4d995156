//! Dynamic reverse-mode tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and enough
//! saved state to run its vector-Jacobian product. A tape lives for one
//! forward pass and is dropped after `backward`. A tape built with
//! [`Tape::no_grad`] records values only.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm_at, gemm_bt};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Sum(usize),
    SumRows(usize),
    Abs(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize, T),
    Gelu(usize),
    Softmax(usize, T),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    Gather(usize, Rc<[usize]>),
    Reshape(usize),
    Attention {
        qkv: usize,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Rc<Tensor<T>>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn var(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(t), Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(t), Op::Leaf, false)
    }

    pub fn constant_rc(&self, t: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, wants_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad: self.grad_enabled && wants_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar. Returns gradients of every trainable leaf
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor::new(nodes[id].value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one reverse sweep, indexed by leaf.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` does not influence the loss.
    pub fn get_or_zero(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let need = self.needs_grad();
        self.tape.push(Rc::new(value), op, need)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let need = self.needs_grad() || other.needs_grad();
        self.tape.push(Rc::new(value), op, need)
    }

    fn zip(self, other: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let a = self.value();
        let b = other.value();
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Stop-gradient copy sharing this variable's value.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant_rc(self.value())
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Result<Var<'t, T>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip(other, "div", |a, b| a / b)?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = row.value();
        let (m, n) = a.dims2()?;
        if b.numel() != n {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let mut out = a.data().to_vec();
        for r in 0..m {
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        let v = Tensor::new([m, n], out)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Row sums of an `m×n` matrix, shape `[m]`.
    pub fn sum_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        let data = (0..m).map(|r| a.data()[r * n..(r + 1) * n].iter().copied().sum()).collect();
        let v = Tensor::new([m], data)?;
        Ok(self.unary(v, Op::SumRows(self.id)))
    }

    /// Elementwise `|x|`; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.abs());
        self.unary(v, Op::Abs(self.id))
    }

    /// Elementwise square root; the gradient at zero is taken as zero.
    pub fn sqrt(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::zero()).sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    /// `ln(max(x, eps))`; no gradient flows through clamped entries.
    pub fn log_clamped(self, eps: T) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(eps).ln());
        self.unary(v, Op::Log(self.id, eps))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let v = self
            .value()
            .map(|x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()));
        self.unary(v, Op::Gelu(self.id))
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax_rows(self, temperature: T) -> Result<Var<'t, T>> {
        if !(temperature > T::zero()) {
            return Err(Error::Contract(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let a = self.value();
        let (m, n) = a.dims2()?;
        if !a.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = a.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n], temperature);
        }
        let v = Tensor::new([m, n], out)?;
        Ok(self.unary(v, Op::Softmax(self.id, temperature)))
    }

    /// Row-wise layer normalization with affine gain and bias of length `n`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let g = gain.value();
        let b = bias.value();
        if g.numel() != n || b.numel() != n {
            return Err(Error::dim("layer_norm", x.shape(), g.shape()));
        }
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new([m, n], out)?;
        let need = self.needs_grad() || gain.needs_grad() || bias.needs_grad();
        let op = if self.tape.grad_enabled && need {
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        Ok(self.tape.push(Rc::new(v), op, need))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        if start > end || end > m {
            return Err(Error::Shape(format!("row slice {start}..{end} of {m} rows")));
        }
        let v = Tensor::new([end - start, n], a.data()[start * n..end * n].to_vec())?;
        Ok(self.unary(v, Op::SliceRows(self.id, start)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        if start > end || end > n {
            return Err(Error::Shape(format!("column slice {start}..{end} of {n} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&a.data()[r * n + start..r * n + end]);
        }
        let v = Tensor::new([m, w], out)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        let cols = first.value().dims2()?.1;
        let mut need = false;
        for p in parts {
            let v = p.value();
            let (m, n) = v.dims2()?;
            if n != cols {
                return Err(Error::dim("concat_rows", first.value().shape(), v.shape()));
            }
            rows += m;
            data.extend_from_slice(v.data());
            need |= p.needs_grad();
        }
        let v = Tensor::new([rows, cols], data)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(Rc::new(v), Op::ConcatRows(ids), need))
    }

    /// Output row `i` is input row `index[i]`; rows may repeat.
    pub fn gather_rows(self, index: Rc<[usize]>) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in index.iter() {
            if r >= m {
                return Err(Error::Shape(format!("gather row {r} of {m}")));
            }
            out.extend_from_slice(&a.data()[r * n..(r + 1) * n]);
        }
        let v = Tensor::new([index.len(), n], out)?;
        Ok(self.unary(v, Op::Gather(self.id, index)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Scaled dot-product attention over a packed `[q | k | v]` matrix.
    ///
    /// `self` is `(batch·tokens) × 3d`; each of the `heads` heads uses a
    /// `d/heads` slice of q, k and v. Returns the `(batch·tokens) × d`
    /// concatenated head outputs and the attention probabilities laid out
    /// as `[batch, heads, tokens, tokens]`.
    pub fn attention(
        self,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<(Var<'t, T>, Rc<Tensor<T>>)> {
        let x = self.value();
        let (rows, w) = x.dims2()?;
        if rows != batch * tokens || w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention over {rows}x{w} with batch {batch}, tokens {tokens}, heads {heads}"
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let xd = x.data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let q = &xd[(b * tokens + i) * w + h * dh..][..dh];
                    let prow = &mut probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let k = &xd[(b * tokens + j) * w + d + h * dh..][..dh];
                        *p = q.iter().zip(k).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    }
                    softmax_in_place(prow, T::one());
                    let orow = &mut out[(b * tokens + i) * d + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let v = &xd[(b * tokens + j) * w + 2 * d + h * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let probs = Rc::new(Tensor::new([batch, heads, tokens, tokens], probs)?);
        let v = Tensor::new([rows, d], out)?;
        let var = self.unary(
            v,
            Op::Attention {
                qkv: self.id,
                batch,
                tokens,
                heads,
                probs: probs.clone(),
            },
        );
        Ok((var, probs))
    }
}

fn softmax_in_place<T: Real>(row: &mut [T], temperature: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, delta: Vec<T>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let need = |id: usize| nodes[id].needs_grad;
    let val = |id: usize| &*nodes[id].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if need(a) {
                let mut da = vec![T::zero(); m * k];
                gemm_bt(g, bv.data(), m, n, k, &mut da);
                accumulate(grads, a, da);
            }
            if need(b) {
                let mut db = vec![T::zero(); k * n];
                gemm_at(av.data(), g, m, k, n, &mut db);
                accumulate(grads, b, db);
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            let mut da = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    da[j * r + i] = g[i * c + j];
                }
            }
            accumulate(grads, a, da);
        }
        &Op::Add(a, b) => {
            if need(a) {
                accumulate(grads, a, g.to_vec());
            }
            if need(b) {
                accumulate(grads, b, g.to_vec());
            }
        }
        &Op::Sub(a, b) => {
            if need(a) {
                accumulate(grads, a, g.to_vec());
            }
            if need(b) {
                accumulate(grads, b, g.iter().map(|&x| -x).collect());
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            if need(a) {
                accumulate(grads, a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
            }
            if need(b) {
                accumulate(grads, b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            if need(a) {
                accumulate(grads, a, g.iter().zip(bv).map(|(&x, &d)| x / d).collect());
            }
            if need(b) {
                let db = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&x, (&n, &d))| -x * n / (d * d))
                    .collect();
                accumulate(grads, b, db);
            }
        }
        &Op::AddRow(a, b) => {
            if need(a) {
                accumulate(grads, a, g.to_vec());
            }
            if need(b) {
                let n = val(b).numel();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                accumulate(grads, b, db);
            }
        }
        &Op::Scale(a, c) => accumulate(grads, a, g.iter().map(|&x| x * c).collect()),
        &Op::Offset(a) | &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
        &Op::Sum(a) => accumulate(grads, a, vec![g[0]; val(a).numel()]),
        &Op::SumRows(a) => {
            let n = val(a).shape()[1];
            let da = g.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
            accumulate(grads, a, da);
        }
        &Op::Abs(a) => {
            let da = g
                .iter()
                .zip(val(a).data())
                .map(|(&x, &v)| {
                    if v > T::zero() {
                        x
                    } else if v < T::zero() {
                        -x
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(grads, a, da);
        }
        &Op::Sqrt(a) => {
            let half = T::of(0.5);
            let da = g
                .iter()
                .zip(y)
                .map(|(&x, &s)| if s > T::zero() { x * half / s } else { T::zero() })
                .collect();
            accumulate(grads, a, da);
        }
        &Op::Exp(a) => accumulate(grads, a, g.iter().zip(y).map(|(&x, &e)| x * e).collect()),
        &Op::Log(a, eps) => {
            let da = g
                .iter()
                .zip(val(a).data())
                .map(|(&x, &v)| if v > eps { x / v } else { T::zero() })
                .collect();
            accumulate(grads, a, da);
        }
        &Op::Gelu(a) => {
            let c = T::of(GELU_C);
            let k = T::of(GELU_A);
            let half = T::of(0.5);
            let three = T::of(3.0);
            let da = g
                .iter()
                .zip(val(a).data())
                .map(|(&gx, &x)| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    gx * (half * (T::one() + t) + half * x * dt)
                })
                .collect();
            accumulate(grads, a, da);
        }
        &Op::Softmax(a, temp) => {
            let n = node.value.shape()[1];
            let mut da = vec![T::zero(); y.len()];
            for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = p * (q - dot) / temp;
                }
            }
            accumulate(grads, a, da);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = node.value.shape()[1];
            let gv = val(*gain).data();
            if need(*gain) {
                let mut dg = vec![T::zero(); n];
                for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                    for j in 0..n {
                        dg[j] += hr[j] * gr[j];
                    }
                }
                accumulate(grads, *gain, dg);
            }
            if need(*bias) {
                let mut db = vec![T::zero(); n];
                for gr in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                accumulate(grads, *bias, db);
            }
            if need(*x) {
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); g.len()];
                for (r, ((dr, hr), gr)) in dx.chunks_mut(n).zip(xhat.chunks(n)).zip(g.chunks(n)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for j in 0..n {
                        dr[j] = rstd[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        &Op::SliceRows(a, start) => {
            let src = val(a);
            let n = src.shape()[1];
            let mut da = vec![T::zero(); src.numel()];
            da[start * n..start * n + g.len()].copy_from_slice(g);
            accumulate(grads, a, da);
        }
        &Op::SliceCols(a, start) => {
            let src = val(a);
            let n = src.shape()[1];
            let w = node.value.shape()[1];
            let mut da = vec![T::zero(); src.numel()];
            for (r, gr) in g.chunks(w).enumerate() {
                da[r * n + start..r * n + start + w].copy_from_slice(gr);
            }
            accumulate(grads, a, da);
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &id in ids {
                let len = val(id).numel();
                if need(id) {
                    accumulate(grads, id, g[off..off + len].to_vec());
                }
                off += len;
            }
        }
        Op::Gather(a, index) => {
            let src = val(*a);
            let n = src.shape()[1];
            let mut da = vec![T::zero(); src.numel()];
            for (i, &r) in index.iter().enumerate() {
                for (d, &v) in da[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                    *d += v;
                }
            }
            accumulate(grads, *a, da);
        }
        Op::Attention {
            qkv,
            batch,
            tokens,
            heads,
            probs,
        } => {
            let (batch, tokens, heads) = (*batch, *tokens, *heads);
            let x = val(*qkv).data();
            let w = val(*qkv).shape()[1];
            let d = w / 3;
            let dh = d / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let p = probs.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut ds = vec![T::zero(); tokens];
            for b in 0..batch {
                for h in 0..heads {
                    let pbase = (b * heads + h) * tokens * tokens;
                    for i in 0..tokens {
                        let go = &g[(b * tokens + i) * d + h * dh..][..dh];
                        let prow = &p[pbase + i * tokens..pbase + (i + 1) * tokens];
                        let mut rowdot = T::zero();
                        for j in 0..tokens {
                            let v = &x[(b * tokens + j) * w + 2 * d + h * dh..][..dh];
                            let dp: T = go.iter().zip(v).map(|(&a, &c)| a * c).sum();
                            ds[j] = dp;
                            rowdot += prow[j] * dp;
                        }
                        for j in 0..tokens {
                            ds[j] = prow[j] * (ds[j] - rowdot) * scale;
                        }
                        let qoff = (b * tokens + i) * w + h * dh;
                        for j in 0..tokens {
                            let koff = (b * tokens + j) * w + d + h * dh;
                            let voff = (b * tokens + j) * w + 2 * d + h * dh;
                            let (pij, sij) = (prow[j], ds[j]);
                            for c in 0..dh {
                                dx[voff + c] += pij * go[c];
                                dx[qoff + c] += sij * x[koff + c];
                                dx[koff + c] += sij * x[qoff + c];
                            }
                        }
                    }
                }
            }
            accumulate(grads, *qkv, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn([2, 3], |i| i as f64));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn zero_times_x_gives_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn([4], |i| i as f64 + 1.0));
        let g = tape.backward(x.scale(0.0).sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let tape = Tape::<f64>::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let l = x.square().unwrap().sum();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
        assert_eq!(g1.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, 0.0]]));
        let s = a.softmax_rows(1.0).unwrap().value();
        for j in 0..3 {
            assert!((s.at2(0, j) - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!((s.at2(1, 0) - 1.0).abs() < 1e-7);
        assert!(s.at2(1, 1).abs() < 1e-7);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]]));
        assert!(matches!(a.softmax_rows(1.0), Err(Error::Numeric(_))));
        let b = tape.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        assert!(b.softmax_rows(0.0).is_err());
    }

    #[test]
    fn no_grad_tape_records_nothing_trainable() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.var(Tensor::ones([3]));
        let l = x.sum();
        assert!(!l.needs_grad());
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.var(t(&[2], &[1.0, 3.0]));
        let l = x.mul(x.detach()).unwrap().sum();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 3.0]);
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.var(t(&[3], &[-2.0, 0.0, 5.0]));
        let g = tape.backward(x.abs().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }
}
