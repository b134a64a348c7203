use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels::{self, ConvGeom};
use super::{Element, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Nonlinearities available to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Normalizes along the given axis.
    Softmax(usize),
}

/// Backward rule of a custom operation: receives the upstream gradient and
/// returns one optional gradient per input, in input order.
pub type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> Vec<Option<Vec<T>>>>;

enum Op<T: Element> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis_len: usize,
        inner: usize,
    },
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations. Operations can only reference
/// values already on the tape, so insertion order is a topological order and
/// [`Tape::backward`] replays it in reverse.
pub struct Tape<T: Element = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    tape: usize,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `leaf`, or `None` when the leaf does not require
    /// gradients or did not contribute to the loss.
    pub fn get(&self, leaf: Var) -> Result<Option<&Tensor<T>>> {
        if leaf.tape != self.tape || leaf.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(self.grads[leaf.index].as_ref())
    }

    pub fn take(&mut self, leaf: Var) -> Result<Option<Tensor<T>>> {
        if leaf.tape != self.tape || leaf.index >= self.grads.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(self.grads[leaf.index].take())
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the NaN/Inf check applied to every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || self.consumed {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(TensorError::ForeignVar)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a copy of `t`. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        let needs = t.requires_grad();
        self.push("leaf", t.detached(), Op::Leaf, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        let t = t.detached();
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn conv_nd(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x)?, self.value(w)?);
        let geom = ConvGeom::for_conv(xv.shape(), wv.shape(), stride, padding)?;
        let bias = self.bias_data(b, geom.cout, "conv_nd")?;
        let out = kernels::conv_forward(&geom, xv.data(), wv.data(), bias);
        let value = Tensor::new(&geom.output_shape(), out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("conv_nd", value, Op::Conv { x, w, b, geom }, needs)
    }

    /// Transposed convolution; `w` has layout `[Cin, Cout, k...]`.
    pub fn conv_transpose_nd(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x)?, self.value(w)?);
        let geom = ConvGeom::for_conv_transpose(xv.shape(), wv.shape(), stride, padding)?;
        let bias = self.bias_data(b, geom.cin, "conv_transpose_nd")?;
        let mut out = kernels::conv_backward_input(&geom, xv.data(), wv.data());
        if let Some(bias) = bias {
            let vol = geom.in_vol();
            for (i, chunk) in out.chunks_mut(vol).enumerate() {
                let c = bias[i % geom.cin];
                chunk.iter_mut().for_each(|v| *v = *v + c);
            }
        }
        let value = Tensor::new(&geom.input_shape(), out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("conv_transpose_nd", value, Op::ConvTranspose { x, w, b, geom }, needs)
    }

    fn bias_data(&self, b: Option<Var>, channels: usize, op: &'static str) -> Result<Option<&[T]>> {
        match b {
            None => Ok(None),
            Some(b) => {
                let bv = self.value(b)?;
                if bv.shape() != [channels] {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        expected: vec![channels],
                        got: bv.shape().to_vec(),
                    });
                }
                Ok(Some(bv.data()))
            }
        }
    }

    /// Per-channel normalization of `x[N, C, spatial...]`.
    ///
    /// In train mode the running estimates are updated as
    /// `running ← (1 − momentum)·running + momentum·batch_stat`, with the
    /// unbiased batch variance feeding `running_var`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_nd(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: BatchNormMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        const OP: &str = "batch_norm_nd";
        let xv = self.value(x)?;
        if xv.shape().len() < 2 {
            return Err(TensorError::UnsupportedRank {
                op: OP,
                rank: xv.shape().len(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let vol = xv.numel() / (n * c);
        for t in [self.value(gamma)?, self.value(beta)?, &*running_mean, &*running_var] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    expected: vec![c],
                    got: t.shape().to_vec(),
                });
            }
        }
        let count = n * vol;
        let train = mode == BatchNormMode::Train;
        if train && count < 2 {
            return Err(TensorError::DegenerateBatch(count));
        }
        let (g, bt) = (self.value(gamma)?.data(), self.value(beta)?.data());
        let data = xv.data();
        let eps_t = T::lit(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let cnt = T::lit(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let start = (b * c + ch) * vol;
                    s = s + data[start..start + vol].iter().copied().sum();
                }
                let m = s / cnt;
                let mut sq = T::zero();
                for b in 0..n {
                    let start = (b * c + ch) * vol;
                    for &v in &data[start..start + vol] {
                        sq = sq + (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq / cnt;
            }
        } else {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut x_hat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * vol;
                for i in start..start + vol {
                    let h = (data[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        if train {
            let mom = T::lit(momentum);
            let unbias = T::lit(count as f64 / (count as f64 - 1.0));
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(&shape, out)?;
        self.push(
            OP,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            },
            needs,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Softmax(axis) => self.softmax(x, axis),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let needs = self.needs(x);
        self.push("relu", value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let needs = self.needs(x);
        self.push("sigmoid", value, Op::Sigmoid(x), needs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer = xv.numel() / (axis_len * inner);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * axis_len + k) * inner + i;
                let mx = (0..axis_len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..axis_len {
                    let e = (src[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    total = total + e;
                }
                for k in 0..axis_len {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push("softmax", value, Op::Softmax { x, axis_len, inner }, needs)
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        let n = sa[0];
        let (la, lb) = (av.numel() / n, bv.numel() / n);
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&bv.data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("concat_channels", value, Op::Concat { a, b, split: la }, needs)
    }

    /// Channels `start..start + len` of `x[N, C, ...]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let shape = xv.shape();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_channels",
                expected: shape.to_vec(),
                got: vec![start, len],
            });
        }
        let n = shape[0];
        let per = xv.numel() / (n * shape[1]);
        let full = shape[1] * per;
        let mut out = Vec::with_capacity(n * len * per);
        for i in 0..n {
            out.extend_from_slice(&xv.data()[i * full + start * per..i * full + (start + len) * per]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[1] = len;
        let value = Tensor::new(&new_shape, out)?;
        let needs = self.needs(x);
        self.push("slice_channels", value, Op::SliceChannels { x, start }, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor<T>, &Tensor<T>)> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        Ok((av, bv))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape("add", a, b)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape("mul", a, b)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x)?;
        let data = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let needs = self.needs(x);
        self.push("scale", value, Op::Scale(x, c), needs)
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        let mut needs = false;
        for &v in inputs {
            self.node(v)?;
            needs |= self.needs(v);
        }
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            needs,
        )
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = self.value(loss)?;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut nodes = std::mem::take(&mut self.nodes);
        nodes.truncate(loss.index + 1);
        let total = nodes.len();
        let is_leaf: Vec<(bool, Vec<usize>)> = nodes
            .iter()
            .map(|n| (matches!(n.op, Op::Leaf) && n.needs_grad, n.value.shape().to_vec()))
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..total).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);

        while let Some(node) = nodes.pop() {
            let idx = nodes.len();
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let need = |v: Var| nodes[v.index].needs_grad;
            let val = |v: Var| &nodes[v.index].value;
            let mut emit: Vec<(Var, Vec<T>)> = Vec::new();
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, geom } => {
                    if need(x) {
                        emit.push((x, kernels::conv_backward_input(&geom, &dy, val(w).data())));
                    }
                    if need(w) {
                        emit.push((w, kernels::conv_backward_weight(&geom, &dy, val(x).data())));
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        emit.push((b, kernels::channel_sums(geom.batch, geom.cout, &dy)));
                    }
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    if need(x) {
                        emit.push((x, kernels::conv_forward(&geom, &dy, val(w).data(), None)));
                    }
                    if need(w) {
                        emit.push((w, kernels::conv_backward_weight(&geom, val(x).data(), &dy)));
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        emit.push((b, kernels::channel_sums(geom.batch, geom.cin, &dy)));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    train,
                } => {
                    let shape = node.value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let vol = dy.len() / (n * c);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * vol;
                            for i in start..start + vol {
                                dgamma[ch] = dgamma[ch] + dy[i] * x_hat[i];
                                dbeta[ch] = dbeta[ch] + dy[i];
                            }
                        }
                    }
                    if need(x) {
                        let g = val(gamma).data();
                        let m = T::lit((n * vol) as f64);
                        let mut dx = vec![T::zero(); dy.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let start = (b * c + ch) * vol;
                                let k = g[ch] * inv_std[ch];
                                for i in start..start + vol {
                                    dx[i] = if train {
                                        k * (dy[i] - dbeta[ch] / m - x_hat[i] * dgamma[ch] / m)
                                    } else {
                                        k * dy[i]
                                    };
                                }
                            }
                        }
                        emit.push((x, dx));
                    }
                    if need(gamma) {
                        emit.push((gamma, dgamma));
                    }
                    if need(beta) {
                        emit.push((beta, dbeta));
                    }
                }
                Op::Relu(x) => {
                    let dx = dy
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                        .collect();
                    emit.push((x, dx));
                }
                Op::Sigmoid(x) => {
                    let dx = dy
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect();
                    emit.push((x, dx));
                }
                Op::Softmax { x, axis_len, inner } => {
                    let y = node.value.data();
                    let outer = y.len() / (axis_len * inner);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * axis_len + k) * inner + i;
                            let dot: T = (0..axis_len).map(|k| dy[idx(k)] * y[idx(k)]).sum();
                            for k in 0..axis_len {
                                dx[idx(k)] = y[idx(k)] * (dy[idx(k)] - dot);
                            }
                        }
                    }
                    emit.push((x, dx));
                }
                Op::Concat { a, b, split } => {
                    let n = node.value.shape()[0];
                    let per = dy.len() / n;
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for i in 0..n {
                        da.extend_from_slice(&dy[i * per..i * per + split]);
                        db.extend_from_slice(&dy[i * per + split..(i + 1) * per]);
                    }
                    if need(a) {
                        emit.push((a, da));
                    }
                    if need(b) {
                        emit.push((b, db));
                    }
                }
                Op::SliceChannels { x, start } => {
                    let src = val(x).shape();
                    let (n, full_c) = (src[0], src[1]);
                    let per = val(x).numel() / (n * full_c);
                    let len = node.value.shape()[1];
                    let mut dx = vec![T::zero(); val(x).numel()];
                    for i in 0..n {
                        let dst = i * full_c * per + start * per;
                        dx[dst..dst + len * per].copy_from_slice(&dy[i * len * per..(i + 1) * len * per]);
                    }
                    emit.push((x, dx));
                }
                Op::Add(a, b) => {
                    if need(a) {
                        emit.push((a, dy.clone()));
                    }
                    if need(b) {
                        emit.push((b, dy));
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        emit.push((a, dy.iter().zip(val(b).data()).map(|(&g, &v)| g * v).collect()));
                    }
                    if need(b) {
                        emit.push((b, dy.iter().zip(val(a).data()).map(|(&g, &v)| g * v).collect()));
                    }
                }
                Op::Scale(x, c) => emit.push((x, dy.iter().map(|&g| g * c).collect())),
                Op::Sum(x) => emit.push((x, vec![dy[0]; val(x).numel()])),
                Op::Custom { inputs, backward } => {
                    for (v, g) in inputs.into_iter().zip(backward(&dy)) {
                        if let Some(g) = g.filter(|_| need(v)) {
                            emit.push((v, g));
                        }
                    }
                }
            }
            for (v, g) in emit {
                accumulate(&mut grads[v.index], g);
            }
        }

        let grads = grads
            .into_iter()
            .zip(is_leaf)
            .map(|(g, (leaf, shape))| match (leaf, g) {
                (true, Some(g)) => Tensor::new(&shape, g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (1..=16).map(f64::from).collect();
        let x = tape.constant(t64(&[1, 1, 4, 4], &data)).unwrap();
        let k = tape.constant(t64(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv_nd(x, k, None, &[1], &[0]).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &data[..]);
    }

    #[test]
    fn ones_kernel_on_ramp() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (1..=16).map(f64::from).collect();
        let x = tape.constant(t64(&[1, 1, 4, 4], &data)).unwrap();
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap()).unwrap();
        let y = tape.conv_nd(x, k, None, &[1], &[0]).unwrap();
        let out = tape.value(y).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[54.0, 63.0, 90.0, 99.0]);
    }

    #[test]
    fn stride_two_halves_and_transpose_doubles() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]).unwrap()).unwrap();
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap()).unwrap();
        let y = tape.conv_nd(x, k, None, &[2], &[1]).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 1, 32, 32]);

        let small = tape
            .constant(Tensor::create(&[1, 1, 32, 32], Init::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap())
            .unwrap();
        let up_k = tape.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap()).unwrap();
        let up = tape.conv_transpose_nd(small, up_k, None, &[2], &[0]).unwrap();
        let v = tape.value(up).unwrap();
        assert_eq!(v.shape(), &[1, 1, 64, 64]);
        assert!(v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap()).unwrap();
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap()).unwrap();
        assert!(matches!(
            tape.conv_nd(x, k, None, &[1], &[0]),
            Err(TensorError::ChannelMismatch { .. })
        ));
        let big = tape.constant(Tensor::zeros(&[1, 2, 5, 5]).unwrap()).unwrap();
        assert!(matches!(
            tape.conv_nd(x, big, None, &[1], &[0]),
            Err(TensorError::OutputTooSmall { .. })
        ));
    }

    #[test]
    fn batch_norm_examples() {
        let mut rm = Tensor::<f64>::zeros(&[1]).unwrap();
        let mut rv = Tensor::<f64>::full(&[1], 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 1, 1], &[1.0, 3.0])).unwrap();
        let g = tape.constant(t64(&[1], &[1.0])).unwrap();
        let b = tape.constant(t64(&[1], &[0.0])).unwrap();
        let y = tape
            .batch_norm_nd(x, g, b, &mut rm, &mut rv, BatchNormMode::Train, 1e-12, 0.1)
            .unwrap();
        let out = tape.value(y).unwrap().data();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
        // running_mean ← 0.9·0 + 0.1·2
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);

        let g2 = tape.constant(t64(&[1], &[2.0])).unwrap();
        let b2 = tape.constant(t64(&[1], &[5.0])).unwrap();
        let y2 = tape
            .batch_norm_nd(x, g2, b2, &mut rm, &mut rv, BatchNormMode::Train, 1e-12, 0.1)
            .unwrap();
        let out = tape.value(y2).unwrap().data();
        assert!((out[0] - 3.0).abs() < 1e-9 && (out[1] - 7.0).abs() < 1e-9);

        let c = tape.constant(Tensor::full(&[2, 1, 3], 4.0).unwrap()).unwrap();
        let yc = tape
            .batch_norm_nd(c, g, b, &mut rm, &mut rv, BatchNormMode::Train, 1e-5, 0.1)
            .unwrap();
        assert!(tape.value(yc).unwrap().data().iter().all(|&v| v == 0.0));

        let one = tape.constant(t64(&[1, 1, 1], &[1.0])).unwrap();
        assert_eq!(
            tape.batch_norm_nd(one, g, b, &mut rm, &mut rv, BatchNormMode::Train, 1e-5, 0.1),
            Err(TensorError::DegenerateBatch(1))
        );
        // eval mode accepts a single element
        assert!(tape
            .batch_norm_nd(one, g, b, &mut rm, &mut rv, BatchNormMode::Eval, 1e-5, 0.1)
            .is_ok());
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t64(&[1], &[0.0])).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.5]);
        let r = tape.constant(t64(&[2], &[-1.0, 2.0])).unwrap();
        let r = tape.relu(r).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 2.0]);
        let a = tape.constant(t64(&[3], &[0.7, 0.7, 0.7])).unwrap();
        let sm = tape.activation(a, Activation::Softmax(0)).unwrap();
        for &v in tape.value(sm).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(
            tape.softmax(a, 1),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::<f32>::new();
        let a = tape
            .leaf(&Tensor::create(&[1, 2, 4, 4], Init::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap())
            .unwrap();
        let z = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap()).unwrap();
        let c = tape.concat_channels(a, z).unwrap();
        assert_eq!(tape.value(c).unwrap().shape(), &[1, 5, 4, 4]);
        let back = tape.slice_channels(c, 0, 2).unwrap();
        assert_eq!(tape.value(back).unwrap().data(), tape.value(a).unwrap().data());
        let bad = tape.constant(Tensor::zeros(&[1, 3, 4, 5]).unwrap()).unwrap();
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn add_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t64(&[2], &[3.0, 4.0])).unwrap();
        let z = tape.constant(t64(&[2], &[0.0, 0.0])).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[4.0, 6.0]);
        let id = tape.add(a, z).unwrap();
        assert_eq!(tape.value(id).unwrap().data(), &[1.0, 2.0]);
        let c = tape.constant(t64(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1], &[3.0]).with_grad()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().unwrap().data(), &[6.0]);
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]).with_grad()).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));

        let mut other = Tape::<f64>::new();
        let y = other.leaf(&t64(&[1], &[1.0]).with_grad()).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, -2.0]).with_grad()).unwrap();
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_finite_detection() {
        let mut tape = Tape::<f32>::new();
        tape.set_check_finite(true);
        let x = tape.constant(Tensor::full(&[1], 1e30).unwrap()).unwrap();
        assert_eq!(tape.mul(x, x).unwrap_err(), TensorError::NonFinite("mul"));
        tape.set_check_finite(false);
        assert!(tape.mul(x, x).is_ok());
    }
}
