//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A `Graph` records eagerly-evaluated ops in topological order; `backward`
//! walks the tape once in reverse, accumulating gradients into the leaves.
//! The op set is exactly what the model needs: elementwise math, 2-D matmul,
//! dilated convolution, the normalizations, dropout, fused multi-head
//! attention with an optional diagonal mask, and the two losses' building
//! blocks.

use crate::error::{Error, Result};
use crate::kernel::{self, Real};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GraphMode {
    /// Record everything needed for a later `backward`.
    Training,
    /// Forward only; per-op saved state (attention maps, norm statistics,
    /// dropout masks) is dropped to keep inference memory flat.
    Inference,
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Gelu(NodeId),
    Scale(NodeId, T),
    Reshape(NodeId),
    SliceRows {
        x: NodeId,
        rows: usize,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Softmax(NodeId),
    SumAll(NodeId),
    MeanTime(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    Dropout(NodeId),
    SplitHeads {
        x: NodeId,
        heads: usize,
    },
    MergeHeads(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

enum Saved<T> {
    None,
    Norm { mean: Vec<T>, rstd: Vec<T> },
    BatchNorm { mean: Vec<T>, var: Vec<T>, rstd: Vec<T> },
    Mask(Vec<T>),
    Attn(Tensor<T>),
    Probs(Tensor<T>),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    saved: Saved<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    mode: GraphMode,
}

// --- broadcasting utilities -------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize], ctx: &str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(ctx, a, b));
        };
    }
    Ok(out)
}

fn is_suffix(inner: &[usize], outer: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

/// Elementwise binary op with trailing-dimension broadcasting.
fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ctx: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape(), ctx)?;
    let numel: usize = out_shape.iter().product();
    // fast path: b repeats as a suffix block of a (or vice versa)
    if is_suffix(b.shape(), a.shape()) && a.shape() == out_shape.as_slice() && b.numel() > 0 {
        let bl = b.numel();
        let mut data = Vec::with_capacity(numel);
        for chunk in a.data().chunks_exact(bl) {
            data.extend(chunk.iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(out_shape, data);
    }
    if is_suffix(a.shape(), b.shape()) && b.shape() == out_shape.as_slice() && a.numel() > 0 {
        let al = a.numel();
        let mut data = Vec::with_capacity(numel);
        for chunk in b.data().chunks_exact(al) {
            data.extend(a.data().iter().zip(chunk.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(out_shape, data);
    }
    // general strided path
    let rank = out_shape.len();
    let stride_for = |shape: &[usize]| -> Vec<usize> {
        let mut s = vec![0usize; rank];
        let offset = rank - shape.len();
        let mut acc = 1usize;
        for i in (0..shape.len()).rev() {
            s[offset + i] = if shape[i] == 1 { 0 } else { acc };
            acc *= shape[i];
        }
        s
    };
    let sa = stride_for(a.shape());
    let sb = stride_for(b.shape());
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        data.push(f(a.data()[ia], b.data()[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `full` down to `target` shape (the reverse of broadcasting).
fn reduce_to_shape<T: Real>(full: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if full.shape() == target {
        return full.clone();
    }
    let tnumel: usize = target.iter().product();
    // fast path: target is a plain suffix block
    if is_suffix(target, full.shape()) && tnumel > 0 {
        let mut out = Tensor::zeros(target);
        for chunk in full.data().chunks_exact(tnumel) {
            T::axpy(T::ONE, chunk, out.data_mut());
        }
        return out;
    }
    let rank = full.rank();
    let offset = rank - target.len();
    let mut tstrides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..target.len()).rev() {
        tstrides[offset + i] = if target[i] == 1 { 0 } else { acc };
        acc *= target[i];
    }
    let mut out = Tensor::zeros(target);
    let mut idx = vec![0usize; rank];
    let shape = full.shape().to_vec();
    for &v in full.data() {
        let mut ti = 0;
        for d in 0..rank {
            ti += idx[d] * tstrides[d];
        }
        out.data_mut()[ti] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn add_in_place<T: Real>(acc: &mut Tensor<T>, delta: &Tensor<T>) {
    debug_assert_eq!(acc.numel(), delta.numel());
    T::axpy(T::ONE, delta.data(), acc.data_mut());
}

/// In-place masked softmax over one row buffer. Returns an error when every
/// entry is -inf. Entries at -inf come out exactly 0.
fn softmax_row_in_place<T: Real>(row: &mut [T], ctx: &str) -> Result<()> {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        mx = mx.maxv(v);
    }
    if mx == T::neg_infinity() {
        // maxv skips NaN, so an all-NaN row lands here too; that is
        // divergence, not masking
        if row.iter().any(|&v| v != v) {
            return Err(Error::NonFinite { ctx: ctx.to_string() });
        }
        return Err(Error::MaskedRow { ctx: ctx.to_string() });
    }
    for v in row.iter_mut() {
        *v -= mx;
    }
    T::exp_slice(row);
    let mut sum = T::ZERO;
    for &v in row.iter() {
        sum += v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn training() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode: GraphMode::Training,
        }
    }

    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode: GraphMode::Inference,
        }
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, saved: Saved<T>, needs_grad: bool) -> NodeId {
        let keep_saved = match self.mode {
            GraphMode::Training => saved,
            GraphMode::Inference => Saved::None,
        };
        let needs = needs_grad && self.mode == GraphMode::Training;
        self.nodes.push(Node {
            op,
            value,
            saved: keep_saved,
            needs_grad: needs,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, Saved::None, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }

    /// Attention probabilities saved by an `attention` node (training mode).
    pub fn attention_probs(&self, id: NodeId) -> Option<&Tensor<T>> {
        match &self.nodes[id.0].saved {
            Saved::Attn(t) => Some(t),
            _ => None,
        }
    }

    /// Per-channel batch statistics saved by a `batch_norm` node.
    pub fn batch_norm_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].saved {
            Saved::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    // --- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, Saved::None, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, Saved::None, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, Saved::None, needs))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| -v);
        let needs = self.needs(x);
        self.push(Op::Neg(x), v, Saved::None, needs)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.exp());
        if !v.all_finite() {
            return Err(Error::NonFinite { ctx: "exp".to_string() });
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Exp(x), v, Saved::None, needs))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= T::ZERO) {
            return Err(Error::LogDomain { value: bad.to_f64() });
        }
        let v = self.value(x).map(|v| v.ln());
        if !v.all_finite() {
            return Err(Error::NonFinite { ctx: "log".to_string() });
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Log(x), v, Saved::None, needs))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.abs());
        let needs = self.needs(x);
        self.push(Op::Abs(x), v, Saved::None, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(kernel::gelu);
        let needs = self.needs(x);
        self.push(Op::Gelu(x), v, Saved::None, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(Op::Scale(x, c), v, Saved::None, needs)
    }

    // --- shape plumbing --------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), v, Saved::None, needs))
    }

    /// First `rows` rows of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || rows > xs[0] {
            return Err(Error::shape("slice_rows", &xs, &[rows]));
        }
        let cols = xs[1];
        let v = Tensor::new(
            vec![rows, cols],
            self.value(x).data()[..rows * cols].to_vec(),
        )?;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceRows { x, rows }, v, Saved::None, needs))
    }

    // --- contractions ----------------------------------------------------

    /// 2-D matrix product; with `trans_b` the second operand is given as
    /// [n, k] and used transposed.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ashape, bshape) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ashape.len() != 2 || bshape.len() != 2 {
            return Err(Error::shape("matmul", &ashape, &bshape));
        }
        let (m, k) = (ashape[0], ashape[1]);
        let (n, inner) = if trans_b {
            (bshape[0], bshape[1])
        } else {
            (bshape[1], bshape[0])
        };
        if inner != k {
            return Err(Error::shape("matmul", &ashape, &bshape));
        }
        let mut out = Tensor::zeros(&[m, n]);
        if trans_b {
            T::gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut(), false);
        } else {
            T::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut(), false);
        }
        debug_assert!(out.all_finite());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b, trans_b }, out, Saved::None, needs))
    }

    /// Softmax over the last axis. Entries at -inf map to exactly 0; a row
    /// of all -inf is an error.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[1]))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(d) {
            softmax_row_in_place(row, "softmax")?;
        }
        let v = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Softmax(x), v, Saved::None, needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), Saved::None, needs)
    }

    /// Mean over the time axis: [batch, w, d] -> [batch, d].
    pub fn mean_time(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("mean_time", &shape, &[0, 0, 0]));
        }
        let (b, w, d) = (shape[0], shape[1], shape[2]);
        let mut out = Tensor::zeros(&[b, d]);
        let inv = T::ONE / T::from_usize(w);
        for bi in 0..b {
            let orow = &mut out.data_mut()[bi * d..(bi + 1) * d];
            for t in 0..w {
                let xrow = &self.value(x).data()[(bi * w + t) * d..(bi * w + t + 1) * d];
                T::axpy(inv, xrow, orow);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MeanTime(x), out, Saved::None, needs))
    }

    // --- layers ------------------------------------------------------------

    /// Dilated 1-D convolution with stride 1 and length-preserving symmetric
    /// zero padding (extra element on the right when the total is odd).
    /// x: [batch, len, c_in], w: [c_out, c_in, kernel], b: [c_out].
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let (batch, len, c_in) = (xs[0], xs[1], xs[2]);
        let (c_out, kernel) = (ws[0], ws[2]);
        if self.value(b).shape() != [c_out] {
            return Err(Error::shape("conv1d bias", self.value(b).shape(), &[c_out]));
        }
        if len == 0 || kernel == 0 || dilation == 0 {
            return Err(Error::Config(format!(
                "conv1d needs len/kernel/dilation >= 1, got {len}/{kernel}/{dilation}"
            )));
        }
        let pad_total = (kernel - 1) * dilation;
        let pad_left = pad_total / 2;
        let padded_len = len + pad_total;

        // weights repacked per tap as [c_in][c_out] for streaming updates
        let wdata = self.value(w).data();
        let mut wk_co = vec![T::ZERO; kernel * c_in * c_out];
        for o in 0..c_out {
            for c in 0..c_in {
                for k in 0..kernel {
                    wk_co[(k * c_in + c) * c_out + o] = wdata[(o * c_in + c) * kernel + k];
                }
            }
        }

        let mut out = Tensor::zeros(&[batch, len, c_out]);
        let bias = self.value(b).data().to_vec();
        let mut xp = vec![T::ZERO; padded_len * c_in];
        for bi in 0..batch {
            xp.fill(T::ZERO);
            let xsrc = &self.value(x).data()[bi * len * c_in..(bi + 1) * len * c_in];
            xp[pad_left * c_in..(pad_left + len) * c_in].copy_from_slice(xsrc);
            let yb = &mut out.data_mut()[bi * len * c_out..(bi + 1) * len * c_out];
            for row in yb.chunks_exact_mut(c_out) {
                row.copy_from_slice(&bias);
            }
            for k in 0..kernel {
                let a = &xp[k * dilation * c_in..k * dilation * c_in + len * c_in];
                let wk = &wk_co[k * c_in * c_out..(k + 1) * c_in * c_out];
                T::gemm_nn(len, c_in, c_out, a, wk, yb, true);
            }
        }
        debug_assert!(out.all_finite());
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Conv1d { x, w, b, dilation }, out, Saved::None, needs))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[1]))?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape("layer_norm params", self.value(gain).shape(), &[d]));
        }
        let rows = self.value(x).numel() / d;
        let mut data = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let g = self.value(gain).data().to_vec();
        let bvec = self.value(bias).data().to_vec();
        let inv_d = T::ONE / T::from_usize(d);
        for r in 0..rows {
            let xr = &self.value(x).data()[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in xr {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &v in xr {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = T::ONE / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for i in 0..d {
                data.push((xr[i] - mean) * rstd * g[i] + bvec[i]);
            }
        }
        let v = Tensor::new(shape, data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias },
            v,
            Saved::Norm { mean: means, rstd: rstds },
            needs,
        ))
    }

    /// Training-mode batch normalization over (batch, time) per channel,
    /// using biased variance. Batch statistics are saved on the node so the
    /// caller can fold them into running estimates.
    pub fn batch_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, eps: T) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("batch_norm", &shape, &[0, 0, 0]));
        }
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        let n = b * l;
        if n < 2 {
            return Err(Error::DegenerateBatch { got: n });
        }
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::shape("batch_norm params", self.value(scale).shape(), &[c]));
        }
        let xd = self.value(x).data();
        let inv_n = T::ONE / T::from_usize(n);
        let mut mean = vec![T::ZERO; c];
        for row in xd.chunks_exact(c) {
            T::axpy(T::ONE, row, &mut mean);
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut var = vec![T::ZERO; c];
        for row in xd.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v *= inv_n;
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let g = self.value(scale).data();
        let sh = self.value(shift).data();
        let a: Vec<T> = (0..c).map(|j| rstd[j] * g[j]).collect();
        let b2: Vec<T> = (0..c).map(|j| sh[j] - mean[j] * a[j]).collect();
        let mut data = Vec::with_capacity(n * c);
        for row in xd.chunks_exact(c) {
            for j in 0..c {
                data.push(row[j] * a[j] + b2[j]);
            }
        }
        let v = Tensor::new(shape, data)?;
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            Op::BatchNorm { x, scale, shift },
            v,
            Saved::BatchNorm { mean, var, rstd },
            needs,
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// 1/(1-p). Callers skip the op entirely in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParam {
                name: "dropout p".to_string(),
                msg: format!("must be in [0, 1), got {p}"),
            });
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() >= p {
                    keep_scale
                } else {
                    T::ZERO
                }
            })
            .collect();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Dropout(x), v, Saved::Mask(mask), needs))
    }

    /// [batch, w, heads*dk] -> [batch, heads, w, dk]
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 || heads == 0 || shape[2] % heads != 0 {
            return Err(Error::Config(format!(
                "split_heads: {heads} heads do not divide shape {shape:?}"
            )));
        }
        let (b, w, d) = (shape[0], shape[1], shape[2]);
        let dk = d / heads;
        let mut out = Tensor::zeros(&[b, heads, w, dk]);
        let xd = self.value(x).data();
        let od = out.data_mut();
        for bi in 0..b {
            for t in 0..w {
                let src = &xd[(bi * w + t) * d..(bi * w + t + 1) * d];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * w + t) * dk;
                    od[dst..dst + dk].copy_from_slice(&src[h * dk..(h + 1) * dk]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SplitHeads { x, heads }, out, Saved::None, needs))
    }

    /// [batch, heads, w, dk] -> [batch, w, heads*dk]
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("merge_heads", &shape, &[0, 0, 0, 0]));
        }
        let (b, heads, w, dk) = (shape[0], shape[1], shape[2], shape[3]);
        let d = heads * dk;
        let mut out = Tensor::zeros(&[b, w, d]);
        let xd = self.value(x).data();
        let od = out.data_mut();
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..w {
                    let src = ((bi * heads + h) * w + t) * dk;
                    let dst = (bi * w + t) * d + h * dk;
                    od[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MergeHeads(x), out, Saved::None, needs))
    }

    /// Fused scaled-dot-product attention over [batch, heads, w, dk] inputs.
    /// With `diag_mask` each position's own score is dropped before the
    /// softmax, so the attention diagonal is exactly zero.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, diag_mask: bool) -> Result<NodeId> {
        let qs = self.value(q).shape().to_vec();
        if qs.len() != 4 {
            return Err(Error::shape("attention", &qs, &[0, 0, 0, 0]));
        }
        if self.value(k).shape() != qs.as_slice() || self.value(v).shape() != qs.as_slice() {
            return Err(Error::shape("attention", &qs, self.value(k).shape()));
        }
        let (b, heads, w, dk) = (qs[0], qs[1], qs[2], qs[3]);
        if diag_mask && w < 2 {
            return Err(Error::MaskedRow {
                ctx: "attention with diagonal mask needs w >= 2".to_string(),
            });
        }
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mut out = Tensor::zeros(&[b, heads, w, dk]);
        let save_attn = self.mode == GraphMode::Training;
        let mut attn_all = if save_attn {
            Some(Tensor::zeros(&[b, heads, w, w]))
        } else {
            None
        };
        let mut qscaled = vec![T::ZERO; w * dk];
        let mut kt = vec![T::ZERO; dk * w];
        let mut vt = vec![T::ZERO; dk * w];
        let mut probs = vec![T::ZERO; w * w];
        let plane = w * dk;
        for bi in 0..b {
            for h in 0..heads {
                let base = (bi * heads + h) * plane;
                let qsl = &self.value(q).data()[base..base + plane];
                let ksl = &self.value(k).data()[base..base + plane];
                let vsl = &self.value(v).data()[base..base + plane];
                for (dst, &src) in qscaled.iter_mut().zip(qsl.iter()) {
                    *dst = src * scale;
                }
                kernel::transpose(ksl, w, dk, &mut kt);
                kernel::transpose(vsl, w, dk, &mut vt);
                T::gemm_nn(w, dk, w, &qscaled, &kt, &mut probs, false);
                for i in 0..w {
                    let row = &mut probs[i * w..(i + 1) * w];
                    if diag_mask {
                        row[i] = T::neg_infinity();
                    }
                    // the diagonal mask covers one entry per row, so a fully
                    // masked row here means the scores overflowed
                    softmax_row_in_place(row, "attention").map_err(|e| match e {
                        Error::MaskedRow { .. } => Error::NonFinite {
                            ctx: "attention scores".to_string(),
                        },
                        other => other,
                    })?;
                }
                let osl = &mut out.data_mut()[base..base + plane];
                T::gemm_nt(w, w, dk, &probs, &vt, osl, false);
                if let Some(att) = attn_all.as_mut() {
                    let abase = (bi * heads + h) * w * w;
                    att.data_mut()[abase..abase + w * w].copy_from_slice(&probs);
                }
            }
        }
        debug_assert!(out.all_finite());
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let saved = match attn_all {
            Some(t) => Saved::Attn(t),
            None => Saved::None,
        };
        Ok(self.push(Op::Attention { q, k, v }, out, saved, needs))
    }

    /// Mean softmax cross-entropy between logits [n, classes] and integer
    /// targets. Softmax probabilities are saved for the backward pass.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len(), 2]));
        }
        let (n, classes) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidParam {
                name: "cross_entropy target".to_string(),
                msg: format!("class {bad} out of range for {classes} classes"),
            });
        }
        let mut probs = Tensor::zeros(&[n, classes]);
        let mut loss = T::ZERO;
        let xd = self.value(logits).data();
        for i in 0..n {
            let row = &xd[i * classes..(i + 1) * classes];
            let mut mx = T::neg_infinity();
            for &v in row {
                mx = mx.maxv(v);
            }
            let prow = &mut probs.data_mut()[i * classes..(i + 1) * classes];
            for j in 0..classes {
                prow[j] = row[j] - mx;
            }
            T::exp_slice(prow);
            let mut sum = T::ZERO;
            for &v in prow.iter() {
                sum += v;
            }
            let inv = T::ONE / sum;
            for v in prow.iter_mut() {
                *v *= inv;
            }
            loss += mx + sum.ln() - row[targets[i]];
        }
        loss /= T::from_usize(n);
        if !loss.is_finite() {
            return Err(Error::NonFinite { ctx: "cross_entropy".to_string() });
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            Tensor::scalar(loss),
            Saved::Probs(probs),
            needs,
        ))
    }

    // --- backward ----------------------------------------------------------

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.mode != GraphMode::Training {
            return Err(Error::Config("backward on an inference graph".to_string()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NotScalar {
                ctx: "backward".to_string(),
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                self.grads[id] = None;
                continue;
            }
            let Some(gy) = self.grads[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = Some(gy);
                continue;
            }
            self.propagate(id, gy)?;
        }
        Ok(())
    }

    fn accum(&mut self, target: NodeId, delta: Tensor<T>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(g) => add_in_place(g, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accum_reduced(&mut self, target: NodeId, full: &Tensor<T>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let tshape = self.nodes[target.0].value.shape().to_vec();
        let delta = reduce_to_shape(full, &tshape);
        self.accum(target, delta);
    }

    fn propagate(&mut self, id: usize, gy: Tensor<T>) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaf handled in backward loop"),
            &Op::Add(a, b) => {
                self.accum_reduced(a, &gy);
                self.accum_reduced(b, &gy);
            }
            &Op::Sub(a, b) => {
                self.accum_reduced(a, &gy);
                let neg = gy.map(|v| -v);
                self.accum_reduced(b, &neg);
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let da = broadcast_binary(&gy, self.value(b), "mul backward", |g, y| g * y)?;
                    self.accum_reduced(a, &da);
                }
                if self.needs(b) {
                    let db = broadcast_binary(&gy, self.value(a), "mul backward", |g, x| g * x)?;
                    self.accum_reduced(b, &db);
                }
            }
            &Op::Neg(x) => {
                let d = gy.map(|v| -v);
                self.accum(x, d);
            }
            &Op::Exp(x) => {
                let y = &self.nodes[id].value;
                let d = Tensor::new(
                    y.shape().to_vec(),
                    gy.data().iter().zip(y.data().iter()).map(|(&g, &yv)| g * yv).collect(),
                )?;
                self.accum(x, d);
            }
            &Op::Log(x) => {
                let xv = self.value(x);
                let d = Tensor::new(
                    xv.shape().to_vec(),
                    gy.data().iter().zip(xv.data().iter()).map(|(&g, &v)| g / v).collect(),
                )?;
                self.accum(x, d);
            }
            &Op::Abs(x) => {
                let xv = self.value(x);
                let d = Tensor::new(
                    xv.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(xv.data().iter())
                        .map(|(&g, &v)| {
                            if v > T::ZERO {
                                g
                            } else if v < T::ZERO {
                                -g
                            } else {
                                T::ZERO
                            }
                        })
                        .collect(),
                )?;
                self.accum(x, d);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let d = Tensor::new(
                    xv.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(xv.data().iter())
                        .map(|(&g, &v)| g * kernel::gelu_grad(v))
                        .collect(),
                )?;
                self.accum(x, d);
            }
            &Op::Scale(x, c) => {
                let d = gy.map(|v| v * c);
                self.accum(x, d);
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                let d = gy.reshaped(&shape)?;
                self.accum(x, d);
            }
            &Op::SliceRows { x, rows } => {
                let shape = self.value(x).shape().to_vec();
                let cols = shape[1];
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[..rows * cols].copy_from_slice(gy.data());
                self.accum(x, d);
            }
            &Op::Matmul { a, b, trans_b } => {
                let (m, k) = {
                    let s = self.value(a).shape();
                    (s[0], s[1])
                };
                let n = gy.shape()[1];
                if self.needs(a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    if trans_b {
                        T::gemm_nn(m, n, k, gy.data(), self.value(b).data(), da.data_mut(), false);
                    } else {
                        T::gemm_nt(m, n, k, gy.data(), self.value(b).data(), da.data_mut(), false);
                    }
                    self.accum(a, da);
                }
                if self.needs(b) {
                    let db = if trans_b {
                        let mut db = Tensor::zeros(&[n, k]);
                        T::gemm_tn(m, n, k, gy.data(), self.value(a).data(), db.data_mut(), false);
                        db
                    } else {
                        let mut db = Tensor::zeros(&[k, n]);
                        T::gemm_tn(m, k, n, self.value(a).data(), gy.data(), db.data_mut(), false);
                        db
                    };
                    self.accum(b, db);
                }
            }
            &Op::Softmax(x) => {
                let y = &self.nodes[id].value;
                let d = y.shape()[y.rank() - 1];
                let mut out = Vec::with_capacity(y.numel());
                for (yrow, grow) in y.data().chunks_exact(d).zip(gy.data().chunks_exact(d)) {
                    let s = T::dot(yrow, grow);
                    for j in 0..d {
                        out.push(yrow[j] * (grow[j] - s));
                    }
                }
                let delta = Tensor::new(y.shape().to_vec(), out)?;
                self.accum(x, delta);
            }
            &Op::SumAll(x) => {
                let g = gy.scalar_value()?;
                let shape = self.value(x).shape().to_vec();
                self.accum(x, Tensor::full(&shape, g));
            }
            &Op::MeanTime(x) => {
                let shape = self.value(x).shape().to_vec();
                let (b, w, d) = (shape[0], shape[1], shape[2]);
                let inv = T::ONE / T::from_usize(w);
                let mut dx = Tensor::zeros(&shape);
                for bi in 0..b {
                    let grow = &gy.data()[bi * d..(bi + 1) * d];
                    for t in 0..w {
                        let dst = &mut dx.data_mut()[(bi * w + t) * d..(bi * w + t + 1) * d];
                        T::axpy(inv, grow, dst);
                    }
                }
                self.accum(x, dx);
            }
            &Op::Conv1d { x, w, b, dilation } => {
                self.conv1d_backward(x, w, b, dilation, &gy)?;
            }
            &Op::LayerNorm { x, gain, bias } => {
                self.layer_norm_backward(id, x, gain, bias, &gy)?;
            }
            &Op::BatchNorm { x, scale, shift } => {
                self.batch_norm_backward(id, x, scale, shift, &gy)?;
            }
            Op::Dropout(x) => {
                let x = *x;
                let Saved::Mask(mask) = &self.nodes[id].saved else {
                    unreachable!("dropout saves its mask in training mode");
                };
                let d = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data().iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect(),
                )?;
                self.accum(x, d);
            }
            &Op::SplitHeads { x, heads } => {
                let shape = self.value(x).shape().to_vec();
                let (b, w, d) = (shape[0], shape[1], shape[2]);
                let dk = d / heads;
                let mut dx = Tensor::zeros(&shape);
                let dxd = dx.data_mut();
                for bi in 0..b {
                    for h in 0..heads {
                        for t in 0..w {
                            let src = ((bi * heads + h) * w + t) * dk;
                            let dst = (bi * w + t) * d + h * dk;
                            dxd[dst..dst + dk].copy_from_slice(&gy.data()[src..src + dk]);
                        }
                    }
                }
                self.accum(x, dx);
            }
            &Op::MergeHeads(x) => {
                let shape = self.value(x).shape().to_vec();
                let (b, heads, w, dk) = (shape[0], shape[1], shape[2], shape[3]);
                let d = heads * dk;
                let mut dx = Tensor::zeros(&shape);
                let dxd = dx.data_mut();
                for bi in 0..b {
                    for h in 0..heads {
                        for t in 0..w {
                            let dst = ((bi * heads + h) * w + t) * dk;
                            let src = (bi * w + t) * d + h * dk;
                            dxd[dst..dst + dk].copy_from_slice(&gy.data()[src..src + dk]);
                        }
                    }
                }
                self.accum(x, dx);
            }
            &Op::Attention { q, k, v } => {
                self.attention_backward(id, q, k, v, &gy)?;
            }
            Op::CrossEntropy { logits, .. } => {
                let logits = *logits;
                let (Op::CrossEntropy { targets, .. }, Saved::Probs(probs)) =
                    (&self.nodes[id].op, &self.nodes[id].saved)
                else {
                    unreachable!("cross_entropy saves probabilities");
                };
                let g = gy.scalar_value()?;
                let (n, classes) = (probs.shape()[0], probs.shape()[1]);
                let gn = g / T::from_usize(n);
                let mut d = probs.map(|p| p * gn);
                for (i, &t) in targets.iter().enumerate() {
                    d.data_mut()[i * classes + t] -= gn;
                }
                self.accum(logits, d);
            }
        }
        Ok(())
    }

    fn conv1d_backward(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
        gy: &Tensor<T>,
    ) -> Result<()> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, len, c_in) = (xs[0], xs[1], xs[2]);
        let (c_out, kernel) = (ws[0], ws[2]);
        let pad_total = (kernel - 1) * dilation;
        let pad_left = pad_total / 2;
        let padded_len = len + pad_total;

        if self.needs(b) {
            let mut db = Tensor::zeros(&[c_out]);
            for row in gy.data().chunks_exact(c_out) {
                T::axpy(T::ONE, row, db.data_mut());
            }
            self.accum(b, db);
        }

        if self.needs(w) {
            let mut dwk = vec![T::ZERO; kernel * c_in * c_out];
            let mut xp = vec![T::ZERO; padded_len * c_in];
            for bi in 0..batch {
                xp.fill(T::ZERO);
                let xsrc = &self.value(x).data()[bi * len * c_in..(bi + 1) * len * c_in];
                xp[pad_left * c_in..(pad_left + len) * c_in].copy_from_slice(xsrc);
                let dyb = &gy.data()[bi * len * c_out..(bi + 1) * len * c_out];
                for k in 0..kernel {
                    let a = &xp[k * dilation * c_in..k * dilation * c_in + len * c_in];
                    T::gemm_tn(
                        len,
                        c_in,
                        c_out,
                        a,
                        dyb,
                        &mut dwk[k * c_in * c_out..(k + 1) * c_in * c_out],
                        true,
                    );
                }
            }
            let mut dw = Tensor::zeros(&ws);
            let dwd = dw.data_mut();
            for o in 0..c_out {
                for c in 0..c_in {
                    for k in 0..kernel {
                        dwd[(o * c_in + c) * kernel + k] = dwk[(k * c_in + c) * c_out + o];
                    }
                }
            }
            self.accum(w, dw);
        }

        if self.needs(x) {
            // weights per tap as [c_out][c_in] for the transposed pass
            let wdata = self.value(w).data();
            let mut wk_oc = vec![T::ZERO; kernel * c_out * c_in];
            for o in 0..c_out {
                for c in 0..c_in {
                    for k in 0..kernel {
                        wk_oc[(k * c_out + o) * c_in + c] = wdata[(o * c_in + c) * kernel + k];
                    }
                }
            }
            let mut dx = Tensor::zeros(&xs);
            let mut dxp = vec![T::ZERO; padded_len * c_in];
            for bi in 0..batch {
                dxp.fill(T::ZERO);
                let dyb = &gy.data()[bi * len * c_out..(bi + 1) * len * c_out];
                for k in 0..kernel {
                    let off = k * dilation * c_in;
                    T::gemm_nn(
                        len,
                        c_out,
                        c_in,
                        dyb,
                        &wk_oc[k * c_out * c_in..(k + 1) * c_out * c_in],
                        &mut dxp[off..off + len * c_in],
                        true,
                    );
                }
                let dst = &mut dx.data_mut()[bi * len * c_in..(bi + 1) * len * c_in];
                dst.copy_from_slice(&dxp[pad_left * c_in..(pad_left + len) * c_in]);
            }
            self.accum(x, dx);
        }
        Ok(())
    }

    fn layer_norm_backward(
        &mut self,
        id: usize,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        gy: &Tensor<T>,
    ) -> Result<()> {
        let Saved::Norm { mean, rstd } = &self.nodes[id].saved else {
            unreachable!("layer_norm saves statistics in training mode");
        };
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap();
        let rows = xv.numel() / d;
        let g = self.nodes[gain.0].value.data();
        let inv_d = T::ONE / T::from_usize(d);

        let mut dx = Tensor::zeros(xv.shape());
        let mut dgain = vec![T::ZERO; d];
        let mut dbias = vec![T::ZERO; d];
        for r in 0..rows {
            let xr = &xv.data()[r * d..(r + 1) * d];
            let gr = &gy.data()[r * d..(r + 1) * d];
            let (m, rs) = (mean[r], rstd[r]);
            let mut m1 = T::ZERO;
            let mut m2 = T::ZERO;
            for i in 0..d {
                let xh = (xr[i] - m) * rs;
                let dxh = gr[i] * g[i];
                m1 += dxh;
                m2 += dxh * xh;
                dgain[i] += gr[i] * xh;
                dbias[i] += gr[i];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            let dr = &mut dx.data_mut()[r * d..(r + 1) * d];
            for i in 0..d {
                let xh = (xr[i] - m) * rs;
                let dxh = gr[i] * g[i];
                dr[i] = rs * (dxh - m1 - xh * m2);
            }
        }
        self.accum(x, dx);
        self.accum(gain, Tensor::new(vec![d], dgain)?);
        self.accum(bias, Tensor::new(vec![d], dbias)?);
        Ok(())
    }

    fn batch_norm_backward(
        &mut self,
        id: usize,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        gy: &Tensor<T>,
    ) -> Result<()> {
        let Saved::BatchNorm { mean, rstd, .. } = &self.nodes[id].saved else {
            unreachable!("batch_norm saves statistics in training mode");
        };
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let c = shape[2];
        let n = shape[0] * shape[1];
        let g = self.nodes[scale.0].value.data();
        let inv_n = T::ONE / T::from_usize(n);

        let mut s1 = vec![T::ZERO; c]; // sum of dxh per channel
        let mut s2 = vec![T::ZERO; c]; // sum of dxh * xh per channel
        let mut dscale = vec![T::ZERO; c];
        let mut dshift = vec![T::ZERO; c];
        for (xrow, grow) in xv.data().chunks_exact(c).zip(gy.data().chunks_exact(c)) {
            for j in 0..c {
                let xh = (xrow[j] - mean[j]) * rstd[j];
                let dxh = grow[j] * g[j];
                s1[j] += dxh;
                s2[j] += dxh * xh;
                dscale[j] += grow[j] * xh;
                dshift[j] += grow[j];
            }
        }
        for j in 0..c {
            s1[j] *= inv_n;
            s2[j] *= inv_n;
        }
        let mut dx = Tensor::zeros(&shape);
        for (r, (xrow, grow)) in xv
            .data()
            .chunks_exact(c)
            .zip(gy.data().chunks_exact(c))
            .enumerate()
        {
            let dr = &mut dx.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                let xh = (xrow[j] - mean[j]) * rstd[j];
                let dxh = grow[j] * g[j];
                dr[j] = rstd[j] * (dxh - s1[j] - xh * s2[j]);
            }
        }
        self.accum(x, dx);
        self.accum(scale, Tensor::new(vec![c], dscale)?);
        self.accum(shift, Tensor::new(vec![c], dshift)?);
        Ok(())
    }

    fn attention_backward(
        &mut self,
        id: usize,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        gy: &Tensor<T>,
    ) -> Result<()> {
        let Saved::Attn(attn) = &self.nodes[id].saved else {
            unreachable!("attention saves probabilities in training mode");
        };
        let shape = self.nodes[q.0].value.shape().to_vec();
        let (b, heads, w, dk) = (shape[0], shape[1], shape[2], shape[3]);
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let plane = w * dk;

        let mut dq = Tensor::zeros(&shape);
        let mut dkt_full = Tensor::zeros(&shape);
        let mut dv = Tensor::zeros(&shape);
        let mut kt = vec![T::ZERO; dk * w];
        let mut vt = vec![T::ZERO; dk * w];
        let mut dp = vec![T::ZERO; w * w];
        let mut scratch_t = vec![T::ZERO; dk * w];
        for bi in 0..b {
            for h in 0..heads {
                let base = (bi * heads + h) * plane;
                let abase = (bi * heads + h) * w * w;
                let attn_sl = &attn.data()[abase..abase + w * w];
                let dy_sl = &gy.data()[base..base + plane];
                let q_sl = &self.nodes[q.0].value.data()[base..base + plane];
                let k_sl = &self.nodes[k.0].value.data()[base..base + plane];
                let v_sl = &self.nodes[v.0].value.data()[base..base + plane];

                // dV^T = dY^T @ attn, then transpose back
                T::gemm_tn(w, dk, w, dy_sl, attn_sl, &mut scratch_t, false);
                kernel::transpose(&scratch_t, dk, w, &mut dv.data_mut()[base..base + plane]);

                // dP = dY @ V^T
                kernel::transpose(v_sl, w, dk, &mut vt);
                T::gemm_nn(w, dk, w, dy_sl, &vt, &mut dp, false);

                // softmax jacobian per row, then fold in the score scale
                for i in 0..w {
                    let arow = &attn_sl[i * w..(i + 1) * w];
                    let prow = &mut dp[i * w..(i + 1) * w];
                    let s = T::dot(arow, prow);
                    for j in 0..w {
                        prow[j] = arow[j] * (prow[j] - s) * scale;
                    }
                }

                // dQ = dS @ K (dS already carries the scale)
                kernel::transpose(k_sl, w, dk, &mut kt);
                T::gemm_nt(w, w, dk, &dp, &kt, &mut dq.data_mut()[base..base + plane], false);

                // dK^T = Q^T @ dS, transpose back
                T::gemm_tn(w, dk, w, q_sl, &dp, &mut scratch_t, false);
                kernel::transpose(&scratch_t, dk, w, &mut dkt_full.data_mut()[base..base + plane]);
            }
        }
        self.accum(q, dq);
        self.accum(k, dkt_full);
        self.accum(v, dv);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::rand_uniform(shape, 1.0, rng)
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let mut g = Graph::<f64>::training();
        let i2 = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = g.matmul(i2, b, false).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = g.matmul(a, c, false).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::training();
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let want = oracle::matmul_oracle(3, 4, 2, a.data(), b.data());
        let an = g.constant(a);
        let bn = g.constant(b);
        let y = g.matmul(an, bn, false).unwrap();
        for (got, want) in g.value(y).data().iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::training();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn gelu_trivial_values() {
        let mut g = Graph::<f64>::training();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap());
        let y = g.gelu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_gradient_matches_finite_difference() {
        for &x0 in &[-1.0, 0.3, 2.0] {
            let mut g = Graph::<f64>::training();
            let x = g.leaf(Tensor::scalar(x0), true);
            let y = g.gelu(x);
            let s = g.sum_all(y);
            g.backward(s).unwrap();
            let analytic = g.grad(x).unwrap().data()[0];
            let fd = oracle::finite_difference(
                |p| {
                    let mut g = Graph::<f64>::training();
                    let x = g.leaf(Tensor::scalar(p[0]), true);
                    let y = g.gelu(x);
                    g.value(y).data()[0]
                },
                &[x0],
                1e-6,
            );
            assert!(
                oracle::max_rel_err(&[analytic], &fd) < 1e-6,
                "gelu'({x0}) analytic {analytic} vs fd {}",
                fd[0]
            );
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::training();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(vec![2], vec![f64::NEG_INFINITY, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);

        let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax(x).unwrap();
        let want = oracle::softmax_oracle(&[1.0, 2.0, 3.0]);
        for (got, want) in g.value(y).data().iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12);
        }

        let x = g.constant(Tensor::new(vec![2], vec![f64::NEG_INFINITY; 2]).unwrap());
        assert!(matches!(g.softmax(x), Err(Error::MaskedRow { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_is_2x() {
        let mut g = Graph::<f64>::training();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

        let mut g = Graph::<f64>::training();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_a_rank_error() {
        let mut g = Graph::<f64>::training();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        let y = g.neg(x);
        assert!(matches!(g.backward(y), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn log_domain_error() {
        let mut g = Graph::<f64>::training();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, -0.5]).unwrap());
        assert!(matches!(g.log(x), Err(Error::LogDomain { .. })));
    }

    #[test]
    fn broadcasting_matches_explicit_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // [2,3,4] * [4] and [2,3,4] + [3,4] and [2,1,4] + [2,3,1]
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let got = broadcast_binary(&a, &b, "t", |x, y| x * y).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for l in 0..4 {
                    let want = a.data()[(i * 3 + j) * 4 + l] * b.data()[l];
                    assert!((got.data()[(i * 3 + j) * 4 + l] - want).abs() < 1e-15);
                }
            }
        }

        let c = rand_tensor(&mut rng, &[2, 1, 4]);
        let d = rand_tensor(&mut rng, &[2, 3, 1]);
        let got = broadcast_binary(&c, &d, "t", |x, y| x + y).unwrap();
        assert_eq!(got.shape(), &[2, 3, 4]);
        for i in 0..2 {
            for j in 0..3 {
                for l in 0..4 {
                    let want = c.data()[i * 4 + l] + d.data()[i * 3 + j];
                    assert!((got.data()[(i * 3 + j) * 4 + l] - want).abs() < 1e-15);
                }
            }
        }

        let bad = broadcast_binary(&a, &rand_tensor(&mut rng, &[5]), "t", |x, _| x);
        assert!(bad.is_err());
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_dims() {
        let full = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_to_shape(&full, &[3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r = reduce_to_shape(&full, &[2, 1]);
        assert_eq!(r.data(), &[6.0, 15.0]);
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let mut g = Graph::<f64>::training();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn determinism_same_seed_same_forward() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let mut g1 = Graph::<f32>::training();
        let mut g2 = Graph::<f32>::training();
        let x1 = g1.leaf(Tensor::rand_uniform(&[4, 8], 1.0, &mut rng1), true);
        let x2 = g2.leaf(Tensor::rand_uniform(&[4, 8], 1.0, &mut rng2), true);
        let d1 = g1.dropout(x1, 0.3, &mut rng1).unwrap();
        let d2 = g2.dropout(x2, 0.3, &mut rng2).unwrap();
        assert_eq!(g1.value(d1).data(), g2.value(d2).data());
    }

    #[test]
    fn dropout_parameter_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::training();
        let x = g.constant(Tensor::full(&[100_000], 1.0));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());

        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "dropout mean {mean}");

        let z = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(g.value(z).data(), g.value(x).data());
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::training();
        let x = g.constant(rand_tensor(&mut rng, &[2, 3, 8]));
        let s = g.split_heads(x, 4).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 4, 3, 2]);
        let m = g.merge_heads(s).unwrap();
        assert_eq!(g.value(m).data(), g.value(x).data());
    }

    #[test]
    fn inference_graph_skips_saved_state_and_rejects_backward() {
        let mut g = Graph::<f64>::inference();
        let q = g.constant(Tensor::full(&[1, 1, 3, 2], 0.5));
        let y = g.attention(q, q, q, true).unwrap();
        assert!(g.attention_probs(y).is_none());
        let s = g.sum_all(y);
        assert!(g.backward(s).is_err());
    }
}
