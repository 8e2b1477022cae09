//! Neural network layers: parameter containers with deterministic
//! initialization, plus `bind`/`forward` pairs that stage them onto a tape.
//!
//! Every layer visits its parameters in a fixed order; `bind` creates graph
//! leaves in that same order, so optimizer state, checkpoints, and gradient
//! lists all line up by construction.

use crate::error::Result;
use crate::graph::{Graph, GraphMode, NodeId};
use crate::kernel::Real;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Uniform Kaiming bound for a layer with the given fan-in.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

// --- Linear ------------------------------------------------------------------

/// Fully connected layer; weight stored input-major as [inp, out].
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

impl<T: Real> Linear<T> {
    pub fn new(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Tensor::rand_uniform(&[inp, out], he_bound(inp), rng),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{name}.w"), &self.w);
        f(format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{name}.w"), &mut self.w);
        f(format!("{name}.b"), &mut self.b);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundLinear {
        let w = g.leaf(self.w.clone(), true);
        let b = g.leaf(self.b.clone(), true);
        ids.push(w);
        ids.push(b);
        BoundLinear { w, b }
    }
}

impl BoundLinear {
    /// x: [rows, inp] -> [rows, out]
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.w, false)?;
        g.add(y, self.b)
    }
}

// --- Conv1d --------------------------------------------------------------------

/// Dilated same-length 1-D convolution over [batch, len, c_in].
pub struct Conv1d<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub dilation: usize,
}

pub struct BoundConv1d {
    pub w: NodeId,
    pub b: NodeId,
    pub dilation: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv1d {
            w: Tensor::rand_uniform(&[c_out, c_in, kernel], he_bound(c_in * kernel), rng),
            b: Tensor::zeros(&[c_out]),
            dilation,
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{name}.w"), &self.w);
        f(format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{name}.w"), &mut self.w);
        f(format!("{name}.b"), &mut self.b);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundConv1d {
        let w = g.leaf(self.w.clone(), true);
        let b = g.leaf(self.b.clone(), true);
        ids.push(w);
        ids.push(b);
        BoundConv1d { w, b, dilation: self.dilation }
    }
}

impl BoundConv1d {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.conv1d(x, self.w, self.b, self.dilation)
    }
}

// --- BatchNorm ------------------------------------------------------------------

/// Per-channel batch normalization over [batch, len, c]. Training uses batch
/// statistics (saved on the node for running updates); evaluation folds the
/// running statistics into one affine map.
pub struct BatchNorm<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BoundBatchNorm<T> {
    pub scale: NodeId,
    pub shift: NodeId,
    eval_affine: Option<(Vec<T>, Vec<T>)>,
    eps: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            scale: Tensor::full(&[channels], T::ONE),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.shape()[0]
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{name}.scale"), &self.scale);
        f(format!("{name}.shift"), &self.shift);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{name}.scale"), &mut self.scale);
        f(format!("{name}.shift"), &mut self.shift);
    }

    pub fn visit_buffers(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{name}.running_mean"), &self.running_mean);
        f(format!("{name}.running_var"), &self.running_var);
    }

    pub fn visit_buffers_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{name}.running_mean"), &mut self.running_mean);
        f(format!("{name}.running_var"), &mut self.running_var);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundBatchNorm<T> {
        let scale = g.leaf(self.scale.clone(), true);
        let shift = g.leaf(self.shift.clone(), true);
        ids.push(scale);
        ids.push(shift);
        let eval_affine = if g.mode() == GraphMode::Inference {
            let c = self.channels();
            let eps = T::from_f64(self.eps);
            let mut a = Vec::with_capacity(c);
            let mut b = Vec::with_capacity(c);
            for j in 0..c {
                let rstd = T::ONE / (self.running_var.data()[j] + eps).sqrt();
                let aj = rstd * self.scale.data()[j];
                a.push(aj);
                b.push(self.shift.data()[j] - self.running_mean.data()[j] * aj);
            }
            Some((a, b))
        } else {
            None
        };
        BoundBatchNorm { scale, shift, eval_affine, eps: self.eps }
    }

    /// Fold the batch statistics a forward pass saved on `node` into the
    /// running estimates.
    pub fn update_running(&mut self, g: &Graph<T>, node: NodeId) {
        let Some((mean, var)) = g.batch_norm_stats(node) else {
            return;
        };
        let m = T::from_f64(self.momentum);
        let keep = T::ONE - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean.iter()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var.iter()) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Real> BoundBatchNorm<T> {
    /// Returns the output node, plus the normalization node itself in
    /// training mode so the caller can harvest batch statistics.
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        match &self.eval_affine {
            None => {
                let y = g.batch_norm(x, self.scale, self.shift, T::from_f64(self.eps))?;
                Ok((y, Some(y)))
            }
            Some((a, b)) => {
                let c = a.len();
                let an = g.constant(Tensor::new(vec![c], a.clone())?);
                let bn = g.constant(Tensor::new(vec![c], b.clone())?);
                let t = g.mul(x, an)?;
                let y = g.add(t, bn)?;
                Ok((y, None))
            }
        }
    }
}

// --- LayerNorm -----------------------------------------------------------------

pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

pub struct BoundLayerNorm {
    pub gain: NodeId,
    pub bias: NodeId,
    eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[d], T::ONE),
            bias: Tensor::zeros(&[d]),
            eps: 1e-5,
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{name}.gain"), &self.gain);
        f(format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{name}.gain"), &mut self.gain);
        f(format!("{name}.bias"), &mut self.bias);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundLayerNorm {
        let gain = g.leaf(self.gain.clone(), true);
        let bias = g.leaf(self.bias.clone(), true);
        ids.push(gain);
        ids.push(bias);
        BoundLayerNorm { gain, bias, eps: self.eps }
    }
}

impl BoundLayerNorm {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, self.gain, self.bias, T::from_f64(self.eps))
    }
}

// --- Multi-head attention ----------------------------------------------------

/// Multi-head self-attention with an optional diagonal mask that stops each
/// position from attending to itself.
pub struct Mha<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
    pub diag_mask: bool,
}

pub struct BoundMha {
    wq: BoundLinear,
    wk: BoundLinear,
    wv: BoundLinear,
    wo: BoundLinear,
    heads: usize,
    diag_mask: bool,
}

impl<T: Real> Mha<T> {
    pub fn new(d_model: usize, heads: usize, diag_mask: bool, rng: &mut ChaCha8Rng) -> Self {
        Mha {
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
            heads,
            diag_mask,
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.wq.visit(&format!("{name}.wq"), f);
        self.wk.visit(&format!("{name}.wk"), f);
        self.wv.visit(&format!("{name}.wv"), f);
        self.wo.visit(&format!("{name}.wo"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.wq.visit_mut(&format!("{name}.wq"), f);
        self.wk.visit_mut(&format!("{name}.wk"), f);
        self.wv.visit_mut(&format!("{name}.wv"), f);
        self.wo.visit_mut(&format!("{name}.wo"), f);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundMha {
        BoundMha {
            wq: self.wq.bind(g, ids),
            wk: self.wk.bind(g, ids),
            wv: self.wv.bind(g, ids),
            wo: self.wo.bind(g, ids),
            heads: self.heads,
            diag_mask: self.diag_mask,
        }
    }
}

impl BoundMha {
    /// x: [batch, w, d] -> ([batch, w, d], attention node)
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.value(x).shape().to_vec();
        let (b, w, d) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[b * w, d])?;
        let q = self.wq.forward(g, flat)?;
        let k = self.wk.forward(g, flat)?;
        let v = self.wv.forward(g, flat)?;
        let q = g.reshape(q, &[b, w, d])?;
        let k = g.reshape(k, &[b, w, d])?;
        let v = g.reshape(v, &[b, w, d])?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let att = g.attention(q, k, v, self.diag_mask)?;
        let merged = g.merge_heads(att)?;
        let flat = g.reshape(merged, &[b * w, d])?;
        let out = self.wo.forward(g, flat)?;
        let out = g.reshape(out, &[b, w, d])?;
        Ok((out, att))
    }
}

// --- Position-wise feed-forward ------------------------------------------------

pub struct Pffn<T> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

pub struct BoundPffn {
    w1: BoundLinear,
    w2: BoundLinear,
}

impl<T: Real> Pffn<T> {
    pub fn new(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Pffn {
            w1: Linear::new(d_model, d_ff, rng),
            w2: Linear::new(d_ff, d_model, rng),
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.w1.visit(&format!("{name}.w1"), f);
        self.w2.visit(&format!("{name}.w2"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.w1.visit_mut(&format!("{name}.w1"), f);
        self.w2.visit_mut(&format!("{name}.w2"), f);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundPffn {
        BoundPffn {
            w1: self.w1.bind(g, ids),
            w2: self.w2.bind(g, ids),
        }
    }
}

impl BoundPffn {
    /// x: [batch, w, d] -> [batch, w, d]
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        let (b, w, d) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[b * w, d])?;
        let h = self.w1.forward(g, flat)?;
        let h = g.gelu(h);
        let out = self.w2.forward(g, h)?;
        g.reshape(out, &[b, w, d])
    }
}

// --- Residual convolution unit ---------------------------------------------------

/// Convolution, GeLU, batch norm, plus a skip connection supplied by the
/// caller (identity for equal widths, a 1x1 projection otherwise).
pub struct ResUnit<T> {
    pub conv: Conv1d<T>,
    pub bn: BatchNorm<T>,
}

pub struct BoundResUnit<T> {
    conv: BoundConv1d,
    bn: BoundBatchNorm<T>,
}

impl<T: Real> ResUnit<T> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        ResUnit {
            conv: Conv1d::new(c_in, c_out, kernel, dilation, rng),
            bn: BatchNorm::new(c_out),
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.conv.visit(&format!("{name}.conv"), f);
        self.bn.visit(&format!("{name}.bn"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.conv.visit_mut(&format!("{name}.conv"), f);
        self.bn.visit_mut(&format!("{name}.bn"), f);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundResUnit<T> {
        BoundResUnit {
            conv: self.conv.bind(g, ids),
            bn: self.bn.bind(g, ids),
        }
    }
}

impl<T: Real> BoundResUnit<T> {
    /// Returns (main path before the skip add, bn stats node).
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let c = self.conv.forward(g, x)?;
        let a = g.gelu(c);
        self.bn.forward(g, a)
    }
}

// --- Transformer encoder layer -------------------------------------------------

/// Pre-norm encoder layer: x + Drop(MHA(LN(x))), then u + Drop(PFFN(LN(u))).
pub struct EncoderLayer<T> {
    pub ln1: LayerNorm<T>,
    pub mha: Mha<T>,
    pub ln2: LayerNorm<T>,
    pub pffn: Pffn<T>,
    pub dropout: f64,
}

pub struct BoundEncoderLayer<T> {
    ln1: BoundLayerNorm,
    mha: BoundMha,
    ln2: BoundLayerNorm,
    pffn: BoundPffn,
    dropout: f64,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> EncoderLayer<T> {
    pub fn new(
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        diag_mask: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(d_model),
            mha: Mha::new(d_model, heads, diag_mask, rng),
            ln2: LayerNorm::new(d_model),
            pffn: Pffn::new(d_model, d_ff, rng),
            dropout,
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.ln1.visit(&format!("{name}.ln1"), f);
        self.mha.visit(&format!("{name}.mha"), f);
        self.ln2.visit(&format!("{name}.ln2"), f);
        self.pffn.visit(&format!("{name}.pffn"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.ln1.visit_mut(&format!("{name}.ln1"), f);
        self.mha.visit_mut(&format!("{name}.mha"), f);
        self.ln2.visit_mut(&format!("{name}.ln2"), f);
        self.pffn.visit_mut(&format!("{name}.pffn"), f);
    }

    pub fn bind(&self, g: &mut Graph<T>, ids: &mut Vec<NodeId>) -> BoundEncoderLayer<T> {
        BoundEncoderLayer {
            ln1: self.ln1.bind(g, ids),
            mha: self.mha.bind(g, ids),
            ln2: self.ln2.bind(g, ids),
            pffn: self.pffn.bind(g, ids),
            dropout: self.dropout,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Real> BoundEncoderLayer<T> {
    /// Returns (output, attention node). `train` gates dropout.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, NodeId)> {
        let normed = self.ln1.forward(g, x)?;
        let (att_out, att) = self.mha.forward(g, normed)?;
        let att_out = if train && self.dropout > 0.0 {
            g.dropout(att_out, self.dropout, rng)?
        } else {
            att_out
        };
        let u = g.add(x, att_out)?;
        let normed = self.ln2.forward(g, u)?;
        let ff = self.pffn.forward(g, normed)?;
        let ff = if train && self.dropout > 0.0 {
            g.dropout(ff, self.dropout, rng)?
        } else {
            ff
        };
        let y = g.add(u, ff)?;
        Ok((y, att))
    }
}
