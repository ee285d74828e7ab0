//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Sequence tensors use the layout `[batch, channels, frames]`. Weight-shared
//! processing of several speakers is expressed by putting the speakers on the
//! batch axis. Every node records the op that produced it; `backward` walks
//! the tape once in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

const NORM_EPS: f64 = 1e-5;

enum Op<S> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchLinear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    FrameConv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        hop: usize,
    },
    OverlapAdd {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        hop: usize,
    },
    Depthwise {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<S>,
        rstd: Vec<S>,
        train: bool,
    },
    Gelu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Glu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulBroadcast {
        a: NodeId,
        b: NodeId,
    },
    ScaleChannels {
        x: NodeId,
        s: NodeId,
    },
    MulConst {
        x: NodeId,
        c: Vec<S>,
    },
    Scale {
        x: NodeId,
        c: S,
    },
    AvgPool {
        x: NodeId,
        p: usize,
    },
    Upsample {
        x: NodeId,
        p: usize,
    },
    RelAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        pos: Option<NodeId>,
        u: Option<NodeId>,
        vb: Option<NodeId>,
        heads: usize,
        probs: Vec<S>,
    },
    SpeakerAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<S>,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    ConcatBatch {
        parts: Vec<NodeId>,
    },
    SelectBatch {
        x: NodeId,
        idx: Vec<usize>,
    },
    SliceTime {
        x: NodeId,
        start: usize,
    },
    Reshape {
        x: NodeId,
    },
    SiSnr {
        est: NodeId,
        dval: Vec<S>,
    },
    WeightedSum {
        terms: Vec<(NodeId, S)>,
    },
    DotConst {
        x: NodeId,
        c: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    grad: bool,
    bn_stats: Option<(Vec<S>, Vec<S>)>,
}

/// Tape of nodes. Values are computed eagerly when a node is pushed.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    macs: u64,
    mac_scope: String,
    macs_by_scope: BTreeMap<String, u64>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn gelu_parts<S: Scalar>(v: S) -> (S, S) {
    let half = S::from_f64c(0.5);
    let inv_sqrt2 = S::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = S::from_f64c(0.398_942_280_401_432_7);
    let cdf = half * (S::one() + (v * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
    (v * cdf, cdf + v * pdf)
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
            mac_scope: String::new(),
            macs_by_scope: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulates performed by the forward ops pushed so far.
    /// Dense, convolutional and attention products count; pointwise ops,
    /// normalizations and softmax do not.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Label under which subsequent multiply-accumulates are attributed.
    pub fn set_mac_scope(&mut self, scope: &str) {
        scope.clone_into(&mut self.mac_scope);
    }

    pub fn mac_scope(&self) -> &str {
        &self.mac_scope
    }

    /// Multiply-accumulates per scope label; sums to [`Graph::macs`].
    pub fn macs_by_scope(&self) -> &BTreeMap<String, u64> {
        &self.macs_by_scope
    }

    fn count_macs(&mut self, n: u64) {
        self.macs += n;
        match self.macs_by_scope.get_mut(&self.mac_scope) {
            Some(v) => *v += n,
            None => {
                self.macs_by_scope.insert(self.mac_scope.clone(), n);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Batch mean and unbiased variance captured by a training-mode batch norm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<&(Vec<S>, Vec<S>)> {
        self.nodes[id].bn_stats.as_ref()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad,
            bn_stats: None,
        });
        self.nodes.len() - 1
    }

    fn g(&self, id: NodeId) -> bool {
        self.nodes[id].grad
    }

    fn d3(&self, id: NodeId) -> Result<(usize, usize, usize)> {
        self.nodes[id].value.dims3()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (parameters, or inputs under a gradient check).
    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// `y[b] = W x[b] + bias`, with `W: [Co, Ci]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (bs, ci, t) = self.d3(x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != ci {
            return shape_err(format!("linear: weight {:?} vs input channels {}", ws, ci));
        }
        let co = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err(format!("linear: bias {:?} vs {}", self.shape(b), co));
            }
        }
        let mut out = vec![S::zero(); bs * co * t];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bs {
                let o = &mut out[bi * co * t..(bi + 1) * co * t];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for c in 0..co {
                        o[c * t..(c + 1) * t].fill(bv[c]);
                    }
                }
                let beta = if b.is_some() { S::one() } else { S::zero() };
                S::gemm(
                    co,
                    ci,
                    t,
                    S::one(),
                    wv,
                    ci as isize,
                    1,
                    &xv[bi * ci * t..],
                    t as isize,
                    1,
                    beta,
                    o,
                    t as isize,
                    1,
                );
            }
        }
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.count_macs((bs * co * ci * t) as u64);
        Ok(self.push(Tensor::new(&[bs, co, t], out)?, Op::Linear { x, w, b }, grad))
    }

    /// Per-batch-item weights: `y[b] = W[b] x[b] + bias[b]`, `W: [B, Co, Ci]`.
    pub fn batch_linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (bs, ci, t) = self.d3(x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != bs || ws[2] != ci {
            return shape_err(format!("batch_linear: weight {:?} vs input [{bs},{ci},{t}]", ws));
        }
        let co = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [bs, co] {
                return shape_err(format!("batch_linear: bias {:?}", self.shape(b)));
            }
        }
        let mut out = vec![S::zero(); bs * co * t];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bs {
                let o = &mut out[bi * co * t..(bi + 1) * co * t];
                if let Some(b) = b {
                    let bv = &self.value(b).data()[bi * co..];
                    for c in 0..co {
                        o[c * t..(c + 1) * t].fill(bv[c]);
                    }
                }
                let beta = if b.is_some() { S::one() } else { S::zero() };
                S::gemm(
                    co,
                    ci,
                    t,
                    S::one(),
                    &wv[bi * co * ci..],
                    ci as isize,
                    1,
                    &xv[bi * ci * t..],
                    t as isize,
                    1,
                    beta,
                    o,
                    t as isize,
                    1,
                );
            }
        }
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.count_macs((bs * co * ci * t) as u64);
        Ok(self.push(Tensor::new(&[bs, co, t], out)?, Op::BatchLinear { x, w, b }, grad))
    }

    /// Strided framing convolution of a waveform `[B, 1, N]` with `W: [Co, L]`.
    pub fn frame_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        hop: usize,
    ) -> Result<NodeId> {
        let (bs, one, n) = self.d3(x)?;
        let ws = self.shape(w).to_vec();
        if one != 1 || ws.len() != 2 {
            return shape_err(format!("frame_conv: input {:?}, weight {:?}", self.shape(x), ws));
        }
        let (co, l) = (ws[0], ws[1]);
        if n < l || hop == 0 {
            return shape_err(format!("frame_conv: length {} shorter than kernel {}", n, l));
        }
        let t = (n - l) / hop + 1;
        let mut out = vec![S::zero(); bs * co * t];
        let mut unfold = vec![S::zero(); l * t];
        for bi in 0..bs {
            let xv = &self.value(x).data()[bi * n..(bi + 1) * n];
            fill_unfold(xv, l, hop, t, &mut unfold);
            let o = &mut out[bi * co * t..(bi + 1) * co * t];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for c in 0..co {
                    o[c * t..(c + 1) * t].fill(bv[c]);
                }
            }
            let beta = if b.is_some() { S::one() } else { S::zero() };
            S::gemm(
                co,
                l,
                t,
                S::one(),
                self.value(w).data(),
                l as isize,
                1,
                &unfold,
                t as isize,
                1,
                beta,
                o,
                t as isize,
                1,
            );
        }
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.count_macs((bs * co * l * t) as u64);
        Ok(self.push(Tensor::new(&[bs, co, t], out)?, Op::FrameConv { x, w, b, hop }, grad))
    }

    /// Transposed framing convolution: `[B, C, T]` with `W: [C, L]` to `[B, 1, (T-1)H + L]`.
    pub fn overlap_add(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        hop: usize,
    ) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != c {
            return shape_err(format!("overlap_add: weight {:?} vs channels {}", ws, c));
        }
        let l = ws[1];
        let n = (t - 1) * hop + l;
        let mut out = vec![S::zero(); bs * n];
        let mut z = vec![S::zero(); l * t];
        for bi in 0..bs {
            S::gemm(
                l,
                c,
                t,
                S::one(),
                self.value(w).data(),
                1,
                l as isize,
                &self.value(x).data()[bi * c * t..],
                t as isize,
                1,
                S::zero(),
                &mut z,
                t as isize,
                1,
            );
            let o = &mut out[bi * n..(bi + 1) * n];
            for ti in 0..t {
                for li in 0..l {
                    o[ti * hop + li] = o[ti * hop + li] + z[li * t + ti];
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data()[0];
                for v in o.iter_mut() {
                    *v = *v + bv;
                }
            }
        }
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.count_macs((bs * c * l * t) as u64);
        Ok(self.push(Tensor::new(&[bs, 1, n], out)?, Op::OverlapAdd { x, w, b, hop }, grad))
    }

    /// Depthwise temporal convolution, `W: [C, K]`, zero padding `pad` on both sides.
    pub fn depthwise(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != c {
            return shape_err(format!("depthwise: weight {:?} vs channels {}", ws, c));
        }
        let k = ws[1];
        if t + 2 * pad < k || stride == 0 {
            return shape_err(format!("depthwise: {} frames too short for kernel {}", t, k));
        }
        let to = (t + 2 * pad - k) / stride + 1;
        let mut out = vec![S::zero(); bs * c * to];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..bs {
            for ci in 0..c {
                let xr = &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let o = &mut out[(bi * c + ci) * to..(bi * c + ci + 1) * to];
                if let Some(b) = b {
                    o.fill(self.value(b).data()[ci]);
                }
                for kk in 0..k {
                    let wk = wv[ci * k + kk];
                    let (lo, hi) = valid_range(to, stride, kk, pad, t);
                    for (oi, ov) in o.iter_mut().enumerate().take(hi).skip(lo) {
                        *ov = *ov + wk * xr[oi * stride + kk - pad];
                    }
                }
            }
        }
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.count_macs((bs * c * k * to) as u64);
        Ok(self.push(
            Tensor::new(&[bs, c, to], out)?,
            Op::Depthwise {
                x,
                w,
                b,
                stride,
                pad,
            },
            grad,
        ))
    }

    /// Normalization over channels, independently per batch item and frame.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("layer_norm: affine shape vs {} channels", c));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![S::zero(); bs * c * t];
        let mut rstd = vec![S::zero(); bs * t];
        let mut out = vec![S::zero(); bs * c * t];
        let cf = S::from_usize(c).unwrap();
        let eps = S::from_f64c(NORM_EPS);
        let mut mean = vec![S::zero(); t];
        let mut var = vec![S::zero(); t];
        for bi in 0..bs {
            let xb = &xv[bi * c * t..(bi + 1) * c * t];
            mean.fill(S::zero());
            var.fill(S::zero());
            for ci in 0..c {
                for (m, &v) in mean.iter_mut().zip(&xb[ci * t..(ci + 1) * t]) {
                    *m = *m + v;
                }
            }
            for m in mean.iter_mut() {
                *m = *m / cf;
            }
            for ci in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(&xb[ci * t..(ci + 1) * t]).zip(&mean) {
                    let d = v - m;
                    *s = *s + d * d;
                }
            }
            let rs = &mut rstd[bi * t..(bi + 1) * t];
            for (r, &s) in rs.iter_mut().zip(&var) {
                *r = S::one() / (s / cf + eps).sqrt();
            }
            for ci in 0..c {
                let base = bi * c * t + ci * t;
                for ti in 0..t {
                    let h = (xb[ci * t + ti] - mean[ti]) * rs[ti];
                    xhat[base + ti] = h;
                    out[base + ti] = h * gv[ci] + bv[ci];
                }
            }
        }
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        Ok(self.push(
            Tensor::new(&[bs, c, t], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            grad,
        ))
    }

    /// Per-channel batch normalization. In training mode the statistics come
    /// from the batch and frame axes of `x`; otherwise from `running`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[S], &[S])>,
    ) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batch_norm: affine shape vs {} channels", c));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let eps = S::from_f64c(NORM_EPS);
        let count = bs * t;
        let nf = S::from_usize(count).unwrap();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        let train = running.is_none();
        match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return shape_err("batch_norm: running stats length".into());
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
            None => {
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for bi in 0..bs {
                        for &v in &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t] {
                            s += v.as_f64();
                        }
                    }
                    let m = s / count as f64;
                    let mut q = 0.0f64;
                    for bi in 0..bs {
                        for &v in &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t] {
                            let d = v.as_f64() - m;
                            q += d * d;
                        }
                    }
                    mean[ci] = S::from_f64c(m);
                    var[ci] = S::from_f64c(q) / nf;
                }
            }
        }
        let rstd: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); bs * c * t];
        let mut out = vec![S::zero(); bs * c * t];
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ti in 0..t {
                    let h = (xv[base + ti] - mean[ci]) * rstd[ci];
                    xhat[base + ti] = h;
                    out[base + ti] = h * gv[ci] + bv[ci];
                }
            }
        }
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        let id = self.push(
            Tensor::new(&[bs, c, t], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
            grad,
        );
        if train {
            let unbias = if count > 1 {
                S::from_f64c(count as f64 / (count - 1) as f64)
            } else {
                S::one()
            };
            let uvar = var.iter().map(|&v| v * unbias).collect();
            self.nodes[id].bn_stats = Some((mean, uvar));
        }
        Ok(id)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| gelu_parts(a).0);
        let grad = self.g(x);
        Ok(self.push(v, Op::Gelu { x }, grad))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid);
        let grad = self.g(x);
        Ok(self.push(v, Op::Sigmoid { x }, grad))
    }

    /// Gated linear unit over channels: first half is content, second half gate.
    pub fn glu(&mut self, x: NodeId) -> Result<NodeId> {
        let (bs, c2, t) = self.d3(x)?;
        if c2 % 2 != 0 {
            return shape_err(format!("glu: odd channel count {}", c2));
        }
        let c = c2 / 2;
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); bs * c * t];
        for bi in 0..bs {
            let a = &xv[bi * c2 * t..bi * c2 * t + c * t];
            let g = &xv[bi * c2 * t + c * t..(bi + 1) * c2 * t];
            for ((o, &av), &gv) in out[bi * c * t..(bi + 1) * c * t].iter_mut().zip(a).zip(g) {
                *o = av * sigmoid(gv);
            }
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::new(&[bs, c, t], out)?, Op::Glu { x }, grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let grad = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Add { a, b }, grad))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Mul { a, b }, grad))
    }

    /// `a: [B, C, T]` times `b: [1, C, T]` broadcast over the batch axis.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, c, t) = self.d3(a)?;
        if self.shape(b) != [1, c, t] {
            return shape_err(format!("mul_broadcast: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c * t) {
            for (o, &m) in chunk.iter_mut().zip(bv) {
                *o = *o * m;
            }
        }
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Tensor::new(&[bs, c, t], out)?, Op::MulBroadcast { a, b }, grad))
    }

    /// Per-channel scaling `x * s[c]` (LayerScale).
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        if self.shape(s) != [c] {
            return shape_err(format!("scale_channels: {:?} vs {} channels", self.shape(s), c));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..bs {
            for ci in 0..c {
                for o in &mut out[(bi * c + ci) * t..(bi * c + ci + 1) * t] {
                    *o = *o * sv[ci];
                }
            }
        }
        let grad = self.g(x) || self.g(s);
        Ok(self.push(Tensor::new(&[bs, c, t], out)?, Op::ScaleChannels { x, s }, grad))
    }

    /// Elementwise product with a constant tensor of the same size (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, c: Vec<S>) -> Result<NodeId> {
        if c.len() != self.value(x).len() {
            return shape_err("mul_const: length mismatch".into());
        }
        let data = self.value(x).data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let v = Tensor::new(self.shape(x), data)?;
        let grad = self.g(x);
        Ok(self.push(v, Op::MulConst { x, c }, grad))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let v = self.value(x).map(|a| a * c);
        let grad = self.g(x);
        Ok(self.push(v, Op::Scale { x, c }, grad))
    }

    /// Non-overlapping average pooling over frames.
    pub fn avg_pool(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        if p == 0 || t % p != 0 {
            return shape_err(format!("avg_pool: factor {} does not divide {} frames", p, t));
        }
        let to = t / p;
        let inv = S::one() / S::from_usize(p).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); bs * c * to];
        for (row, o) in out.chunks_mut(to).enumerate() {
            let xr = &xv[row * t..(row + 1) * t];
            for (oi, ov) in o.iter_mut().enumerate() {
                let s: S = xr[oi * p..(oi + 1) * p].iter().copied().sum();
                *ov = s * inv;
            }
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::new(&[bs, c, to], out)?, Op::AvgPool { x, p }, grad))
    }

    /// Nearest-neighbour upsampling over frames: each frame repeated `p` times.
    pub fn upsample(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        if p == 0 {
            return shape_err("upsample: zero factor".into());
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * t * p);
        for &v in xv {
            out.extend(std::iter::repeat_n(v, p));
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::new(&[bs, c, t * p], out)?, Op::Upsample { x, p }, grad))
    }

    /// Multi-head scaled dot-product self-attention over frames with an
    /// optional relative-position term.
    ///
    /// Scores are `((q_i + u) . k_j + (q_i + vb) . pos[i - j + T - 1]) / sqrt(d)`
    /// where `pos: [1, F, 2T - 1]` holds one embedding per relative offset.
    #[allow(clippy::too_many_arguments)]
    pub fn rel_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        pos: Option<NodeId>,
        u: Option<NodeId>,
        vb: Option<NodeId>,
        heads: usize,
    ) -> Result<NodeId> {
        let (bs, f, t) = self.d3(q)?;
        if self.shape(k) != [bs, f, t] || self.shape(v) != [bs, f, t] {
            return shape_err("rel_attention: q/k/v shape mismatch".into());
        }
        if heads == 0 || f % heads != 0 {
            return shape_err(format!("rel_attention: {} channels not divisible by {} heads", f, heads));
        }
        let m = 2 * t - 1;
        if let Some(p) = pos {
            if self.shape(p) != [1, f, m] {
                return shape_err(format!("rel_attention: pos {:?}", self.shape(p)));
            }
        }
        for b in [u, vb].into_iter().flatten() {
            if self.shape(b) != [f] {
                return shape_err("rel_attention: bias vector shape".into());
            }
        }
        let dh = f / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![S::zero(); bs * heads * t * t];
        let mut out = vec![S::zero(); bs * f * t];
        let mut qa = vec![S::zero(); dh * t];
        let mut cbuf = vec![S::zero(); t * m];
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let vv = self.value(v).data();
            for bi in 0..bs {
                for h in 0..heads {
                    let off = bi * f * t + h * dh * t;
                    let sc = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                    fill_biased(&mut qa, &qv[off..off + dh * t], u.map(|u| &self.value(u).data()[h * dh..]), t);
                    S::gemm(t, dh, t, S::one(), &qa, 1, t as isize, &kv[off..], t as isize, 1, S::zero(), sc, t as isize, 1);
                    if let Some(p) = pos {
                        fill_biased(&mut qa, &qv[off..off + dh * t], vb.map(|b| &self.value(b).data()[h * dh..]), t);
                        let pv = &self.value(p).data()[h * dh * m..];
                        S::gemm(t, dh, m, S::one(), &qa, 1, t as isize, pv, m as isize, 1, S::zero(), &mut cbuf, m as isize, 1);
                        for i in 0..t {
                            for j in 0..t {
                                sc[i * t + j] = sc[i * t + j] + cbuf[i * m + i + t - 1 - j];
                            }
                        }
                    }
                    for row in sc.chunks_mut(t) {
                        softmax_row(row, scale);
                    }
                    S::gemm(dh, t, t, S::one(), &vv[off..], t as isize, 1, sc, 1, t as isize, S::zero(), &mut out[off..off + dh * t], t as isize, 1);
                }
            }
        }
        let grad = [Some(q), Some(k), Some(v), pos, u, vb]
            .into_iter()
            .flatten()
            .any(|i| self.g(i));
        self.count_macs((bs * f * t * (2 * t + if pos.is_some() { m } else { 0 })) as u64);
        Ok(self.push(
            Tensor::new(&[bs, f, t], out)?,
            Op::RelAttention {
                q,
                k,
                v,
                pos,
                u,
                vb,
                heads,
                probs,
            },
            grad,
        ))
    }

    /// Multi-head attention across the batch (speaker) axis, independently per frame.
    pub fn speaker_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (j, f, t) = self.d3(q)?;
        if self.shape(k) != [j, f, t] || self.shape(v) != [j, f, t] {
            return shape_err("speaker_attention: q/k/v shape mismatch".into());
        }
        if heads == 0 || f % heads != 0 {
            return shape_err(format!("speaker_attention: {} channels vs {} heads", f, heads));
        }
        let dh = f / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![S::zero(); t * heads * j * j];
        let mut out = vec![S::zero(); j * f * t];
        let idx = |s: usize, c: usize, ti: usize| (s * f + c) * t + ti;
        for ti in 0..t {
            for h in 0..heads {
                let p = &mut probs[(ti * heads + h) * j * j..(ti * heads + h + 1) * j * j];
                for a in 0..j {
                    for b in 0..j {
                        let mut s = S::zero();
                        for d in h * dh..(h + 1) * dh {
                            s = s + qv[idx(a, d, ti)] * kv[idx(b, d, ti)];
                        }
                        p[a * j + b] = s;
                    }
                    softmax_row(&mut p[a * j..(a + 1) * j], scale);
                    for d in h * dh..(h + 1) * dh {
                        let mut s = S::zero();
                        for b in 0..j {
                            s = s + p[a * j + b] * vv[idx(b, d, ti)];
                        }
                        out[idx(a, d, ti)] = s;
                    }
                }
            }
        }
        let grad = self.g(q) || self.g(k) || self.g(v);
        self.count_macs((2 * t * f * j * j) as u64);
        Ok(self.push(
            Tensor::new(&[j, f, t], out)?,
            Op::SpeakerAttention { q, k, v, heads, probs },
            grad,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (bs, _, t) = self.d3(parts[0])?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (b2, c2, t2) = self.d3(p)?;
            if b2 != bs || t2 != t {
                return shape_err("concat_channels: batch/frame mismatch".into());
            }
            chans.push(c2);
        }
        let ctot: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(bs * ctot * t);
        for bi in 0..bs {
            for (&p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[bi * c * t..(bi + 1) * c * t]);
            }
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(
            Tensor::new(&[bs, ctot, t], out)?,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            grad,
        ))
    }

    pub fn concat_batch(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (_, c, t) = self.d3(parts[0])?;
        let mut out = Vec::new();
        let mut total = 0;
        for &p in parts {
            let (b2, c2, t2) = self.d3(p)?;
            if c2 != c || t2 != t {
                return shape_err("concat_batch: channel/frame mismatch".into());
            }
            total += b2;
            out.extend_from_slice(self.value(p).data());
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(
            Tensor::new(&[total, c, t], out)?,
            Op::ConcatBatch {
                parts: parts.to_vec(),
            },
            grad,
        ))
    }

    /// Gather batch items by index (also used for speaker permutations).
    pub fn select_batch(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        if idx.iter().any(|&i| i >= bs) {
            return shape_err(format!("select_batch: index out of range for batch {}", bs));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c * t);
        for &i in idx {
            out.extend_from_slice(&xv[i * c * t..(i + 1) * c * t]);
        }
        let grad = self.g(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), c, t], out)?,
            Op::SelectBatch {
                x,
                idx: idx.to_vec(),
            },
            grad,
        ))
    }

    pub fn slice_time(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (bs, c, t) = self.d3(x)?;
        if start + len > t {
            return shape_err(format!("slice_time: [{}, {}) outside {} frames", start, start + len, t));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * len);
        for row in xv.chunks(t) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::new(&[bs, c, len], out)?, Op::SliceTime { x, start }, grad))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshaped(shape)?;
        let grad = self.g(x);
        Ok(self.push(v, Op::Reshape { x }, grad))
    }

    /// Clipped scale-invariant SNR (dB) of `est` against a constant reference.
    /// `est` is flattened; the result is a one-element tensor.
    pub fn si_snr(&mut self, est: NodeId, reference: &[f64], tau: f64, eps: f64) -> Result<NodeId> {
        let e = self.value(est).to_f64_vec();
        let (val, grad) = crate::objectives::si_snr_with_grad(reference, &e, tau, eps)?;
        let dval = grad.into_iter().map(S::from_f64c).collect();
        let g = self.g(est);
        Ok(self.push(Tensor::scalar(S::from_f64c(val)), Op::SiSnr { est, dval }, g))
    }

    /// `sum_i c_i * x_i` over one-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, S)]) -> Result<NodeId> {
        let mut acc = S::zero();
        for &(id, c) in terms {
            if self.value(id).len() != 1 {
                return shape_err("weighted_sum: terms must be scalars".into());
            }
            acc = acc + c * self.value(id).data()[0];
        }
        let grad = terms.iter().any(|&(id, _)| self.g(id));
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            grad,
        ))
    }

    /// `sum(x * c)` for a constant `c`, a convenient scalar probe for gradient checks.
    pub fn dot_const(&mut self, x: NodeId, c: Vec<S>) -> Result<NodeId> {
        if c.len() != self.value(x).len() {
            return shape_err("dot_const: length mismatch".into());
        }
        let s = self.value(x).data().iter().zip(&c).map(|(&a, &b)| a * b).sum();
        let grad = self.g(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, c }, grad))
    }

    /// Backpropagate from a one-element root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return shape_err("backward: root must be a scalar".into());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.shape(root), S::one()));
        for i in (0..=root).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gy) = hi[0].as_ref() else { continue };
            self.backprop_node(i, gy.data(), lo);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, lo: &'a mut [Option<Tensor<S>>], id: NodeId) -> Option<&'a mut [S]> {
        if !self.nodes[id].grad {
            return None;
        }
        let slot = &mut lo[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(id)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, i: NodeId, gy: &[S], lo: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (bs, ci, t) = self.d3(*x).unwrap();
                let co = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dx) = self.acc(lo, *x) {
                    for bi in 0..bs {
                        S::gemm(ci, co, t, S::one(), wv, 1, ci as isize, &gy[bi * co * t..], t as isize, 1, S::one(), &mut dx[bi * ci * t..(bi + 1) * ci * t], t as isize, 1);
                    }
                }
                if let Some(dw) = self.acc(lo, *w) {
                    for bi in 0..bs {
                        S::gemm(co, t, ci, S::one(), &gy[bi * co * t..], t as isize, 1, &xv[bi * ci * t..], 1, t as isize, S::one(), dw, ci as isize, 1);
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(lo, *b) {
                        for bi in 0..bs {
                            for (c, d) in db.iter_mut().enumerate() {
                                *d = *d + gy[(bi * co + c) * t..(bi * co + c + 1) * t].iter().copied().sum();
                            }
                        }
                    }
                }
            }
            Op::BatchLinear { x, w, b } => {
                let (bs, ci, t) = self.d3(*x).unwrap();
                let co = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dx) = self.acc(lo, *x) {
                    for bi in 0..bs {
                        S::gemm(ci, co, t, S::one(), &wv[bi * co * ci..], 1, ci as isize, &gy[bi * co * t..], t as isize, 1, S::one(), &mut dx[bi * ci * t..(bi + 1) * ci * t], t as isize, 1);
                    }
                }
                if let Some(dw) = self.acc(lo, *w) {
                    for bi in 0..bs {
                        S::gemm(co, t, ci, S::one(), &gy[bi * co * t..], t as isize, 1, &xv[bi * ci * t..], 1, t as isize, S::one(), &mut dw[bi * co * ci..(bi + 1) * co * ci], ci as isize, 1);
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(lo, *b) {
                        for bi in 0..bs {
                            for c in 0..co {
                                db[bi * co + c] = db[bi * co + c] + gy[(bi * co + c) * t..(bi * co + c + 1) * t].iter().copied().sum();
                            }
                        }
                    }
                }
            }
            Op::FrameConv { x, w, b, hop } => {
                let (bs, _, n) = self.d3(*x).unwrap();
                let (co, l) = (self.shape(*w)[0], self.shape(*w)[1]);
                let t = (n - l) / hop + 1;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut buf = vec![S::zero(); l * t];
                if self.nodes[*w].grad {
                    let dw = self.acc(lo, *w).unwrap();
                    for bi in 0..bs {
                        fill_unfold(&xv[bi * n..(bi + 1) * n], l, *hop, t, &mut buf);
                        S::gemm(co, t, l, S::one(), &gy[bi * co * t..], t as isize, 1, &buf, 1, t as isize, S::one(), dw, l as isize, 1);
                    }
                }
                if let Some(dx) = self.acc(lo, *x) {
                    for bi in 0..bs {
                        S::gemm(l, co, t, S::one(), wv, 1, l as isize, &gy[bi * co * t..], t as isize, 1, S::zero(), &mut buf, t as isize, 1);
                        let d = &mut dx[bi * n..(bi + 1) * n];
                        for li in 0..l {
                            for ti in 0..t {
                                d[ti * hop + li] = d[ti * hop + li] + buf[li * t + ti];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(lo, *b) {
                        for bi in 0..bs {
                            for (c, d) in db.iter_mut().enumerate() {
                                *d = *d + gy[(bi * co + c) * t..(bi * co + c + 1) * t].iter().copied().sum();
                            }
                        }
                    }
                }
            }
            Op::OverlapAdd { x, w, b, hop } => {
                let (bs, c, t) = self.d3(*x).unwrap();
                let l = self.shape(*w)[1];
                let n = (t - 1) * hop + l;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need = self.nodes[*x].grad || self.nodes[*w].grad;
                let mut dz = vec![S::zero(); l * t];
                for bi in 0..bs {
                    if !need {
                        break;
                    }
                    let go = &gy[bi * n..(bi + 1) * n];
                    for li in 0..l {
                        for ti in 0..t {
                            dz[li * t + ti] = go[ti * hop + li];
                        }
                    }
                    if let Some(dx) = self.acc(lo, *x) {
                        S::gemm(c, l, t, S::one(), wv, l as isize, 1, &dz, t as isize, 1, S::one(), &mut dx[bi * c * t..(bi + 1) * c * t], t as isize, 1);
                    }
                    if let Some(dw) = self.acc(lo, *w) {
                        S::gemm(c, t, l, S::one(), &xv[bi * c * t..], t as isize, 1, &dz, 1, t as isize, S::one(), dw, l as isize, 1);
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(lo, *b) {
                        db[0] = db[0] + gy.iter().copied().sum();
                    }
                }
            }
            Op::Depthwise { x, w, b, stride, pad } => {
                let (bs, c, t) = self.d3(*x).unwrap();
                let k = self.shape(*w)[1];
                let to = node.value.shape()[2];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dx) = self.acc(lo, *x) {
                    for bi in 0..bs {
                        for ci in 0..c {
                            let g = &gy[(bi * c + ci) * to..(bi * c + ci + 1) * to];
                            let d = &mut dx[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                            for kk in 0..k {
                                let wk = wv[ci * k + kk];
                                let (lo_, hi_) = valid_range(to, *stride, kk, *pad, t);
                                for (oi, &gv) in g.iter().enumerate().take(hi_).skip(lo_) {
                                    let xi = oi * stride + kk - pad;
                                    d[xi] = d[xi] + wk * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.acc(lo, *w) {
                    for bi in 0..bs {
                        for ci in 0..c {
                            let g = &gy[(bi * c + ci) * to..(bi * c + ci + 1) * to];
                            let xr = &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                            for kk in 0..k {
                                let (lo_, hi_) = valid_range(to, *stride, kk, *pad, t);
                                let mut s = S::zero();
                                for (oi, &gv) in g.iter().enumerate().take(hi_).skip(lo_) {
                                    s = s + gv * xr[oi * stride + kk - pad];
                                }
                                dw[ci * k + kk] = dw[ci * k + kk] + s;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(lo, *b) {
                        for bi in 0..bs {
                            for (ci, d) in db.iter_mut().enumerate() {
                                *d = *d + gy[(bi * c + ci) * to..(bi * c + ci + 1) * to].iter().copied().sum();
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (bs, c, t) = self.d3(*x).unwrap();
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.acc(lo, *gamma) {
                    for bi in 0..bs {
                        for (ci, d) in dg.iter_mut().enumerate() {
                            let base = (bi * c + ci) * t;
                            *d = *d + (0..t).map(|ti| gy[base + ti] * xhat[base + ti]).sum();
                        }
                    }
                }
                if let Some(db) = self.acc(lo, *beta) {
                    for bi in 0..bs {
                        for (ci, d) in db.iter_mut().enumerate() {
                            let base = (bi * c + ci) * t;
                            *d = *d + gy[base..base + t].iter().copied().sum();
                        }
                    }
                }
                if let Some(dx) = self.acc(lo, *x) {
                    let cf = S::from_usize(c).unwrap();
                    let mut m1 = vec![S::zero(); t];
                    let mut m2 = vec![S::zero(); t];
                    for bi in 0..bs {
                        m1.fill(S::zero());
                        m2.fill(S::zero());
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                let dh = gy[base + ti] * gv[ci];
                                m1[ti] = m1[ti] + dh;
                                m2[ti] = m2[ti] + dh * xhat[base + ti];
                            }
                        }
                        for ti in 0..t {
                            m1[ti] = m1[ti] / cf;
                            m2[ti] = m2[ti] / cf;
                        }
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                let dh = gy[base + ti] * gv[ci];
                                dx[base + ti] = dx[base + ti]
                                    + rstd[bi * t + ti] * (dh - m1[ti] - xhat[base + ti] * m2[ti]);
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let (bs, c, t) = self.d3(*x).unwrap();
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for bi in 0..bs {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ti in 0..t {
                            sum_g[ci] = sum_g[ci] + gy[base + ti];
                            sum_gx[ci] = sum_gx[ci] + gy[base + ti] * xhat[base + ti];
                        }
                    }
                }
                if let Some(dg) = self.acc(lo, *gamma) {
                    for (d, &s) in dg.iter_mut().zip(&sum_gx) {
                        *d = *d + s;
                    }
                }
                if let Some(db) = self.acc(lo, *beta) {
                    for (d, &s) in db.iter_mut().zip(&sum_g) {
                        *d = *d + s;
                    }
                }
                if let Some(dx) = self.acc(lo, *x) {
                    let nf = S::from_usize(bs * t).unwrap();
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            let k = gv[ci] * rstd[ci];
                            for ti in 0..t {
                                let v = if *train {
                                    gy[base + ti] - sum_g[ci] / nf - xhat[base + ti] * sum_gx[ci] / nf
                                } else {
                                    gy[base + ti]
                                };
                                dx[base + ti] = dx[base + ti] + k * v;
                            }
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(lo, *x) {
                    for ((d, &v), &g) in dx.iter_mut().zip(xv).zip(gy) {
                        *d = *d + g * gelu_parts(v).1;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yv = node.value.data();
                if let Some(dx) = self.acc(lo, *x) {
                    for ((d, &y), &g) in dx.iter_mut().zip(yv).zip(gy) {
                        *d = *d + g * y * (S::one() - y);
                    }
                }
            }
            Op::Glu { x } => {
                let (bs, c2, t) = self.d3(*x).unwrap();
                let c = c2 / 2;
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(lo, *x) {
                    for bi in 0..bs {
                        for e in 0..c * t {
                            let a = xv[bi * c2 * t + e];
                            let s = sigmoid(xv[bi * c2 * t + c * t + e]);
                            let g = gy[bi * c * t + e];
                            dx[bi * c2 * t + e] = dx[bi * c2 * t + e] + g * s;
                            dx[bi * c2 * t + c * t + e] =
                                dx[bi * c2 * t + c * t + e] + g * a * s * (S::one() - s);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(d) = self.acc(lo, id) {
                        for (dv, &g) in d.iter_mut().zip(gy) {
                            *dv = *dv + g;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (id, other) in [(*a, *b), (*b, *a)] {
                    let ov = self.value(other).data();
                    if let Some(d) = self.acc(lo, id) {
                        for ((dv, &g), &o) in d.iter_mut().zip(gy).zip(ov) {
                            *dv = *dv + g * o;
                        }
                    }
                }
            }
            Op::MulBroadcast { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ct = bv.len();
                if let Some(da) = self.acc(lo, *a) {
                    for (e, (dv, &g)) in da.iter_mut().zip(gy).enumerate() {
                        *dv = *dv + g * bv[e % ct];
                    }
                }
                if let Some(db) = self.acc(lo, *b) {
                    for (e, (&g, &x)) in gy.iter().zip(av).enumerate() {
                        db[e % ct] = db[e % ct] + g * x;
                    }
                }
            }
            Op::ScaleChannels { x, s } => {
                let (bs, c, t) = self.d3(*x).unwrap();
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if let Some(dx) = self.acc(lo, *x) {
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                dx[base + ti] = dx[base + ti] + gy[base + ti] * sv[ci];
                            }
                        }
                    }
                }
                if let Some(ds) = self.acc(lo, *s) {
                    for bi in 0..bs {
                        for (ci, d) in ds.iter_mut().enumerate() {
                            let base = (bi * c + ci) * t;
                            *d = *d + (0..t).map(|ti| gy[base + ti] * xv[base + ti]).sum();
                        }
                    }
                }
            }
            Op::MulConst { x, c } => {
                if let Some(dx) = self.acc(lo, *x) {
                    for ((d, &g), &m) in dx.iter_mut().zip(gy).zip(c) {
                        *d = *d + g * m;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.acc(lo, *x) {
                    for (d, &g) in dx.iter_mut().zip(gy) {
                        *d = *d + g * *c;
                    }
                }
            }
            Op::AvgPool { x, p } => {
                let t = self.shape(*x)[2];
                let to = t / p;
                let inv = S::one() / S::from_usize(*p).unwrap();
                if let Some(dx) = self.acc(lo, *x) {
                    for (row, d) in dx.chunks_mut(t).enumerate() {
                        for (xi, dv) in d.iter_mut().enumerate() {
                            *dv = *dv + gy[row * to + xi / p] * inv;
                        }
                    }
                }
            }
            Op::Upsample { x, p } => {
                if let Some(dx) = self.acc(lo, *x) {
                    for (d, g) in dx.iter_mut().zip(gy.chunks(*p)) {
                        *d = *d + g.iter().copied().sum();
                    }
                }
            }
            Op::RelAttention { q, k, v, pos, u, vb, heads, probs } => {
                self.backprop_rel_attention(gy, lo, [*q, *k, *v], *pos, *u, *vb, *heads, probs);
            }
            Op::SpeakerAttention { q, k, v, heads, probs } => {
                let (j, f, t) = self.d3(*q).unwrap();
                let dh = f / heads;
                let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let idx = |s: usize, c: usize, ti: usize| (s * f + c) * t + ti;
                let mut dq = vec![S::zero(); j * f * t];
                let mut dk = vec![S::zero(); j * f * t];
                let mut dv = vec![S::zero(); j * f * t];
                let mut dp = vec![S::zero(); j];
                for ti in 0..t {
                    for h in 0..*heads {
                        let p = &probs[(ti * heads + h) * j * j..(ti * heads + h + 1) * j * j];
                        for a in 0..j {
                            for b in 0..j {
                                let mut s = S::zero();
                                for d in h * dh..(h + 1) * dh {
                                    let g = gy[idx(a, d, ti)];
                                    s = s + g * vv[idx(b, d, ti)];
                                    dv[idx(b, d, ti)] = dv[idx(b, d, ti)] + p[a * j + b] * g;
                                }
                                dp[b] = s;
                            }
                            let dot: S = (0..j).map(|b| p[a * j + b] * dp[b]).sum();
                            for b in 0..j {
                                let ds = p[a * j + b] * (dp[b] - dot) * scale;
                                for d in h * dh..(h + 1) * dh {
                                    dq[idx(a, d, ti)] = dq[idx(a, d, ti)] + ds * kv[idx(b, d, ti)];
                                    dk[idx(b, d, ti)] = dk[idx(b, d, ti)] + ds * qv[idx(a, d, ti)];
                                }
                            }
                        }
                    }
                }
                for (id, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = self.acc(lo, id) {
                        for (a, b) in d.iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                }
            }
            Op::ConcatChannels { parts } => {
                let (bs, ctot, t) = node.value.dims3().unwrap();
                let mut coff = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(d) = self.acc(lo, p) {
                        for bi in 0..bs {
                            let src = &gy[(bi * ctot + coff) * t..(bi * ctot + coff + c) * t];
                            for (a, &b) in d[bi * c * t..(bi + 1) * c * t].iter_mut().zip(src) {
                                *a = *a + b;
                            }
                        }
                    }
                    coff += c;
                }
            }
            Op::ConcatBatch { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.acc(lo, p) {
                        for (a, &b) in d.iter_mut().zip(&gy[off..off + n]) {
                            *a = *a + b;
                        }
                    }
                    off += n;
                }
            }
            Op::SelectBatch { x, idx } => {
                let (_, c, t) = self.d3(*x).unwrap();
                let ct = c * t;
                if let Some(d) = self.acc(lo, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        for (a, &b) in d[i * ct..(i + 1) * ct].iter_mut().zip(&gy[o * ct..(o + 1) * ct]) {
                            *a = *a + b;
                        }
                    }
                }
            }
            Op::SliceTime { x, start } => {
                let t = self.shape(*x)[2];
                let len = node.value.shape()[2];
                if let Some(d) = self.acc(lo, *x) {
                    for (row, g) in d.chunks_mut(t).zip(gy.chunks(len)) {
                        for (a, &b) in row[*start..start + len].iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(d) = self.acc(lo, *x) {
                    for (a, &b) in d.iter_mut().zip(gy) {
                        *a = *a + b;
                    }
                }
            }
            Op::SiSnr { est, dval } => {
                let g = gy[0];
                if let Some(d) = self.acc(lo, *est) {
                    for (a, &b) in d.iter_mut().zip(dval) {
                        *a = *a + g * b;
                    }
                }
            }
            Op::WeightedSum { terms } => {
                for &(id, c) in terms {
                    if let Some(d) = self.acc(lo, id) {
                        d[0] = d[0] + gy[0] * c;
                    }
                }
            }
            Op::DotConst { x, c } => {
                if let Some(d) = self.acc(lo, *x) {
                    for (a, &b) in d.iter_mut().zip(c) {
                        *a = *a + gy[0] * b;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_rel_attention(
        &self,
        gy: &[S],
        lo: &mut [Option<Tensor<S>>],
        qkv: [NodeId; 3],
        pos: Option<NodeId>,
        u: Option<NodeId>,
        vb: Option<NodeId>,
        heads: usize,
        probs: &[S],
    ) {
        let [q, k, v] = qkv;
        let (bs, f, t) = self.d3(q).unwrap();
        let dh = f / heads;
        let m = 2 * t - 1;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut dq = vec![S::zero(); bs * f * t];
        let mut dk = vec![S::zero(); bs * f * t];
        let mut dv = vec![S::zero(); bs * f * t];
        let mut du = vec![S::zero(); f];
        let mut dvb = vec![S::zero(); f];
        let mut dpos = vec![S::zero(); f * m];
        let mut ds = vec![S::zero(); t * t];
        let mut qa = vec![S::zero(); dh * t];
        let mut dqa = vec![S::zero(); dh * t];
        let mut dc = vec![S::zero(); t * m];
        for bi in 0..bs {
            for h in 0..heads {
                let off = bi * f * t + h * dh * t;
                let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                let go = &gy[off..off + dh * t];
                S::gemm(dh, t, t, S::one(), go, t as isize, 1, p, t as isize, 1, S::one(), &mut dv[off..off + dh * t], t as isize, 1);
                S::gemm(t, dh, t, S::one(), go, 1, t as isize, &vv[off..], t as isize, 1, S::zero(), &mut ds, t as isize, 1);
                for (drow, prow) in ds.chunks_mut(t).zip(p.chunks(t)) {
                    let dot: S = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                // content term
                fill_biased(&mut qa, &qv[off..off + dh * t], u.map(|u| &self.value(u).data()[h * dh..]), t);
                S::gemm(dh, t, t, S::one(), &kv[off..], t as isize, 1, &ds, 1, t as isize, S::zero(), &mut dqa, t as isize, 1);
                S::gemm(dh, t, t, S::one(), &qa, t as isize, 1, &ds, t as isize, 1, S::one(), &mut dk[off..off + dh * t], t as isize, 1);
                for (d, &g) in dq[off..off + dh * t].iter_mut().zip(&dqa) {
                    *d = *d + g;
                }
                for (d, row) in du[h * dh..(h + 1) * dh].iter_mut().zip(dqa.chunks(t)) {
                    *d = *d + row.iter().copied().sum();
                }
                if let Some(pn) = pos {
                    let pv = &self.value(pn).data()[h * dh * m..];
                    dc.fill(S::zero());
                    for i in 0..t {
                        for j in 0..t {
                            dc[i * m + i + t - 1 - j] = ds[i * t + j];
                        }
                    }
                    fill_biased(&mut qa, &qv[off..off + dh * t], vb.map(|b| &self.value(b).data()[h * dh..]), t);
                    S::gemm(dh, m, t, S::one(), pv, m as isize, 1, &dc, 1, m as isize, S::zero(), &mut dqa, t as isize, 1);
                    S::gemm(dh, t, m, S::one(), &qa, t as isize, 1, &dc, m as isize, 1, S::one(), &mut dpos[h * dh * m..(h + 1) * dh * m], m as isize, 1);
                    for (d, &g) in dq[off..off + dh * t].iter_mut().zip(&dqa) {
                        *d = *d + g;
                    }
                    for (d, row) in dvb[h * dh..(h + 1) * dh].iter_mut().zip(dqa.chunks(t)) {
                        *d = *d + row.iter().copied().sum();
                    }
                }
            }
        }
        let mut pairs: Vec<(NodeId, Vec<S>)> = vec![(q, dq), (k, dk), (v, dv)];
        if let Some(p) = pos {
            pairs.push((p, dpos));
        }
        if let Some(u) = u {
            pairs.push((u, du));
        }
        if let Some(b) = vb {
            pairs.push((b, dvb));
        }
        for (id, src) in pairs {
            if let Some(d) = self.acc(lo, id) {
                for (a, b) in d.iter_mut().zip(src) {
                    *a = *a + b;
                }
            }
        }
    }
}

/// Output index range `[lo, hi)` for which `o * stride + kk - pad` lands inside `[0, t)`.
fn valid_range(to: usize, stride: usize, kk: usize, pad: usize, t: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // o*stride + kk - pad <= t - 1
    let hi = if t + pad < kk + 1 {
        0
    } else {
        ((t + pad - kk - 1) / stride + 1).min(to)
    };
    (lo.min(hi), hi)
}

fn fill_unfold<S: Scalar>(x: &[S], l: usize, hop: usize, t: usize, out: &mut [S]) {
    for li in 0..l {
        for ti in 0..t {
            out[li * t + ti] = x[ti * hop + li];
        }
    }
}

fn fill_biased<S: Scalar>(dst: &mut [S], src: &[S], bias: Option<&[S]>, t: usize) {
    dst.copy_from_slice(src);
    if let Some(b) = bias {
        for (row, &bv) in dst.chunks_mut(t).zip(b) {
            for v in row {
                *v = *v + bv;
            }
        }
    }
}

fn softmax_row<S: Scalar>(row: &mut [S], scale: S) {
    let mut mx = S::neg_infinity();
    for v in row.iter_mut() {
        *v = *v * scale;
        if *v > mx {
            mx = *v;
        }
    }
    let mut s = S::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Compare analytic gradients of `sum(out * c)` against central differences
    /// for every leaf produced by `inputs`.
    fn check<F>(seed: u64, inputs: &[Vec<usize>], build: F)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<Tensor<f64>> = inputs.iter().map(|s| rand_t(&mut rng, s)).collect();
        let eval = |vals: &[Tensor<f64>], c: Option<&[f64]>| -> (f64, Vec<f64>, Option<Vec<Tensor<f64>>>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf(v.clone())).collect();
            let out = build(&mut g, &ids);
            let ov = g.value(out).data().to_vec();
            match c {
                None => (0.0, ov, None),
                Some(c) => {
                    let root = g.dot_const(out, c.to_vec()).unwrap();
                    let mut grads = g.backward(root).unwrap();
                    let gs = ids
                        .iter()
                        .zip(vals)
                        .map(|(&i, v)| grads.take(i).unwrap_or_else(|| Tensor::zeros(v.shape())))
                        .collect();
                    (g.value(root).data()[0], ov, Some(gs))
                }
            }
        };
        let (_, out0, _) = eval(&vals, None);
        let c: Vec<f64> = (0..out0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, _, grads) = eval(&vals, Some(&c));
        let grads = grads.unwrap();
        let h = 1e-5;
        for (li, v) in vals.iter().enumerate() {
            for e in 0..v.len() {
                let mut plus = vals.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = vals.clone();
                minus[li].data_mut()[e] -= h;
                let fp = eval(&plus, Some(&c)).0;
                let fm = eval(&minus, Some(&c)).0;
                let num = (fp - fm) / (2.0 * h);
                let ana = grads[li].data()[e];
                let tol = 1e-6 + 1e-5 * num.abs().max(ana.abs());
                assert!(
                    (num - ana).abs() < tol,
                    "input {li} element {e}: numeric {num} analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn grad_linear() {
        check(1, &[vec![2, 3, 5], vec![4, 3], vec![4]], |g, i| g.linear(i[0], i[1], Some(i[2])).unwrap());
    }

    #[test]
    fn grad_batch_linear() {
        check(2, &[vec![2, 3, 4], vec![2, 5, 3], vec![2, 5]], |g, i| {
            g.batch_linear(i[0], i[1], Some(i[2])).unwrap()
        });
    }

    #[test]
    fn grad_frame_conv_and_overlap_add() {
        check(3, &[vec![2, 1, 13], vec![3, 5], vec![3]], |g, i| {
            g.frame_conv(i[0], i[1], Some(i[2]), 2).unwrap()
        });
        check(4, &[vec![2, 3, 4], vec![3, 5], vec![1]], |g, i| {
            g.overlap_add(i[0], i[1], Some(i[2]), 2).unwrap()
        });
    }

    #[test]
    fn grad_depthwise() {
        for (stride, pad, t) in [(1, 1, 6), (2, 2, 7), (2, 0, 8)] {
            check(5, &[vec![2, 3, t], vec![3, 5], vec![3]], move |g, i| {
                g.depthwise(i[0], i[1], Some(i[2]), stride, pad).unwrap()
            });
        }
    }

    #[test]
    fn grad_norms() {
        check(6, &[vec![2, 4, 5], vec![4], vec![4]], |g, i| g.layer_norm(i[0], i[1], i[2]).unwrap());
        check(7, &[vec![2, 4, 5], vec![4], vec![4]], |g, i| g.batch_norm(i[0], i[1], i[2], None).unwrap());
        let rm = [0.1, -0.2, 0.3, 0.0];
        let rv = [1.0, 0.5, 2.0, 0.7];
        check(8, &[vec![2, 4, 5], vec![4], vec![4]], move |g, i| {
            g.batch_norm(i[0], i[1], i[2], Some((&rm, &rv))).unwrap()
        });
    }

    #[test]
    fn grad_pointwise() {
        check(9, &[vec![2, 3, 4]], |g, i| g.gelu(i[0]).unwrap());
        check(10, &[vec![2, 3, 4]], |g, i| g.sigmoid(i[0]).unwrap());
        check(11, &[vec![2, 6, 4]], |g, i| g.glu(i[0]).unwrap());
        check(12, &[vec![2, 3, 4], vec![2, 3, 4]], |g, i| {
            let s = g.add(i[0], i[1]).unwrap();
            g.mul(s, i[1]).unwrap()
        });
        check(13, &[vec![2, 3, 4], vec![1, 3, 4]], |g, i| g.mul_broadcast(i[0], i[1]).unwrap());
        check(14, &[vec![2, 3, 4], vec![3]], |g, i| g.scale_channels(i[0], i[1]).unwrap());
        check(15, &[vec![2, 3, 4]], |g, i| {
            let m = g.mul_const(i[0], (0..24).map(|v| v as f64 * 0.1).collect()).unwrap();
            g.scale(m, -1.5).unwrap()
        });
    }

    #[test]
    fn grad_resampling_and_layout() {
        check(16, &[vec![2, 3, 8]], |g, i| g.avg_pool(i[0], 4).unwrap());
        check(17, &[vec![2, 3, 2]], |g, i| g.upsample(i[0], 3).unwrap());
        check(18, &[vec![2, 3, 4], vec![2, 2, 4]], |g, i| g.concat_channels(&[i[0], i[1], i[0]]).unwrap());
        check(19, &[vec![2, 3, 4], vec![1, 3, 4]], |g, i| g.concat_batch(&[i[1], i[0]]).unwrap());
        check(20, &[vec![3, 2, 4]], |g, i| g.select_batch(i[0], &[2, 0, 2]).unwrap());
        check(21, &[vec![2, 3, 6]], |g, i| {
            let s = g.slice_time(i[0], 1, 4).unwrap();
            g.reshape(s, &[4, 3, 2]).unwrap()
        });
    }

    #[test]
    fn grad_attention() {
        check(22, &[vec![2, 4, 5], vec![2, 4, 5], vec![2, 4, 5]], |g, i| {
            g.rel_attention(i[0], i[1], i[2], None, None, None, 2).unwrap()
        });
        check(
            23,
            &[vec![1, 4, 5], vec![1, 4, 5], vec![1, 4, 5], vec![1, 4, 9], vec![4], vec![4]],
            |g, i| g.rel_attention(i[0], i[1], i[2], Some(i[3]), Some(i[4]), Some(i[5]), 2).unwrap(),
        );
        check(24, &[vec![3, 4, 2], vec![3, 4, 2], vec![3, 4, 2]], |g, i| {
            g.speaker_attention(i[0], i[1], i[2], 2).unwrap()
        });
    }

    #[test]
    fn grad_scalar_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let reference: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(26, &[vec![1, 1, 12], vec![1, 1, 12]], move |g, i| {
            let a = g.si_snr(i[0], &reference, 30.0, 1e-8).unwrap();
            let b = g.si_snr(i[1], &reference, 30.0, 1e-8).unwrap();
            g.weighted_sum(&[(a, 0.3), (b, -2.0)]).unwrap()
        });
    }

    #[test]
    fn rel_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (f, t, heads) = (4, 3, 2);
        let dh = f / heads;
        let q = rand_t(&mut rng, &[1, f, t]);
        let k = rand_t(&mut rng, &[1, f, t]);
        let v = rand_t(&mut rng, &[1, f, t]);
        let p = rand_t(&mut rng, &[1, f, 2 * t - 1]);
        let u = rand_t(&mut rng, &[f]);
        let vb = rand_t(&mut rng, &[f]);
        let mut g = Graph::new();
        let ids: Vec<_> = [&q, &k, &v, &p, &u, &vb].iter().map(|x| g.constant((*x).clone())).collect();
        let out = g.rel_attention(ids[0], ids[1], ids[2], Some(ids[3]), Some(ids[4]), Some(ids[5]), heads).unwrap();
        let at = |x: &Tensor<f64>, c: usize, i: usize, w: usize| x.data()[c * w + i];
        for h in 0..heads {
            for i in 0..t {
                let mut s = vec![0.0; t];
                for (j, sj) in s.iter_mut().enumerate() {
                    for d in h * dh..(h + 1) * dh {
                        let qi = at(&q, d, i, t);
                        *sj += (qi + u.data()[d]) * at(&k, d, j, t);
                        *sj += (qi + vb.data()[d]) * at(&p, d, i + t - 1 - j, 2 * t - 1);
                    }
                    *sj /= (dh as f64).sqrt();
                }
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for d in h * dh..(h + 1) * dh {
                    let want: f64 = (0..t).map(|j| (s[j] - mx).exp() / z * at(&v, d, j, t)).sum();
                    assert!((g.value(out).data()[d * t + i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_stats_and_values() {
        let x = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let xi = g.constant(x);
        let ga = g.constant(Tensor::full(&[1], 1.0));
        let be = g.constant(Tensor::zeros(&[1]));
        let y = g.batch_norm(xi, ga, be, None).unwrap();
        let (m, v) = g.bn_batch_stats(y).unwrap();
        assert_eq!(m[0], 4.0);
        // biased 5, unbiased 20/3
        assert!((v[0] - 20.0 / 3.0).abs() < 1e-12);
        let want = -3.0 / (5.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 3, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.linear(a, w, None).is_err());
        assert!(g.avg_pool(a, 3).is_err());
        assert!(g.glu(a).is_err());
        assert!(g.backward(a).is_err());
    }
}
