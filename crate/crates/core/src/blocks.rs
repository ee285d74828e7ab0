//! Sequence-processing building blocks: projections, normalizations, the
//! gated convolutional feed-forward network, pooled gated attention, the
//! convolutional local attention stack, their pre-norm residual assemblies,
//! and the cross-speaker attention block.
//!
//! Every block is a set of [`ParamId`]s plus a `forward` that appends ops to a
//! [`Graph`]. Inputs are `[batch, channels, frames]`; a speaker stack is just
//! a batch of `J` sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Uniform bound used for every dense and convolutional weight.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        let mut s = pb.scope(name);
        let bound = fan_in_bound(inputs);
        let w = s.uniform("weight", &[outputs, inputs], bound, true);
        let b = bias.then(|| s.uniform("bias", &[outputs], bound, false));
        Self { w, b, inputs, outputs }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let w = ctx.p(g, self.w);
        let b = self.b.map(|b| ctx.p(g, b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + if self.b.is_some() { self.outputs } else { 0 }
    }
}

/// Per-frame normalization over channels.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            gamma: s.constant("weight", &[f], 1.0, false),
            beta: s.constant("bias", &[f], 0.0, false),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let gamma = ctx.p(g, self.gamma);
        let beta = ctx.p(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            gamma: s.constant("weight", &[f], 1.0, false),
            beta: s.constant("bias", &[f], 0.0, false),
            running_mean: s.buffer("running_mean", &[f], 0.0),
            running_var: s.buffer("running_var", &[f], 1.0),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let gamma = ctx.p(g, self.gamma);
        let beta = ctx.p(g, self.beta);
        if ctx.train {
            let y = g.batch_norm(x, gamma, beta, None)?;
            ctx.bn_nodes.push((self.running_mean, self.running_var, y));
            Ok(y)
        } else {
            let rm = ctx.params.get(self.running_mean).data();
            let rv = ctx.params.get(self.running_var).data();
            g.batch_norm(x, gamma, beta, Some((rm, rv)))
        }
    }
}

/// Depthwise temporal convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DepthwiseConv {
    /// Same-padded (for stride 1) depthwise convolution with an odd kernel.
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, kernel: usize, stride: usize) -> Self {
        let mut s = pb.scope(name);
        let bound = fan_in_bound(kernel);
        Self {
            w: s.uniform("weight", &[f, kernel], bound, true),
            b: s.uniform("bias", &[f], bound, false),
            kernel,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let w = ctx.p(g, self.w);
        let b = ctx.p(g, self.b);
        g.depthwise(x, w, Some(b), self.stride, self.pad)
    }
}

/// Channel-mixing sub-layer of the Transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnMode {
    /// Linear F to 6F, GLU to 3F, depthwise conv (kernel 3), Linear 3F to F.
    #[default]
    Gcfn,
    /// Linear F to 4F, GELU, Linear 4F to F.
    Ffn,
}

/// Variants of the pooled global attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgaMode {
    /// Upsampled attention output times `sigmoid(Linear(x))`.
    #[default]
    Full,
    /// Upsampled attention output, no gate.
    PlainDsUs,
    /// Upsampled attention output times the block input `x`.
    MulNoGate,
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Gcfn { up: Linear, dw: DepthwiseConv, down: Linear },
    Ffn { up: Linear, down: Linear },
}

impl FeedForward {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, mode: FfnMode) -> Self {
        let mut s = pb.scope(name);
        match mode {
            FfnMode::Gcfn => FeedForward::Gcfn {
                up: Linear::new(&mut s, "up", f, 6 * f, true),
                dw: DepthwiseConv::new(&mut s, "dw", 3 * f, 3, 1),
                down: Linear::new(&mut s, "down", 3 * f, f, true),
            },
            FfnMode::Ffn => FeedForward::Ffn {
                up: Linear::new(&mut s, "up", f, 4 * f, true),
                down: Linear::new(&mut s, "down", 4 * f, f, true),
            },
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        match self {
            FeedForward::Gcfn { up, dw, down } => {
                let h = up.forward(ctx, g, x)?;
                let h = g.glu(h)?;
                let h = dw.forward(ctx, g, h)?;
                down.forward(ctx, g, h)
            }
            FeedForward::Ffn { up, down } => {
                let h = up.forward(ctx, g, x)?;
                let h = g.gelu(h)?;
                down.forward(ctx, g, h)
            }
        }
    }

    /// Weights of the dense stages only (no biases, no depthwise kernel).
    pub fn linear_weights(&self) -> usize {
        match self {
            FeedForward::Gcfn { up, down, .. } | FeedForward::Ffn { up, down } => {
                up.inputs * up.outputs + down.inputs * down.outputs
            }
        }
    }
}

/// Sinusoidal embeddings of relative offsets, laid out `[1, F, 2T-1]`.
/// Column `m` holds offset `m - (T - 1)`; attention reads column `i - j + T - 1`
/// for query `i` and key `j`.
pub fn relative_sinusoid<S: Scalar>(f: usize, t: usize) -> Tensor<S> {
    let m = 2 * t - 1;
    let mut data = vec![S::zero(); f * m];
    for c in 0..f {
        let pair = (c / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / f as f64);
        for col in 0..m {
            let d = col as f64 - (t as f64 - 1.0);
            let v = if c % 2 == 0 { (d * freq).sin() } else { (d * freq).cos() };
            data[c * m + col] = S::from_f64c(v);
        }
    }
    Tensor::new(&[1, f, m], data).expect("sinusoid shape")
}

/// Multi-head self-attention over frames with content/position decomposed
/// relative positional scores.
#[derive(Clone, Debug)]
pub struct RelMhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub pos: Linear,
    pub u: ParamId,
    pub vb: ParamId,
    pub heads: usize,
    pub f: usize,
}

impl RelMhsa {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, heads: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            q: Linear::new(&mut s, "q", f, f, true),
            k: Linear::new(&mut s, "k", f, f, true),
            v: Linear::new(&mut s, "v", f, f, true),
            out: Linear::new(&mut s, "out", f, f, true),
            pos: Linear::new(&mut s, "pos", f, f, false),
            u: s.constant("content_bias", &[f], 0.0, false),
            vb: s.constant("position_bias", &[f], 0.0, false),
            heads,
            f,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let (_, _, t) = g.value(x).dims3()?;
        let q = self.q.forward(ctx, g, x)?;
        let k = self.k.forward(ctx, g, x)?;
        let v = self.v.forward(ctx, g, x)?;
        let table = g.constant(relative_sinusoid(self.f, t));
        let pos = self.pos.forward(ctx, g, table)?;
        let u = ctx.p(g, self.u);
        let vb = ctx.p(g, self.vb);
        let a = g.rel_attention(q, k, v, Some(pos), Some(u), Some(vb), self.heads)?;
        self.out.forward(ctx, g, a)
    }
}

/// Pooled self-attention, upsampled back and gated per frame.
#[derive(Clone, Debug)]
pub struct Ega {
    pub mhsa: RelMhsa,
    pub gate: Option<Linear>,
    pub mode: EgaMode,
}

impl Ega {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, heads: usize, mode: EgaMode) -> Self {
        let mut s = pb.scope(name);
        let mhsa = RelMhsa::new(&mut s, "mhsa", f, heads);
        let gate = (mode == EgaMode::Full).then(|| Linear::new(&mut s, "gate", f, f, true));
        Self { mhsa, gate, mode }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId, pool: usize) -> Result<NodeId> {
        let (_, _, t) = g.value(x).dims3()?;
        if pool == 0 || t % pool != 0 {
            return Err(Error::Shape(format!("pool factor {} does not divide {} frames", pool, t)));
        }
        let ds = if pool > 1 { g.avg_pool(x, pool)? } else { x };
        let a = self.mhsa.forward(ctx, g, ds)?;
        let up = if pool > 1 { g.upsample(a, pool)? } else { a };
        match (self.mode, &self.gate) {
            (EgaMode::Full, Some(gate)) => {
                let gl = gate.forward(ctx, g, x)?;
                let gs = g.sigmoid(gl)?;
                g.mul(up, gs)
            }
            (EgaMode::MulNoGate, _) => g.mul(up, x),
            _ => Ok(up),
        }
    }
}

/// Gated pointwise stage, large-kernel depthwise conv, and a BN/GELU pointwise pair.
#[derive(Clone, Debug)]
pub struct Cla {
    pub gated: Linear,
    pub dw: DepthwiseConv,
    pub expand: Linear,
    pub bn: BatchNorm,
    pub project: Linear,
}

impl Cla {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, kernel: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            gated: Linear::new(&mut s, "gated", f, 2 * f, true),
            dw: DepthwiseConv::new(&mut s, "dw", f, kernel, 1),
            expand: Linear::new(&mut s, "expand", f, 2 * f, true),
            bn: BatchNorm::new(&mut s, "bn", 2 * f),
            project: Linear::new(&mut s, "project", 2 * f, f, true),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let h = self.gated.forward(ctx, g, x)?;
        let h = g.glu(h)?;
        let h = self.dw.forward(ctx, g, h)?;
        let h = self.expand.forward(ctx, g, h)?;
        let h = self.bn.forward(ctx, g, h)?;
        let h = g.gelu(h)?;
        self.project.forward(ctx, g, h)
    }
}

/// Hyperparameters shared by the residual blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub f: usize,
    pub heads: usize,
    pub kernel: usize,
    pub layerscale_init: f64,
    pub ffn: FfnMode,
    pub ega: EgaMode,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.heads == 0 || !self.f.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.f, self.heads
            )));
        }
        if !self.f.is_multiple_of(2) {
            return Err(Error::Config(format!("model dim {} must be even", self.f)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("local kernel {} must be odd", self.kernel)));
        }
        if self.layerscale_init <= 0.0 {
            return Err(Error::Config("layerscale init must be positive".into()));
        }
        Ok(())
    }
}

/// `x + dropout(lambda * sub(LN(x)))`.
fn residual<S: Scalar>(
    ctx: &mut Ctx<S>,
    g: &mut Graph<S>,
    x: NodeId,
    norm: &LayerNorm,
    scale: ParamId,
    sub: impl FnOnce(&mut Ctx<S>, &mut Graph<S>, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let h = norm.forward(ctx, g, x)?;
    let h = sub(ctx, g, h)?;
    let s = ctx.p(g, scale);
    let h = g.scale_channels(h, s)?;
    let h = ctx.dropout(g, h)?;
    g.add(x, h)
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Global(Ega),
    Local(Cla),
}

/// Pre-norm residual pair: temporal mixer then feed-forward, each with LayerScale.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    pub scale1: ParamId,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub scale2: ParamId,
}

impl TransformerBlock {
    fn with_mixer<S: Scalar>(s: &mut ParamBuilder<S>, cfg: &BlockConfig, mixer: Mixer) -> Self {
        Self {
            norm1: LayerNorm::new(s, "norm1", cfg.f),
            mixer,
            scale1: s.constant("scale1", &[cfg.f], cfg.layerscale_init, false),
            norm2: LayerNorm::new(s, "norm2", cfg.f),
            ffn: FeedForward::new(s, "ffn", cfg.f, cfg.ffn),
            scale2: s.constant("scale2", &[cfg.f], cfg.layerscale_init, false),
        }
    }

    pub fn global<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, cfg: &BlockConfig) -> Self {
        let mut s = pb.scope(name);
        let ega = Ega::new(&mut s, "ega", cfg.f, cfg.heads, cfg.ega);
        Self::with_mixer(&mut s, cfg, Mixer::Global(ega))
    }

    pub fn local<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, cfg: &BlockConfig) -> Self {
        let mut s = pb.scope(name);
        let cla = Cla::new(&mut s, "cla", cfg.f, cfg.kernel);
        Self::with_mixer(&mut s, cfg, Mixer::Local(cla))
    }

    /// `pool` is the attention pooling factor; ignored by local blocks.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId, pool: usize) -> Result<NodeId> {
        let x1 = residual(ctx, g, x, &self.norm1, self.scale1, |ctx, g, h| match &self.mixer {
            Mixer::Global(ega) => ega.forward(ctx, g, h, pool),
            Mixer::Local(cla) => cla.forward(ctx, g, h),
        })?;
        residual(ctx, g, x1, &self.norm2, self.scale2, |ctx, g, h| self.ffn.forward(ctx, g, h))
    }
}

/// Attention across the speaker axis within each frame, no positional terms.
#[derive(Clone, Debug)]
pub struct SpeakerMhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SpeakerMhsa {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, heads: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            q: Linear::new(&mut s, "q", f, f, true),
            k: Linear::new(&mut s, "k", f, f, true),
            v: Linear::new(&mut s, "v", f, f, true),
            out: Linear::new(&mut s, "out", f, f, true),
            heads,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let q = self.q.forward(ctx, g, x)?;
        let k = self.k.forward(ctx, g, x)?;
        let v = self.v.forward(ctx, g, x)?;
        let a = g.speaker_attention(q, k, v, self.heads)?;
        self.out.forward(ctx, g, a)
    }
}

/// Cross-speaker Transformer block over a `[J, F, T]` stack.
#[derive(Clone, Debug)]
pub struct CrossSpeakerBlock {
    pub norm1: LayerNorm,
    pub attn: SpeakerMhsa,
    pub scale1: ParamId,
    pub ffn: Option<(LayerNorm, FeedForward, ParamId)>,
}

impl CrossSpeakerBlock {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, cfg: &BlockConfig, with_ffn: bool) -> Self {
        let mut s = pb.scope(name);
        let norm1 = LayerNorm::new(&mut s, "norm1", cfg.f);
        let attn = SpeakerMhsa::new(&mut s, "attn", cfg.f, cfg.heads);
        let scale1 = s.constant("scale1", &[cfg.f], cfg.layerscale_init, false);
        let ffn = with_ffn.then(|| {
            (
                LayerNorm::new(&mut s, "norm2", cfg.f),
                FeedForward::new(&mut s, "ffn", cfg.f, cfg.ffn),
                s.constant("scale2", &[cfg.f], cfg.layerscale_init, false),
            )
        });
        Self {
            norm1,
            attn,
            scale1,
            ffn,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        if g.value(x).dims3()?.0 < 2 {
            return Err(Error::Shape("cross-speaker block needs at least two speakers".into()));
        }
        let x1 = residual(ctx, g, x, &self.norm1, self.scale1, |ctx, g, h| self.attn.forward(ctx, g, h))?;
        match &self.ffn {
            Some((norm, ffn, scale)) => residual(ctx, g, x1, norm, *scale, |ctx, g, h| ffn.forward(ctx, g, h)),
            None => Ok(x1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, randomize};
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const F: usize = 8;
    const T: usize = 8;

    fn cfg() -> BlockConfig {
        BlockConfig {
            f: F,
            heads: 2,
            kernel: 5,
            layerscale_init: 1e-4,
            ffn: FfnMode::Gcfn,
            ega: EgaMode::Full,
        }
    }

    fn build<B>(seed: u64, make: impl FnOnce(&mut ParamBuilder<f64>) -> B) -> (ParamStore<f64>, B) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = make(&mut ParamBuilder::new(&mut store, &mut rng));
        (store, b)
    }

    fn rand_input(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// `[F][T]` view of batch item `b`.
    fn rows(x: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
        let (_, c, t) = x.dims3().unwrap();
        (0..c).map(|ci| x.data()[(b * c + ci) * t..(b * c + ci + 1) * t].to_vec()).collect()
    }

    fn dense(store: &ParamStore<f64>, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = store.get(l.w).data();
        let t = x[0].len();
        (0..l.outputs)
            .map(|o| {
                (0..t)
                    .map(|ti| {
                        let mut acc = l.b.map_or(0.0, |b| store.get(b).data()[o]);
                        for (i, xi) in x.iter().enumerate() {
                            acc += w[o * l.inputs + i] * xi[ti];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    fn softmax(s: &mut [f64]) {
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
        for v in s.iter_mut() {
            *v = (*v - mx).exp() / z;
        }
    }

    /// Dense attention with relative terms, straight from the score definition.
    fn mhsa_oracle(store: &ParamStore<f64>, m: &RelMhsa, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t = x[0].len();
        let (q, k, v) = (dense(store, &m.q, x), dense(store, &m.k, x), dense(store, &m.v, x));
        let table = relative_sinusoid::<f64>(m.f, t);
        let r = dense(store, &m.pos, &rows(&table, 0));
        let (u, vb) = (store.get(m.u).data(), store.get(m.vb).data());
        let dh = m.f / m.heads;
        let mut out = vec![vec![0.0; t]; m.f];
        for h in 0..m.heads {
            for i in 0..t {
                let mut s: Vec<f64> = (0..t)
                    .map(|j| {
                        (h * dh..(h + 1) * dh)
                            .map(|d| (q[d][i] + u[d]) * k[d][j] + (q[d][i] + vb[d]) * r[d][i + t - 1 - j])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                softmax(&mut s);
                assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for d in h * dh..(h + 1) * dh {
                    out[d][i] = (0..t).map(|j| s[j] * v[d][j]).sum();
                }
            }
        }
        dense(store, &m.out, &out)
    }

    fn run(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl FnOnce(&mut Ctx<f64>, &mut Graph<f64>, NodeId) -> Result<NodeId>) -> Tensor<f64> {
        let mut ctx = Ctx::inference(store);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = f(&mut ctx, &mut g, xi).unwrap();
        g.value(y).clone()
    }

    fn assert_close(a: &Tensor<f64>, b: &[Vec<f64>], batch: usize, tol: f64) {
        let ra = rows(a, batch);
        for (x, y) in ra.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn gcfn_zero_and_weight_count() {
        let (mut store, ffn) = build(1, |pb| FeedForward::new(pb, "ffn", F, FfnMode::Gcfn));
        for id in store.ids().collect::<Vec<_>>() {
            if store.entry(id).name.ends_with("bias") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let y = run(&store, &Tensor::zeros(&[1, F, T]), |c, g, x| ffn.forward(c, g, x));
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(ffn.linear_weights(), 9 * F * F);
        let (_, big) = build(1, |pb| FeedForward::new(pb, "ffn", 128, FfnMode::Gcfn));
        assert_eq!(big.linear_weights(), 147_456);
        let (_, plain) = build(1, |pb| FeedForward::new(pb, "ffn", 128, FfnMode::Ffn));
        assert_eq!(plain.linear_weights(), 8 * 128 * 128);
    }

    #[test]
    fn gcfn_single_frame_uses_center_tap() {
        let (store, ffn) = build(2, |pb| FeedForward::new(pb, "ffn", F, FfnMode::Gcfn));
        let x = rand_input(3, &[1, F, 1]);
        let y = run(&store, &x, |c, g, xi| ffn.forward(c, g, xi));
        let FeedForward::Gcfn { up, dw, down } = &ffn else { unreachable!() };
        let h = dense(&store, up, &rows(&x, 0));
        let half = h.len() / 2;
        let glu: Vec<Vec<f64>> = (0..half)
            .map(|c| vec![h[c][0] / (1.0 + (-h[c + half][0]).exp())])
            .collect();
        let (w, b) = (store.get(dw.w).data(), store.get(dw.b).data());
        let conv: Vec<Vec<f64>> = glu.iter().enumerate().map(|(c, v)| vec![v[0] * w[c * 3 + 1] + b[c]]).collect();
        assert_close(&y, &dense(&store, down, &conv), 0, 1e-12);
    }

    #[test]
    fn mhsa_matches_dense_oracle() {
        let (mut store, m) = build(4, |pb| RelMhsa::new(pb, "m", F, 2));
        randomize(&mut store, 5, 0.5);
        let x = rand_input(6, &[2, F, 5]);
        let y = run(&store, &x, |c, g, xi| m.forward(c, g, xi));
        for b in 0..2 {
            assert_close(&y, &mhsa_oracle(&store, &m, &rows(&x, b)), b, 1e-10);
        }
    }

    #[test]
    fn mhsa_single_frame_and_identical_frames() {
        let (store, m) = build(7, |pb| RelMhsa::new(pb, "m", F, 2));
        let x = rand_input(8, &[1, F, 1]);
        let y = run(&store, &x, |c, g, xi| m.forward(c, g, xi));
        let v = dense(&store, &m.v, &rows(&x, 0));
        assert_close(&y, &dense(&store, &m.out, &v), 0, 1e-12);

        // identical frames and no position projection: identical outputs
        let mut store = store;
        store.get_mut(m.pos.w).data_mut().fill(0.0);
        let col = rand_input(9, &[F]);
        let data: Vec<f64> = (0..F).flat_map(|c| std::iter::repeat_n(col.data()[c], 4)).collect();
        let x = Tensor::new(&[1, F, 4], data).unwrap();
        let y = run(&store, &x, |c, g, xi| m.forward(c, g, xi));
        for row in rows(&y, 0) {
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn ega_matches_stagewise_oracle() {
        let (mut store, e) = build(10, |pb| Ega::new(pb, "ega", F, 2, EgaMode::Full));
        randomize(&mut store, 11, 0.5);
        let x = rand_input(12, &[1, F, T]);
        let pool = 4;
        let y = run(&store, &x, |c, g, xi| e.forward(c, g, xi, pool));
        let xr = rows(&x, 0);
        let pooled: Vec<Vec<f64>> = xr
            .iter()
            .map(|r| r.chunks(pool).map(|c| c.iter().sum::<f64>() / pool as f64).collect())
            .collect();
        let a = mhsa_oracle(&store, &e.mhsa, &pooled);
        let gate = dense(&store, e.gate.as_ref().unwrap(), &xr);
        let want: Vec<Vec<f64>> = (0..F)
            .map(|c| (0..T).map(|t| a[c][t / pool] / (1.0 + (-gate[c][t]).exp())).collect())
            .collect();
        assert_close(&y, &want, 0, 1e-10);
    }

    #[test]
    fn ega_pool_one_and_gate_annihilation() {
        let (mut store, e) = build(13, |pb| Ega::new(pb, "ega", F, 2, EgaMode::Full));
        let x = rand_input(14, &[1, F, T]);
        let y = run(&store, &x, |c, g, xi| e.forward(c, g, xi, 1));
        let a = mhsa_oracle(&store, &e.mhsa, &rows(&x, 0));
        let gate = dense(&store, e.gate.as_ref().unwrap(), &rows(&x, 0));
        for c in 0..F {
            for t in 0..T {
                let gv = 1.0 / (1.0 + (-gate[c][t]).exp());
                assert!(gv > 0.0 && gv < 1.0);
                assert!((y.data()[c * T + t] - a[c][t] * gv).abs() < 1e-10);
            }
        }
        let gate = e.gate.as_ref().unwrap();
        store.get_mut(gate.w).data_mut().fill(0.0);
        store.get_mut(gate.b.unwrap()).data_mut().fill(-1e4);
        let y = run(&store, &x, |c, g, xi| e.forward(c, g, xi, 2));
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(run_err(&store, &e, 3));
    }

    fn run_err(store: &ParamStore<f64>, e: &Ega, pool: usize) -> bool {
        let mut ctx = Ctx::inference(store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, F, T]));
        matches!(e.forward(&mut ctx, &mut g, x, pool), Err(Error::Shape(_)))
    }

    #[test]
    fn ega_variants() {
        let x = rand_input(15, &[1, F, T]);
        let (store, plain) = build(16, |pb| Ega::new(pb, "ega", F, 2, EgaMode::PlainDsUs));
        assert!(plain.gate.is_none());
        let y = run(&store, &x, |c, g, xi| plain.forward(c, g, xi, 2));
        let a = run(&store, &x, |c, g, xi| {
            let p = g.avg_pool(xi, 2)?;
            let a = plain.mhsa.forward(c, g, p)?;
            g.upsample(a, 2)
        });
        assert_eq!(y, a);
        let (store, mul) = build(16, |pb| Ega::new(pb, "ega", F, 2, EgaMode::MulNoGate));
        let y = run(&store, &x, |c, g, xi| mul.forward(c, g, xi, 2));
        for ((yv, av), xv) in y.data().iter().zip(a.data()).zip(x.data()) {
            assert!((yv - av * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn cla_zero_and_delta_kernel() {
        let (mut store, cla) = build(17, |pb| Cla::new(pb, "cla", F, 5));
        for id in store.ids().collect::<Vec<_>>() {
            if store.entry(id).name.ends_with(".bias") && store.entry(id).trainable {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let y = run(&store, &Tensor::zeros(&[1, F, T]), |c, g, xi| cla.forward(c, g, xi));
        assert!(y.data().iter().all(|&v| v == 0.0));

        let w = store.get_mut(cla.dw.w).data_mut();
        w.fill(0.0);
        for c in 0..F {
            w[c * 5 + 2] = 1.0;
        }
        let x = rand_input(18, &[1, F, T]);
        let y = run(&store, &x, |c, g, xi| cla.forward(c, g, xi));
        let chain = run(&store, &x, |c, g, xi| {
            let h = cla.gated.forward(c, g, xi)?;
            let h = g.glu(h)?;
            let h = cla.expand.forward(c, g, h)?;
            let h = cla.bn.forward(c, g, h)?;
            let h = g.gelu(h)?;
            cla.project.forward(c, g, h)
        });
        assert!(y.max_abs_diff(&chain) < 1e-12);
    }

    #[test]
    fn cla_receptive_field_is_kernel() {
        let k = 5;
        let (mut store, cla) = build(19, |pb| Cla::new(pb, "cla", F, k));
        randomize(&mut store, 20, 0.5);
        let t = 16;
        let x = rand_input(21, &[1, F, t]);
        let base = run(&store, &x, |c, g, xi| cla.forward(c, g, xi));
        let probe = 8;
        for dt in [-(k as isize), k as isize, -3, 3] {
            let mut xp = x.clone();
            let at = (probe as isize + dt) as usize;
            for c in 0..F {
                xp.data_mut()[c * t + at] += 1.0;
            }
            let y = run(&store, &xp, |c, g, xi| cla.forward(c, g, xi));
            let changed = (0..F).any(|c| y.data()[c * t + probe] != base.data()[c * t + probe]);
            // half width (K-1)/2 = 2: offsets of 3 or more are outside
            assert!(!changed, "offset {dt} leaked into frame {probe}");
        }
        let mut xp = x.clone();
        xp.data_mut()[probe + 2] += 1.0;
        let y = run(&store, &xp, |c, g, xi| cla.forward(c, g, xi));
        assert!((0..F).any(|c| y.data()[c * t + probe] != base.data()[c * t + probe]));
    }

    #[test]
    fn layerscale_zero_is_identity() {
        let c = cfg();
        let x = rand_input(22, &[2, F, T]);
        for which in 0..3 {
            let (mut store, blk) = build(23, |pb| {
                (
                    TransformerBlock::global(pb, "g", &c),
                    TransformerBlock::local(pb, "l", &c),
                    CrossSpeakerBlock::new(pb, "cs", &c, true),
                )
            });
            randomize(&mut store, 24, 0.5);
            for id in store.ids().collect::<Vec<_>>() {
                if store.entry(id).name.contains(".scale") {
                    store.get_mut(id).data_mut().fill(0.0);
                }
            }
            let y = run(&store, &x, |ctx, g, xi| match which {
                0 => blk.0.forward(ctx, g, xi, 2),
                1 => blk.1.forward(ctx, g, xi, 1),
                _ => blk.2.forward(ctx, g, xi),
            });
            assert_eq!(y, x);
        }
    }

    #[test]
    fn cross_speaker_matches_oracle_and_is_equivariant() {
        let c = cfg();
        let (mut store, cs) = build(25, |pb| CrossSpeakerBlock::new(pb, "cs", &c, false));
        randomize(&mut store, 26, 0.5);
        let (j, t) = (3, 2);
        let x = rand_input(27, &[j, F, t]);
        let y = run(&store, &x, |ctx, g, xi| cs.forward(ctx, g, xi));

        let ln = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
            let (ga, be) = (store.get(cs.norm1.gamma).data(), store.get(cs.norm1.beta).data());
            v.iter().enumerate().map(|(i, a)| (a - m) / (var + 1e-5).sqrt() * ga[i] + be[i]).collect()
        };
        let dh = F / c.heads;
        for ti in 0..t {
            let normed: Vec<Vec<Vec<f64>>> = (0..j)
                .map(|s| {
                    let col: Vec<f64> = (0..F).map(|ch| x.data()[(s * F + ch) * t + ti]).collect();
                    ln(&col).into_iter().map(|v| vec![v]).collect()
                })
                .collect();
            let q: Vec<_> = normed.iter().map(|n| dense(&store, &cs.attn.q, n)).collect();
            let k: Vec<_> = normed.iter().map(|n| dense(&store, &cs.attn.k, n)).collect();
            let v: Vec<_> = normed.iter().map(|n| dense(&store, &cs.attn.v, n)).collect();
            for a in 0..j {
                let mut att = vec![vec![0.0]; F];
                for h in 0..c.heads {
                    let mut s: Vec<f64> = (0..j)
                        .map(|b| (h * dh..(h + 1) * dh).map(|d| q[a][d][0] * k[b][d][0]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    softmax(&mut s);
                    for d in h * dh..(h + 1) * dh {
                        att[d][0] = (0..j).map(|b| s[b] * v[b][d][0]).sum();
                    }
                }
                let o = dense(&store, &cs.attn.out, &att);
                let sc = store.get(cs.scale1).data();
                for ch in 0..F {
                    let want = x.data()[(a * F + ch) * t + ti] + sc[ch] * o[ch][0];
                    assert!((y.data()[(a * F + ch) * t + ti] - want).abs() < 1e-12);
                }
            }
        }

        let perm = [2, 0, 1];
        let yp = run(&store, &x, |ctx, g, xi| {
            let p = g.select_batch(xi, &perm)?;
            cs.forward(ctx, g, p)
        });
        let py = run(&store, &y, |_, g, yi| g.select_batch(yi, &perm));
        assert!(yp.max_abs_diff(&py) < 1e-12);
    }

    #[test]
    fn cross_speaker_identical_speakers_stay_identical() {
        let c = cfg();
        let (mut store, cs) = build(28, |pb| CrossSpeakerBlock::new(pb, "cs", &c, true));
        randomize(&mut store, 29, 0.5);
        let one = rand_input(30, &[1, F, T]);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let x = Tensor::new(&[2, F, T], data).unwrap();
        let y = run(&store, &x, |ctx, g, xi| cs.forward(ctx, g, xi));
        let (a, b) = y.data().split_at(F * T);
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_of_every_block() {
        let mut c = cfg();
        for (name, pool) in [("gcfn", 0), ("ffn", 0), ("ega", 4), ("cla", 0), ("global", 2), ("local", 0), ("cs", 0)] {
            if name == "ffn" {
                c.ffn = FfnMode::Ffn;
            } else {
                c.ffn = FfnMode::Gcfn;
            }
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            enum B {
                Ffn(FeedForward),
                Ega(Ega),
                Cla(Cla),
                Tb(TransformerBlock),
                Cs(CrossSpeakerBlock),
            }
            let blk = match name {
                "gcfn" | "ffn" => B::Ffn(FeedForward::new(&mut pb, "x", F, c.ffn)),
                "ega" => B::Ega(Ega::new(&mut pb, "x", F, 2, EgaMode::Full)),
                "cla" => B::Cla(Cla::new(&mut pb, "x", F, 5)),
                "global" => B::Tb(TransformerBlock::global(&mut pb, "x", &c)),
                "local" => B::Tb(TransformerBlock::local(&mut pb, "x", &c)),
                _ => B::Cs(CrossSpeakerBlock::new(&mut pb, "x", &c, true)),
            };
            randomize(&mut store, 32, 0.5);
            let batch = if name == "cs" { 2 } else { 1 };
            let input = rand_input(33, &[batch, F, T]);
            for train in [false, true] {
                let report = check_gradients(&store, std::slice::from_ref(&input), train, 1e-4, |ctx, g, xs| match &blk {
                    B::Ffn(b) => b.forward(ctx, g, xs[0]),
                    B::Ega(b) => b.forward(ctx, g, xs[0], pool),
                    B::Cla(b) => b.forward(ctx, g, xs[0]),
                    B::Tb(b) => b.forward(ctx, g, xs[0], pool),
                    B::Cs(b) => b.forward(ctx, g, xs[0]),
                })
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "{name} (train {train}): {report:?}");
                assert!(report.checked > 100);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c = cfg();
        c.kernel = 4;
        assert!(c.validate().is_err());
    }
}
