//! The full separator: learned audio encoder, input projection, multi-scale
//! encoder, speaker split, reconstruction decoder, output layer and the
//! auxiliary per-stage heads used by the multi-loss objective.
//!
//! Parameter names are stable and hierarchical (`encoder.stage1.block0.global.ega.mhsa.q.weight`),
//! so checkpoints can be read by other implementations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    BatchNorm, BlockConfig, CrossSpeakerBlock, DepthwiseConv, EgaMode, FfnMode, LayerNorm, Linear, TransformerBlock,
    fan_in_bound,
};
use crate::codec::{self, CodecParams, Waveform};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::objectives::AuxDomain;
use crate::params::{Ctx, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// One split layer reused at every tap.
    #[default]
    Shared,
    /// One split layer per resolution.
    Multiple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Single-sequence decoder, split after the last stage.
    LateSplit,
    /// Split at every tap, one independent decoder per speaker.
    EarlySplitMultiDec,
    /// Split at every tap, one decoder shared by all speakers.
    Essd,
    /// Shared decoder plus cross-speaker blocks.
    #[default]
    Sepre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsPlacement {
    /// A cross-speaker block after every (global, local) unit.
    #[default]
    PerUnit,
    /// One cross-speaker block at the end of each decoder stage.
    PerStage,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)*
                    _ => Err(Error::Config(format!("unknown {} '{}'", stringify!($t), s))),
                }
            }
        }
    };
}

str_enum!(SplitMode { Shared => "shared", Multiple => "multiple" });
str_enum!(DecoderMode {
    LateSplit => "late_split",
    EarlySplitMultiDec => "early_split_multi_dec",
    Essd => "essd",
    Sepre => "sepre",
});
str_enum!(CsPlacement { PerUnit => "per_unit", PerStage => "per_stage" });
str_enum!(EgaMode { Full => "full", PlainDsUs => "plain_ds_us", MulNoGate => "mul_no_gate" });
str_enum!(FfnMode { Gcfn => "gcfn", Ffn => "ffn" });

/// Every architectural hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Separator width `F`.
    pub f: usize,
    /// Audio codec filters `F_o`.
    pub f_o: usize,
    /// Codec kernel `L` in samples.
    pub kernel: usize,
    /// Codec stride `H` in samples.
    pub stride: usize,
    /// Number of downsampling stages `R`.
    pub depth: usize,
    /// Block pairs per encoder stage `B_E`.
    pub enc_blocks: usize,
    /// Block units per decoder stage `B_D`.
    pub dec_blocks: usize,
    /// Local-attention depthwise kernel `K`.
    pub cla_kernel: usize,
    pub heads: usize,
    /// Speakers `J`.
    pub speakers: usize,
    pub dropout: f64,
    pub layerscale_init: f64,
    pub sample_rate: u32,
    pub split_mode: SplitMode,
    pub decoder_mode: DecoderMode,
    pub ega_mode: EgaMode,
    pub ffn_mode: FfnMode,
    pub cs_ffn: bool,
    pub cs_placement: CsPlacement,
    pub decoder_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("B").expect("built-in preset")
    }
}

pub const PRESETS: [&str; 6] = ["T", "S", "B", "M", "L", "tiny-desk"];

impl ModelConfig {
    /// Named configurations. `T`, `B`, `L` use `L=16, H=4, R=4`; `S`, `M` use
    /// `L=8, H=2, R=5`; `tiny-desk` is a small CPU-trainable model.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |f, kernel, stride, depth| ModelConfig {
            f,
            f_o: 256,
            kernel,
            stride,
            depth,
            enc_blocks: 2,
            dec_blocks: 3,
            cla_kernel: 65,
            heads: 8,
            speakers: 2,
            dropout: 0.1,
            layerscale_init: 1e-4,
            sample_rate: 8000,
            split_mode: SplitMode::Shared,
            decoder_mode: DecoderMode::Sepre,
            ega_mode: EgaMode::Full,
            ffn_mode: FfnMode::Gcfn,
            cs_ffn: true,
            cs_placement: CsPlacement::PerUnit,
            decoder_bias: true,
        };
        Ok(match name {
            "T" => base(64, 16, 4, 4),
            "B" => base(128, 16, 4, 4),
            "L" => base(256, 16, 4, 4),
            "S" => base(64, 8, 2, 5),
            "M" => base(128, 8, 2, 5),
            "tiny-desk" => ModelConfig {
                f_o: 64,
                enc_blocks: 1,
                dec_blocks: 1,
                heads: 4,
                ..base(32, 16, 8, 2)
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset '{}' (expected one of {})",
                    name,
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            f: self.f,
            heads: self.heads,
            kernel: self.cla_kernel,
            layerscale_init: self.layerscale_init,
            ffn: self.ffn_mode,
            ega: self.ega_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate()?;
        if self.stride == 0 || self.kernel < self.stride || self.f_o == 0 {
            return Err(Error::Config(format!(
                "codec needs kernel >= stride >= 1 (kernel {}, stride {})",
                self.kernel, self.stride
            )));
        }
        if !self.f_o.is_multiple_of(2) {
            return Err(Error::Config("f_o must be even".into()));
        }
        if self.speakers == 0 || self.speakers > 4 {
            return Err(Error::Config(format!("speakers must be in 1..=4, got {}", self.speakers)));
        }
        if self.decoder_mode == DecoderMode::Sepre && self.speakers < 2 {
            return Err(Error::Config("cross-speaker decoding needs at least two speakers".into()));
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return Err(Error::Config("block repeats must be positive".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} too large", self.depth)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(())
    }

    /// Padded length and frame count for an `n`-sample input.
    pub fn padded(&self, n: usize) -> (usize, usize) {
        codec::padded_length(n, self.kernel, self.stride, self.depth)
    }

    fn cross_speaker(&self) -> bool {
        self.decoder_mode == DecoderMode::Sepre
    }
}

/// Strided depthwise conv, batch norm, GELU.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: DepthwiseConv,
    pub bn: BatchNorm,
}

impl Downsample {
    fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            conv: DepthwiseConv::new(&mut s, "conv", f, 5, 2),
            bn: BatchNorm::new(&mut s, "bn", f),
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(ctx, g, x)?;
        let h = self.bn.forward(ctx, g, h)?;
        g.gelu(h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<(TransformerBlock, TransformerBlock)>,
    pub down: Option<Downsample>,
}

/// Gated expansion to `J` sequences, per-speaker projection, layer norm.
#[derive(Clone, Debug)]
pub struct SplitLayer {
    pub expand: Linear,
    pub group_w: ParamId,
    pub group_b: ParamId,
    pub norm: LayerNorm,
    pub speakers: usize,
    pub f: usize,
}

impl SplitLayer {
    fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, j: usize) -> Self {
        let mut s = pb.scope(name);
        let bound = fan_in_bound(f);
        Self {
            expand: Linear::new(&mut s, "expand", f, 2 * j * f, true),
            group_w: s.uniform("group.weight", &[j, f, f], bound, true),
            group_b: s.uniform("group.bias", &[j, f], bound, false),
            norm: LayerNorm::new(&mut s, "norm", f),
            speakers: j,
            f,
        }
    }

    /// `[1, F, T]` to `[J, F, T]`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let (b, _, t) = g.value(x).dims3()?;
        if b != 1 {
            return Err(Error::Shape(format!("split expects a single sequence, got batch {}", b)));
        }
        let h = self.expand.forward(ctx, g, x)?;
        let h = g.glu(h)?;
        let h = g.reshape(h, &[self.speakers, self.f, t])?;
        let w = ctx.p(g, self.group_w);
        let bias = ctx.p(g, self.group_b);
        let h = g.batch_linear(h, w, Some(bias))?;
        self.norm.forward(ctx, g, h)
    }
}

/// One (global, local[, cross-speaker]) unit of a decoder stage.
#[derive(Clone, Debug)]
pub struct DecoderUnit {
    pub global: TransformerBlock,
    pub local: TransformerBlock,
    pub cs: Option<CrossSpeakerBlock>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub merge: Linear,
    pub units: Vec<DecoderUnit>,
    pub stage_cs: Option<CrossSpeakerBlock>,
}

/// Two linears with a GLU between them, `F` to `F_o`.
#[derive(Clone, Debug)]
pub struct OutputLayer {
    pub first: Linear,
    pub second: Linear,
}

impl OutputLayer {
    fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f: usize, f_o: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            first: Linear::new(&mut s, "first", f, 2 * f_o, true),
            second: Linear::new(&mut s, "second", f_o, f_o, true),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let h = self.first.forward(ctx, g, x)?;
        let h = g.glu(h)?;
        self.second.forward(ctx, g, h)
    }
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct AudioDecoder {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl AudioDecoder {
    fn new<S: Scalar>(pb: &mut ParamBuilder<S>, name: &str, f_o: usize, kernel: usize, bias: bool) -> Self {
        let mut s = pb.scope(name);
        let bound = fan_in_bound(f_o);
        Self {
            w: s.uniform("weight", &[f_o, kernel], bound, true),
            b: bias.then(|| s.uniform("bias", &[1], bound, false)),
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, g: &mut Graph<S>, y: NodeId, hop: usize) -> Result<NodeId> {
        let w = ctx.p(g, self.w);
        let b = self.b.map(|b| ctx.p(g, b));
        g.overlap_add(y, w, b, hop)
    }
}

/// Auxiliary estimate head at one decoder resolution.
#[derive(Clone, Debug)]
pub struct AuxHead {
    pub mask: OutputLayer,
    pub target: AuxTarget,
}

#[derive(Clone, Debug)]
pub enum AuxTarget {
    /// Independent transposed-conv decoder producing a waveform.
    Time(AudioDecoder),
    /// Linear map from masked codec frames to STFT magnitude bins.
    StftMag(Linear),
}

/// Frequency bins of the auxiliary magnitude target (256-point FFT).
pub const STFT_BINS: usize = 129;
/// Hop of the auxiliary magnitude target in samples.
pub const STFT_HOP: usize = 128;

/// Per-call switches for [`Separator::forward`].
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Compute the auxiliary heads.
    pub aux: bool,
    /// Record decoder probe taps.
    pub probes: bool,
    /// Reorder the speaker axis right after every split, a test hook for
    /// equivariance.
    pub speaker_perm: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub enum AuxOutput {
    /// `[J, 1, N']` waveforms.
    Time(NodeId),
    /// `[J, 129, frames]` magnitudes, frames `floor(T / (128 / H))`.
    StftMag(NodeId),
}

/// Taps of one decoder unit: input, after global, after local, after cross-speaker.
#[derive(Clone, Debug)]
pub struct ProbeTaps {
    pub stage: usize,
    pub unit: usize,
    pub z: [NodeId; 4],
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[J, 1, N']`, untruncated.
    pub estimates: NodeId,
    /// Codec features `[1, F_o, T]`.
    pub features: NodeId,
    /// One entry per decoder stage, coarsest first.
    pub aux: Vec<AuxOutput>,
    pub probes: Vec<ProbeTaps>,
}

/// Network structure; the parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: AudioEncoder,
    pub input: (Linear, LayerNorm),
    pub stages: Vec<EncoderStage>,
    pub splits: Vec<SplitLayer>,
    /// One decoder per speaker in multi-decoder mode, otherwise one.
    pub decoders: Vec<Vec<DecoderStage>>,
    pub output: OutputLayer,
    pub decoder: AudioDecoder,
    pub aux: Vec<AuxHead>,
}

/// A separator: configuration, structure and `f32` parameters.
#[derive(Clone, Debug)]
pub struct Separator {
    pub config: ModelConfig,
    pub aux_domain: Option<AuxDomain>,
    pub net: Network,
    pub params: ParamStore<f32>,
}

impl Separator {
    /// Build with freshly initialized parameters. `aux_domain` selects which
    /// auxiliary heads exist; `None` builds none.
    pub fn new(config: ModelConfig, aux_domain: Option<AuxDomain>, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(&config, aux_domain, &mut params, seed)?;
        Ok(Self {
            config,
            aux_domain,
            net,
            params,
        })
    }

    /// Trainable scalars excluding the auxiliary heads.
    pub fn num_inference_params(&self) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| e.trainable && !e.name.starts_with("aux"))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn codec_params(&self) -> CodecParams {
        let p = &self.params;
        CodecParams {
            kernel: self.config.kernel,
            stride: self.config.stride,
            encoder_w: p.get(self.net.encoder.w).clone(),
            encoder_b: p.get(self.net.encoder.b).clone(),
            decoder_w: p.get(self.net.decoder.w).clone(),
            decoder_b: self.net.decoder.b.map(|b| p.get(b).data()[0]),
        }
    }

    /// Zero-pad `samples` so every downsampling stage is exact.
    pub fn pad_input<S: Scalar>(&self, samples: &[S]) -> Tensor<S> {
        let (np, _) = self.config.padded(samples.len());
        let mut data = samples.to_vec();
        data.resize(np, S::zero());
        Tensor::new(&[1, 1, np], data).expect("padded input")
    }

    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        g: &mut Graph<S>,
        input: NodeId,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.net.forward(&self.config, ctx, g, input, opts)
    }

    /// Inference: `J` estimates, each as long as `x`.
    pub fn separate(&self, x: &Waveform) -> Result<Vec<Waveform>> {
        self.separate_with(x, &ForwardOptions::default())
    }

    pub fn separate_with(&self, x: &Waveform, opts: &ForwardOptions) -> Result<Vec<Waveform>> {
        if x.sample_rate != self.config.sample_rate {
            return Err(Error::Data(format!(
                "input at {} Hz, model expects {} Hz",
                x.sample_rate, self.config.sample_rate
            )));
        }
        let mut ctx = Ctx::inference(&self.params);
        let mut g = Graph::new();
        let input = g.constant(self.pad_input(&x.samples));
        let out = self.forward(&mut ctx, &mut g, input, opts)?;
        let est = g.value(out.estimates);
        let (j, _, np) = est.dims3()?;
        (0..j)
            .map(|s| {
                let w = est.data()[s * np..s * np + x.len()].to_vec();
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("separator produced non-finite samples".into()));
                }
                Waveform::new(w, x.sample_rate)
            })
            .collect()
    }

    /// Multiply-accumulates of one inference pass over `n` samples.
    pub fn count_macs(&self, n: usize) -> Result<u64> {
        let mut ctx = Ctx::inference(&self.params);
        let mut g = Graph::new();
        let input = g.constant(self.pad_input(&vec![0.0f32; n]));
        self.forward(&mut ctx, &mut g, input, &ForwardOptions::default())?;
        Ok(g.macs())
    }
}

impl Network {
    fn build<S: Scalar>(
        cfg: &ModelConfig,
        aux_domain: Option<AuxDomain>,
        store: &mut ParamStore<S>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if aux_domain == Some(AuxDomain::StftMag) && !STFT_HOP.is_multiple_of(cfg.stride) {
            return Err(Error::Config(format!(
                "magnitude auxiliary target needs the codec stride {} to divide {}",
                cfg.stride, STFT_HOP
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let bc = cfg.block_config();
        let (f, j, r) = (cfg.f, cfg.speakers, cfg.depth);

        let encoder = {
            let mut s = pb.scope("codec.encoder");
            let bound = fan_in_bound(cfg.kernel);
            AudioEncoder {
                w: s.uniform("weight", &[cfg.f_o, cfg.kernel], bound, true),
                b: s.uniform("bias", &[cfg.f_o], bound, false),
            }
        };
        let input = {
            let mut s = pb.scope("input");
            (Linear::new(&mut s, "proj", cfg.f_o, f, true), LayerNorm::new(&mut s, "norm", f))
        };
        let stages = (0..=r)
            .map(|stage| {
                let mut s = pb.scope(format!("encoder.stage{stage}"));
                let blocks = (0..cfg.enc_blocks)
                    .map(|b| {
                        let mut bs = s.scope(format!("block{b}"));
                        (TransformerBlock::global(&mut bs, "global", &bc), TransformerBlock::local(&mut bs, "local", &bc))
                    })
                    .collect();
                let down = (stage < r).then(|| Downsample::new(&mut s, "down", f));
                EncoderStage { blocks, down }
            })
            .collect();
        let n_splits = match cfg.split_mode {
            SplitMode::Shared => 1,
            SplitMode::Multiple => r + 1,
        };
        let splits = (0..n_splits)
            .map(|i| {
                let name = if n_splits == 1 { "split".to_string() } else { format!("split{i}") };
                SplitLayer::new(&mut pb, &name, f, j)
            })
            .collect();
        let n_dec = if cfg.decoder_mode == DecoderMode::EarlySplitMultiDec { j } else { 1 };
        let cs = cfg.cross_speaker();
        let decoders = (0..n_dec)
            .map(|d| {
                let prefix = if n_dec == 1 { "decoder".to_string() } else { format!("decoder{d}") };
                (0..r)
                    .map(|stage| {
                        let mut s = pb.scope(format!("{prefix}.stage{stage}"));
                        let merge = Linear::new(&mut s, "merge", 2 * f, f, true);
                        let units = (0..cfg.dec_blocks)
                            .map(|u| {
                                let mut us = s.scope(format!("unit{u}"));
                                DecoderUnit {
                                    global: TransformerBlock::global(&mut us, "global", &bc),
                                    local: TransformerBlock::local(&mut us, "local", &bc),
                                    cs: (cs && cfg.cs_placement == CsPlacement::PerUnit)
                                        .then(|| CrossSpeakerBlock::new(&mut us, "cs", &bc, cfg.cs_ffn)),
                                }
                            })
                            .collect();
                        let stage_cs = (cs && cfg.cs_placement == CsPlacement::PerStage)
                            .then(|| CrossSpeakerBlock::new(&mut s, "cs", &bc, cfg.cs_ffn));
                        DecoderStage { merge, units, stage_cs }
                    })
                    .collect()
            })
            .collect();
        let output = OutputLayer::new(&mut pb, "output", f, cfg.f_o);
        let decoder = AudioDecoder::new(&mut pb, "codec.decoder", cfg.f_o, cfg.kernel, cfg.decoder_bias);
        let aux = match aux_domain {
            None => Vec::new(),
            Some(domain) => (0..r)
                .map(|k| {
                    let mut s = pb.scope(format!("aux.stage{k}"));
                    let mask = OutputLayer::new(&mut s, "mask", f, cfg.f_o);
                    let target = match domain {
                        AuxDomain::Time => {
                            AuxTarget::Time(AudioDecoder::new(&mut s, "decoder", cfg.f_o, cfg.kernel, cfg.decoder_bias))
                        }
                        AuxDomain::StftMag => AuxTarget::StftMag(Linear::new(&mut s, "magnitude", cfg.f_o, STFT_BINS, true)),
                    };
                    AuxHead { mask, target }
                })
                .collect(),
        };
        Ok(Self {
            encoder,
            input,
            stages,
            splits,
            decoders,
            output,
            decoder,
            aux,
        })
    }

    /// Split at resolution index `res` (frames `T / 2^res`).
    fn split<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        g: &mut Graph<S>,
        x: NodeId,
        res: usize,
        opts: &ForwardOptions,
    ) -> Result<NodeId> {
        let layer = &self.splits[if self.splits.len() == 1 { 0 } else { res }];
        let scope = g.mac_scope().to_string();
        g.set_mac_scope("split");
        let s = layer.forward(ctx, g, x)?;
        g.set_mac_scope(&scope);
        match &opts.speaker_perm {
            Some(p) => g.select_batch(s, p),
            None => Ok(s),
        }
    }

    fn forward<S: Scalar>(
        &self,
        cfg: &ModelConfig,
        ctx: &mut Ctx<S>,
        g: &mut Graph<S>,
        input: NodeId,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (b, one, np) = g.value(input).dims3()?;
        let (expect, frames) = cfg.padded(np);
        if b != 1 || one != 1 || expect != np {
            return Err(Error::Shape(format!(
                "separator input must be a padded [1, 1, N'] waveform, got [{}, {}, {}]",
                b, one, np
            )));
        }
        let r = cfg.depth;
        g.set_mac_scope("codec.encoder");
        let ew = ctx.p(g, self.encoder.w);
        let eb = ctx.p(g, self.encoder.b);
        let feats = g.frame_conv(input, ew, Some(eb), cfg.stride)?;
        let feats = g.gelu(feats)?;
        debug_assert_eq!(g.value(feats).dims3()?.2, frames);

        g.set_mac_scope("input");
        let h = self.input.0.forward(ctx, g, feats)?;
        let mut h = self.input.1.forward(ctx, g, h)?;
        let mut skips = Vec::with_capacity(r);
        for (stage, enc) in self.stages.iter().enumerate() {
            let pool = 1 << (r - stage);
            g.set_mac_scope(&format!("encoder.stage{stage}"));
            for (global, local) in &enc.blocks {
                h = global.forward(ctx, g, h, pool)?;
                h = local.forward(ctx, g, h, pool)?;
            }
            if let Some(down) = &enc.down {
                skips.push(h);
                h = down.forward(ctx, g, h)?;
            }
        }

        let late = cfg.decoder_mode == DecoderMode::LateSplit;
        let mut cur = if late { h } else { self.split(ctx, g, h, r, opts)? };
        let mut taps = Vec::with_capacity(r);
        let mut probes = Vec::new();
        for d in 0..r {
            let res = r - 1 - d;
            taps.push((cur, res + 1));
            let skip = if late {
                skips[res]
            } else {
                self.split(ctx, g, skips[res], res, opts)?
            };
            let pool = 1 << (r - res);
            g.set_mac_scope(&format!("decoder.stage{d}"));
            cur = if self.decoders.len() == 1 {
                self.decoder_stage(&self.decoders[0][d], ctx, g, cur, skip, pool, d, opts.probes, &mut probes)?
            } else {
                let mut outs = Vec::with_capacity(self.decoders.len());
                for (spk, dec) in self.decoders.iter().enumerate() {
                    let c = g.select_batch(cur, &[spk])?;
                    let s = g.select_batch(skip, &[spk])?;
                    outs.push(self.decoder_stage(&dec[d], ctx, g, c, s, pool, d, opts.probes, &mut probes)?);
                }
                g.concat_batch(&outs)?
            };
        }
        if late {
            cur = self.split(ctx, g, cur, 0, opts)?;
        }

        g.set_mac_scope("output");
        let y = self.output.forward(ctx, g, cur)?;
        g.set_mac_scope("codec.decoder");
        let estimates = self.decoder.forward(ctx, g, y, cfg.stride)?;

        let mut aux = Vec::new();
        if opts.aux {
            if self.aux.len() != taps.len() {
                return Err(Error::Config("model was built without auxiliary heads".into()));
            }
            for (k, (head, &(tap, res))) in self.aux.iter().zip(&taps).enumerate() {
                g.set_mac_scope(&format!("aux.stage{k}"));
                let tap = if late { self.split(ctx, g, tap, res, opts)? } else { tap };
                let m = head.mask.forward(ctx, g, tap)?;
                let m = g.upsample(m, 1 << res)?;
                let masked = g.mul_broadcast(m, feats)?;
                aux.push(match &head.target {
                    AuxTarget::Time(dec) => AuxOutput::Time(dec.forward(ctx, g, masked, cfg.stride)?),
                    AuxTarget::StftMag(lin) => {
                        let q = STFT_HOP / cfg.stride;
                        let n = frames / q;
                        if n == 0 {
                            return Err(Error::Shape(format!(
                                "input too short for magnitude targets ({} frames, need {})",
                                frames, q
                            )));
                        }
                        let mag = lin.forward(ctx, g, masked)?;
                        let mag = g.slice_time(mag, 0, n * q)?;
                        AuxOutput::StftMag(g.avg_pool(mag, q)?)
                    }
                });
            }
        }
        Ok(ForwardOutput {
            estimates,
            features: feats,
            aux,
            probes,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_stage<S: Scalar>(
        &self,
        stage: &DecoderStage,
        ctx: &mut Ctx<S>,
        g: &mut Graph<S>,
        x: NodeId,
        skip: NodeId,
        pool: usize,
        index: usize,
        record: bool,
        probes: &mut Vec<ProbeTaps>,
    ) -> Result<NodeId> {
        let up = g.upsample(x, 2)?;
        let cat = g.concat_channels(&[up, skip])?;
        let mut h = stage.merge.forward(ctx, g, cat)?;
        for (u, unit) in stage.units.iter().enumerate() {
            let z1 = h;
            let z2 = unit.global.forward(ctx, g, z1, pool)?;
            let z3 = unit.local.forward(ctx, g, z2, pool)?;
            let z4 = match &unit.cs {
                Some(cs) => cs.forward(ctx, g, z3)?,
                None => z3,
            };
            if record {
                probes.push(ProbeTaps {
                    stage: index,
                    unit: u,
                    z: [z1, z2, z3, z4],
                });
            }
            h = z4;
        }
        if let Some(cs) = &stage.stage_cs {
            h = cs.forward(ctx, g, h)?;
        }
        Ok(h)
    }
}
