//! Learnable time-domain audio codec: a strided framing convolution with GELU
//! in front of the separator and a transposed convolution behind it, plus the
//! length bookkeeping that makes every downsampling stage exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Mono audio signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("waveform must have at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn from_f64(samples: &[f64], sample_rate: u32) -> Result<Self> {
        Self::new(samples.iter().map(|&v| v as f32).collect(), sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / self.len() as f64
    }

    /// Read a 16-bit PCM mono WAV file. A sample-rate mismatch is an error.
    pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Data(format!(
                "{}: expected 16-bit PCM mono, found {} channel(s) at {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        if spec.sample_rate != expected_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {} Hz, expected {} Hz",
                path.display(),
                spec.sample_rate,
                expected_rate
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Write as 16-bit PCM mono, clipping to the representable range.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &v in &self.samples {
            let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(q)?;
        }
        w.finalize()?;
        Ok(())
    }
}

/// Channels-by-frames feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `[channels, frames]`
    pub data: Tensor<f32>,
    /// Samples per frame advance.
    pub hop: usize,
}

impl FeatureSequence {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn at(&self, c: usize, t: usize) -> f32 {
        self.data.data()[c * self.frames() + t]
    }
}

/// Weights of one encoder/decoder pair.
#[derive(Clone, Debug)]
pub struct CodecParams {
    pub kernel: usize,
    pub stride: usize,
    /// `[filters, kernel]`
    pub encoder_w: Tensor<f32>,
    /// `[filters]`
    pub encoder_b: Tensor<f32>,
    /// `[filters, kernel]`
    pub decoder_w: Tensor<f32>,
    pub decoder_b: Option<f32>,
}

impl CodecParams {
    pub fn filters(&self) -> usize {
        self.encoder_w.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.filters();
        if self.stride == 0 || self.kernel < self.stride || f == 0 {
            return Err(Error::Config(format!(
                "codec needs kernel >= stride >= 1 and at least one filter (kernel {}, stride {}, filters {})",
                self.kernel, self.stride, f
            )));
        }
        if self.encoder_w.shape() != [f, self.kernel]
            || self.encoder_b.shape() != [f]
            || self.decoder_w.shape() != [f, self.kernel]
        {
            return Err(Error::Shape("codec weight shapes disagree".into()));
        }
        Ok(())
    }
}

/// Result of [`pad_for_depth`].
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub waveform: Waveform,
    pub original_length: usize,
    pub frames: usize,
}

/// Frame count of a length-`n` signal under kernel `l` and stride `h`, rounding up.
pub fn frames_covering(n: usize, l: usize, h: usize) -> usize {
    if n <= l {
        1
    } else {
        (n - l).div_ceil(h) + 1
    }
}

/// Smallest padded length whose frame count is a multiple of `2^depth`.
/// Returns `(padded_length, frames)`.
pub fn padded_length(n: usize, l: usize, h: usize, depth: usize) -> (usize, usize) {
    let unit = 1usize << depth;
    let frames = frames_covering(n, l, h).div_ceil(unit) * unit;
    ((frames - 1) * h + l, frames)
}

/// Append trailing zeros so the frame count `(N' - L) / H + 1` is an exact
/// multiple of `2^depth`.
pub fn pad_for_depth(x: &Waveform, l: usize, h: usize, depth: usize) -> Result<Padded> {
    if h == 0 || l < h {
        return Err(Error::Config(format!("kernel {} must be >= stride {} >= 1", l, h)));
    }
    let (np, frames) = padded_length(x.len(), l, h, depth);
    let mut samples = x.samples.clone();
    samples.resize(np, 0.0);
    Ok(Padded {
        waveform: Waveform {
            samples,
            sample_rate: x.sample_rate,
        },
        original_length: x.len(),
        frames,
    })
}

/// Encoder activation, switchable so the linear stage can be tested alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderActivation {
    Gelu,
    Identity,
}

/// `GELU(W x[tH : tH + L] + b)` for every frame `t`.
pub fn encode(x: &Waveform, p: &CodecParams) -> Result<FeatureSequence> {
    encode_with(x, p, EncoderActivation::Gelu)
}

pub fn encode_with(x: &Waveform, p: &CodecParams, act: EncoderActivation) -> Result<FeatureSequence> {
    p.validate()?;
    if x.len() < p.kernel {
        return Err(Error::Shape(format!(
            "encode: {} samples shorter than kernel {}",
            x.len(),
            p.kernel
        )));
    }
    let mut g = Graph::<f32>::new();
    let xi = g.constant(Tensor::new(&[1, 1, x.len()], x.samples.clone())?);
    let w = g.constant(p.encoder_w.clone());
    let b = g.constant(p.encoder_b.clone());
    let mut y = g.frame_conv(xi, w, Some(b), p.stride)?;
    if act == EncoderActivation::Gelu {
        y = g.gelu(y)?;
    }
    let (_, c, t) = g.value(y).dims3()?;
    Ok(FeatureSequence {
        data: g.value(y).clone().reshaped(&[c, t])?,
        hop: p.stride,
    })
}

/// Transposed convolution with overlap-add, truncated to `original_length`.
pub fn decode(y: &FeatureSequence, p: &CodecParams, original_length: usize, sample_rate: u32) -> Result<Waveform> {
    p.validate()?;
    if y.channels() != p.filters() {
        return Err(Error::Shape(format!(
            "decode: {} channels, codec has {} filters",
            y.channels(),
            p.filters()
        )));
    }
    let mut g = Graph::<f32>::new();
    let yi = g.constant(y.data.clone().reshaped(&[1, y.channels(), y.frames()])?);
    let w = g.constant(p.decoder_w.clone());
    let b = p.decoder_b.map(|b| g.constant(Tensor::scalar(b)));
    let out = g.overlap_add(yi, w, b, p.stride)?;
    let mut samples = g.value(out).data().to_vec();
    if original_length > samples.len() {
        return Err(Error::Shape(format!(
            "decode: {} frames produce {} samples, fewer than {}",
            y.frames(),
            samples.len(),
            original_length
        )));
    }
    samples.truncate(original_length);
    Waveform::new(samples, sample_rate)
}
