//! Synthetic sources, SNR-controlled two-speaker mixing, segmentation,
//! dynamic mixing and manifest-based datasets.
//!
//! Mixtures are built so that `mixture == sources[0] + sources[1]` holds
//! exactly in `f32`: both scaled sources are rounded onto a common binary grid
//! fine enough (23 significant bits of the peak) that their sum is
//! representable without rounding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use rustfft::num_complex::Complex;

use crate::codec::Waveform;
use crate::error::{Error, Result};

/// Lowest and highest SNR drawn for random mixtures, in dB.
pub const SNR_RANGE: (f64, f64) = (-5.0, 5.0);

/// Kind of synthetic source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SourceKind {
    /// White noise confined to `[lo, hi]` Hz.
    BandNoise { lo: f64, hi: f64 },
    /// Partials `k * f0` below Nyquist with `1/k` amplitudes and random phases.
    Harmonic { f0: f64, partials: usize },
    /// `(1 + depth sin(2 pi fm t)) sin(2 pi fc t)` with random phases.
    AmTone { carrier: f64, modulation: f64, depth: f64 },
}

/// Generator for stream `index` of run `seed`; every example derives its
/// randomness this way so parallel and serial generation agree.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normalize_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Deterministic unit-RMS source of `n` samples.
pub fn synth_source(kind: SourceKind, n: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if n == 0 {
        return Err(Error::Config("source length must be positive".into()));
    }
    let nyq = sample_rate as f64 / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * std::f64::consts::PI;
    let fs = sample_rate as f64;
    let x = match kind {
        SourceKind::BandNoise { lo, hi } => {
            if !(lo > 0.0 && lo < hi && hi < nyq) {
                return Err(Error::Config(format!("band [{lo}, {hi}] Hz not inside (0, {nyq})")));
            }
            let mut buf: Vec<Complex<f64>> = (0..n)
                .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
                .collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(n).process(&mut buf);
            for (k, b) in buf.iter_mut().enumerate() {
                let f = k.min(n - k) as f64 * fs / n as f64;
                if f < lo || f > hi {
                    *b = Complex::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            buf.iter().map(|c| c.re).collect()
        }
        SourceKind::Harmonic { f0, partials } => {
            if !(f0 > 0.0 && f0 < nyq) || partials == 0 {
                return Err(Error::Config(format!("harmonic f0 {f0} Hz not inside (0, {nyq})")));
            }
            let parts: Vec<(f64, f64)> = (1..=partials)
                .take_while(|&k| k as f64 * f0 < nyq)
                .map(|k| (k as f64, rng.random_range(0.0..tau)))
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    parts.iter().map(|&(k, ph)| (tau * k * f0 * t + ph).sin() / k).sum()
                })
                .collect()
        }
        SourceKind::AmTone {
            carrier,
            modulation,
            depth,
        } => {
            if !(carrier > 0.0 && carrier < nyq) || !(modulation > 0.0 && modulation < nyq) {
                return Err(Error::Config(format!("tone frequencies must lie in (0, {nyq}) Hz")));
            }
            let (p1, p2) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    (1.0 + depth * (tau * modulation * t + p1).sin()) * (tau * carrier * t + p2).sin()
                })
                .collect()
        }
    };
    Waveform::from_f64(&normalize_rms(x), sample_rate)
}

/// Two-speaker training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    /// The signals as they appear in the mixture (after SNR scaling).
    pub sources: Vec<Waveform>,
    pub snr_db: f64,
    pub seed: u64,
    pub source_ids: Vec<String>,
    /// Samples of real signal; the rest is zero padding.
    pub valid_length: usize,
}

impl MixtureExample {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.len() == 0
    }

    /// Same window of mixture and sources, zero padded past the end.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        let cut = |w: &Waveform| segment_at(w, start, len);
        Ok(Self {
            mixture: cut(&self.mixture)?.0,
            sources: self.sources.iter().map(|s| cut(s).map(|c| c.0)).collect::<Result<_>>()?,
            snr_db: self.snr_db,
            seed: self.seed,
            source_ids: self.source_ids.clone(),
            valid_length: self.valid_length.saturating_sub(start).min(len),
        })
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Gain `c` that puts `s2` at `snr_db` below `s1`.
pub fn snr_scale(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<f64> {
    let (p1, p2) = (power(&s1.to_f64()), power(&s2.to_f64()));
    if p1 == 0.0 || p2 == 0.0 {
        return Err(Error::Data("cannot mix a zero-power source".into()));
    }
    Ok((p1 / p2 * 10f64.powf(-snr_db / 10.0)).sqrt())
}

/// Round `a` and `b` onto a common power-of-two grid so `a + b` is exact in `f32`.
fn exact_pair(a: &[f64], b: &[f64]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let peak = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let q = if peak > 0.0 {
        2f64.powi(peak.log2().floor() as i32 + 1 - 22)
    } else {
        1.0
    };
    let grid = |x: &[f64]| -> Vec<f32> { x.iter().map(|v| ((v / q).round() * q) as f32).collect() };
    let (ga, gb) = (grid(a), grid(b));
    let mix = ga.iter().zip(&gb).map(|(x, y)| x + y).collect();
    (ga, gb, mix)
}

/// `s1 + c * s2` with `c` from [`snr_scale`]; sources are stored as mixed.
pub fn mix_at_snr(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<MixtureExample> {
    mix_scaled(s1, s2, snr_db, 1.0)
}

/// [`mix_at_snr`] with an extra common gain on both sources.
pub fn mix_scaled(s1: &Waveform, s2: &Waveform, snr_db: f64, gain: f64) -> Result<MixtureExample> {
    if s1.len() != s2.len() {
        return Err(Error::Data(format!("source lengths differ: {} vs {}", s1.len(), s2.len())));
    }
    if s1.sample_rate != s2.sample_rate {
        return Err(Error::Data("sources have different sample rates".into()));
    }
    if !snr_db.is_finite() || !(gain > 0.0) {
        return Err(Error::Data(format!("invalid snr {snr_db} dB or gain {gain}")));
    }
    let c = snr_scale(s1, s2, snr_db)?;
    let a: Vec<f64> = s1.samples.iter().map(|&v| gain * v as f64).collect();
    // Rounding onto the grid shifts the power ratio slightly; nudge the scale
    // until the stored pair realizes the requested SNR.
    let mut k = gain * c;
    let mut best: Option<(f64, (Vec<f32>, Vec<f32>, Vec<f32>))> = None;
    for _ in 0..8 {
        let b: Vec<f64> = s2.samples.iter().map(|&v| k * v as f64).collect();
        let pair = exact_pair(&a, &b);
        let p = |x: &[f32]| power(&x.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let err = 10.0 * (p(&pair.0) / p(&pair.1)).log10() - snr_db;
        if !err.is_finite() {
            return Err(Error::Data("mixture underflows the sample grid".into()));
        }
        let done = err.abs() < 1e-9;
        if best.as_ref().is_none_or(|(e, _)| err.abs() < e.abs()) {
            best = Some((err, pair));
        }
        if done {
            break;
        }
        k *= 10f64.powf(err / 20.0);
    }
    let (_, (a, b, mix)) = best.expect("at least one iteration");
    let rate = s1.sample_rate;
    Ok(MixtureExample {
        mixture: Waveform::new(mix, rate)?,
        sources: vec![Waveform::new(a, rate)?, Waveform::new(b, rate)?],
        snr_db,
        seed: 0,
        source_ids: Vec::new(),
        valid_length: s1.len(),
    })
}

/// Mixture peak after mixing at `snr_db` with unit gain.
fn mixture_peak(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<f64> {
    let c = snr_scale(s1, s2, snr_db)?;
    Ok(s1
        .samples
        .iter()
        .zip(&s2.samples)
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 + c * b as f64).abs())))
}

/// [`mix_at_snr`] with the common gain that puts the mixture peak at [`MIX_PEAK`].
pub fn mix_normalized(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<MixtureExample> {
    mix_scaled(s1, s2, snr_db, MIX_PEAK / mixture_peak(s1, s2, snr_db)?)
}

/// Peak level mixtures are normalized to before writing or training.
pub const MIX_PEAK: f64 = 0.9;

/// Crop policy of [`segment`].
#[derive(Debug)]
pub enum SegmentPolicy<'a> {
    /// The first `len` samples, deterministic.
    Leading,
    /// A uniformly random window.
    Random(&'a mut ChaCha8Rng),
}

fn segment_at(w: &Waveform, start: usize, len: usize) -> Result<(Waveform, usize)> {
    let mut out = vec![0.0f32; len];
    let avail = w.len().saturating_sub(start).min(len);
    out[..avail].copy_from_slice(&w.samples[start..start + avail]);
    Ok((Waveform::new(out, w.sample_rate)?, avail))
}

fn crop_start(n: usize, len: usize, policy: SegmentPolicy<'_>) -> usize {
    match policy {
        SegmentPolicy::Random(rng) if n > len => rng.random_range(0..=n - len),
        _ => 0,
    }
}

/// Crop or zero-pad to exactly `seconds * sample_rate` samples. Returns the
/// segment and its valid length.
pub fn segment(w: &Waveform, seconds: f64, policy: SegmentPolicy<'_>) -> Result<(Waveform, usize)> {
    let len = (seconds * w.sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::Config(format!("segment of {seconds} s is empty")));
    }
    segment_at(w, crop_start(w.len(), len, policy), len)
}

/// [`segment`] applied jointly to a mixture and its sources.
pub fn segment_example(ex: &MixtureExample, len: usize, policy: SegmentPolicy<'_>) -> Result<MixtureExample> {
    ex.crop(crop_start(ex.len(), len, policy), len)
}

/// A labelled source.
#[derive(Clone, Debug)]
pub struct Source {
    pub id: String,
    pub waveform: Waveform,
}

/// On-the-fly remixing settings.
#[derive(Clone, Debug)]
pub struct DynamicMixing {
    pub segment_samples: usize,
    /// Gain perturbation range in dB below [`MIX_PEAK`].
    pub gain_db: (f64, f64),
}

impl Default for DynamicMixing {
    fn default() -> Self {
        Self {
            segment_samples: 32000,
            gain_db: (-6.0, 0.0),
        }
    }
}

/// Two distinct sources from `pool`, random crops, random SNR in
/// [`SNR_RANGE`], random gain. Fully determined by `rng`.
pub fn dynamic_mix(pool: &[Source], cfg: &DynamicMixing, rng: &mut ChaCha8Rng) -> Result<MixtureExample> {
    if pool.len() < 2 {
        return Err(Error::Data(format!("dynamic mixing needs at least 2 sources, pool has {}", pool.len())));
    }
    let i = rng.random_range(0..pool.len());
    let mut j = rng.random_range(0..pool.len() - 1);
    if j >= i {
        j += 1;
    }
    let len = cfg.segment_samples;
    let mut crop = |s: &Source| {
        let start = crop_start(s.waveform.len(), len, SegmentPolicy::Random(rng));
        segment_at(&s.waveform, start, len)
    };
    let (a, va) = crop(&pool[i])?;
    let (b, vb) = crop(&pool[j])?;
    let snr = rng.random_range(SNR_RANGE.0..=SNR_RANGE.1);
    let gain_db = rng.random_range(cfg.gain_db.0..=cfg.gain_db.1);
    let gain = MIX_PEAK / mixture_peak(&a, &b, snr)? * 10f64.powf(gain_db / 20.0);
    let mut ex = mix_scaled(&a, &b, snr, gain)?;
    ex.source_ids = vec![pool[i].id.clone(), pool[j].id.clone()];
    ex.valid_length = va.max(vb);
    Ok(ex)
}

/// SNR of a manifest row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowSnr {
    Fixed(f64),
    /// Drawn uniformly from [`SNR_RANGE`] per (seed, row).
    Random,
}

/// One manifest line: `source_1 source_2 offset duration snr_db|random`, with
/// offset and duration in samples and paths relative to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub sources: [PathBuf; 2],
    pub offset: usize,
    pub duration: usize,
    pub snr: RowSnr,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Parse the text format; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| Error::Data(format!("manifest line {}: {}", no + 1, what));
            if cols.len() != 5 {
                return Err(bad(&format!("expected 5 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("'{s}' is not a sample count")));
            let snr = match cols[4] {
                "random" => RowSnr::Random,
                s => RowSnr::Fixed(
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(&format!("'{s}' is not an SNR")))?,
                ),
            };
            let duration = num(cols[3])?;
            if duration == 0 {
                return Err(bad("duration must be positive"));
            }
            rows.push(ManifestRow {
                sources: [PathBuf::from(cols[0]), PathBuf::from(cols[1])],
                offset: num(cols[2])?,
                duration,
                snr,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# source_1 source_2 offset duration snr_db\n");
        for r in &self.rows {
            let snr = match r.snr {
                RowSnr::Fixed(v) => format!("{v:.6}"),
                RowSnr::Random => "random".into(),
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                r.sources[0].display(),
                r.sources[1].display(),
                r.offset,
                r.duration,
                snr
            );
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Mixtures of a manifest, loaded eagerly.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<MixtureExample>,
}

impl Dataset {
    /// Build every row. Row `i` with a random SNR draws it from
    /// `example_rng(seed, i)`, so the dataset is a pure function of
    /// (manifest, seed).
    pub fn from_manifest(path: &Path, sample_rate: u32, seed: u64) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cache: HashMap<PathBuf, Waveform> = HashMap::new();
        let mut examples = Vec::with_capacity(manifest.rows.len());
        for (i, row) in manifest.rows.iter().enumerate() {
            let mut segs = Vec::with_capacity(2);
            for p in &row.sources {
                let full = base.join(p);
                if !cache.contains_key(&full) {
                    let w = Waveform::read_wav(&full, sample_rate)
                        .map_err(|e| Error::Data(format!("{}: {}", full.display(), e)))?;
                    cache.insert(full.clone(), w);
                }
                let w = &cache[&full];
                if row.offset + row.duration > w.len() {
                    return Err(Error::Data(format!(
                        "{}: row {} needs samples up to {}, file has {}",
                        full.display(),
                        i + 1,
                        row.offset + row.duration,
                        w.len()
                    )));
                }
                segs.push(segment_at(w, row.offset, row.duration)?.0);
            }
            let snr = match row.snr {
                RowSnr::Fixed(v) => v,
                RowSnr::Random => example_rng(seed, i as u64).random_range(SNR_RANGE.0..=SNR_RANGE.1),
            };
            let mut ex = mix_normalized(&segs[0], &segs[1], snr)?;
            ex.seed = seed;
            ex.source_ids = row.sources.iter().map(|p| p.display().to_string()).collect();
            examples.push(ex);
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Pool a source belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Interleaved assignment: every 8th source (offset 3) is validation,
    /// every 8th (offset 7) is test, so held-out bands sit between training bands.
    pub fn of_index(i: usize) -> Self {
        match i % 8 {
            3 => Split::Val,
            7 => Split::Test,
            _ => Split::Train,
        }
    }
}

/// Settings of the synthetic desk-scale corpus.
#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub n_sources: usize,
    pub source_seconds: f64,
    pub sample_rate: u32,
    /// Band-noise sources tile `[band_lo, band_hi]` Hz with one band each.
    pub band_lo: f64,
    pub band_hi: f64,
    /// Fraction of each band slot actually occupied, keeping bands disjoint.
    pub band_fill: f64,
    pub segment_samples: usize,
    pub train_mixtures: usize,
    pub eval_mixtures: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_sources: 64,
            source_seconds: 10.0,
            sample_rate: 8000,
            band_lo: 100.0,
            band_hi: 3900.0,
            band_fill: 0.8,
            segment_samples: 32000,
            train_mixtures: 2000,
            eval_mixtures: 200,
        }
    }
}

impl CorpusConfig {
    /// Band `[lo, hi]` of source `i`.
    pub fn band(&self, i: usize) -> (f64, f64) {
        let slot = (self.band_hi - self.band_lo) / self.n_sources as f64;
        let margin = slot * (1.0 - self.band_fill) / 2.0;
        let lo = self.band_lo + slot * i as f64;
        (lo + margin, lo + slot - margin)
    }

    fn validate(&self) -> Result<()> {
        if self.n_sources < 16 {
            return Err(Error::Config(format!(
                "need at least 16 sources for two per held-out pool, got {}",
                self.n_sources
            )));
        }
        if !(0.0 < self.band_fill && self.band_fill <= 1.0) {
            return Err(Error::Config("band_fill must lie in (0, 1]".into()));
        }
        let n = (self.source_seconds * self.sample_rate as f64).round() as usize;
        if self.segment_samples == 0 || self.segment_samples > n {
            return Err(Error::Config(format!(
                "segment of {} samples does not fit sources of {} samples",
                self.segment_samples, n
            )));
        }
        Ok(())
    }
}

/// In-memory synthetic corpus: sources by pool.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub pools: HashMap<Split, Vec<Source>>,
}

impl Corpus {
    pub fn generate(config: CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = (config.source_seconds * config.sample_rate as f64).round() as usize;
        let mut pools: HashMap<Split, Vec<Source>> = HashMap::new();
        for i in 0..config.n_sources {
            let (lo, hi) = config.band(i);
            let w = synth_source(
                SourceKind::BandNoise { lo, hi },
                n,
                config.sample_rate,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            )?;
            pools.entry(Split::of_index(i)).or_default().push(Source {
                id: format!("src_{i:03}"),
                waveform: w,
            });
        }
        Ok(Self { config, pools })
    }

    pub fn pool(&self, split: Split) -> &[Source] {
        self.pools.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Manifest of `count` random pairs from one pool, SNRs written explicitly.
    pub fn manifest(&self, split: Split, count: usize, seed: u64) -> Manifest {
        let pool = self.pool(split);
        let n = (self.config.source_seconds * self.config.sample_rate as f64).round() as usize;
        let len = self.config.segment_samples;
        let stream = match split {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        };
        let mut rng = example_rng(seed, stream);
        let rows = (0..count)
            .map(|_| {
                let i = rng.random_range(0..pool.len());
                let mut j = rng.random_range(0..pool.len() - 1);
                if j >= i {
                    j += 1;
                }
                let offset = rng.random_range(0..=n - len);
                let snr = (rng.random_range(SNR_RANGE.0..=SNR_RANGE.1) * 1e6).round() / 1e6;
                ManifestRow {
                    sources: [
                        PathBuf::from(format!("sources/{}.wav", pool[i].id)),
                        PathBuf::from(format!("sources/{}.wav", pool[j].id)),
                    ],
                    offset,
                    duration: len,
                    snr: RowSnr::Fixed(snr),
                }
            })
            .collect();
        Manifest { rows }
    }

    /// The mixtures of [`Corpus::manifest`], built in memory.
    pub fn examples(&self, split: Split, count: usize, seed: u64) -> Result<Vec<MixtureExample>> {
        let pool = self.pool(split);
        self.manifest(split, count, seed)
            .rows
            .iter()
            .map(|row| {
                let mut segs = Vec::with_capacity(2);
                let mut ids = Vec::with_capacity(2);
                for p in &row.sources {
                    let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    let src = pool
                        .iter()
                        .find(|s| s.id == id)
                        .ok_or_else(|| Error::Data(format!("unknown source {id}")))?;
                    segs.push(segment_at(&src.waveform, row.offset, row.duration)?.0);
                    ids.push(src.id.clone());
                }
                let RowSnr::Fixed(snr) = row.snr else {
                    unreachable!("corpus manifests carry explicit SNRs")
                };
                let mut ex = mix_normalized(&segs[0], &segs[1], snr)?;
                ex.seed = seed;
                ex.source_ids = ids;
                Ok(ex)
            })
            .collect()
    }

    /// Write `sources/*.wav` and `{train,val,test}.txt` under `dir`.
    pub fn write(&self, dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
        let src_dir = dir.join("sources");
        fs::create_dir_all(&src_dir)?;
        for pool in self.pools.values() {
            for s in pool {
                // Sources are unit RMS; scale into 16-bit range with a fixed headroom.
                let peak = s.waveform.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let g = if peak > 0.0 { 0.5 / peak } else { 1.0 };
                let w = Waveform::new(s.waveform.samples.iter().map(|v| v * g).collect(), s.waveform.sample_rate)?;
                w.write_wav(src_dir.join(format!("{}.wav", s.id)))?;
            }
        }
        let mut written = Vec::new();
        for (split, count) in [
            (Split::Train, self.config.train_mixtures),
            (Split::Val, self.config.eval_mixtures),
            (Split::Test, self.config.eval_mixtures),
        ] {
            let path = dir.join(format!("{}.txt", split.name()));
            fs::write(&path, self.manifest(split, count, seed).to_text())?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn noise(n: usize, seed: u64) -> Waveform {
        synth_source(SourceKind::BandNoise { lo: 200.0, hi: 800.0 }, n, 8000, seed).unwrap()
    }

    fn rms(w: &Waveform) -> f64 {
        power(&w.to_f64()).sqrt()
    }

    #[test]
    fn synthesis_is_deterministic_and_unit_rms() {
        for kind in [
            SourceKind::BandNoise { lo: 200.0, hi: 800.0 },
            SourceKind::Harmonic { f0: 150.0, partials: 10 },
            SourceKind::AmTone {
                carrier: 1000.0,
                modulation: 4.0,
                depth: 0.5,
            },
        ] {
            let a = synth_source(kind, 4000, 8000, 9).unwrap();
            assert_eq!(a, synth_source(kind, 4000, 8000, 9).unwrap());
            assert_abs_diff_eq!(rms(&a), 1.0, epsilon = 1e-6);
        }
        assert!(synth_source(SourceKind::BandNoise { lo: 100.0, hi: 4000.0 }, 10, 8000, 0).is_err());
        assert!(synth_source(SourceKind::BandNoise { lo: 0.0, hi: 400.0 }, 10, 8000, 0).is_err());
    }

    #[test]
    fn band_noise_energy_stays_in_band() {
        // Direct O(n^2) DFT as the reference.
        let n = 2000;
        let x = noise(n, 3).to_f64();
        let (mut inside, mut total) = (0.0, 0.0);
        for k in 0..=n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            let e = re * re + im * im;
            let f = k as f64 * 8000.0 / n as f64;
            total += e;
            if (200.0..=800.0).contains(&f) {
                inside += e;
            }
        }
        assert!(inside / total >= 0.95, "{}", inside / total);
    }

    #[test]
    fn snr_scale_closed_forms() {
        let a = noise(1000, 1);
        let b = noise(1000, 2);
        assert_abs_diff_eq!(snr_scale(&a, &b, 0.0).unwrap(), rms(&a) / rms(&b), epsilon = 1e-12);
        // Equal power: c = 10^(-snr/20); 6.0206 dB halves the amplitude.
        let c = snr_scale(&a, &a, 6.0206).unwrap();
        assert_abs_diff_eq!(c, 0.5, epsilon = 1e-5);
        assert_eq!(snr_scale(&a, &a, 0.0).unwrap(), 1.0);
        let z = Waveform::new(vec![0.0; 1000], 8000).unwrap();
        assert!(matches!(mix_at_snr(&a, &z, 0.0), Err(Error::Data(_))));
    }

    #[test]
    fn snr_law_survives_grid_rounding() {
        // Plain rounding missed this one by 1.07e-6 dB.
        let a = noise(800, 901);
        let b = synth_source(SourceKind::Harmonic { f0: 210.0, partials: 6 }, 800, 8000, 902).unwrap();
        let ex = mix_scaled(&a, &b, 8.286027601653029, 2.5529571115661187).unwrap();
        let p = |w: &Waveform| power(&w.to_f64());
        let realized = 10.0 * (p(&ex.sources[0]) / p(&ex.sources[1])).log10();
        assert!((realized - 8.286027601653029).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn mixture_identity_and_snr_law(seed in 0u64..1000, snr in -10.0f64..10.0, gain in 0.01f64..3.0) {
            let a = noise(800, seed);
            let b = synth_source(SourceKind::Harmonic { f0: 210.0, partials: 6 }, 800, 8000, seed + 1).unwrap();
            let ex = mix_scaled(&a, &b, snr, gain).unwrap();
            for t in 0..ex.len() {
                let d = ex.mixture.samples[t] as f64 - ex.sources[0].samples[t] as f64 - ex.sources[1].samples[t] as f64;
                prop_assert_eq!(d, 0.0);
            }
            let p = |w: &Waveform| power(&w.to_f64());
            let realized = 10.0 * (p(&ex.sources[0]) / p(&ex.sources[1])).log10();
            prop_assert!((realized - snr).abs() < 1e-6, "{} vs {}", realized, snr);
        }
    }

    #[test]
    fn segmentation() {
        let w = noise(40000, 1);
        let (s, v) = segment(&w, 4.0, SegmentPolicy::Leading).unwrap();
        assert_eq!((s.len(), v), (32000, 32000));
        assert_eq!(&s.samples[..], &w.samples[..32000]);
        let short = noise(24000, 2);
        let (s, v) = segment(&short, 4.0, SegmentPolicy::Leading).unwrap();
        assert_eq!((s.len(), v), (32000, 24000));
        assert!(s.samples[24000..].iter().all(|&x| x == 0.0));
        assert_eq!(segment(&short, 4.0, SegmentPolicy::Leading).unwrap().0, s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, _) = segment(&w, 4.0, SegmentPolicy::Random(&mut rng)).unwrap();
        assert_eq!(r.len(), 32000);
    }

    fn pool(n: usize) -> Vec<Source> {
        (0..n)
            .map(|i| Source {
                id: format!("s{i}"),
                waveform: synth_source(
                    SourceKind::BandNoise {
                        lo: 100.0 + 300.0 * i as f64,
                        hi: 300.0 + 300.0 * i as f64,
                    },
                    3000,
                    8000,
                    i as u64,
                )
                .unwrap(),
            })
            .collect()
    }

    #[test]
    fn dynamic_mixing() {
        let cfg = DynamicMixing {
            segment_samples: 1000,
            ..Default::default()
        };
        let two = pool(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ex = dynamic_mix(&two, &cfg, &mut rng).unwrap();
            let mut ids = ex.source_ids.clone();
            ids.sort();
            assert_eq!(ids, vec!["s0", "s1"]);
            assert_eq!(ex.len(), 1000);
            assert!((SNR_RANGE.0..=SNR_RANGE.1).contains(&ex.snr_db));
            assert!(ex.mixture.samples.iter().all(|v| v.abs() <= 1.0));
        }
        let five = pool(5);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            assert_eq!(dynamic_mix(&five, &cfg, &mut r1).unwrap(), dynamic_mix(&five, &cfg, &mut r2).unwrap());
        }
        assert!(dynamic_mix(&five[..1], &cfg, &mut r1).is_err());
    }

    #[test]
    fn dynamic_mixing_snr_is_uniform() {
        // Kolmogorov-Smirnov distance against U[-5, 5] over 10k draws.
        let cfg = DynamicMixing {
            segment_samples: 16,
            ..Default::default()
        };
        let p = pool(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut snrs: Vec<f64> = (0..10_000).map(|_| dynamic_mix(&p, &cfg, &mut rng).unwrap().snr_db).collect();
        snrs.sort_by(f64::total_cmp);
        let n = snrs.len() as f64;
        let d = snrs
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let f = (s + 5.0) / 10.0;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 0.02, "KS statistic {d}");
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let m = Manifest {
            rows: vec![
                ManifestRow {
                    sources: [PathBuf::from("a.wav"), PathBuf::from("b.wav")],
                    offset: 10,
                    duration: 100,
                    snr: RowSnr::Fixed(-2.5),
                },
                ManifestRow {
                    sources: [PathBuf::from("c.wav"), PathBuf::from("d.wav")],
                    offset: 0,
                    duration: 8,
                    snr: RowSnr::Random,
                },
            ],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("a b 0 10").is_err());
        assert!(Manifest::parse("a b x 10 0").is_err());
        assert!(Manifest::parse("a b 0 10 loud").is_err());
        assert!(Manifest::parse("a b 0 0 1").is_err());
    }

    #[test]
    fn corpus_pools_are_disjoint_and_banded() {
        let cfg = CorpusConfig {
            source_seconds: 0.5,
            segment_samples: 2000,
            train_mixtures: 20,
            eval_mixtures: 5,
            ..Default::default()
        };
        let c = Corpus::generate(cfg.clone(), 4).unwrap();
        assert_eq!(c.pool(Split::Train).len(), 48);
        assert_eq!(c.pool(Split::Val).len(), 8);
        assert_eq!(c.pool(Split::Test).len(), 8);
        for i in 1..64 {
            assert!(cfg.band(i - 1).1 < cfg.band(i).0);
        }
        let m = c.manifest(Split::Test, 5, 1);
        assert_eq!(m, c.manifest(Split::Test, 5, 1));
        let test_ids: Vec<String> = c.pool(Split::Test).iter().map(|s| format!("sources/{}.wav", s.id)).collect();
        for r in &m.rows {
            assert_ne!(r.sources[0], r.sources[1]);
            for p in &r.sources {
                assert!(test_ids.contains(&p.display().to_string()));
            }
        }
    }

    #[test]
    fn example_streams_are_independent_of_order() {
        let a: Vec<u32> = (0..4).map(|i| example_rng(5, i).random()).collect();
        let b: Vec<u32> = (0..4).rev().map(|i| example_rng(5, i).random()).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(a[0], a[1]);
    }
}
