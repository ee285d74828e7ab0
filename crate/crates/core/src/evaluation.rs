//! Separation metrics (SI-SNRi, SDRi), parameter and multiply-accumulate
//! accounting, and the cross-speaker cosine-similarity probe.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::codec::Waveform;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::objectives::{self, LossConfig};
use crate::params::Ctx;
use crate::separator::{CsPlacement, DecoderMode, ForwardOptions, ModelConfig, Separator};
use crate::blocks::{EgaMode, FfnMode};

/// Taps of the allowed-distortion filter.
pub const SDR_FILTER_LEN: usize = 512;
/// Samples per accounting window.
pub const MAC_WINDOW: usize = 16000;

/// Per-mixture separation quality under the best speaker assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationMetrics {
    pub si_snri: f64,
    pub sdri: f64,
    pub per_speaker_si_snri: Vec<f64>,
    pub per_speaker_sdri: Vec<f64>,
    /// `permutation[j]` is the estimate assigned to reference `j`.
    pub permutation: Vec<usize>,
    /// Some SDR normal equations needed ridge regularization.
    pub ridge_used: bool,
}

fn check_lengths(mixture: &[f64], refs: &[Vec<f64>], ests: &[Vec<f64>]) -> Result<()> {
    if refs.len() != ests.len() || refs.is_empty() {
        return Err(Error::Shape(format!("{} references vs {} estimates", refs.len(), ests.len())));
    }
    if refs.iter().chain(ests).any(|v| v.len() != mixture.len()) {
        return Err(Error::Shape("mixture, references and estimates must have equal lengths".into()));
    }
    Ok(())
}

/// SI-SNR improvement: best-assignment mean SI-SNR minus the mean SI-SNR of
/// the unprocessed mixture. Returns `(mean, permutation, per-speaker)`.
pub fn si_snri(
    mixture: &[f64],
    refs: &[Vec<f64>],
    ests: &[Vec<f64>],
    loss: &LossConfig,
) -> Result<(f64, Vec<usize>, Vec<f64>)> {
    check_lengths(mixture, refs, ests)?;
    let m = objectives::pairwise_si_snr(refs, ests, loss.tau, loss.eps)?;
    let (_, perm) = objectives::best_assignment(&m);
    let per = refs
        .iter()
        .zip(&perm)
        .enumerate()
        .map(|(r, (reference, &e))| Ok(m[r][e] - objectives::si_snr(reference, mixture, loss.tau, loss.eps)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok((mean(&per), perm, per))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Least-squares projection onto the span of `filter_len` delayed copies of
/// a reference (delays `0..filter_len`, each truncated to the signal length).
pub struct SdrProjector {
    reference: Vec<f64>,
    filter_len: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub ridge_used: bool,
}

impl SdrProjector {
    pub fn new(reference: &[f64], filter_len: usize) -> Result<Self> {
        let (n, l) = (reference.len(), filter_len);
        if l == 0 || n < l {
            return Err(Error::Shape(format!("SDR needs at least {} samples, got {}", l, n)));
        }
        if reference.iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric("SDR reference is identically zero".into()));
        }
        // G[k][l] = sum_{t >= max(k, l)} r[t - k] r[t - l]; the first row is the
        // autocorrelation and G[k+1][l+1] = G[k][l] - r[n-1-k] r[n-1-l].
        let mut gram = DMatrix::<f64>::zeros(l, l);
        for m in 0..l {
            let a: f64 = (m..n).map(|t| reference[t] * reference[t - m]).sum();
            gram[(0, m)] = a;
            gram[(m, 0)] = a;
        }
        for k in 0..l - 1 {
            for j in k..l - 1 {
                let v = gram[(k, j)] - reference[n - 1 - k] * reference[n - 1 - j];
                gram[(k + 1, j + 1)] = v;
                gram[(j + 1, k + 1)] = v;
            }
        }
        let (chol, ridge_used) = match gram.clone().cholesky() {
            Some(c) => (c, false),
            None => {
                let lambda = 1e-8 * (gram.trace() / l as f64).max(f64::MIN_POSITIVE);
                let c = (gram + DMatrix::identity(l, l) * lambda)
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("SDR normal equations are singular even with ridge".into()))?;
                (c, true)
            }
        };
        Ok(Self {
            reference: reference.to_vec(),
            filter_len,
            chol,
            ridge_used,
        })
    }

    /// Filter taps and the projected (target) signal of `est`.
    pub fn project(&self, est: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, l, r) = (self.reference.len(), self.filter_len, &self.reference);
        if est.len() != n {
            return Err(Error::Shape(format!("estimate has {} samples, reference {}", est.len(), n)));
        }
        let b = DVector::from_iterator(l, (0..l).map(|k| (k..n).map(|t| r[t - k] * est[t]).sum::<f64>()));
        let a = self.chol.solve(&b);
        let mut target = vec![0.0; n];
        for (k, &ak) in a.iter().enumerate() {
            for t in k..n {
                target[t] += ak * r[t - k];
            }
        }
        Ok((a.iter().copied().collect(), target))
    }

    /// `10 log10(|target|^2 / |est - target|^2)`.
    pub fn sdr(&self, est: &[f64]) -> Result<f64> {
        let (_, target) = self.project(est)?;
        let num: f64 = target.iter().map(|v| v * v).sum();
        let den: f64 = est.iter().zip(&target).map(|(e, t)| (e - t).powi(2)).sum();
        Ok(10.0 * (num.max(f64::MIN_POSITIVE) / den.max(f64::MIN_POSITIVE)).log10())
    }
}

/// SDR of `est` against `reference` with a `filter_len`-tap distortion filter.
pub fn sdr(reference: &[f64], est: &[f64], filter_len: usize) -> Result<f64> {
    SdrProjector::new(reference, filter_len)?.sdr(est)
}

/// SDR improvement under the assignment maximizing total SDR. Returns
/// `(mean, permutation, per-speaker, ridge_used)`.
pub fn sdri(
    mixture: &[f64],
    refs: &[Vec<f64>],
    ests: &[Vec<f64>],
    filter_len: usize,
) -> Result<(f64, Vec<usize>, Vec<f64>, bool)> {
    check_lengths(mixture, refs, ests)?;
    let proj: Vec<SdrProjector> = refs.iter().map(|r| SdrProjector::new(r, filter_len)).collect::<Result<_>>()?;
    let m: Vec<Vec<f64>> = proj
        .iter()
        .map(|p| ests.iter().map(|e| p.sdr(e)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let (_, perm) = objectives::best_assignment(&m);
    let per = proj
        .iter()
        .zip(&perm)
        .enumerate()
        .map(|(r, (p, &e))| Ok(m[r][e] - p.sdr(mixture)?))
        .collect::<Result<Vec<f64>>>()?;
    let ridge = proj.iter().any(|p| p.ridge_used);
    Ok((mean(&per), perm, per, ridge))
}

/// Both metrics for one separated mixture.
pub fn evaluate(mixture: &Waveform, refs: &[Waveform], ests: &[Waveform], loss: &LossConfig) -> Result<SeparationMetrics> {
    let mix = mixture.to_f64();
    let refs: Vec<Vec<f64>> = refs.iter().map(Waveform::to_f64).collect();
    let ests: Vec<Vec<f64>> = ests.iter().map(Waveform::to_f64).collect();
    let (si, perm, per_si) = si_snri(&mix, &refs, &ests, loss)?;
    let (sd, _, per_sd, ridge_used) = sdri(&mix, &refs, &ests, SDR_FILTER_LEN.min(mix.len()))?;
    Ok(SeparationMetrics {
        si_snri: si,
        sdri: sd,
        per_speaker_si_snri: per_si,
        per_speaker_sdri: per_sd,
        permutation: perm,
        ridge_used,
    })
}

/// Cost of one module.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModuleCost {
    pub params: usize,
    pub macs: u64,
}

/// Parameter and multiply-accumulate totals with a per-module breakdown.
/// Auxiliary heads are not part of the inference model and are excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub param_count: usize,
    pub macs_per_window: u64,
    pub window: usize,
    pub modules: BTreeMap<String, ModuleCost>,
}

impl CostReport {
    /// One `key=value` line per entry.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "param_count={}\nmacs_per_window={}\nwindow={}\n",
            self.param_count, self.macs_per_window, self.window
        );
        for (m, c) in &self.modules {
            out.push_str(&format!("params.{m}={}\nmacs.{m}={}\n", c.params, c.macs));
        }
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>12} {:>16}", "module", "params", "MACs")?;
        for (m, c) in &self.modules {
            writeln!(f, "{:<18} {:>12} {:>16}", m, c.params, c.macs)?;
        }
        writeln!(f, "{:<18} {:>12} {:>16}", "total", self.param_count, self.macs_per_window)?;
        write!(
            f,
            "{:.3} M parameters, {:.3} G MACs per {} samples",
            self.param_count as f64 / 1e6,
            self.macs_per_window as f64 / 1e9,
            self.window
        )
    }
}

/// Module a parameter or MAC scope belongs to: `codec.encoder`, `input`,
/// `encoder.stageN`, `split`, `decoder.stageN`, `output`, `codec.decoder`, `aux.stageN`.
pub fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default().trim_end_matches(|c: char| c.is_ascii_digit());
    match first {
        "codec" | "encoder" | "decoder" | "aux" => match parts.next() {
            Some(second) => format!("{first}.{second}"),
            None => first.to_string(),
        },
        _ => first.to_string(),
    }
}

/// Exact inference parameter count of `cfg` with per-module attribution.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    count_costs(cfg, None)
}

/// [`count_params`] plus multiply-accumulates for an `n`-sample input,
/// counted on the executed graph at the padded length.
pub fn count_macs(cfg: &ModelConfig, n: usize) -> Result<CostReport> {
    count_costs(cfg, Some(n))
}

fn count_costs(cfg: &ModelConfig, n: Option<usize>) -> Result<CostReport> {
    let model = Separator::new(cfg.clone(), None, 0)?;
    let mut modules: BTreeMap<String, ModuleCost> = BTreeMap::new();
    for e in model.params.entries().iter().filter(|e| e.trainable) {
        modules.entry(module_of(&e.name)).or_default().params += e.value.len();
    }
    let mut total_macs = 0;
    if let Some(n) = n {
        let mut ctx = Ctx::inference(&model.params);
        let mut g = Graph::new();
        let input = g.constant(model.pad_input(&vec![0.0f32; n]));
        model.forward(&mut ctx, &mut g, input, &ForwardOptions::default())?;
        for (scope, &m) in g.macs_by_scope() {
            modules.entry(module_of(scope)).or_default().macs += m;
        }
        total_macs = g.macs();
    }
    Ok(CostReport {
        param_count: model.num_inference_params(),
        macs_per_window: total_macs,
        window: n.unwrap_or(0),
        modules,
    })
}

/// Closed-form multiply-accumulate count per module, written independently
/// of the executed graph. Conventions: a linear map costs `in * out` per
/// frame, a depthwise conv `channels * kernel` per output frame, attention
/// `F * t * (2t + (2t - 1))` with relative positions (content scores, the
/// weighted sum, and position scores over all offsets). Normalizations,
/// nonlinearities, pooling and elementwise products are free.
pub fn analytic_macs(cfg: &ModelConfig, n: usize) -> BTreeMap<String, u64> {
    let (_, t0) = cfg.padded(n);
    let (f, fo, j, r) = (cfg.f as u64, cfg.f_o as u64, cfg.speakers as u64, cfg.depth);
    let l = cfg.kernel as u64;
    let frames = |res: usize| (t0 >> res) as u64;
    let ffn = |t: u64| match cfg.ffn_mode {
        FfnMode::Gcfn => 9 * f * f * t + 9 * f * t,
        FfnMode::Ffn => 8 * f * f * t,
    };
    // `b` sequences share one positional table per call.
    let global = |t: u64, pool: u64, b: u64| {
        let tp = t / pool;
        let attn = b * 4 * f * f * tp + f * f * (2 * tp - 1) + b * f * tp * (4 * tp - 1);
        let gate = if cfg.ega_mode == EgaMode::Full { b * f * f * t } else { 0 };
        attn + gate + b * ffn(t)
    };
    let local = |t: u64, b: u64| b * (6 * f * f * t + f * cfg.cla_kernel as u64 * t) + b * ffn(t);
    let cs = |t: u64| 4 * f * f * t * j + 2 * t * f * j * j + if cfg.cs_ffn { j * ffn(t) } else { 0 };
    let split = |t: u64| 3 * j * f * f * t;

    let mut m = BTreeMap::new();
    let t = frames(0);
    m.insert("codec.encoder".to_string(), fo * l * t);
    m.insert("input".to_string(), fo * f * t);
    for stage in 0..=r {
        let t = frames(stage);
        let pool = 1u64 << (r - stage);
        let mut c = cfg.enc_blocks as u64 * (global(t, pool, 1) + local(t, 1));
        if stage < r {
            c += f * 5 * (t / 2);
        }
        m.insert(format!("encoder.stage{stage}"), c);
    }
    let late = cfg.decoder_mode == DecoderMode::LateSplit;
    let (seqs, instances) = match cfg.decoder_mode {
        DecoderMode::LateSplit => (1, 1),
        DecoderMode::EarlySplitMultiDec => (1, j),
        DecoderMode::Essd | DecoderMode::Sepre => (j, 1),
    };
    let with_cs = cfg.decoder_mode == DecoderMode::Sepre;
    for d in 0..r {
        let res = r - 1 - d;
        let t = frames(res);
        let pool = 1u64 << (r - res);
        let unit = global(t, pool, seqs) + local(t, seqs);
        let n_cs = match (with_cs, cfg.cs_placement) {
            (false, _) => 0,
            (true, CsPlacement::PerUnit) => cfg.dec_blocks as u64,
            (true, CsPlacement::PerStage) => 1,
        };
        let c = instances * (seqs * 2 * f * f * t + cfg.dec_blocks as u64 * unit) + n_cs * cs(t);
        m.insert(format!("decoder.stage{d}"), c);
    }
    let split_macs = if late {
        split(frames(0))
    } else {
        (0..=r).map(|res| split(frames(res))).sum()
    };
    m.insert("split".to_string(), split_macs);
    m.insert("output".to_string(), j * (2 * f * fo * t + fo * fo * t));
    m.insert("codec.decoder".to_string(), j * fo * l * t);
    m
}

/// Late-split configuration with the smallest width (a multiple of the head
/// count) whose parameter count is at least that of `cfg`.
pub fn matched_late_split(cfg: &ModelConfig) -> Result<ModelConfig> {
    let target = count_params(cfg)?.param_count;
    let mut c = cfg.clone();
    c.decoder_mode = DecoderMode::LateSplit;
    c.f = cfg.heads;
    loop {
        if count_params(&c)?.param_count >= target {
            return Ok(c);
        }
        c.f += cfg.heads;
        if c.f > 8 * cfg.f.max(cfg.heads) {
            return Err(Error::Config("no late-split width matches the budget".into()));
        }
    }
}

/// `a.b / (|a| |b|)`, zero when either vector vanishes.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// One row of the probe table.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub stage: usize,
    pub unit: usize,
    /// 1 = unit input, 2 = after global, 3 = after local, 4 = after cross-speaker.
    pub tap: usize,
    pub frame: usize,
    pub cosine: f64,
}

/// Per-frame similarity between the two speakers' decoder features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    /// Mean over every unit and frame of tap `tap`.
    pub fn tap_mean(&self, tap: usize) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.tap == tap).map(|r| r.cosine).collect();
        mean(&v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,unit,tap,frame,cosine\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},Z{},{},{:.6}\n", r.stage, r.unit, r.tap, r.frame, r.cosine));
        }
        out
    }
}

/// Per-frame cosine similarity between two speaker feature stacks `[2, F, T]`.
pub fn frame_similarity(data: &[f32], f: usize, t: usize) -> Vec<f64> {
    (0..t)
        .map(|k| {
            let a: Vec<f64> = (0..f).map(|c| data[c * t + k] as f64).collect();
            let b: Vec<f64> = (0..f).map(|c| data[(f + c) * t + k] as f64).collect();
            cosine_similarity(&a, &b)
        })
        .collect()
}

/// Similarity traces at the four taps of every decoder unit.
pub fn cosine_probe(model: &Separator, mixture: &Waveform) -> Result<ProbeTable> {
    if model.config.speakers != 2 {
        return Err(Error::Config("the probe compares exactly two speakers".into()));
    }
    if model.config.decoder_mode == DecoderMode::LateSplit {
        return Err(Error::Config("late-split decoders carry no per-speaker features to probe".into()));
    }
    let mut ctx = Ctx::inference(&model.params);
    let mut g = Graph::new();
    let input = g.constant(model.pad_input(&mixture.samples));
    let out = model.forward(
        &mut ctx,
        &mut g,
        input,
        &ForwardOptions {
            probes: true,
            ..Default::default()
        },
    )?;
    let mut table = ProbeTable::default();
    let mut pending: BTreeMap<(usize, usize), Vec<[crate::graph::NodeId; 4]>> = BTreeMap::new();
    for p in &out.probes {
        pending.entry((p.stage, p.unit)).or_default().push(p.z);
    }
    for ((stage, unit), parts) in pending {
        for tap in 0..4 {
            // Multi-decoder probes arrive per speaker; stack them.
            let (data, f, t) = if parts.len() == 1 {
                let v = g.value(parts[0][tap]);
                let (b, f, t) = v.dims3()?;
                if b != 2 {
                    return Err(Error::Shape(format!("probe tap has batch {b}, expected 2")));
                }
                (v.data().to_vec(), f, t)
            } else {
                let mut d = Vec::new();
                let (_, f, t) = g.value(parts[0][tap]).dims3()?;
                for p in &parts {
                    d.extend_from_slice(g.value(p[tap]).data());
                }
                (d, f, t)
            };
            for (frame, cosine) in frame_similarity(&data, f, t).into_iter().enumerate() {
                table.rows.push(ProbeRow {
                    stage,
                    unit,
                    tap: tap + 1,
                    frame,
                    cosine,
                });
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_snri_of_mixture_copies_is_exactly_zero() {
        let (a, b) = (randv(300, 1), randv(300, 2));
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (v, _, per) = si_snri(&mix, &[a, b], &[mix.clone(), mix.clone()], &LossConfig::default()).unwrap();
        assert_eq!(v, 0.0);
        assert!(per.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn si_snri_of_perfect_estimates_hits_the_ceiling() {
        let (a, b) = (randv(300, 3), randv(300, 4));
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let loss = LossConfig::default();
        let (v, perm, _) = si_snri(&mix, &[a.clone(), b.clone()], &[b.clone(), a.clone()], &loss).unwrap();
        assert_eq!(perm, vec![1, 0]);
        let base = (objectives::si_snr(&a, &mix, 30.0, 1e-8).unwrap() + objectives::si_snr(&b, &mix, 30.0, 1e-8).unwrap()) / 2.0;
        assert_abs_diff_eq!(v, 30.0 - base, epsilon = 1e-12);
    }

    #[test]
    fn si_snri_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let refs = vec![randv(100, seed), randv(100, seed + 100)];
            let ests = vec![randv(100, seed + 200), randv(100, seed + 300)];
            let mix: Vec<f64> = refs[0].iter().zip(&refs[1]).map(|(x, y)| x + y).collect();
            let (v, _, _) = si_snri(&mix, &refs, &ests, &LossConfig::default()).unwrap();
            let s = |r: &[f64], e: &[f64]| objectives::si_snr(r, e, 30.0, 1e-8).unwrap();
            let straight = s(&refs[0], &ests[0]) + s(&refs[1], &ests[1]);
            let swapped = s(&refs[0], &ests[1]) + s(&refs[1], &ests[0]);
            let base = s(&refs[0], &mix) + s(&refs[1], &mix);
            assert_abs_diff_eq!(v, (straight.max(swapped) - base) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sdr_ceiling_and_delay() {
        let r = randv(2000, 5);
        assert!(sdr(&r, &r, 512).unwrap() >= 60.0);
        let mut delayed = vec![0.0; 2000];
        delayed[37..].copy_from_slice(&r[..2000 - 37]);
        assert!(sdr(&r, &delayed, 512).unwrap() >= 60.0);
        // A delay past the filter cannot be absorbed.
        let mut far = vec![0.0; 2000];
        far[600..].copy_from_slice(&r[..1400]);
        assert!(sdr(&r, &far, 512).unwrap() < 10.0);
        assert!(sdr(&r[..100], &r[..100], 512).is_err());
        assert!(sdr(&[0.0; 600], &r[..600], 512).is_err());
    }

    #[test]
    fn sdr_matches_direct_least_squares() {
        let (n, l) = (300, 16);
        for seed in 0..5 {
            let r = randv(n, seed);
            let e: Vec<f64> = randv(n, seed + 50).iter().zip(&r).map(|(a, b)| 0.3 * a + b).collect();
            let a = DMatrix::from_fn(n, l, |t, k| if t >= k { r[t - k] } else { 0.0 });
            let y = DVector::from_vec(e.clone());
            let x = a.clone().svd(true, true).solve(&y, 1e-12).unwrap();
            let target = &a * x;
            let resid = &y - &target;
            let direct = 10.0 * (target.norm_squared() / resid.norm_squared()).log10();
            assert_abs_diff_eq!(sdr(&r, &e, l).unwrap(), direct, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn sdr_is_scale_invariant(seed in 0u64..200, c in 0.01f64..100.0) {
            let r = randv(600, seed);
            let e: Vec<f64> = randv(600, seed + 1).iter().zip(&r).map(|(a, b)| a + b).collect();
            let p = SdrProjector::new(&r, 64).unwrap();
            let scaled: Vec<f64> = e.iter().map(|v| c * v).collect();
            prop_assert!((p.sdr(&e).unwrap() - p.sdr(&scaled).unwrap()).abs() < 1e-4);
        }

        #[test]
        fn cosine_is_bounded(seed in 0u64..500) {
            let c = cosine_similarity(&randv(8, seed), &randv(8, seed + 9));
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn ridge_fallback_on_rank_deficient_reference() {
        // A constant reference makes delayed copies nearly collinear.
        let r = vec![1.0; 520];
        let p = SdrProjector::new(&r, 512).unwrap();
        assert!(p.sdr(&r).unwrap() > 30.0);
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 3.0]), 0.0);
        // [2, F=2, T=3] stacks: identical speakers give 1 everywhere.
        let same = [1.0f32, 2.0, 3.0, -1.0, 0.5, 2.0, 1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        assert!(frame_similarity(&same, 2, 3).iter().all(|&c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn module_names() {
        assert_eq!(module_of("encoder.stage3.block0.global.ega.mhsa.q.weight"), "encoder.stage3");
        assert_eq!(module_of("decoder1.stage0.merge.weight"), "decoder.stage0");
        assert_eq!(module_of("split2.expand.weight"), "split");
        assert_eq!(module_of("codec.decoder.bias"), "codec.decoder");
        assert_eq!(module_of("input.proj.weight"), "input");
    }

    fn small(mode: DecoderMode) -> ModelConfig {
        ModelConfig {
            f: 8,
            f_o: 12,
            kernel: 8,
            stride: 4,
            depth: 2,
            enc_blocks: 1,
            dec_blocks: 2,
            cla_kernel: 5,
            heads: 2,
            decoder_mode: mode,
            ..ModelConfig::preset("tiny-desk").unwrap()
        }
    }

    #[test]
    fn analytic_macs_match_the_executed_graph() {
        let mut cfgs = Vec::new();
        for mode in [DecoderMode::LateSplit, DecoderMode::EarlySplitMultiDec, DecoderMode::Essd, DecoderMode::Sepre] {
            cfgs.push(small(mode));
        }
        let mut c = small(DecoderMode::Sepre);
        c.cs_placement = CsPlacement::PerStage;
        c.ffn_mode = FfnMode::Ffn;
        c.ega_mode = EgaMode::PlainDsUs;
        c.cs_ffn = false;
        c.split_mode = crate::separator::SplitMode::Multiple;
        cfgs.push(c);
        cfgs.push(ModelConfig::preset("tiny-desk").unwrap());
        for cfg in cfgs {
            let report = count_macs(&cfg, 997).unwrap();
            let analytic = analytic_macs(&cfg, 997);
            let executed: BTreeMap<String, u64> = report.modules.iter().map(|(k, v)| (k.clone(), v.macs)).collect();
            assert_eq!(executed, analytic, "{cfg:?}");
            assert_eq!(report.macs_per_window, analytic.values().sum::<u64>());
        }
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let r = count_macs(&small(DecoderMode::Sepre), 500).unwrap();
        assert_eq!(r.param_count, r.modules.values().map(|m| m.params).sum::<usize>());
        assert_eq!(r.macs_per_window, r.modules.values().map(|m| m.macs).sum::<u64>());
        let direct: usize = Separator::new(small(DecoderMode::Sepre), None, 0)
            .unwrap()
            .params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum();
        assert_eq!(r.param_count, direct);
        assert!(r.to_kv().contains("param_count="));
    }

    #[test]
    fn late_split_uses_fewer_decoder_macs_than_essd() {
        let essd = analytic_macs(&small(DecoderMode::Essd), 1000);
        let late = analytic_macs(&small(DecoderMode::LateSplit), 1000);
        let dec = |m: &BTreeMap<String, u64>| m.iter().filter(|(k, _)| k.starts_with("decoder")).map(|(_, v)| v).sum::<u64>();
        assert!(dec(&late) < dec(&essd));
        // Shared decoder cost is affine in the speaker count (the positional
        // table is computed once per call).
        let at = |j: usize| {
            let mut c = small(DecoderMode::Essd);
            c.speakers = j;
            dec(&count_macs(&c, 1000).unwrap().modules.iter().map(|(k, v)| (k.clone(), v.macs)).collect())
        };
        let (d1, d2, d3) = (at(1), at(2), at(3));
        assert_eq!(d3 - d2, d2 - d1);
    }

    #[test]
    fn matched_late_split_meets_the_budget() {
        let base = small(DecoderMode::Sepre);
        let late = matched_late_split(&base).unwrap();
        let (p0, p1) = (count_params(&base).unwrap().param_count, count_params(&late).unwrap().param_count);
        assert!(p1 >= p0);
        let mut narrower = late.clone();
        narrower.f -= base.heads;
        assert!(count_params(&narrower).unwrap().param_count < p0);
    }

    #[test]
    fn probe_shapes() {
        let m = Separator::new(small(DecoderMode::Sepre), None, 1).unwrap();
        let x = Waveform::new((0..200).map(|i| (i as f32 * 0.3).sin()).collect(), 8000).unwrap();
        let t = cosine_probe(&m, &x).unwrap();
        let taps: std::collections::BTreeSet<_> = t.rows.iter().map(|r| (r.stage, r.unit, r.tap)).collect();
        assert_eq!(taps.len(), 2 * 2 * 4);
        assert!(t.rows.iter().all(|r| (-1.0..=1.0).contains(&r.cosine)));
        assert!(t.to_csv().lines().nth(1).unwrap().contains(",Z1,"));
        let multi = Separator::new(small(DecoderMode::EarlySplitMultiDec), None, 1).unwrap();
        assert_eq!(cosine_probe(&multi, &x).unwrap().rows.len(), t.rows.len());
        let late = Separator::new(small(DecoderMode::LateSplit), None, 1).unwrap();
        assert!(cosine_probe(&late, &x).is_err());
    }
}
