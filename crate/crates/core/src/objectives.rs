//! Separation objectives: clipped SI-SNR, permutation-invariant assignment,
//! the multi-loss weight schedule, and STFT magnitudes for the spectral
//! auxiliary variant.

use std::sync::Arc;

use itertools::Itertools;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DB: f64 = 20.0 / std::f64::consts::LN_10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxDomain {
    Time,
    StftMag,
}

/// How the speaker assignment used by the auxiliary losses is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitCoupling {
    /// Reuse the permutation that minimizes the final-output loss.
    Final,
    /// Minimize the combined multi-loss over permutations.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub eps: f64,
    pub alpha0: f64,
    pub alpha_decay_start: usize,
    pub alpha_decay_factor: f64,
    pub alpha_decay_every: usize,
    /// Disable to train on the final output only.
    pub multi_loss: bool,
    pub aux_domain: AuxDomain,
    pub pit_coupling: PitCoupling,
    pub stft_fft: usize,
    pub stft_hop: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 30.0,
            eps: 1e-8,
            alpha0: 0.4,
            alpha_decay_start: 100,
            alpha_decay_factor: 0.8,
            alpha_decay_every: 5,
            multi_loss: true,
            aux_domain: AuxDomain::Time,
            pit_coupling: PitCoupling::Final,
            stft_fft: 256,
            stft_hop: 128,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("tau and eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha0) || !(0.0..=1.0).contains(&self.alpha_decay_factor) {
            return Err(Error::Config("alpha0 and alpha_decay_factor must lie in [0, 1]".into()));
        }
        if self.alpha_decay_every == 0 || self.stft_hop == 0 || self.stft_fft < 2 {
            return Err(Error::Config("decay period and STFT sizes must be positive".into()));
        }
        Ok(())
    }

    /// Multi-loss weight for a 0-based epoch index.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if !self.multi_loss {
            return 0.0;
        }
        if epoch <= self.alpha_decay_start {
            return self.alpha0;
        }
        let k = (epoch - self.alpha_decay_start) / self.alpha_decay_every;
        self.alpha0 * self.alpha_decay_factor.powi(k as i32)
    }
}

/// `alpha(e)` with the default recipe (0.4, decaying by 0.8 every 5 epochs after epoch 100).
pub fn alpha_at(epoch: usize) -> f64 {
    LossConfig::default().alpha_at(epoch)
}

/// Per-example loss summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub final_loss: f64,
    pub aux_losses: Vec<f64>,
    pub permutation: Vec<usize>,
    pub per_speaker_si_snr: Vec<f64>,
    pub alpha: f64,
}

/// `(1 - alpha) * final + alpha * mean(aux)`; just `final` when there are no aux terms.
pub fn combine_losses(final_loss: f64, aux: &[f64], alpha: f64) -> f64 {
    if aux.is_empty() {
        return final_loss;
    }
    (1.0 - alpha) * final_loss + alpha * aux.iter().sum::<f64>() / aux.len() as f64
}

fn check_pair(reference: &[f64], est: &[f64]) -> Result<f64> {
    if reference.len() != est.len() {
        return Err(Error::Shape(format!(
            "si_snr: reference has {} samples, estimate {}",
            reference.len(),
            est.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::Numeric("si_snr: reference is identically zero".into()));
    }
    Ok(ref_energy)
}

/// Clipped scale-invariant SNR in dB:
/// `min(20 log10((|g s| + eps) / (|g s - e| + eps)), tau)` with `g = e.s / |s|^2`.
pub fn si_snr(reference: &[f64], est: &[f64], tau: f64, eps: f64) -> Result<f64> {
    let ref_energy = check_pair(reference, est)?;
    let gamma = dot(est, reference) / ref_energy;
    let target = gamma.abs() * ref_energy.sqrt();
    let noise: f64 = reference
        .iter()
        .zip(est)
        .map(|(s, e)| (gamma * s - e).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((DB * ((target + eps) / (noise + eps)).ln()).min(tau))
}

/// SI-SNR together with its gradient with respect to the estimate.
pub fn si_snr_with_grad(reference: &[f64], est: &[f64], tau: f64, eps: f64) -> Result<(f64, Vec<f64>)> {
    let ref_energy = check_pair(reference, est)?;
    let ref_norm = ref_energy.sqrt();
    let gamma = dot(est, reference) / ref_energy;
    let target = gamma.abs() * ref_norm;
    let residual: Vec<f64> = reference.iter().zip(est).map(|(s, e)| gamma * s - e).collect();
    let noise = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    let raw = DB * ((target + eps) / (noise + eps)).ln();
    if raw >= tau {
        return Ok((tau, vec![0.0; est.len()]));
    }
    let a = if gamma == 0.0 {
        0.0
    } else {
        gamma.signum() / (ref_norm * (target + eps))
    };
    let b = if noise > 0.0 { 1.0 / (noise * (noise + eps)) } else { 0.0 };
    let grad = reference
        .iter()
        .zip(&residual)
        .map(|(s, r)| DB * (a * s + b * r))
        .collect();
    Ok((raw, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All permutations of `0..j` in lexicographic order.
pub fn permutations(j: usize) -> Vec<Vec<usize>> {
    (0..j).permutations(j).collect()
}

/// Pick the permutation minimizing `-sum_j score[j][perm[j]]`; ties keep the
/// lexicographically smallest permutation. Returns `(loss, perm)`.
pub fn best_assignment(score: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let j = score.len();
    let mut best = (f64::INFINITY, Vec::new());
    for perm in permutations(j) {
        let loss: f64 = -perm.iter().enumerate().map(|(r, &e)| score[r][e]).sum::<f64>();
        if loss < best.0 {
            best = (loss, perm);
        }
    }
    best
}

/// Pairwise SI-SNR matrix `m[r][e] = si_snr(refs[r], ests[e])`.
pub fn pairwise_si_snr(refs: &[Vec<f64>], ests: &[Vec<f64>], tau: f64, eps: f64) -> Result<Vec<Vec<f64>>> {
    refs.iter()
        .map(|r| ests.iter().map(|e| si_snr(r, e, tau, eps)).collect())
        .collect()
}

/// Permutation-invariant SI-SNR loss. `perm[j]` is the estimate assigned to reference `j`.
pub fn pit_loss(refs: &[Vec<f64>], ests: &[Vec<f64>], tau: f64, eps: f64) -> Result<(f64, Vec<usize>)> {
    if refs.len() != ests.len() || refs.is_empty() {
        return Err(Error::Shape(format!(
            "pit_loss: {} references vs {} estimates",
            refs.len(),
            ests.len()
        )));
    }
    if refs.len() > 4 {
        return Err(Error::Config("pit_loss: at most 4 speakers are enumerated".into()));
    }
    let m = pairwise_si_snr(refs, ests, tau, eps)?;
    Ok(best_assignment(&m))
}

/// Magnitude STFT with a periodic Hann window. Frame `m` starts at sample
/// `m * hop` and is zero padded past the end of the signal. Output is
/// `[bins][frames]` flattened bin-major, with `fft / 2 + 1` bins.
pub struct StftMag {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    size: usize,
    hop: usize,
}

impl StftMag {
    pub fn new(size: usize, hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(size);
        let window = (0..size)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / size as f64).cos())
            .collect();
        Self { fft, window, size, hop }
    }

    pub fn bins(&self) -> usize {
        self.size / 2 + 1
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn compute(&self, x: &[f64], frames: usize) -> Vec<f64> {
        let bins = self.bins();
        let mut out = vec![0.0; bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.size];
        for m in 0..frames {
            for (n, b) in buf.iter_mut().enumerate() {
                let v = x.get(m * self.hop + n).copied().unwrap_or(0.0);
                *b = Complex::new(v * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                out[k * frames + m] = buf[k].norm();
            }
        }
        out
    }
}
