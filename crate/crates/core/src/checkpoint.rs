//! Versioned, integrity-checked checkpoint archives.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "SEPRCKPT"  u32 version
//! section*    [4-byte tag][u64 length][payload]
//! sha256      32 bytes over everything before it
//! ```
//!
//! Sections:
//! - `MCFG` TOML text: `[model]` (every `ModelConfig` field) and an optional `aux_domain`.
//! - `PARM` `u32` count, then per array: `u16` name length, UTF-8 name, `u8` flags
//!   (bit 0 trainable, bit 1 weight decay), `u8` rank, `u64` dims, `f32` data.
//! - `TCFG` (training only) TOML text of the training configuration.
//! - `TRST` (training only) run position, schedule, optimizer moments by
//!   parameter name, and the data-order generator state.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::AuxDomain;
use crate::params::ParamStore;
use crate::separator::{ModelConfig, Separator};
use crate::tensor::Tensor;
use crate::training::{AdamW, LrSchedule, TrainConfig, TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"SEPRCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    model: ModelConfig,
    aux_domain: Option<AuxDomain>,
}

/// Training-side contents of a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub sched: LrSchedule,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Separator,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    /// Resume a run; fails for model-only archives.
    pub fn into_trainer(self) -> Result<Trainer> {
        let t = self
            .training
            .ok_or_else(|| Error::Checkpoint("archive holds no training state".into()))?;
        Ok(Trainer {
            model: self.model,
            opt: t.opt,
            sched: t.sched,
            cfg: t.cfg,
            state: t.state,
            rng: t.rng,
        })
    }
}

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.0.extend_from_slice(tag);
        self.u64(payload.len() as u64);
        self.0.extend_from_slice(payload);
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of section".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.usize()?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn toml_text<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Checkpoint(format!("serializing config: {e}")))
}

fn params_payload(p: &ParamStore<f32>) -> Vec<u8> {
    let mut o = Out::default();
    o.u32(p.len() as u32);
    for e in p.entries() {
        o.name(&e.name);
        o.u8(e.trainable as u8 | (e.decay as u8) << 1);
        o.u8(e.value.shape().len() as u8);
        for &d in e.value.shape() {
            o.u64(d as u64);
        }
        o.f32s(e.value.data());
    }
    o.0
}

fn training_payload(t: &Trainer) -> Vec<u8> {
    let mut o = Out::default();
    let s = &t.state;
    o.u64(s.epoch as u64);
    o.u64(s.global_step);
    o.u64(s.skipped_steps);
    o.f64(s.best_val);
    let sc = &t.sched;
    o.f64(sc.lr0);
    o.u8(sc.warmup as u8);
    o.u64(sc.hold_epochs as u64);
    o.f64(sc.factor);
    o.u64(sc.patience as u64);
    o.u32(sc.decays);
    o.f64(sc.best);
    o.u64(sc.bad_epochs as u64);
    let a = &t.opt;
    o.f64(a.beta1);
    o.f64(a.beta2);
    o.f64(a.eps);
    o.f64(a.weight_decay);
    o.u64(a.step);
    o.u32(a.slots.len() as u32);
    for (id, m, v) in &a.slots {
        o.name(&t.model.params.entry(*id).name);
        o.f32s(m);
        o.f32s(v);
    }
    o.0.extend_from_slice(&t.rng.get_seed());
    o.u64(t.rng.get_stream());
    o.0.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());
    o.0
}

fn archive(model: &Separator, trainer: Option<&Trainer>) -> Result<Vec<u8>> {
    let mut o = Out::default();
    o.0.extend_from_slice(MAGIC);
    o.u32(VERSION);
    let rec = ModelRecord {
        model: model.config.clone(),
        aux_domain: model.aux_domain,
    };
    o.section(b"MCFG", toml_text(&rec)?.as_bytes());
    o.section(b"PARM", &params_payload(&model.params));
    if let Some(t) = trainer {
        o.section(b"TCFG", toml_text(&t.cfg)?.as_bytes());
        o.section(b"TRST", &training_payload(t));
    }
    let digest = Sha256::digest(&o.0);
    o.0.extend_from_slice(&digest);
    Ok(o.0)
}

/// Serialize model parameters and configuration.
pub fn model_bytes(model: &Separator) -> Result<Vec<u8>> {
    archive(model, None)
}

/// Serialize everything needed to resume training.
pub fn trainer_bytes(t: &Trainer) -> Result<Vec<u8>> {
    archive(&t.model, Some(t))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &Separator) -> Result<()> {
    write_atomic(path, &model_bytes(model)?)
}

pub fn save_trainer(path: &Path, t: &Trainer) -> Result<()> {
    write_atomic(path, &trainer_bytes(t)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

fn parse_toml<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<T> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))?;
    toml::from_str(text).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

fn read_params(bytes: &[u8], model: &mut Separator) -> Result<()> {
    let mut r = In { buf: bytes, pos: 0 };
    let n = r.u32()? as usize;
    if n != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} arrays, configuration implies {}",
            n,
            model.params.len()
        )));
    }
    let mut fresh = model.params.clone();
    for _ in 0..n {
        let name = r.name()?;
        let flags = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s()?;
        let id = fresh
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let e = fresh.entry(id);
        if flags != (e.trainable as u8 | (e.decay as u8) << 1) {
            return Err(Error::Checkpoint(format!("parameter {name}: flag mismatch")));
        }
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        fresh.set(&name, t)?;
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes in parameter section".into()));
    }
    model.params = fresh;
    Ok(())
}

fn read_training(bytes: &[u8], cfg: TrainConfig, model: &Separator) -> Result<TrainingState> {
    let mut r = In { buf: bytes, pos: 0 };
    let state = TrainState {
        epoch: r.usize()?,
        global_step: r.u64()?,
        skipped_steps: r.u64()?,
        best_val: r.f64()?,
    };
    let sched = LrSchedule {
        lr0: r.f64()?,
        warmup: r.u8()? != 0,
        hold_epochs: r.usize()?,
        factor: r.f64()?,
        patience: r.usize()?,
        decays: r.u32()?,
        best: r.f64()?,
        bad_epochs: r.usize()?,
    };
    let mut opt = AdamW::new(&model.params, &cfg);
    opt.beta1 = r.f64()?;
    opt.beta2 = r.f64()?;
    opt.eps = r.f64()?;
    opt.weight_decay = r.f64()?;
    opt.step = r.u64()?;
    let n = r.u32()? as usize;
    if n != opt.slots.len() {
        return Err(Error::Checkpoint(format!("{} optimizer slots, model has {}", n, opt.slots.len())));
    }
    for _ in 0..n {
        let name = r.name()?;
        let (m, v) = (r.f32s()?, r.f32s()?);
        let slot = opt
            .slots
            .iter_mut()
            .find(|s| model.params.entry(s.0).name == name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
        if m.len() != slot.1.len() || v.len() != slot.2.len() {
            return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong size")));
        }
        slot.1 = m;
        slot.2 = v;
    }
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes in training section".into()));
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(TrainingState {
        cfg,
        state,
        sched,
        opt,
        rng,
    })
}

/// Parse and verify an archive. Nothing is returned unless every section
/// parses and the digest matches.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive (bad magic or truncated)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch: archive is truncated or corrupt".into()));
    }
    let mut r = In { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
    }
    let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.usize()?;
        sections.push((tag, r.take(len)?));
    }
    let find = |tag: &[u8; 4]| sections.iter().find(|s| &s.0 == tag).map(|s| s.1);
    let rec: ModelRecord = parse_toml(
        find(b"MCFG").ok_or_else(|| Error::Checkpoint("missing model configuration".into()))?,
        "model configuration",
    )?;
    let mut model = Separator::new(rec.model, rec.aux_domain, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    read_params(
        find(b"PARM").ok_or_else(|| Error::Checkpoint("missing parameters".into()))?,
        &mut model,
    )?;
    let training = match (find(b"TCFG"), find(b"TRST")) {
        (Some(c), Some(s)) => Some(read_training(s, parse_toml(c, "training configuration")?, &model)?),
        (None, None) => None,
        _ => return Err(Error::Checkpoint("incomplete training state".into())),
    };
    Ok(Checkpoint { model, training })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Waveform;
    use crate::separator::DecoderMode;
    use crate::training::TrainData;
    use crate::mixtures::{mix_at_snr, synth_source, SourceKind};

    fn small() -> ModelConfig {
        ModelConfig {
            f: 8,
            f_o: 8,
            kernel: 8,
            stride: 4,
            depth: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            cla_kernel: 5,
            heads: 2,
            decoder_mode: DecoderMode::Sepre,
            ..ModelConfig::preset("tiny-desk").unwrap()
        }
    }

    fn trainer() -> (Trainer, TrainData, Vec<crate::mixtures::MixtureExample>) {
        let model = Separator::new(small(), Some(AuxDomain::Time), 1).unwrap();
        let cfg = TrainConfig {
            segment_samples: 160,
            seed: 3,
            ..Default::default()
        };
        let ex = |s: u64| {
            let a = synth_source(SourceKind::BandNoise { lo: 300.0, hi: 700.0 }, 240, 8000, s).unwrap();
            let b = synth_source(SourceKind::BandNoise { lo: 1500.0, hi: 2500.0 }, 240, 8000, s + 9).unwrap();
            mix_at_snr(&a, &b, 1.0).unwrap()
        };
        let data = TrainData::Fixed((0..3).map(ex).collect());
        (Trainer::new(model, cfg).unwrap(), data, vec![ex(20)])
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let (mut t, data, val) = trainer();
        t.run_epoch(&data, &val, &mut String::new()).unwrap();
        let bytes = model_bytes(&t.model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert!(back.training.is_none());
        for (a, b) in t.model.params.entries().iter().zip(back.model.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let x = Waveform::new((0..300).map(|i| (i as f32 * 0.1).sin()).collect(), 8000).unwrap();
        assert_eq!(t.model.separate(&x).unwrap(), back.model.separate(&x).unwrap());
        assert_eq!(model_bytes(&back.model).unwrap(), bytes);
    }

    #[test]
    fn resume_continues_the_identical_trajectory() {
        let (mut a, data, val) = trainer();
        let mut log_a = String::new();
        a.run_epoch(&data, &val, &mut log_a).unwrap();
        let bytes = trainer_bytes(&a).unwrap();
        let mut b = from_bytes(&bytes).unwrap().into_trainer().unwrap();
        assert_eq!(trainer_bytes(&b).unwrap(), bytes);
        let mut log_b = log_a.clone();
        a.run_epoch(&data, &val, &mut log_a).unwrap();
        b.run_epoch(&data, &val, &mut log_b).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(trainer_bytes(&a).unwrap(), trainer_bytes(&b).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let (t, _, _) = trainer();
        let bytes = trainer_bytes(&t).unwrap();
        for cut in [0, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut wrong_version = bytes[..bytes.len() - 32].to_vec();
        wrong_version[8] = 9;
        let d = Sha256::digest(&wrong_version);
        wrong_version.extend_from_slice(&d);
        let err = from_bytes(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let model_only = from_bytes(&model_bytes(&t.model).unwrap()).unwrap();
        assert!(model_only.into_trainer().is_err());
    }

    #[test]
    fn file_round_trip() {
        let (t, _, _) = trainer();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.ckpt");
        save_trainer(&p, &t).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(trainer_bytes(&back.into_trainer().unwrap()).unwrap(), trainer_bytes(&t).unwrap());
        fs::write(&p, b"SEPRCKPT").unwrap();
        assert!(load(&p).is_err());
    }
}
