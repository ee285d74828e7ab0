//! Training recipe: AdamW with decoupled weight decay, warmup plus plateau
//! learning-rate schedule, global-norm gradient clipping, and the PIT
//! multi-loss step.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Waveform;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mixtures::{self, DynamicMixing, MixtureExample, SegmentPolicy, Source};
use crate::objectives::{self, LossBreakdown, LossConfig, PitCoupling, StftMag};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::separator::{AuxOutput, ForwardOptions, Separator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr0: f64,
    /// Dynamic mixing: constant `dm_lr` for `dm_hold_epochs`, no warmup.
    pub dm: bool,
    pub dm_lr: f64,
    pub dm_hold_epochs: usize,
    pub dm_examples_per_epoch: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub segment_samples: usize,
    pub bn_momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            lr0: 1e-3,
            dm: false,
            dm_lr: 2e-4,
            dm_hold_epochs: 50,
            dm_examples_per_epoch: 2000,
            plateau_factor: 0.8,
            plateau_patience: 3,
            weight_decay: 0.01,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            segment_samples: 32000,
            bn_momentum: 0.1,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let lr = if self.dm { self.dm_lr } else { self.lr0 };
        if !(lr > 0.0) || !(self.grad_clip > 0.0) || self.plateau_patience == 0 {
            return Err(Error::Config("lr and clip must be positive, patience at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.batch_size == 0 || self.segment_samples == 0 {
            return Err(Error::Config("batch size and segment length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(0.0..=1.0).contains(&self.plateau_factor) {
            return Err(Error::Config("momentum and plateau factor must lie in [0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Warmup over epoch 0, then one multiplicative decay per plateau of
/// `patience` epochs without strict validation improvement. With a hold
/// period the rate is constant and plateaus are ignored until it ends.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub warmup: bool,
    pub hold_epochs: usize,
    pub factor: f64,
    pub patience: usize,
    pub decays: u32,
    pub best: f64,
    pub bad_epochs: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr0: if cfg.dm { cfg.dm_lr } else { cfg.lr0 },
            warmup: !cfg.dm,
            hold_epochs: if cfg.dm { cfg.dm_hold_epochs } else { 0 },
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            decays: 0,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Rate for step `step` (0-based within the epoch) of `epoch`.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize, epoch: usize) -> f64 {
        if self.warmup && epoch == 0 {
            return self.lr0 * step as f64 / steps_per_epoch.max(1) as f64;
        }
        self.lr0 * self.factor.powi(self.decays as i32)
    }

    /// Feed the validation loss at the end of `epoch`; returns whether a decay fired.
    pub fn end_epoch(&mut self, epoch: usize, val_loss: f64) -> bool {
        if epoch < self.hold_epochs {
            return false;
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.decays += 1;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping, or a numeric error if any entry is non-finite.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f64) -> Result<f64> {
    let sq: f64 = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    Ok(norm)
}

/// Adam moments with decoupled weight decay over the trainable entries of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// `(param, m, v)` for every trainable parameter, in store order.
    pub slots: Vec<(ParamId, Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let slots = params
            .ids()
            .filter(|&id| params.entry(id).trainable)
            .map(|id| {
                let n = params.get(id).len();
                (id, vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            slots,
        }
    }

    /// One update. `grads[i]` belongs to `slots[i]`.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::Shape("gradient list does not match optimizer slots".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for ((id, m, v), g) in self.slots.iter_mut().zip(grads) {
            let decay = if params.entry(*id).decay { self.weight_decay } else { 0.0 };
            let p = params.get_mut(*id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                let upd = mh / (vh.sqrt() + self.eps) + decay * p[i] as f64;
                p[i] = (p[i] as f64 - lr * upd) as f32;
            }
        }
        if params.entries().iter().any(|e| !e.value.all_finite()) {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }
}

fn speaker_signal(g: &mut Graph<f32>, est: NodeId, j: usize, n: usize) -> Result<NodeId> {
    let s = g.select_batch(est, &[j])?;
    g.slice_time(s, 0, n)
}

fn column(g: &Graph<f32>, id: NodeId) -> Vec<f64> {
    g.value(id).to_f64_vec()
}

/// Forward, PIT loss and auxiliary losses for one example in training mode.
/// Returns the graph, the differentiable total, and the breakdown.
pub fn example_loss<'a>(
    model: &'a Separator,
    ex: &MixtureExample,
    loss: &LossConfig,
    alpha: f64,
    ctx: &mut Ctx<'a, f32>,
) -> Result<(Graph<f32>, NodeId, LossBreakdown)> {
    let j = model.config.speakers;
    if ex.sources.len() != j {
        return Err(Error::Data(format!("example has {} sources, model separates {}", ex.sources.len(), j)));
    }
    let n = ex.len();
    let refs: Vec<Vec<f64>> = ex.sources.iter().map(Waveform::to_f64).collect();
    let use_aux = loss.multi_loss && alpha > 0.0 && !model.net.aux.is_empty();
    let mut g = Graph::new();
    let input = g.constant(model.pad_input(&ex.mixture.samples));
    let out = model.forward(
        ctx,
        &mut g,
        input,
        &ForwardOptions {
            aux: use_aux,
            ..Default::default()
        },
    )?;
    let ests: Vec<NodeId> = (0..j).map(|s| speaker_signal(&mut g, out.estimates, s, n)).collect::<Result<_>>()?;
    let est_vals: Vec<Vec<f64>> = ests.iter().map(|&e| column(&g, e)).collect();
    let final_m = objectives::pairwise_si_snr(&refs, &est_vals, loss.tau, loss.eps)?;

    // Per-stage candidate signals and targets, as (estimates, targets).
    let mut stages: Vec<(Vec<NodeId>, Vec<Vec<f64>>)> = Vec::new();
    for a in &out.aux {
        match *a {
            AuxOutput::Time(id) => {
                let e = (0..j).map(|s| speaker_signal(&mut g, id, s, n)).collect::<Result<_>>()?;
                stages.push((e, refs.clone()));
            }
            AuxOutput::StftMag(id) => {
                let frames = g.shape(id)[2];
                let stft = StftMag::new(loss.stft_fft, loss.stft_hop);
                let targets = refs.iter().map(|r| stft.compute(r, frames)).collect();
                let e = (0..j).map(|s| g.select_batch(id, &[s])).collect::<Result<_>>()?;
                stages.push((e, targets));
            }
        }
    }
    let aux_m: Vec<Vec<Vec<f64>>> = stages
        .iter()
        .map(|(e, t)| {
            let vals: Vec<Vec<f64>> = e.iter().map(|&id| column(&g, id)).collect();
            objectives::pairwise_si_snr(t, &vals, loss.tau, loss.eps)
        })
        .collect::<Result<_>>()?;

    let perm = match loss.pit_coupling {
        PitCoupling::Final => objectives::best_assignment(&final_m).1,
        PitCoupling::Joint => {
            let mut best = (f64::INFINITY, Vec::new());
            for p in objectives::permutations(j) {
                let l = |m: &Vec<Vec<f64>>| -p.iter().enumerate().map(|(r, &e)| m[r][e]).sum::<f64>();
                let aux: Vec<f64> = aux_m.iter().map(l).collect();
                let t = objectives::combine_losses(l(&final_m), &aux, alpha);
                if t < best.0 {
                    best = (t, p);
                }
            }
            best.1
        }
    };

    let neg_sum = |g: &mut Graph<f32>, est: &[NodeId], targets: &[Vec<f64>]| -> Result<NodeId> {
        let terms = perm
            .iter()
            .enumerate()
            .map(|(r, &e)| g.si_snr(est[e], &targets[r], loss.tau, loss.eps).map(|n| (n, -1.0f32)))
            .collect::<Result<Vec<_>>>()?;
        g.weighted_sum(&terms)
    };
    let final_node = neg_sum(&mut g, &ests, &refs)?;
    let mut aux_nodes = Vec::with_capacity(stages.len());
    for (e, t) in &stages {
        aux_nodes.push(neg_sum(&mut g, e, t)?);
    }
    let final_loss = g.value(final_node).data()[0] as f64;
    let aux_losses: Vec<f64> = aux_nodes.iter().map(|&a| g.value(a).data()[0] as f64).collect();
    let total = if aux_nodes.is_empty() {
        final_node
    } else {
        let w = (alpha / aux_nodes.len() as f64) as f32;
        let mut terms = vec![(final_node, (1.0 - alpha) as f32)];
        terms.extend(aux_nodes.iter().map(|&a| (a, w)));
        g.weighted_sum(&terms)?
    };
    let breakdown = LossBreakdown {
        total: objectives::combine_losses(final_loss, &aux_losses, alpha),
        final_loss,
        per_speaker_si_snr: perm.iter().enumerate().map(|(r, &e)| final_m[r][e]).collect(),
        aux_losses,
        permutation: perm,
        alpha,
    };
    Ok((g, total, breakdown))
}

/// Outcome of [`train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Mean over the batch.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
    /// Set when the step was aborted; parameters are untouched.
    pub skipped: Option<String>,
}

/// Forward and backward over `batch`, clip, update. A non-finite loss or
/// gradient skips the update and reports why.
pub fn train_step(
    model: &mut Separator,
    opt: &mut AdamW,
    batch: &[MixtureExample],
    cfg: &TrainConfig,
    alpha: f64,
    lr: f64,
    dropout_seed: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let slot_index: std::collections::HashMap<ParamId, usize> =
        opt.slots.iter().enumerate().map(|(i, s)| (s.0, i)).collect();
    let mut grads: Vec<Vec<f32>> = opt.slots.iter().map(|s| vec![0.0; s.1.len()]).collect();
    let mut bn_updates: Vec<(ParamId, ParamId, Vec<f32>, Vec<f32>)> = Vec::new();
    let mut reports = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f32;
    for (i, ex) in batch.iter().enumerate() {
        let mut ctx = Ctx::training(&model.params, model.config.dropout, dropout_seed.wrapping_add(i as u64));
        let (g, total, breakdown) = example_loss(model, ex, &cfg.loss, alpha, &mut ctx)?;
        if !breakdown.total.is_finite() {
            return Ok(StepReport {
                loss: breakdown,
                grad_norm: f64::NAN,
                lr,
                skipped: Some(format!("non-finite loss on batch item {i}")),
            });
        }
        let mut gr = g.backward(total)?;
        for (pid, node) in ctx.bound_params() {
            if let (Some(&k), Some(t)) = (slot_index.get(&pid), gr.take(node)) {
                grads[k].iter_mut().zip(t.data()).for_each(|(a, &b)| *a += scale * b);
            }
        }
        for &(mean_id, var_id, node) in &ctx.bn_nodes {
            if let Some((m, v)) = g.bn_batch_stats(node) {
                bn_updates.push((mean_id, var_id, m.clone(), v.clone()));
            }
        }
        reports.push(breakdown);
    }
    let grad_norm = match clip_gradients(&mut grads, cfg.grad_clip) {
        Ok(n) => n,
        Err(e) => {
            return Ok(StepReport {
                loss: mean_breakdown(&reports),
                grad_norm: f64::NAN,
                lr,
                skipped: Some(e.to_string()),
            })
        }
    };
    opt.update(&mut model.params, &grads, lr)?;
    let mom = cfg.bn_momentum as f32;
    for (mean_id, var_id, m, v) in bn_updates {
        for (id, stat) in [(mean_id, m), (var_id, v)] {
            model.params.get_mut(id).data_mut().iter_mut().zip(&stat).for_each(|(r, &s)| *r = (1.0 - mom) * *r + mom * s);
        }
    }
    Ok(StepReport {
        loss: mean_breakdown(&reports),
        grad_norm,
        lr,
        skipped: None,
    })
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mean = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    let k = items.first().map_or(0, |b| b.aux_losses.len());
    let j = items.first().map_or(0, |b| b.per_speaker_si_snr.len());
    LossBreakdown {
        total: mean(&|b| b.total),
        final_loss: mean(&|b| b.final_loss),
        aux_losses: (0..k).map(|r| mean(&|b| b.aux_losses[r])).collect(),
        permutation: items.first().map(|b| b.permutation.clone()).unwrap_or_default(),
        per_speaker_si_snr: (0..j).map(|s| mean(&|b| b.per_speaker_si_snr[s])).collect(),
        alpha: items.first().map_or(0.0, |b| b.alpha),
    }
}

/// Inference-mode PIT result on one example: `(loss, perm, per-speaker SI-SNR)`.
pub fn evaluate_example(model: &Separator, ex: &MixtureExample, loss: &LossConfig) -> Result<(f64, Vec<usize>, Vec<f64>)> {
    let ests = model.separate(&ex.mixture)?;
    let refs: Vec<Vec<f64>> = ex.sources.iter().map(Waveform::to_f64).collect();
    let ests: Vec<Vec<f64>> = ests.iter().map(Waveform::to_f64).collect();
    let m = objectives::pairwise_si_snr(&refs, &ests, loss.tau, loss.eps)?;
    let (l, p) = objectives::best_assignment(&m);
    let per = p.iter().enumerate().map(|(r, &e)| m[r][e]).collect();
    Ok((l, p, per))
}

/// Where training examples come from.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// A fixed list, reshuffled and randomly cropped every epoch.
    Fixed(Vec<MixtureExample>),
    /// Fresh mixtures drawn from a source pool every epoch.
    Dynamic { pool: Vec<Source>, per_epoch: usize },
}

/// Position in the run, saved with checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub skipped_steps: u64,
    pub best_val: f64,
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub alpha: f64,
    pub decayed: bool,
    pub skipped: u64,
}

/// Owns the model, optimizer, schedule and data-order generator of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Separator,
    pub opt: AdamW,
    pub sched: LrSchedule,
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Separator, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.loss.multi_loss && model.aux_domain != Some(cfg.loss.aux_domain) {
            return Err(Error::Config(format!(
                "multi-loss training with {:?} targets needs a model built with matching auxiliary heads",
                cfg.loss.aux_domain
            )));
        }
        Ok(Self {
            opt: AdamW::new(&model.params, &cfg),
            sched: LrSchedule::new(&cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            state: TrainState {
                best_val: f64::INFINITY,
                ..Default::default()
            },
            model,
            cfg,
        })
    }

    fn epoch_examples(&mut self, data: &TrainData) -> Result<Vec<MixtureExample>> {
        let len = self.cfg.segment_samples;
        match data {
            TrainData::Fixed(list) => {
                let mut order: Vec<usize> = (0..list.len()).collect();
                order.shuffle(&mut self.rng);
                order
                    .into_iter()
                    .map(|i| mixtures::segment_example(&list[i], len, SegmentPolicy::Random(&mut self.rng)))
                    .collect()
            }
            TrainData::Dynamic { pool, per_epoch } => {
                let dm = DynamicMixing {
                    segment_samples: len,
                    ..Default::default()
                };
                (0..*per_epoch).map(|_| mixtures::dynamic_mix(pool, &dm, &mut self.rng)).collect()
            }
        }
    }

    /// Mean inference-mode PIT loss over `val`.
    pub fn validate(&self, val: &[MixtureExample]) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::Data("empty validation set".into()));
        }
        let mut sum = 0.0;
        for ex in val {
            sum += evaluate_example(&self.model, ex, &self.cfg.loss)?.0;
        }
        Ok(sum / val.len() as f64)
    }

    /// Run one epoch, appending metrics lines to `log`.
    pub fn run_epoch(&mut self, data: &TrainData, val: &[MixtureExample], log: &mut String) -> Result<EpochSummary> {
        let epoch = self.state.epoch;
        let examples = self.epoch_examples(data)?;
        let steps = examples.len() / self.cfg.batch_size;
        if steps == 0 {
            return Err(Error::Data(format!(
                "{} examples do not fill one batch of {}",
                examples.len(),
                self.cfg.batch_size
            )));
        }
        let alpha = self.cfg.loss.alpha_at(epoch);
        let mut loss_sum = 0.0;
        let mut done = 0usize;
        let mut skipped = 0u64;
        let mut lr = 0.0;
        for (s, batch) in examples.chunks_exact(self.cfg.batch_size).enumerate() {
            lr = self.sched.lr_at(s, steps, epoch);
            let seed = self.cfg.seed ^ self.state.global_step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let rep = train_step(&mut self.model, &mut self.opt, batch, &self.cfg, alpha, lr, seed)?;
            self.state.global_step += 1;
            let aux = rep.loss.aux_losses.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                log,
                "train epoch={} step={} lr={} alpha={} total={} final={} aux=[{}] grad_norm={}{}",
                epoch,
                self.state.global_step,
                lr,
                alpha,
                rep.loss.total,
                rep.loss.final_loss,
                aux,
                rep.grad_norm,
                rep.skipped.as_deref().map(|r| format!(" skipped=\"{r}\"")).unwrap_or_default()
            );
            if let Some(reason) = &rep.skipped {
                log::warn!("step {} skipped: {}", self.state.global_step, reason);
                skipped += 1;
                continue;
            }
            loss_sum += rep.loss.total;
            done += 1;
        }
        self.state.skipped_steps += skipped;
        if done == 0 {
            return Err(Error::Numeric(format!("every step of epoch {epoch} was skipped")));
        }
        let val_loss = self.validate(val)?;
        let decayed = self.sched.end_epoch(epoch, val_loss);
        self.state.best_val = self.state.best_val.min(val_loss);
        let summary = EpochSummary {
            epoch,
            train_loss: loss_sum / done as f64,
            val_loss,
            lr,
            alpha,
            decayed,
            skipped,
        };
        let _ = writeln!(
            log,
            "epoch epoch={} train_loss={} val_loss={} lr={} decays={} skipped={}",
            epoch, summary.train_loss, val_loss, lr, self.sched.decays, skipped
        );
        self.state.epoch += 1;
        Ok(summary)
    }
}

/// Result of [`overfit`].
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitReport {
    /// First checked step at which every speaker reached the target.
    pub steps_to_target: Option<usize>,
    /// `(step, per-speaker SI-SNR)` at every check.
    pub history: Vec<(usize, Vec<f64>)>,
}

/// Train on a single example at a constant rate, checking inference-mode
/// per-speaker SI-SNR every `check_every` steps.
pub fn overfit(
    model: &mut Separator,
    ex: &MixtureExample,
    cfg: &TrainConfig,
    lr: f64,
    max_steps: usize,
    check_every: usize,
    target_db: f64,
) -> Result<OverfitReport> {
    cfg.validate()?;
    let mut opt = AdamW::new(&model.params, cfg);
    let batch = std::slice::from_ref(ex);
    let mut history = Vec::new();
    for step in 1..=max_steps {
        let rep = train_step(model, &mut opt, batch, cfg, cfg.loss.alpha_at(0), lr, cfg.seed.wrapping_add(step as u64))?;
        if let Some(r) = rep.skipped {
            return Err(Error::Numeric(format!("overfit step {step}: {r}")));
        }
        if step % check_every.max(1) == 0 || step == max_steps {
            let (_, _, per) = evaluate_example(model, ex, &cfg.loss)?;
            let hit = per.iter().all(|&v| v >= target_db);
            history.push((step, per));
            if hit {
                return Ok(OverfitReport {
                    steps_to_target: Some(step),
                    history,
                });
            }
        }
    }
    Ok(OverfitReport {
        steps_to_target: None,
        history,
    })
}

/// Mean of the per-speaker values, for logs.
pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
