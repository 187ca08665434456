//! Multi-stage training: weak-label pretraining of the micro, macro and
//! attention parts with everything else frozen, then fine-tuning of the
//! whole network on the combined micro objective.
//!
//! Every random draw comes from a stream keyed by the seed, the stage, the
//! epoch and the batch, so an interrupted run resumed from its checkpoint
//! follows the same trajectory as an uninterrupted one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use hpn_tensor::optim::{self, RmsProp};
use hpn_tensor::{checkpoint, BufferId, Graph, Mode, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::{evaluate, Counts};
use crate::grid::CourtSpec;
use crate::policy_net::{encode_batch, HpnModel, Need, Noise, Variant, GROUP_COMBINED, GROUP_MACRO, GROUP_MICRO, GROUP_TRANSFER};
use crate::seed;
use crate::trajdata::{StepState, TrainingSequence};
use crate::weak_labels::{attention_labels, attention_rng, macro_labels, SegmentationConfig, WeakLabels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainMicro,
    PretrainMacro,
    PretrainAttention,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PretrainMicro, Stage::PretrainMacro, Stage::PretrainAttention, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainMicro => "pretrain_micro",
            Stage::PretrainMacro => "pretrain_macro",
            Stage::PretrainAttention => "pretrain_attention",
            Stage::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }

    pub fn supported_by(self, v: Variant) -> bool {
        match self {
            Stage::PretrainMicro => true,
            Stage::PretrainMacro | Stage::Finetune => v.is_hierarchical(),
            Stage::PretrainAttention => v.has_attention(),
        }
    }

    pub fn trainable_groups(self) -> Vec<u32> {
        match self {
            Stage::PretrainMicro => vec![GROUP_MICRO],
            Stage::PretrainMacro => vec![GROUP_MACRO],
            Stage::PretrainAttention => vec![GROUP_TRANSFER],
            Stage::Finetune => vec![GROUP_MICRO, GROUP_MACRO, GROUP_TRANSFER, GROUP_COMBINED],
        }
    }

    fn need(self, v: Variant) -> Need {
        let none = Need {
            micro: false,
            macro_: false,
            transfer: false,
            combined: false,
        };
        match self {
            Stage::PretrainMicro => Need { micro: true, ..none },
            Stage::PretrainMacro => Need { macro_: true, ..none },
            Stage::PretrainAttention => Need { transfer: true, ..none },
            Stage::Finetune if v == Variant::HCc => Need {
                micro: true,
                combined: true,
                ..none
            },
            Stage::Finetune => Need {
                micro: true,
                transfer: true,
                ..none
            },
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stages each variant runs when no explicit schedule is configured.
pub fn default_schedule(v: Variant) -> Vec<Stage> {
    match v {
        Variant::Cnn | Variant::GruCnn => vec![Stage::PretrainMicro],
        Variant::HAux => vec![Stage::PretrainMicro, Stage::PretrainMacro, Stage::PretrainAttention, Stage::Finetune],
        Variant::HCc | Variant::HStack | Variant::HAtt => vec![Stage::PretrainMicro, Stage::PretrainMacro, Stage::Finetune],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    /// Learning-rate decay per optimizer step.
    pub decay: f64,
    pub momentum: f64,
    pub rho: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Epoch cap for each pretraining stage.
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Epochs without holdout improvement before a stage stops early.
    pub patience: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub l2_activation_weight: f64,
    pub noise_sigma: f64,
    pub translate_max_cells: usize,
    pub seed: u64,
    /// Share of training sequences whose attention labels are used when
    /// pretraining the attention mask.
    pub attention_label_fraction: f64,
    /// Explicit stage list; the variant default when absent.
    pub schedule: Option<Vec<Stage>>,
    /// Steps excluded from the burn-in-free macro accuracy.
    pub eval_burn_in: usize,
    pub record_wall_time: bool,
    /// Write a resumable checkpoint every this many epochs (0: only when
    /// the run stops).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_pretrain: 1e-3,
            lr_finetune: 1e-5,
            decay: 1e-6,
            momentum: 0.9,
            rho: 0.9,
            eps: 1e-8,
            batch_size: 16,
            pretrain_epochs: 20,
            finetune_epochs: 20,
            patience: 5,
            grad_clip_norm: 0.0,
            l2_activation_weight: 1e-4,
            noise_sigma: 1e-3,
            translate_max_cells: 8,
            seed: 0,
            attention_label_fraction: 1.0,
            schedule: None,
            eval_burn_in: 20,
            record_wall_time: false,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr_pretrain >= 0.0 && self.lr_finetune >= 0.0 && self.lr_pretrain.is_finite() && self.lr_finetune.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.attention_label_fraction) {
            return bad("attention_label_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.rho) {
            return bad("momentum and rho must lie in [0, 1)");
        }
        if self.decay < 0.0 || self.eps <= 0.0 || self.grad_clip_norm < 0.0 || self.l2_activation_weight < 0.0 || self.noise_sigma < 0.0 {
            return bad("decay, clip norm, activation weight and noise must be non-negative, eps positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if matches!(&self.schedule, Some(s) if s.is_empty()) {
            return bad("no stages");
        }
        Ok(())
    }

    pub fn schedule_for(&self, v: Variant) -> Result<Vec<Stage>> {
        let s = self.schedule.clone().unwrap_or_else(|| default_schedule(v));
        if s.is_empty() {
            return Err(Error::Config("no stages".into()));
        }
        if let Some(st) = s.iter().find(|st| !st.supported_by(v)) {
            return Err(Error::Unsupported {
                variant: v.name().into(),
                what: format!("stage {st}"),
            });
        }
        Ok(s)
    }

    fn lr(&self, stage: Stage) -> f64 {
        if stage == Stage::Finetune {
            self.lr_finetune
        } else {
            self.lr_pretrain
        }
    }

    fn epochs(&self, stage: Stage) -> usize {
        if stage == Stage::Finetune {
            self.finetune_epochs
        } else {
            self.pretrain_epochs
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within the stage.
    pub epoch: usize,
    pub stage: Stage,
    /// Mean training loss per batch. Pretraining losses are mean
    /// cross-entropies; the fine-tune loss is per sequence step.
    pub loss: f64,
    pub acc_delta: Vec<f64>,
    pub macro_acc: Option<f64>,
    pub attention_acc: Option<f64>,
    pub tv_monitor: Option<f64>,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub clamped_sequences: usize,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl TrainReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "stage",
            "loss",
            "acc_d0",
            "acc_d1",
            "acc_d2",
            "acc_d3",
            "macro_acc",
            "attention_acc",
            "tv_monitor",
            "grad_norm_mean",
            "grad_norm_max",
            "seconds",
        ])?;
        for e in &self.epochs {
            let mut rec = vec![e.epoch.to_string(), e.stage.name().to_string(), format!("{:.6}", e.loss)];
            for i in 0..4 {
                rec.push(opt(e.acc_delta.get(i).copied()));
            }
            rec.push(opt(e.macro_acc));
            rec.push(opt(e.attention_acc));
            rec.push(opt(e.tv_monitor));
            rec.push(format!("{:.6}", e.grad_norm_mean));
            rec.push(format!("{:.6}", e.grad_norm_max));
            rec.push(opt(e.seconds));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn stage_epochs(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }
}

/// Training sequences with their labels plus the holdout used for early
/// stopping.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub spec: &'a CourtSpec,
    pub segmentation: &'a SegmentationConfig,
    pub train: &'a [TrainingSequence],
    pub train_labels: &'a [WeakLabels],
    pub holdout: &'a [TrainingSequence],
    pub holdout_labels: &'a [WeakLabels],
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        if self.train.len() != self.train_labels.len() || self.holdout.len() != self.holdout_labels.len() {
            return Err(Error::Data("every sequence needs labels".into()));
        }
        if self.train.len() < 2 {
            return Err(Error::Data("training needs at least two sequences".into()));
        }
        Ok(())
    }
}

/// A mini-batch ready for the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Vec<Vec<StepState>>,
    pub labels: Vec<WeakLabels>,
    /// Per-sequence weight of the attention-label loss.
    pub aux_weights: Vec<f64>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&TrainingSequence], labels: &[&WeakLabels]) -> Self {
        Batch {
            states: seqs.iter().map(|s| s.states.clone()).collect(),
            labels: labels.iter().map(|&l| l.clone()).collect(),
            aux_weights: vec![1.0; seqs.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn steps(&self) -> usize {
        let s = self.states.iter().map(Vec::len).min().unwrap_or(0);
        self.labels.iter().map(WeakLabels::len).min().unwrap_or(0).min(s)
    }
}

pub type BnUpdate = (BufferId, BufferId, Vec<f64>, Vec<f64>);

pub struct LossOutput {
    /// The objective being minimized for the stage.
    pub loss: f64,
    /// Per-parameter gradients, present when requested.
    pub grads: Option<Vec<Option<Vec<f64>>>>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Objective of `stage` on one batch, with backpropagation through all
/// steps of the sequences when `with_grads` is set. Noise is injected after
/// every convolution when `noise` is given.
pub fn compute_loss(model: &HpnModel, batch: &Batch, stage: Stage, cfg: &TrainConfig, noise: Option<&mut ChaCha8Rng>, with_grads: bool) -> Result<LossOutput> {
    let v = model.variant();
    if !stage.supported_by(v) {
        return Err(Error::Unsupported {
            variant: v.name().into(),
            what: format!("stage {stage}"),
        });
    }
    let n = batch.len();
    if n < 2 {
        return Err(Error::Config("batches need at least two sequences".into()));
    }
    let steps = batch.steps();
    if steps == 0 {
        return Err(Error::Data("empty sequences in batch".into()));
    }
    let spec = &model.spec;
    let heads = model.heads();
    let need = stage.need(v);
    let lambda = cfg.l2_activation_weight;

    let mut g = Graph::new(&model.store, Mode::Train);
    let mut nz = match noise {
        Some(rng) if cfg.noise_sigma > 0.0 => Some(Noise {
            sigma: cfg.noise_sigma,
            rng,
        }),
        _ => None,
    };
    let mut hm = if v.has_memory() {
        Some(g.input(Tensor::zeros(&[n, model.hidden_size()]))?)
    } else {
        None
    };
    let mut hg = if v.is_hierarchical() {
        Some(g.input(Tensor::zeros(&[n, model.hidden_size()]))?)
    } else {
        None
    };

    let mut terms: Vec<Var> = Vec::with_capacity(steps * 3);
    for t in 0..steps {
        let refs: Vec<&StepState> = batch.states.iter().map(|s| &s[t]).collect();
        let x = g.input(encode_batch(spec, &refs))?;
        let x = model.pyramid(&mut g, x)?;
        let sv = model.step_graph(&mut g, x, hm, hg, need, &mut nz)?;
        hm = sv.h_micro.or(hm);
        hg = sv.h_macro.or(hg);
        let micro_targets = || -> Vec<usize> { batch.labels.iter().flat_map(|l| l.micro[t].iter().copied().take(heads)).collect() };
        match stage {
            Stage::PretrainMicro => {
                let w = vec![1.0 / (n * steps * heads) as f64; n * heads];
                terms.push(g.softmax_nll(sv.raw.expect("micro head"), &micro_targets(), &w)?);
            }
            Stage::PretrainMacro => {
                let targets: Vec<usize> = batch.labels.iter().map(|l| l.macro_goals[t].0).collect();
                let w = vec![1.0 / (n * steps) as f64; n];
                terms.push(g.softmax_nll(sv.macro_logits.expect("macro head"), &targets, &w)?);
            }
            Stage::PretrainAttention => {
                let targets: Vec<usize> = batch.labels.iter().map(|l| l.attention[t]).collect();
                let w: Vec<f64> = batch.aux_weights.iter().map(|a| a / (n * steps) as f64).collect();
                terms.push(g.softmax_nll(sv.attention.expect("transfer net"), &targets, &w)?);
            }
            Stage::Finetune => {
                let ones = vec![1.0; n * heads];
                if let Some(c) = sv.combined {
                    terms.push(g.softmax_nll(c, &micro_targets(), &ones)?);
                    if lambda > 0.0 {
                        let p = g.softmax(c)?;
                        terms.push(g.sum_squares(p, lambda)?);
                    }
                } else {
                    let raw = sv.raw.expect("micro head");
                    let att = sv.attention.expect("transfer net");
                    terms.push(g.log_hadamard_nll(raw, att, heads, &micro_targets(), &ones)?);
                    if lambda > 0.0 {
                        let p = g.softmax(raw)?;
                        terms.push(g.sum_squares(p, lambda)?);
                        let a = g.softmax(att)?;
                        terms.push(g.sum_squares(a, lambda)?);
                    }
                }
            }
        }
    }
    let loss = g.add_all(&terms)?;
    let value = g.value(loss).data()[0];
    let grads = if with_grads && value.is_finite() {
        g.backward(loss)?;
        Some(g.take_param_grads())
    } else {
        None
    };
    Ok(LossOutput {
        loss: value,
        grads,
        bn_updates: g.take_bn_updates(),
    })
}

/// A sequence after a random translation, with labels made consistent.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub states: Vec<StepState>,
    pub raw_positions: Vec<[f64; 2]>,
    pub raw_frame_positions: Vec<[f64; 2]>,
    pub labels: WeakLabels,
    pub shift: (i64, i64),
    /// Some cell or position was pushed off court and clamped.
    pub clamped: bool,
}

fn shift_state(s: &StepState, dc: i64, dr: i64, spec: &CourtSpec) -> (StepState, bool) {
    let (cols, rows) = (spec.micro_cols() as i64, spec.micro_rows() as i64);
    let mut out = StepState::default();
    let mut clamped = false;
    for (ch, cells) in s.channels.iter().enumerate() {
        let mut moved: Vec<(u32, u16)> = cells
            .iter()
            .map(|&(idx, n)| {
                let (c, r) = (idx as i64 % cols + dc, idx as i64 / cols + dr);
                let (cc, rc) = (c.clamp(0, cols - 1), r.clamp(0, rows - 1));
                clamped |= cc != c || rc != r;
                ((rc * cols + cc) as u32, n)
            })
            .collect();
        moved.sort_unstable_by_key(|&(i, _)| i);
        let dst = &mut out.channels[ch];
        for (i, n) in moved {
            match dst.last_mut() {
                Some(last) if last.0 == i => last.1 += n,
                _ => dst.push((i, n)),
            }
        }
    }
    (out, clamped)
}

/// Translates a sequence by a whole number of cells drawn uniformly with
/// `|d| < max_cells` per axis. Occupancy and positions move together;
/// macro-goal and attention labels are recomputed from the moved track,
/// velocity labels are kept.
pub fn augment_translate<R: Rng>(
    seq: &TrainingSequence,
    labels: &WeakLabels,
    spec: &CourtSpec,
    seg: &SegmentationConfig,
    max_cells: usize,
    rng: &mut R,
) -> Augmented {
    let shift = if max_cells > 1 {
        let m = max_cells as i64 - 1;
        (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
    } else {
        (0, 0)
    };
    translate(seq, labels, spec, seg, shift)
}

/// Deterministic translation by `(columns, rows)`.
pub fn translate(seq: &TrainingSequence, labels: &WeakLabels, spec: &CourtSpec, seg: &SegmentationConfig, shift: (i64, i64)) -> Augmented {
    if shift == (0, 0) {
        return Augmented {
            states: seq.states.clone(),
            raw_positions: seq.raw_positions.clone(),
            raw_frame_positions: seq.raw_frame_positions.clone(),
            labels: labels.clone(),
            shift,
            clamped: false,
        };
    }
    let mut clamped = false;
    let states = seq
        .states
        .iter()
        .map(|s| {
            let (o, c) = shift_state(s, shift.0, shift.1, spec);
            clamped |= c;
            o
        })
        .collect();
    let (dx, dy) = (shift.0 as f64 * spec.micro_cell_ft, shift.1 as f64 * spec.micro_cell_ft);
    let mut move_all = |pts: &[[f64; 2]]| -> Vec<[f64; 2]> {
        pts.iter()
            .map(|p| {
                let ((x, y), c) = spec.clamp_pos(p[0] + dx, p[1] + dy);
                clamped |= c;
                [x, y]
            })
            .collect()
    };
    let raw_positions = move_all(&seq.raw_positions);
    let raw_frame_positions = move_all(&seq.raw_frame_positions);
    let macro_goals = macro_labels(&raw_frame_positions, &labels.stationary, spec, seg);
    let attention = attention_labels(&raw_positions, &macro_goals, spec, seg, &mut attention_rng(seg, seq));
    Augmented {
        states,
        raw_positions,
        raw_frame_positions,
        labels: WeakLabels {
            macro_goals,
            attention,
            ..labels.clone()
        },
        shift,
        clamped,
    }
}

/// Where a schedule stands. Serialized into checkpoints so a run can be
/// resumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub config: TrainConfig,
    pub schedule: Vec<Stage>,
    pub stage_index: usize,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub optimizer_steps: u64,
    /// Best early-stopping metric of the current stage; absent before the
    /// stage has started.
    pub best_metric: Option<f64>,
    pub bad_epochs: usize,
    pub report: TrainReport,
}

impl Progress {
    pub fn finished(&self) -> bool {
        self.stage_index >= self.schedule.len()
    }
}

/// Controls for checkpointed runs.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    pub checkpoint: Option<PathBuf>,
    /// Stop (after checkpointing) once this many epochs have run in this
    /// invocation.
    pub stop_after_epochs: Option<usize>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub finished: bool,
}

pub fn best_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

fn stage_metric(stage: Stage, c: &Counts) -> f64 {
    match stage {
        Stage::PretrainMicro => c.raw_lookahead().first().copied().unwrap_or(0.0),
        Stage::Finetune => c.lookahead().first().copied().unwrap_or(0.0),
        Stage::PretrainMacro => c.macro_acc_after_burn_in().or(c.macro_acc()).unwrap_or(0.0),
        Stage::PretrainAttention => c.attention_acc().unwrap_or(0.0),
    }
}

fn stage_rng(cfg: &TrainConfig, kind: &str, stage: Stage, epoch: usize, batch: Option<usize>) -> ChaCha8Rng {
    let e = epoch.to_string();
    match batch {
        Some(b) => seed::rng(cfg.seed, &[kind, stage.name(), &e, &b.to_string()]),
        None => seed::rng(cfg.seed, &[kind, stage.name(), &e]),
    }
}

fn aux_mask(data: &TrainData, cfg: &TrainConfig) -> Vec<f64> {
    let n = data.train.len();
    let keep = (cfg.attention_label_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(cfg.seed, &["attention-labels"]));
    let mut mask = vec![0.0; n];
    for &i in &idx[..keep] {
        mask[i] = 1.0;
    }
    mask
}

fn params_finite(store: &ParamStore) -> bool {
    store.params().iter().all(|p| p.value.is_finite())
}

fn reset_optimizer_state(store: &mut ParamStore) {
    for p in store.params_mut() {
        p.cache.data_mut().fill(0.0);
        p.momentum.data_mut().fill(0.0);
        p.grad.data_mut().fill(0.0);
    }
}

fn apply_bn(model: &mut HpnModel, updates: Vec<BnUpdate>, groups: &[u32]) {
    let keep: Vec<BnUpdate> = updates
        .into_iter()
        .filter(|u| groups.contains(&model.buffer_groups()[u.0.index()]))
        .collect();
    Graph::apply_bn_updates(keep, &mut model.store);
}

struct Trainer<'a, 'd> {
    model: &'a mut HpnModel,
    data: TrainData<'d>,
    progress: Progress,
    best: ParamStore,
    aux: Vec<f64>,
}

impl Trainer<'_, '_> {
    fn stage(&self) -> Stage {
        self.progress.schedule[self.progress.stage_index]
    }

    fn evaluate(&self) -> Result<Option<Counts>> {
        if self.data.holdout.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(&*self.model, self.data.holdout, self.data.holdout_labels, self.progress.config.eval_burn_in)?))
    }

    fn start_stage(&mut self) -> Result<()> {
        let stage = self.stage();
        reset_optimizer_state(&mut self.model.store);
        self.model.store.set_trainable_groups(&stage.trainable_groups());
        self.progress.optimizer_steps = 0;
        self.progress.bad_epochs = 0;
        self.progress.epoch = 0;
        self.best = self.model.store.clone();
        self.progress.best_metric = Some(match self.evaluate()? {
            Some(c) => stage_metric(stage, &c),
            None => f64::NEG_INFINITY,
        });
        log::info!("{} {}: starting", self.model.variant(), stage);
        Ok(())
    }

    fn end_stage(&mut self) {
        let best_values: Vec<Tensor> = self.best.params().iter().map(|p| p.value.clone()).collect();
        for (p, v) in self.model.store.params_mut().iter_mut().zip(best_values) {
            p.value = v;
        }
        for (b, src) in self.model.store.buffers_mut().iter_mut().zip(self.best.buffers()) {
            b.value = src.value.clone();
        }
        reset_optimizer_state(&mut self.model.store);
        self.model.store.unfreeze_all();
        self.progress.stage_index += 1;
        self.progress.epoch = 0;
        self.progress.best_metric = None;
        self.progress.bad_epochs = 0;
        self.progress.optimizer_steps = 0;
    }

    fn run_epoch(&mut self) -> Result<()> {
        let cfg = self.progress.config.clone();
        let stage = self.stage();
        let epoch = self.progress.epoch;
        let started = Instant::now();
        let groups = stage.trainable_groups();
        self.model.store.set_trainable_groups(&groups);
        let last_good = self.model.store.clone();
        let diverged = |model: &mut HpnModel| {
            model.store = last_good.clone();
            Error::Divergence {
                stage: stage.name().into(),
                epoch: epoch + 1,
            }
        };

        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut stage_rng(&cfg, "shuffle", stage, epoch, None));
        let mut opt = RmsProp::new(cfg.lr(stage), cfg.decay, cfg.momentum, cfg.rho, cfg.eps);
        opt.t = self.progress.optimizer_steps;

        let (mut loss_sum, mut norm_sum, mut norm_max) = (0.0, 0.0, 0.0f64);
        let mut batches = 0usize;
        let mut clamped = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut arng = stage_rng(&cfg, "augment", stage, epoch, Some(b));
            let mut nrng = stage_rng(&cfg, "noise", stage, epoch, Some(b));
            let mut batch = Batch {
                states: Vec::with_capacity(idx.len()),
                labels: Vec::with_capacity(idx.len()),
                aux_weights: Vec::with_capacity(idx.len()),
            };
            for &i in idx {
                let a = augment_translate(
                    &self.data.train[i],
                    &self.data.train_labels[i],
                    self.data.spec,
                    self.data.segmentation,
                    cfg.translate_max_cells,
                    &mut arng,
                );
                clamped += a.clamped as usize;
                batch.states.push(a.states);
                batch.labels.push(a.labels);
                batch.aux_weights.push(self.aux[i]);
            }
            let out = compute_loss(self.model, &batch, stage, &cfg, Some(&mut nrng), true)?;
            let Some(grads) = out.grads.filter(|_| out.loss.is_finite()) else {
                return Err(diverged(self.model));
            };
            self.model.store.zero_grads();
            self.model.store.accumulate(&grads);
            apply_bn(self.model, out.bn_updates, &groups);
            let norm = if cfg.grad_clip_norm > 0.0 {
                optim::clip_gradients(&mut self.model.store, cfg.grad_clip_norm)
            } else {
                optim::grad_norm(&self.model.store)
            };
            if !norm.is_finite() {
                return Err(diverged(self.model));
            }
            opt.step(&mut self.model.store);
            if !params_finite(&self.model.store) {
                return Err(diverged(self.model));
            }
            let n = batch.len();
            let steps = batch.steps();
            loss_sum += if stage == Stage::Finetune { out.loss / (n * steps) as f64 } else { out.loss };
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            batches += 1;
        }
        self.progress.optimizer_steps = opt.t;
        self.progress.epoch += 1;

        let counts = self.evaluate()?;
        let metric = counts.as_ref().map_or(f64::NEG_INFINITY, |c| stage_metric(stage, c));
        let best = self.progress.best_metric.unwrap_or(f64::NEG_INFINITY);
        if metric > best || counts.is_none() {
            self.progress.best_metric = Some(metric);
            self.progress.bad_epochs = 0;
            self.best = self.model.store.clone();
        } else {
            self.progress.bad_epochs += 1;
        }
        let denom = batches.max(1) as f64;
        let rec = EpochRecord {
            epoch: self.progress.epoch,
            stage,
            loss: loss_sum / denom,
            acc_delta: counts.as_ref().map(Counts::lookahead).unwrap_or_default(),
            macro_acc: counts.as_ref().and_then(Counts::macro_acc),
            attention_acc: counts.as_ref().and_then(Counts::attention_acc),
            tv_monitor: counts.as_ref().and_then(Counts::tv_monitor),
            grad_norm_mean: norm_sum / denom,
            grad_norm_max: norm_max,
            clamped_sequences: clamped,
            seconds: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        log::info!(
            "{} {} epoch {}: loss {:.4} holdout {:?} metric {:.4}",
            self.model.variant(),
            stage,
            rec.epoch,
            rec.loss,
            rec.acc_delta,
            metric
        );
        self.progress.report.epochs.push(rec);
        Ok(())
    }

    fn stage_done(&self) -> bool {
        let cfg = &self.progress.config;
        self.progress.epoch >= cfg.epochs(self.stage()) || self.progress.bad_epochs >= cfg.patience
    }

    fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.progress)?;
        self.model.save(path, &meta)?;
        let hash = self.model.config_hash();
        std::fs::write(best_path(path), checkpoint::encode(&self.best, &hash, &[]))?;
        Ok(())
    }
}

/// Runs (or resumes) a whole schedule. With a checkpoint path, an existing
/// checkpoint there is resumed from and progress is written back as
/// configured.
pub fn train_resumable(model: &mut HpnModel, data: &TrainData, cfg: &TrainConfig, ctl: &RunControl) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let schedule = cfg.schedule_for(model.variant())?;
    let mut progress = Progress {
        config: cfg.clone(),
        schedule,
        stage_index: 0,
        epoch: 0,
        optimizer_steps: 0,
        best_metric: None,
        bad_epochs: 0,
        report: TrainReport::default(),
    };
    let mut best = model.store.clone();
    if let Some(path) = ctl.checkpoint.as_deref().filter(|p| p.exists()) {
        let meta = model.load(path)?;
        let saved: Progress = serde_json::from_slice(&meta)?;
        if saved.config != progress.config || saved.schedule != progress.schedule {
            return Err(Error::Config("checkpoint was written with a different training configuration".into()));
        }
        progress = saved;
        checkpoint::load_into(&best_path(path), &mut best, &model.config_hash())?;
    }
    let aux = aux_mask(data, cfg);
    let mut t = Trainer {
        model,
        data: *data,
        progress,
        best,
        aux,
    };
    let mut ran = 0usize;
    while !t.progress.finished() {
        if t.progress.best_metric.is_none() {
            t.start_stage()?;
        }
        if t.stage_done() {
            t.end_stage();
            if let (Some(p), true) = (&ctl.checkpoint, t.progress.finished()) {
                t.save(p)?;
            }
            continue;
        }
        if ctl.stop_after_epochs.is_some_and(|s| ran >= s) {
            if let Some(p) = &ctl.checkpoint {
                t.save(p)?;
            }
            return Ok(TrainOutcome {
                report: t.progress.report,
                finished: false,
            });
        }
        t.run_epoch()?;
        ran += 1;
        if let Some(p) = &ctl.checkpoint {
            if cfg.checkpoint_every > 0 && t.progress.epoch % cfg.checkpoint_every == 0 {
                t.save(p)?;
            }
        }
    }
    if let Some(p) = &ctl.checkpoint {
        t.save(p)?;
    }
    Ok(TrainOutcome {
        report: t.progress.report,
        finished: true,
    })
}

/// Runs the stages of `cfg`'s schedule (or the variant default) in order.
pub fn train_full(model: &mut HpnModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(train_resumable(model, data, cfg, &RunControl::default())?.report)
}

/// Runs a single stage.
pub fn run_stage(model: &mut HpnModel, data: &TrainData, stage: Stage, cfg: &TrainConfig) -> Result<TrainReport> {
    let cfg = TrainConfig {
        schedule: Some(vec![stage]),
        ..cfg.clone()
    };
    train_full(model, data, &cfg)
}
