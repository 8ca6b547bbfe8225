//! Training orchestration: the coarse stage on synthesized data, the fine
//! stage (warm-up, then self-training of an independent teacher/student
//! pair), the two baselines, and checkpoint evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{Mask, Sample};
use crate::losses::{
    dice_loss_grad, downsample_mask, embedding_consistency_loss, pooled_positive_embedding, pred_consistency_loss,
    sigmoid_all, total_loss, ts_loss, ws_loss, ws_student_loss, LossParts, LossWeights, PooledEmbedding,
};
use crate::metrics::{evaluate_dataset, Aggregation, Metrics, MetricsReport};
use crate::model::{binarize, weights_digest, Binder, DecoderKind, ForwardOutput, MaskLogits, ModelConfig, ModelState, ParamGroup};
use crate::optim::{accumulate_grads, Adam, AdamConfig};
use crate::prompt::{make_prompts, PromptMode, PromptSet};
use crate::pseudo_label::PseudoLabel;
use crate::rng::{derive_seed, seeded};
use crate::synth::{generic_scene, GenericScene};
use crate::tensor::Tensor;

const STREAM_COARSE: u64 = 0xC0A5;
const STREAM_DIRECT: u64 = 0xD1EC;
const STREAM_STUDENT: u64 = 0x57D7;
const STREAM_TEACHER: u64 = 0x7EAC;
const STREAM_PL_ONLY: u64 = 0x9100;
const STREAM_ORDER: u64 = 1;
const STREAM_AUG: u64 = 2;
const STREAM_PROMPT: u64 = 3;
const STREAM_LORA: u64 = 4;
const STREAM_EVAL: u64 = 0xE7A1;
const STREAM_FOUNDATION: u64 = 0xF0D0;
const STREAM_SCENES: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Epochs of the coarse stage and of the direct-transfer baseline.
    pub coarse_epochs: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weights_warmup: LossWeights,
    pub weights_selftrain: LossWeights,
    pub learning_rate: f64,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub adam: AdamConfig,
    /// Prompt kinds the teacher receives from pseudo-labels.
    pub teacher_prompt_mode: PromptMode,
    /// Positive (and negative) points per frame in point modes.
    pub prompt_points: usize,
    pub reset_moments_at_switch: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            coarse_epochs: 5,
            warmup_epochs: 3,
            total_epochs: 6,
            weights_warmup: LossWeights::WARMUP,
            weights_selftrain: LossWeights::SELF_TRAIN,
            learning_rate: 1e-4,
            batch_size_train: 2,
            batch_size_eval: 16,
            adam: AdamConfig::default(),
            teacher_prompt_mode: PromptMode::Box,
            prompt_points: 5,
            reset_moments_at_switch: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::param("schedule.warmup_epochs", "must be less than total_epochs"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("schedule.learning_rate", "must be positive"));
        }
        if self.batch_size_train == 0 || self.batch_size_eval == 0 {
            return Err(Error::param("schedule.batch_size", "must be at least 1"));
        }
        if self.coarse_epochs == 0 {
            return Err(Error::param("schedule.coarse_epochs", "must be at least 1"));
        }
        if self.teacher_prompt_mode == PromptMode::None {
            return Err(Error::param("schedule.teacher_prompt_mode", "the teacher must be prompted"));
        }
        self.weights_warmup.validate()?;
        self.weights_selftrain.validate()?;
        self.adam.validate()
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::SelfTrain
        }
    }

    pub fn weights(&self, epoch: usize) -> LossWeights {
        match self.phase(epoch) {
            Phase::Warmup => self.weights_warmup,
            _ => self.weights_selftrain,
        }
    }
}

/// Pretraining of the promptable backbone on generic curve scenes, standing
/// in for a pretrained foundation checkpoint. Every later stage starts from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoundationConfig {
    /// When false, every stage starts from random weights.
    pub enabled: bool,
    pub scene_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        FoundationConfig {
            enabled: true,
            scene_count: 512,
            epochs: 4,
            learning_rate: 1e-3,
        }
    }
}

impl FoundationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && (self.scene_count == 0 || self.epochs == 0) {
            return Err(Error::param("foundation", "scene_count and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("foundation.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Coarse,
    DirectTransfer,
    Warmup,
    SelfTrain,
    PseudoLabelOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub weights: Option<LossWeights>,
    pub losses: BTreeMap<String, f64>,
    /// L2 norm of the gradient reaching the teacher's encoder adapters.
    pub teacher_adapter_grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub weights: Option<LossWeights>,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub losses: BTreeMap<String, f64>,
    pub student_eval: Option<Metrics>,
    pub teacher_eval: Option<Metrics>,
    pub student_digest: String,
    pub teacher_digest: Option<String>,
    pub teacher_adapter_grad_norm_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Phase boundaries as `(phase, first epoch)`.
    pub phase_markers: Vec<(Phase, usize)>,
    pub skipped_frames: Vec<String>,
    pub failures: Vec<crate::pseudo_label::FrameFailure>,
    pub checkpoints: BTreeMap<String, String>,
    pub reports: BTreeMap<String, Metrics>,
    pub diagnostic: Option<String>,
}

impl RunManifest {
    pub fn new(stage: impl Into<String>, config: &RunConfig) -> Self {
        RunManifest {
            stage: stage.into(),
            config: config.clone(),
            epochs: Vec::new(),
            steps: Vec::new(),
            phase_markers: Vec::new(),
            skipped_frames: Vec::new(),
            failures: Vec::new(),
            checkpoints: BTreeMap::new(),
            reports: BTreeMap::new(),
            diagnostic: None,
        }
    }

    fn mark(&mut self, phase: Phase, epoch: usize) {
        if self.phase_markers.last().map(|m| m.0) != Some(phase) {
            self.phase_markers.push((phase, epoch));
        }
    }

    /// One row per optimizer step.
    pub fn loss_csv(&self) -> String {
        let mut keys: Vec<&String> = self.steps.iter().flat_map(|s| s.losses.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut out = String::from("epoch,step,phase,alpha,beta,gamma,delta");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for s in &self.steps {
            let phase = serde_json::to_value(s.phase).expect("phase serializes");
            let w = s.weights;
            let wf = |f: fn(&LossWeights) -> f64| w.as_ref().map_or(String::new(), |w| f(w).to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                s.epoch,
                s.step,
                phase.as_str().unwrap_or_default(),
                wf(|w| w.alpha),
                wf(|w| w.beta),
                wf(|w| w.gamma),
                wf(|w| w.delta)
            ));
            for k in &keys {
                out.push(',');
                if let Some(v) = s.losses.get(*k) {
                    out.push_str(&format!("{v:.8}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn mask_f64(m: &Mask) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

fn values_f64(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().iter().map(|&x| x as f64).collect()
}

fn seed_tensor(like: &Tensor, g: &[f64], scale: f64) -> Tensor {
    Tensor::from_rows(like.rows(), like.cols(), g.iter().map(|&x| (x * scale) as f32).collect())
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += s * b;
    }
}

fn shuffled(items: &[usize], seed: u64) -> Vec<usize> {
    let mut v = items.to_vec();
    v.shuffle(&mut seeded(seed));
    v
}

fn require_masks(data: &[Sample]) -> Result<Vec<&Mask>> {
    data.iter().map(|s| s.require_mask()).collect()
}

fn non_finite(part: &'static str, value: f64, epoch: usize, step: usize) -> Error {
    Error::NonFiniteLoss { part, value, epoch, step }
}

fn check_finite(losses: &BTreeMap<String, f64>, epoch: usize, step: usize) -> Result<()> {
    for (k, &v) in losses {
        if !v.is_finite() {
            let part: &'static str = match k.as_str() {
                "dice" => "dice",
                "ts" => "ts",
                "ws" => "ws",
                "emb" => "emb",
                "pred" => "pred",
                _ => "total",
            };
            return Err(non_finite(part, v, epoch, step));
        }
    }
    Ok(())
}

fn mean_losses(steps: &[StepRecord]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for s in steps {
        for (k, v) in &s.losses {
            *out.entry(k.clone()).or_default() += v / steps.len() as f64;
        }
    }
    out
}

fn fresh_model(cfg: &ModelConfig, kind: DecoderKind, seed: u64, foundation: Option<&ModelState>) -> Result<ModelState> {
    let cfg = ModelConfig { decoder_kind: kind, ..cfg.clone() };
    let mut m = match foundation {
        Some(f) => ModelState::from_foundation(cfg.clone(), f, seed)?,
        None => ModelState::new(cfg.clone(), seed)?,
    };
    m.attach_lora(cfg.lora_rank, cfg.lora_scale, derive_seed(seed, STREAM_LORA))?;
    Ok(m)
}

/// One supervised dice run: `model` fitted to labeled `data`, with
/// `prompts(epoch, index)` choosing each sample's prompts and, optionally, a
/// target other than the sample's own mask.
#[allow(clippy::too_many_arguments)]
fn train_supervised(
    cfg: &RunConfig,
    mut model: ModelState,
    data: &[Sample],
    epochs: usize,
    learning_rate: f64,
    prompts: impl Fn(usize, usize) -> Result<(Option<PromptSet>, Option<Mask>)> + Sync,
    eval: Option<&[Sample]>,
    manifest: &mut RunManifest,
    base: u64,
    phase: Phase,
) -> Result<ModelState> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no labeled training samples".into()));
    }
    let masks = require_masks(data)?;
    let sched = &cfg.schedule;
    let mut opt = Adam::new(learning_rate, sched.adam.clone())?;
    let all: Vec<usize> = (0..data.len()).collect();
    manifest.mark(phase, 0);
    for epoch in 0..epochs {
        let order = shuffled(&all, derive_seed(derive_seed(base, STREAM_ORDER), epoch as u64));
        let first = manifest.steps.len();
        for (step, batch) in order.chunks(sched.batch_size_train).enumerate() {
            let inv_b = 1.0 / batch.len() as f64;
            let results = crate::par::map(batch, |&i| -> Result<(f64, BTreeMap<String, Tensor>)> {
                let (set, target) = prompts(epoch, i)?;
                let mut tape = Tape::new();
                let mut binder = Binder::trainable(&model);
                let out = binder.forward(&mut tape, &data[i].image, set.as_ref());
                let p = sigmoid_all(&values_f64(&tape, out.logits));
                let target = mask_f64(target.as_ref().unwrap_or(masks[i]));
                let (l, g) = dice_loss_grad(&p, &target, cfg.loss.eps_dice)?;
                let g: Vec<f64> = g.iter().zip(&p).map(|(g, p)| g * p * (1.0 - p)).collect();
                let seed = seed_tensor(tape.value(out.logits), &g, inv_b);
                let grads = binder.grads(&tape.backward(&[(out.logits, &seed)]));
                Ok((l, grads))
            });
            let mut acc = BTreeMap::new();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l * inv_b;
                accumulate_grads(&mut acc, g);
            }
            let losses = BTreeMap::from([("dice".to_string(), loss)]);
            check_finite(&losses, epoch, step)?;
            opt.step(&mut model, &acc);
            manifest.steps.push(StepRecord {
                epoch,
                step,
                phase,
                weights: None,
                losses,
                teacher_adapter_grad_norm: None,
            });
        }
        let student_eval = match eval {
            Some(ev) => Some(evaluate_checkpoint(&model, ev, PromptMode::None, sched, cfg.seed)?.summary),
            None => None,
        };
        manifest.epochs.push(EpochRecord {
            epoch,
            phase,
            weights: None,
            steps: manifest.steps.len() - first,
            losses: mean_losses(&manifest.steps[first..]),
            student_eval,
            teacher_eval: None,
            student_digest: weights_digest(&model),
            teacher_digest: None,
            teacher_adapter_grad_norm_max: None,
        });
    }
    Ok(model)
}

/// Plain-head model with adapters, trained on labeled samples for `coarse_epochs`.
fn train_plain(
    cfg: &RunConfig,
    foundation: Option<&ModelState>,
    data: &[Sample],
    eval: Option<&[Sample]>,
    manifest: &mut RunManifest,
    stream: u64,
    phase: Phase,
) -> Result<ModelState> {
    cfg.schedule.validate()?;
    let base = derive_seed(cfg.seed, stream);
    let model = fresh_model(&cfg.model, DecoderKind::PlainConvHead, base, foundation)?;
    let sched = &cfg.schedule;
    train_supervised(cfg, model, data, sched.coarse_epochs, sched.learning_rate, |_, _| Ok((None, None)), eval, manifest, base, phase)
}

/// Generic curve scenes for [`pretrain_foundation`].
pub fn foundation_scenes(cfg: &RunConfig) -> Result<Vec<GenericScene>> {
    let (h, w) = cfg.model.image_size;
    let base = derive_seed(derive_seed(cfg.seed, STREAM_FOUNDATION), STREAM_SCENES);
    crate::par::map_range(cfg.foundation.scene_count, |i| generic_scene(h, w, derive_seed(base, i as u64)))
        .into_iter()
        .collect()
}

const PRETRAIN_MODES: [PromptMode; 4] = [PromptMode::None, PromptMode::Box, PromptMode::Point, PromptMode::BoxPoint];

/// Fully trainable promptable network fitted to generic scenes. Each sample
/// draws a prompt mode uniformly: prompt-free steps target every stroke,
/// prompted steps target one stroke and take their prompts from it.
pub fn pretrain_foundation(cfg: &RunConfig, scenes: &[GenericScene], manifest: &mut RunManifest) -> Result<ModelState> {
    cfg.schedule.validate()?;
    cfg.foundation.validate()?;
    let base = derive_seed(cfg.seed, STREAM_FOUNDATION);
    let model = ModelState::new(
        ModelConfig {
            decoder_kind: DecoderKind::PromptDecoder,
            ..cfg.model.clone()
        },
        base,
    )?;
    let samples: Vec<Sample> = scenes.iter().map(|s| s.sample.clone()).collect();
    let prompts = |epoch: usize, i: usize| -> Result<(Option<PromptSet>, Option<Mask>)> {
        let seed = derive_seed(derive_seed(derive_seed(base, STREAM_PROMPT), epoch as u64), i as u64);
        let mode = PRETRAIN_MODES[(seed % PRETRAIN_MODES.len() as u64) as usize];
        if mode == PromptMode::None {
            return Ok((None, None));
        }
        let parts = &scenes[i].parts;
        let part = &parts[(derive_seed(seed, 1) % parts.len() as u64) as usize];
        let set = make_prompts(part, mode, cfg.schedule.prompt_points, seed)?;
        Ok((Some(set), Some(part.clone())))
    };
    let f = &cfg.foundation;
    train_supervised(cfg, model, &samples, f.epochs, f.learning_rate, prompts, None, manifest, base, Phase::Pretrain)
}

/// Coarse stage: adapters plus plain head fitted to synthesized samples with dice.
pub fn train_coarse(
    cfg: &RunConfig,
    foundation: Option<&ModelState>,
    synthesized: &[Sample],
    eval: Option<&[Sample]>,
    manifest: &mut RunManifest,
) -> Result<ModelState> {
    train_plain(cfg, foundation, synthesized, eval, manifest, STREAM_COARSE, Phase::Coarse)
}

/// The coarse architecture trained on raw source scenes, scored on target frames.
pub fn direct_transfer_baseline(
    cfg: &RunConfig,
    foundation: Option<&ModelState>,
    source: &[Sample],
    target_eval: &[Sample],
    manifest: &mut RunManifest,
) -> Result<(ModelState, MetricsReport)> {
    let model = train_plain(cfg, foundation, source, None, manifest, STREAM_DIRECT, Phase::DirectTransfer)?;
    let report = evaluate_checkpoint(&model, target_eval, PromptMode::None, &cfg.schedule, cfg.seed)?;
    manifest.reports.insert("direct_transfer".into(), report.summary);
    Ok((model, report))
}

/// Pseudo-labels aligned 1:1 with frames; returns the indices usable for
/// prompting (non-empty labels) after recording the skipped ones.
fn usable_frames(frames: &[Sample], pseudo: &[PseudoLabel], manifest: &mut RunManifest) -> Result<Vec<usize>> {
    if frames.len() != pseudo.len() {
        return Err(Error::shape(frames.len(), pseudo.len()));
    }
    let mut usable = Vec::new();
    for (i, (f, p)) in frames.iter().zip(pseudo).enumerate() {
        if f.id != p.source_frame {
            return Err(Error::param("pseudo_labels", format!("frame {} paired with label for {}", f.id, p.source_frame)));
        }
        f.image.check_dims(&p.mask)?;
        if p.mask.foreground_count() == 0 {
            manifest.skipped_frames.push(f.id.clone());
        } else {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(Error::EmptyDataset("every pseudo-label is empty".into()));
    }
    Ok(usable)
}

/// Both branches of one network on one frame.
struct Branches<'m> {
    tape: Tape,
    binder: Binder<'m>,
    clean: ForwardOutput,
    aug: ForwardOutput,
}

impl<'m> Branches<'m> {
    fn run(model: &'m ModelState, train: bool, sample: &Sample, aug: &crate::grid::Image, prompts: Option<&PromptSet>) -> Self {
        let mut tape = Tape::new();
        let mut binder = if train { Binder::trainable(model) } else { Binder::frozen(model) };
        let clean = binder.forward(&mut tape, &sample.image, prompts);
        let aug = binder.forward(&mut tape, aug, prompts);
        Branches { tape, binder, clean, aug }
    }

    fn logits(&self) -> (Vec<f64>, Vec<f64>) {
        (values_f64(&self.tape, self.clean.logits), values_f64(&self.tape, self.aug.logits))
    }

    fn pool(&self, cells: &[f64]) -> Result<PooledEmbedding> {
        let z = values_f64(&self.tape, self.clean.grid);
        pooled_positive_embedding(&z, self.tape.value(self.clean.grid).cols(), cells)
    }

    /// Backward from logit and embedding seeds; None seeds are skipped.
    fn grads(&self, clean: &[f64], aug: &[f64], grid: Option<&[f64]>) -> BTreeMap<String, Tensor> {
        let sc = seed_tensor(self.tape.value(self.clean.logits), clean, 1.0);
        let sa = seed_tensor(self.tape.value(self.aug.logits), aug, 1.0);
        let sg = grid.map(|g| seed_tensor(self.tape.value(self.clean.grid), g, 1.0));
        let mut seeds = vec![(self.clean.logits, &sc), (self.aug.logits, &sa)];
        if let Some(sg) = &sg {
            seeds.push((self.clean.grid, sg));
        }
        self.binder.grads(&self.tape.backward(&seeds))
    }
}

fn adapter_grad_norm(model: &ModelState, grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .iter()
        .filter(|(k, _)| model.param(k).is_some_and(|p| p.group == ParamGroup::Lora))
        .map(|(_, g)| g.sum_sq())
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct FineOutcome {
    pub student: ModelState,
    pub teacher: ModelState,
    /// Snapshots at the end of the warm-up phase.
    pub warmup_student: ModelState,
    pub warmup_teacher: ModelState,
}

/// Per-frame prompts for the teacher, resampled every epoch.
fn teacher_prompts(cfg: &RunConfig, mask: &Mask, epoch: usize, frame: usize) -> Result<PromptSet> {
    let seed = derive_seed(derive_seed(derive_seed(cfg.seed, STREAM_PROMPT), epoch as u64), frame as u64);
    make_prompts(mask, cfg.schedule.teacher_prompt_mode, cfg.schedule.prompt_points, seed)
}

fn augmented(cfg: &RunConfig, sample: &Sample, stream: u64, epoch: usize, frame: usize) -> crate::grid::Image {
    let seed = derive_seed(derive_seed(derive_seed(cfg.seed, stream), epoch as u64), frame as u64);
    crate::augment::strong_perturb(&sample.image, &cfg.augment, seed)
}

/// Fine stage. During warm-up both networks learn from pseudo-labels (the
/// teacher prompted, the student prompt-free); from epoch `warmup_epochs` the
/// teacher is frozen and its binarized predictions supervise the student.
pub fn train_fine(
    cfg: &RunConfig,
    foundation: Option<&ModelState>,
    frames: &[Sample],
    pseudo: &[PseudoLabel],
    eval: Option<&[Sample]>,
    manifest: &mut RunManifest,
) -> Result<FineOutcome> {
    cfg.schedule.validate()?;
    cfg.loss.validate()?;
    let sched = &cfg.schedule;
    let usable = usable_frames(frames, pseudo, manifest)?;
    let (h, w) = cfg.model.image_size;
    let (gh, gw) = cfg.model.grid();
    let targets: Vec<Vec<f64>> = pseudo.iter().map(|p| mask_f64(&p.mask)).collect();
    let cells: Vec<Vec<f64>> = pseudo
        .iter()
        .map(|p| downsample_mask(p.mask.data(), h, w, gh, gw))
        .collect::<Result<_>>()?;

    let mut student = fresh_model(&cfg.model, DecoderKind::PromptDecoder, derive_seed(cfg.seed, STREAM_STUDENT), foundation)?;
    let mut teacher = fresh_model(&cfg.model, DecoderKind::PromptDecoder, derive_seed(cfg.seed, STREAM_TEACHER), foundation)?;
    let mut opt_s = Adam::new(sched.learning_rate, sched.adam.clone())?;
    let mut opt_t = Adam::new(sched.learning_rate, sched.adam.clone())?;
    let mut warmup_snapshot = None;

    for epoch in 0..sched.total_epochs {
        let phase = sched.phase(epoch);
        if epoch == sched.warmup_epochs {
            warmup_snapshot = Some((student.clone(), teacher.clone()));
            teacher.freeze_all();
            if sched.reset_moments_at_switch {
                opt_s.reset();
                opt_t.reset();
            }
        }
        manifest.mark(phase, epoch);
        let weights = sched.weights(epoch);
        let teacher_trains = phase == Phase::Warmup;
        let order = shuffled(&usable, derive_seed(derive_seed(cfg.seed, STREAM_ORDER), epoch as u64));
        let first = manifest.steps.len();
        let mut grad_norm_max: f64 = 0.0;

        for (step, batch) in order.chunks(sched.batch_size_train).enumerate() {
            let b = batch.len() as f64;
            let passes = crate::par::map(batch, |&i| -> Result<(Branches, Branches)> {
                let prompts = teacher_prompts(cfg, &pseudo[i].mask, epoch, i)?;
                let s_aug = augmented(cfg, &frames[i], STREAM_AUG, epoch, 2 * i);
                let t_aug = augmented(cfg, &frames[i], STREAM_AUG, epoch, 2 * i + 1);
                let stu = Branches::run(&student, true, &frames[i], &s_aug, None);
                let tea = Branches::run(&teacher, teacher_trains, &frames[i], &t_aug, Some(&prompts));
                Ok((stu, tea))
            });
            let passes: Vec<(Branches, Branches)> = passes.into_iter().collect::<Result<_>>()?;

            // Per-frame objectives and their logit gradients.
            let mut parts = LossParts::default();
            let mut seeds = Vec::with_capacity(passes.len());
            for ((stu, tea), &i) in passes.iter().zip(batch) {
                let (s, sa) = stu.logits();
                let (t, ta) = tea.logits();
                let ts = ts_loss(&s, &sa, &t, &cfg.loss)?;
                let ws = ws_loss(&s, &sa, &t, &ta, &targets[i], &cfg.loss)?;
                let pred = pred_consistency_loss(&t, &ta, &cfg.loss)?;
                parts.ts += ts.value / b;
                parts.ws += ws.value / b;
                parts.pred += pred.value / b;
                let mut gs = vec![0.0; s.len()];
                let mut gsa = vec![0.0; s.len()];
                let mut gt = vec![0.0; s.len()];
                let mut gta = vec![0.0; s.len()];
                add_scaled(&mut gs, &ts.grad_stu, weights.alpha / b);
                add_scaled(&mut gsa, &ts.grad_stu_aug, weights.alpha / b);
                add_scaled(&mut gs, &ws.grad_stu, weights.beta / b);
                add_scaled(&mut gsa, &ws.grad_stu_aug, weights.beta / b);
                add_scaled(&mut gt, &ws.grad_tea, weights.beta / b);
                add_scaled(&mut gta, &ws.grad_tea_aug, weights.beta / b);
                add_scaled(&mut gta, &pred.grad_tea_aug, weights.delta / b);
                seeds.push((gs, gsa, gt, gta));
            }

            // Embedding consistency couples the frames of the batch.
            let pools: Vec<(PooledEmbedding, PooledEmbedding)> = passes
                .iter()
                .zip(batch)
                .map(|((stu, tea), &i)| Ok((stu.pool(&cells[i])?, tea.pool(&cells[i])?)))
                .collect::<Result<_>>()?;
            let stu_vecs: Vec<Vec<f64>> = pools.iter().map(|p| p.0.vector.clone()).collect();
            let tea_vecs: Vec<Vec<f64>> = pools.iter().map(|p| p.1.vector.clone()).collect();
            let emb = embedding_consistency_loss(&stu_vecs, &tea_vecs, cfg.loss.tau, cfg.loss.embedding_loss_form)?;
            parts.emb = emb.value;

            let total = total_loss(&parts, &weights).map_err(|e| match e {
                Error::NonFiniteLoss { part, value, .. } => non_finite(part, value, epoch, step),
                other => other,
            })?;
            let losses = BTreeMap::from([
                ("ts".to_string(), parts.ts),
                ("ws".to_string(), parts.ws),
                ("emb".to_string(), parts.emb),
                ("pred".to_string(), parts.pred),
                ("total".to_string(), total),
            ]);
            check_finite(&losses, epoch, step)?;

            let work: Vec<usize> = (0..passes.len()).collect();
            let grads = crate::par::map(&work, |&j| {
                let (stu, tea) = &passes[j];
                let (gs, gsa, gt, gta) = &seeds[j];
                let zs: Vec<f64> = pools[j].0.backward(&emb.grad_stu[j]).iter().map(|g| g * weights.gamma).collect();
                let stu_grads = stu.grads(gs, gsa, Some(&zs));
                let tea_grads = if teacher_trains {
                    let zt: Vec<f64> = pools[j].1.backward(&emb.grad_tea[j]).iter().map(|g| g * weights.gamma).collect();
                    tea.grads(gt, gta, Some(&zt))
                } else {
                    BTreeMap::new()
                };
                (stu_grads, tea_grads)
            });
            drop(passes);
            let mut acc_s = BTreeMap::new();
            let mut acc_t = BTreeMap::new();
            for (gs, gt) in grads {
                accumulate_grads(&mut acc_s, gs);
                accumulate_grads(&mut acc_t, gt);
            }
            let norm = adapter_grad_norm(&teacher, &acc_t);
            grad_norm_max = grad_norm_max.max(norm);
            opt_s.step(&mut student, &acc_s);
            if teacher_trains {
                opt_t.step(&mut teacher, &acc_t);
            }
            manifest.steps.push(StepRecord {
                epoch,
                step,
                phase,
                weights: Some(weights),
                losses,
                teacher_adapter_grad_norm: Some(norm),
            });
        }

        let (student_eval, teacher_eval) = match eval {
            Some(ev) => (
                Some(evaluate_checkpoint(&student, ev, PromptMode::None, sched, cfg.seed)?.summary),
                Some(evaluate_checkpoint(&teacher, ev, sched.teacher_prompt_mode, sched, cfg.seed)?.summary),
            ),
            None => (None, None),
        };
        manifest.epochs.push(EpochRecord {
            epoch,
            phase,
            weights: Some(weights),
            steps: manifest.steps.len() - first,
            losses: mean_losses(&manifest.steps[first..]),
            student_eval,
            teacher_eval,
            student_digest: weights_digest(&student),
            teacher_digest: Some(weights_digest(&teacher)),
            teacher_adapter_grad_norm_max: Some(grad_norm_max),
        });
    }
    let (warmup_student, warmup_teacher) = warmup_snapshot.expect("warm-up shorter than training");
    Ok(FineOutcome {
        student,
        teacher,
        warmup_student,
        warmup_teacher,
    })
}

/// A prompt-decoder model trained end-to-end on pseudo-labels alone (the
/// student half of the weak supervision), for `total_epochs`.
pub fn pseudo_label_only_baseline(
    cfg: &RunConfig,
    foundation: Option<&ModelState>,
    frames: &[Sample],
    pseudo: &[PseudoLabel],
    eval: Option<&[Sample]>,
    manifest: &mut RunManifest,
) -> Result<ModelState> {
    cfg.schedule.validate()?;
    let sched = &cfg.schedule;
    let usable = usable_frames(frames, pseudo, manifest)?;
    let targets: Vec<Vec<f64>> = pseudo.iter().map(|p| mask_f64(&p.mask)).collect();
    let mut model = fresh_model(&cfg.model, DecoderKind::PromptDecoder, derive_seed(cfg.seed, STREAM_PL_ONLY), foundation)?;
    let mut opt = Adam::new(sched.learning_rate, sched.adam.clone())?;
    manifest.mark(Phase::PseudoLabelOnly, 0);
    for epoch in 0..sched.total_epochs {
        let order = shuffled(&usable, derive_seed(derive_seed(cfg.seed, STREAM_ORDER), epoch as u64));
        let first = manifest.steps.len();
        for (step, batch) in order.chunks(sched.batch_size_train).enumerate() {
            let b = batch.len() as f64;
            let results = crate::par::map(batch, |&i| -> Result<(f64, BTreeMap<String, Tensor>)> {
                let aug = augmented(cfg, &frames[i], STREAM_AUG, epoch, 2 * i);
                let br = Branches::run(&model, true, &frames[i], &aug, None);
                let (s, sa) = br.logits();
                let ws = ws_student_loss(&s, &sa, &targets[i], &cfg.loss)?;
                let gs: Vec<f64> = ws.grad_stu.iter().map(|g| g / b).collect();
                let gsa: Vec<f64> = ws.grad_stu_aug.iter().map(|g| g / b).collect();
                Ok((ws.value, br.grads(&gs, &gsa, None)))
            });
            let mut acc = BTreeMap::new();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l / b;
                accumulate_grads(&mut acc, g);
            }
            let losses = BTreeMap::from([("ws".to_string(), loss)]);
            check_finite(&losses, epoch, step)?;
            opt.step(&mut model, &acc);
            manifest.steps.push(StepRecord {
                epoch,
                step,
                phase: Phase::PseudoLabelOnly,
                weights: None,
                losses,
                teacher_adapter_grad_norm: None,
            });
        }
        let student_eval = match eval {
            Some(ev) => Some(evaluate_checkpoint(&model, ev, PromptMode::None, sched, cfg.seed)?.summary),
            None => None,
        };
        manifest.epochs.push(EpochRecord {
            epoch,
            phase: Phase::PseudoLabelOnly,
            weights: None,
            steps: manifest.steps.len() - first,
            losses: mean_losses(&manifest.steps[first..]),
            student_eval,
            teacher_eval: None,
            student_digest: weights_digest(&model),
            teacher_digest: None,
            teacher_adapter_grad_norm_max: None,
        });
    }
    Ok(model)
}

/// Prompts used when scoring frame `index` under `mode`, derived from its
/// ground truth. Frames without foreground fall back to the prompt-free path.
pub fn evaluation_prompts(gt: &Mask, mode: PromptMode, points: usize, seed: u64, index: usize) -> Result<PromptSet> {
    if mode == PromptMode::None || gt.foreground_count() == 0 {
        return Ok(PromptSet::default());
    }
    make_prompts(gt, mode, points, derive_seed(derive_seed(seed, STREAM_EVAL), index as u64))
}

/// Logits for every frame under `mode`, processed in `batch_size_eval` chunks.
pub fn predict_dataset(
    state: &ModelState,
    dataset: &[Sample],
    mode: PromptMode,
    sched: &ScheduleConfig,
    seed: u64,
) -> Result<Vec<MaskLogits>> {
    if state.config().decoder_kind == DecoderKind::PlainConvHead && mode != PromptMode::None {
        return Err(Error::WrongDecoder {
            expected: DecoderKind::PromptDecoder.name(),
            actual: DecoderKind::PlainConvHead.name(),
        });
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(sched.batch_size_eval.max(1)) {
        let preds = crate::par::map(chunk, |&i| -> Result<MaskLogits> {
            let s = &dataset[i];
            let prompts = match mode {
                PromptMode::None => PromptSet::default(),
                _ => evaluation_prompts(s.require_mask()?, mode, sched.prompt_points, seed, i)?,
            };
            state.predict(&s.image, Some(&prompts))
        });
        for p in preds {
            out.push(p?);
        }
    }
    Ok(out)
}

/// Score `state` on a labeled dataset under a prompt mode; prompts come from
/// the ground truth.
pub fn evaluate_checkpoint(
    state: &ModelState,
    dataset: &[Sample],
    mode: PromptMode,
    sched: &ScheduleConfig,
    seed: u64,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let gts: Vec<Mask> = require_masks(dataset)?.into_iter().cloned().collect();
    let logits = predict_dataset(state, dataset, mode, sched, seed)?;
    let threshold = state.config().binarize_threshold;
    let preds: Vec<Mask> = logits.iter().map(|l| binarize(l, threshold)).collect::<Result<_>>()?;
    let ids: Vec<String> = dataset.iter().map(|s| s.id.clone()).collect();
    evaluate_dataset(&ids, &preds, &gts, Aggregation::MeanPerFrame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainTag, Image};
    use crate::prompt::BoxPrompt;
    use crate::pseudo_label::ClusterStat;

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 5;
        cfg.scene.height = 32;
        cfg.scene.width = 32;
        cfg.model = ModelConfig {
            image_size: (32, 32),
            patch_size: 8,
            embed_dim: 16,
            encoder_layers: 1,
            attention_heads: 2,
            mlp_ratio: 2,
            skip_channels: 3,
            up_channels: 2,
            head_channels: 4,
            ..ModelConfig::default()
        };
        cfg.schedule.coarse_epochs = 2;
        cfg.schedule.warmup_epochs = 1;
        cfg.schedule.total_epochs = 3;
        cfg.schedule.learning_rate = 1e-3;
        cfg.augment.erase_size_range = (2, 6);
        cfg
    }

    fn frames(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut mask = Mask::filled(32, 32, 0);
                for c in 4..28 {
                    mask.set(8 + i % 10, c, 1);
                    mask.set(9 + i % 10, c, 1);
                }
                let image = Image::from_fn(32, 32, |r, c| if *mask.get(r, c) == 1 { 60.0 } else { 180.0 + (r * c % 7) as f32 });
                Sample::new(format!("f{i:02}"), image, Some(mask), DomainTag::Target).unwrap()
            })
            .collect()
    }

    fn labels(frames: &[Sample]) -> Vec<PseudoLabel> {
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mask = if i == 1 { Mask::filled(32, 32, 0) } else { f.mask.clone().unwrap() };
                PseudoLabel {
                    source_frame: f.id.clone(),
                    low_confidence: mask.foreground_count() == 0,
                    cluster_stats: vec![ClusterStat { size: mask.foreground_count(), bbox: BoxPrompt { row_min: 0, col_min: 0, row_max: 0, col_max: 0 } }],
                    mask,
                }
            })
            .collect()
    }

    #[test]
    fn foundation_pretraining_is_deterministic_and_fully_trainable() {
        let mut cfg = tiny_config();
        cfg.scene.height = 64;
        cfg.scene.width = 64;
        cfg.model.image_size = (64, 64);
        cfg.model.patch_size = 16;
        cfg.foundation.scene_count = 4;
        cfg.foundation.epochs = 2;
        let scenes = foundation_scenes(&cfg).unwrap();
        assert_eq!(scenes.len(), 4);
        assert!(scenes.iter().all(|s| !s.parts.is_empty()));
        let mut m1 = RunManifest::new("pretrain", &cfg);
        let a = pretrain_foundation(&cfg, &scenes, &mut m1).unwrap();
        let mut m2 = RunManifest::new("pretrain", &cfg);
        let b = pretrain_foundation(&cfg, &scenes, &mut m2).unwrap();
        assert_eq!(weights_digest(&a), weights_digest(&b));
        assert_eq!(m1, m2);
        assert_eq!(m1.phase_markers, vec![(Phase::Pretrain, 0)]);
        assert_eq!(m1.epochs.len(), 2);
        assert!(!a.has_lora());
        assert_eq!(a.config().decoder_kind, DecoderKind::PromptDecoder);
        let fresh = ModelState::new(a.config().clone(), 0).unwrap();
        assert_ne!(a.param("enc.patch.w").unwrap().value, fresh.param("enc.patch.w").unwrap().value);

        let student = fresh_model(&cfg.model, DecoderKind::PromptDecoder, 7, Some(&a)).unwrap();
        assert!(student.has_lora());
        assert_eq!(student.param("enc.patch.w").unwrap().value, a.param("enc.patch.w").unwrap().value);
    }

    #[test]
    fn schedule_switches_at_warmup() {
        let s = ScheduleConfig::default();
        assert_eq!(s.weights(2), LossWeights::WARMUP);
        assert_eq!(s.weights(3), LossWeights::SELF_TRAIN);
        assert!(ScheduleConfig { warmup_epochs: 6, ..s.clone() }.validate().is_err());
        assert!(ScheduleConfig { teacher_prompt_mode: PromptMode::None, ..s }.validate().is_err());
    }

    #[test]
    fn coarse_training_is_deterministic_and_reduces_loss() {
        let cfg = tiny_config();
        let data = frames(6);
        let mut m1 = RunManifest::new("coarse", &cfg);
        let a = train_coarse(&cfg, None, &data, Some(&data[..2]), &mut m1).unwrap();
        let mut m2 = RunManifest::new("coarse", &cfg);
        let b = train_coarse(&cfg, None, &data, Some(&data[..2]), &mut m2).unwrap();
        assert_eq!(crate::model::checkpoint_digest(&a), crate::model::checkpoint_digest(&b));
        assert_eq!(m1, m2);
        assert_eq!(m1.epochs.len(), 2);
        assert!(m1.epochs[1].losses["dice"] < m1.epochs[0].losses["dice"]);
        assert!(train_coarse(&cfg, None, &[], None, &mut m1).is_err());
    }

    #[test]
    fn fine_stage_follows_the_schedule() {
        let cfg = tiny_config();
        let data = frames(5);
        let pseudo = labels(&data);
        let mut man = RunManifest::new("fine", &cfg);
        let out = train_fine(&cfg, None, &data, &pseudo, Some(&data[..2]), &mut man).unwrap();
        assert_eq!(man.skipped_frames, vec!["f01".to_string()]);
        assert_eq!(man.phase_markers, vec![(Phase::Warmup, 0), (Phase::SelfTrain, 1)]);
        for s in &man.steps {
            let expected = if s.epoch < 1 { LossWeights::WARMUP } else { LossWeights::SELF_TRAIN };
            assert_eq!(s.weights, Some(expected));
            if s.epoch >= 1 {
                assert_eq!(s.teacher_adapter_grad_norm, Some(0.0));
            } else {
                assert!(s.teacher_adapter_grad_norm.unwrap() > 0.0);
            }
        }
        let frozen: Vec<_> = man.epochs.iter().map(|e| e.teacher_digest.clone().unwrap()).collect();
        assert_eq!(frozen[0], frozen[1]);
        assert_eq!(frozen[1], frozen[2]);
        assert_ne!(man.epochs[0].student_digest, man.epochs[2].student_digest);
        assert_eq!(weights_digest(&out.warmup_teacher), weights_digest(&out.teacher));
        assert!(out.teacher.trainable_count() == 0);

        let mut again = RunManifest::new("fine", &cfg);
        let out2 = train_fine(&cfg, None, &data, &pseudo, Some(&data[..2]), &mut again).unwrap();
        assert_eq!(man, again);
        assert_eq!(crate::model::checkpoint_digest(&out.student), crate::model::checkpoint_digest(&out2.student));
        assert!(man.loss_csv().lines().count() == man.steps.len() + 1);
    }

    #[test]
    fn misaligned_or_empty_labels_are_rejected() {
        let cfg = tiny_config();
        let data = frames(3);
        let mut pseudo = labels(&data);
        let mut man = RunManifest::new("fine", &cfg);
        pseudo.swap(0, 2);
        assert!(train_fine(&cfg, None, &data, &pseudo, None, &mut man).is_err());
        let empty: Vec<PseudoLabel> = labels(&data)
            .into_iter()
            .map(|mut p| {
                p.mask = Mask::filled(32, 32, 0);
                p
            })
            .collect();
        assert!(matches!(train_fine(&cfg, None, &data, &empty, None, &mut man), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn evaluation_modes() {
        let cfg = tiny_config();
        let data = frames(3);
        let m = fresh_model(&cfg.model, DecoderKind::PromptDecoder, 1, None).unwrap();
        for mode in [PromptMode::None, PromptMode::Box, PromptMode::Point, PromptMode::BoxPoint] {
            let r = evaluate_checkpoint(&m, &data, mode, &cfg.schedule, 1).unwrap();
            assert_eq!(r.frames.len(), 3);
        }
        let p = evaluation_prompts(data[0].mask.as_ref().unwrap(), PromptMode::BoxPoint, 5, 1, 0).unwrap();
        assert_eq!((p.boxes.len(), p.points.len()), (1, 10));
        let plain = fresh_model(&cfg.model, DecoderKind::PlainConvHead, 1, None).unwrap();
        assert!(evaluate_checkpoint(&plain, &data, PromptMode::Box, &cfg.schedule, 1).is_err());
        let unlabeled = vec![Sample::new("u", data[0].image.clone(), None, DomainTag::Target).unwrap()];
        assert!(matches!(evaluate_checkpoint(&m, &unlabeled, PromptMode::None, &cfg.schedule, 1), Err(Error::MissingMask(_))));
    }

    #[test]
    fn baselines_run() {
        let cfg = tiny_config();
        let data = frames(4);
        let mut man = RunManifest::new("direct", &cfg);
        let (_, report) = direct_transfer_baseline(&cfg, None, &data, &data, &mut man).unwrap();
        assert!(report.summary.iou >= 0.0 && report.summary.iou <= 1.0);
        let pseudo = labels(&data);
        let mut man = RunManifest::new("pl", &cfg);
        let m = pseudo_label_only_baseline(&cfg, None, &data, &pseudo, None, &mut man).unwrap();
        assert_eq!(m.config().decoder_kind, DecoderKind::PromptDecoder);
        assert_eq!(man.epochs.len(), 3);
    }
}
