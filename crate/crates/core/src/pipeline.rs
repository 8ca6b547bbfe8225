//! File-backed pipeline stages. Every stage reads its inputs from and writes
//! its artifacts under one output root, so stages can be rerun one at a time
//! and `run_bench` is exactly the stages chained in order.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{self, ingest_dataset, read_pseudo_labels, write_dataset, write_pseudo_labels};
use crate::error::{Error, Result};
use crate::grid::{DomainTag, Mask, Sample};
use crate::metrics::{Metrics, MetricsReport};
use crate::model::{binarize, load_checkpoint, save_checkpoint, ModelState};
use crate::prompt::PromptMode;
use crate::pseudo_label::generate_pseudo_labels;
use crate::rng::derive_seed;
use crate::synth::{
    build_background_pool, generate_guidewire_scene, render_target_frame, synthesize_dataset, vessel_background,
    BackgroundPool, PatchOffsets, SceneParams,
};
use crate::trainer::{
    direct_transfer_baseline, evaluate_checkpoint, foundation_scenes, predict_dataset, pretrain_foundation,
    pseudo_label_only_baseline, train_coarse, train_fine, RunManifest,
};

const STREAM_SOURCE: u64 = 0x50;
const STREAM_TARGET_TRAIN: u64 = 0x71;
const STREAM_TARGET_TEST: u64 = 0x72;
const STREAM_POOL: u64 = 0x80;
const STREAM_COMPOSITE: u64 = 0x90;

pub const FOUNDATION_DIR: &str = "foundation";
pub const COARSE_DIR: &str = "coarse";
pub const PSEUDO_DIR: &str = "pseudo";
pub const FINE_DIR: &str = "fine";
pub const DIRECT_DIR: &str = "direct";
pub const PL_ONLY_DIR: &str = "pl_only";
pub const EVAL_DIR: &str = "eval";
pub const INFER_DIR: &str = "infer";
pub const BENCH_FILE: &str = "bench.json";

/// Exclusive hold on an output root, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(OutputLock { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn load(root: &Path, domain: DomainTag) -> Result<Vec<Sample>> {
    let got = ingest_dataset(root, domain)?;
    if let Some(e) = got.errors.first() {
        return Err(Error::Image {
            path: e.path.clone(),
            message: e.message.clone(),
        });
    }
    if got.samples.is_empty() {
        return Err(Error::EmptyDataset(format!("{} holds no images", root.display())));
    }
    Ok(got.samples)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), manifest.to_json())?;
    fs::write(dir.join("loss.csv"), manifest.loss_csv())?;
    Ok(())
}

fn save(dir: &Path, name: &str, state: &ModelState, manifest: &mut RunManifest) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.ckpt"));
    save_checkpoint(state, &path)?;
    manifest.checkpoints.insert(name.to_string(), file_digest(&path)?);
    Ok(path)
}

fn write_report(path_stem: &Path, report: &MetricsReport) -> Result<()> {
    if let Some(parent) = path_stem.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path_stem.with_extension("json"), serde_json::to_string_pretty(report)?)?;
    fs::write(path_stem.with_extension("csv"), report.to_csv())?;
    Ok(())
}

fn dir(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

/// Target-domain frames for one split, masks kept as ground truth.
pub fn target_frames(cfg: &RunConfig, count: usize, stream: u64) -> Result<Vec<Sample>> {
    let base = derive_seed(cfg.seed, stream);
    crate::par::map_range(count, |i| render_target_frame(&cfg.scene, &cfg.target, derive_seed(base, i as u64)))
        .into_iter()
        .collect()
}

/// `synth`: labeled source scenes and the two target splits.
pub fn stage_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let base = derive_seed(cfg.seed, STREAM_SOURCE);
    let source: Vec<Sample> = crate::par::map_range(cfg.data.source_count, |i| {
        generate_guidewire_scene(&SceneParams {
            seed: derive_seed(base, i as u64),
            ..cfg.scene.clone()
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    write_dataset(&dir(out, &cfg.data.source_dir), &source)?;
    let train = target_frames(cfg, cfg.data.target_train_count, STREAM_TARGET_TRAIN)?;
    write_dataset(&dir(out, &cfg.data.target_train_dir), &train)?;
    let test = target_frames(cfg, cfg.data.target_test_count, STREAM_TARGET_TEST)?;
    write_dataset(&dir(out, &cfg.data.target_test_dir), &test)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub patch_size: (usize, usize),
    pub patches: Vec<(String, String)>,
}

/// `pool`: target-style backgrounds, generated procedurally at 1.5x the frame
/// size and cropped to `pool_size` frame-sized patches.
pub fn build_pool(cfg: &RunConfig) -> Result<BackgroundPool> {
    let (h, w) = cfg.model.image_size;
    let base = derive_seed(cfg.seed, STREAM_POOL);
    let n = cfg.data.pool_size.div_ceil(4).max(1);
    let images = crate::par::map_range(n, |i| vessel_background(h * 3 / 2, w * 3 / 2, &cfg.target, derive_seed(base, i as u64)));
    build_background_pool(&images, (h, w), cfg.data.pool_size, &PatchOffsets::Random(derive_seed(base, u64::MAX)))
}

pub fn stage_pool(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let pool = build_pool(cfg)?;
    let root = dir(out, &cfg.data.pool_dir);
    let samples: Vec<Sample> = pool
        .patches()
        .iter()
        .enumerate()
        .map(|(i, p)| Sample::new(format!("bg_{i:04}"), p.clone(), None, DomainTag::Target))
        .collect::<Result<_>>()?;
    write_dataset(&root, &samples)?;
    let manifest = PoolManifest {
        patch_size: pool.patch_dims(),
        patches: samples.iter().map(|s| s.id.clone()).zip(pool.provenance().iter().cloned()).collect(),
    };
    fs::write(root.join("pool_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// `composite`: source wires pasted onto pool patches.
pub fn stage_composite(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let source = load(&dir(out, &cfg.data.source_dir), DomainTag::Source)?;
    let patches: Vec<_> = load(&dir(out, &cfg.data.pool_dir), DomainTag::Target)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let provenance = (0..patches.len()).map(|i| format!("bg_{i:04}")).collect();
    let pool = BackgroundPool::new(patches, provenance)?;
    let noise = crate::synth::NoiseParams {
        sigma: cfg.noise.sigma,
        seed: derive_seed(cfg.seed, cfg.noise.seed),
    };
    let synth = synthesize_dataset(
        &source,
        &pool,
        cfg.data.synthesized_count,
        &noise,
        derive_seed(cfg.seed, STREAM_COMPOSITE),
    )?;
    write_dataset(&dir(out, &cfg.data.synth_dir), &synth)
}

/// `pretrain`: the foundation checkpoint every training stage starts from.
pub fn stage_pretrain(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("pretrain", cfg);
    let scenes = foundation_scenes(cfg)?;
    let model = pretrain_foundation(cfg, &scenes, &mut manifest)?;
    let d = dir(out, FOUNDATION_DIR);
    save(&d, "foundation", &model, &mut manifest)?;
    write_manifest(&d, &manifest)?;
    Ok(manifest)
}

/// The foundation checkpoint when pretraining is enabled.
fn foundation(cfg: &RunConfig, out: &Path) -> Result<Option<ModelState>> {
    if !cfg.foundation.enabled {
        return Ok(None);
    }
    let path = dir(out, FOUNDATION_DIR).join("foundation.ckpt");
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("{} missing; run `pretrain` first", path.display())));
    }
    load_checkpoint(&path).map(Some)
}

/// `train-coarse`: plain-head model on the synthesized set.
pub fn stage_train_coarse(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let synth = load(&dir(out, &cfg.data.synth_dir), DomainTag::Synthesized)?;
    let mut manifest = RunManifest::new("train-coarse", cfg);
    let model = train_coarse(cfg, foundation(cfg, out)?.as_ref(), &synth, None, &mut manifest)?;
    let d = dir(out, COARSE_DIR);
    save(&d, "coarse", &model, &mut manifest)?;
    write_manifest(&d, &manifest)?;
    Ok(manifest)
}

/// `pseudo-label`: coarse predictions on the target training frames, cleaned
/// by DBSCAN. Ground-truth masks on disk are never read.
pub fn stage_pseudo_label(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let ckpt = checkpoint.map_or_else(|| dir(out, COARSE_DIR).join("coarse.ckpt"), Path::to_path_buf);
    let model = load_checkpoint(&ckpt)?;
    let frames = unlabeled(load(&dir(out, &cfg.data.target_train_dir), DomainTag::Target)?);
    let batch = generate_pseudo_labels(&model, &frames, cfg.model.binarize_threshold, &cfg.cluster)?;
    write_pseudo_labels(&dir(out, PSEUDO_DIR), &batch.labels, &batch.failures)
}

fn unlabeled(frames: Vec<Sample>) -> Vec<Sample> {
    frames.into_iter().map(|s| Sample { mask: None, ..s }).collect()
}

/// `train-fine`: warm-up then self-training on pseudo-labels, scored on the
/// test split after every epoch.
pub fn stage_train_fine(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let frames = unlabeled(load(&dir(out, &cfg.data.target_train_dir), DomainTag::Target)?);
    let test = load(&dir(out, &cfg.data.target_test_dir), DomainTag::Target)?;
    let (pseudo, failures) = read_pseudo_labels(&dir(out, PSEUDO_DIR))?;
    let mut manifest = RunManifest::new("train-fine", cfg);
    manifest.failures = failures;
    let outcome = train_fine(cfg, foundation(cfg, out)?.as_ref(), &frames, &pseudo, Some(&test), &mut manifest)?;
    let d = dir(out, FINE_DIR);
    save(&d, "warmup_student", &outcome.warmup_student, &mut manifest)?;
    save(&d, "warmup_teacher", &outcome.warmup_teacher, &mut manifest)?;
    save(&d, "student", &outcome.student, &mut manifest)?;
    save(&d, "teacher", &outcome.teacher, &mut manifest)?;
    write_manifest(&d, &manifest)?;
    Ok(manifest)
}

/// `baseline-direct`: source-only training scored on the target test split.
pub fn stage_baseline_direct(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let source = load(&dir(out, &cfg.data.source_dir), DomainTag::Source)?;
    let test = load(&dir(out, &cfg.data.target_test_dir), DomainTag::Target)?;
    let mut manifest = RunManifest::new("baseline-direct", cfg);
    let (model, report) = direct_transfer_baseline(cfg, foundation(cfg, out)?.as_ref(), &source, &test, &mut manifest)?;
    let d = dir(out, DIRECT_DIR);
    save(&d, "direct", &model, &mut manifest)?;
    write_report(&d.join("report"), &report)?;
    write_manifest(&d, &manifest)?;
    Ok(report)
}

/// `baseline-pseudo`: a prompt-free model supervised by pseudo-labels alone.
pub fn stage_baseline_pseudo(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let frames = unlabeled(load(&dir(out, &cfg.data.target_train_dir), DomainTag::Target)?);
    let test = load(&dir(out, &cfg.data.target_test_dir), DomainTag::Target)?;
    let (pseudo, failures) = read_pseudo_labels(&dir(out, PSEUDO_DIR))?;
    let mut manifest = RunManifest::new("baseline-pseudo", cfg);
    manifest.failures = failures;
    let model = pseudo_label_only_baseline(cfg, foundation(cfg, out)?.as_ref(), &frames, &pseudo, Some(&test), &mut manifest)?;
    let d = dir(out, PL_ONLY_DIR);
    save(&d, "pl_only", &model, &mut manifest)?;
    write_manifest(&d, &manifest)?;
    Ok(manifest)
}

/// `eval`: score a checkpoint on a labeled dataset (default: the test split).
/// The report lands in `<out>/eval/<checkpoint stem>_<mode>.{json,csv}`.
pub fn stage_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
    mode: PromptMode,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let state = load_checkpoint(checkpoint)?;
    let data = data.map_or_else(|| dir(out, &cfg.data.target_test_dir), Path::to_path_buf);
    let samples = load(&data, DomainTag::Target)?;
    let report = evaluate_checkpoint(&state, &samples, mode, &cfg.schedule, cfg.seed)?;
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let mode_tag = mode.to_string().replace('+', "_");
    write_report(&dir(out, EVAL_DIR).join(format!("{stem}_{mode_tag}")), &report)?;
    Ok(report)
}

/// `infer`: binarized masks for every image under `data`, written to
/// `<out>/infer/masks/`. Prompted modes need ground-truth masks.
pub fn stage_infer(cfg: &RunConfig, out: &Path, checkpoint: &Path, data: &Path, mode: PromptMode) -> Result<usize> {
    cfg.validate()?;
    let state = load_checkpoint(checkpoint)?;
    let samples = load(data, DomainTag::Target)?;
    let logits = predict_dataset(&state, &samples, mode, &cfg.schedule, cfg.seed)?;
    let masks_dir = dir(out, INFER_DIR).join(dataset::MASKS);
    fs::create_dir_all(&masks_dir)?;
    for (s, l) in samples.iter().zip(&logits) {
        let m: Mask = binarize(l, state.config().binarize_threshold)?;
        dataset::write_mask(&masks_dir.join(format!("{}.png", s.id)), &m)?;
    }
    Ok(samples.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    /// Test-split metrics per evaluated model and prompt mode.
    pub results: BTreeMap<String, Metrics>,
    pub trends: Vec<TrendCheck>,
    /// SHA-256 of every manifest and checkpoint written by the run.
    pub digests: BTreeMap<String, String>,
}

fn check(name: &str, lhs: f64, rhs: f64) -> TrendCheck {
    TrendCheck {
        name: name.into(),
        lhs,
        rhs,
        pass: lhs >= rhs,
    }
}

/// `bench`: every stage in order, then the comparisons of the benchmark.
pub fn run_bench(cfg: &RunConfig, out: &Path) -> Result<BenchSummary> {
    stage_synth(cfg, out)?;
    stage_pool(cfg, out)?;
    stage_composite(cfg, out)?;
    if cfg.foundation.enabled {
        stage_pretrain(cfg, out)?;
    }
    stage_train_coarse(cfg, out)?;
    stage_pseudo_label(cfg, out, None)?;
    stage_train_fine(cfg, out)?;
    stage_baseline_direct(cfg, out)?;
    stage_baseline_pseudo(cfg, out)?;

    let fine = dir(out, FINE_DIR);
    let evals: [(&str, PathBuf, PromptMode); 6] = [
        ("direct", dir(out, DIRECT_DIR).join("direct.ckpt"), PromptMode::None),
        ("pl_only", dir(out, PL_ONLY_DIR).join("pl_only.ckpt"), PromptMode::None),
        ("warmup_student", fine.join("warmup_student.ckpt"), PromptMode::None),
        ("student", fine.join("student.ckpt"), PromptMode::None),
        ("student_box+point", fine.join("student.ckpt"), PromptMode::BoxPoint),
        ("teacher_box", fine.join("teacher.ckpt"), PromptMode::Box),
    ];
    let mut results = BTreeMap::new();
    for (name, ckpt, mode) in evals {
        results.insert(name.to_string(), stage_eval(cfg, out, &ckpt, None, mode)?.summary);
    }
    let iou = |k: &str| results[k].iou;
    let trends = vec![
        check("adapted >= direct + 0.05", iou("student"), iou("direct") + 0.05),
        check("final >= end of warm-up", iou("student"), iou("warmup_student")),
        check("final >= pseudo-label only", iou("student"), iou("pl_only")),
        check("box+point >= end-to-end - 0.05", iou("student_box+point"), iou("student") - 0.05),
    ];

    let mut digests = BTreeMap::new();
    for sub in [FOUNDATION_DIR, COARSE_DIR, FINE_DIR, DIRECT_DIR, PL_ONLY_DIR] {
        let d = dir(out, sub);
        if !d.is_dir() {
            continue;
        }
        for entry in fs::read_dir(d)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json" || e == "ckpt") {
                let name = format!("{sub}/{}", path.file_name().and_then(|n| n.to_str()).unwrap_or_default());
                digests.insert(name, file_digest(&path)?);
            }
        }
    }
    let summary = BenchSummary { results, trends, digests };
    fs::write(out.join(BENCH_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
