//! Iterative generate / filter / refine loop for label enhancement and
//! automatic annotation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lqe::{evaluate, LqeConfig, LqeRecord, PredictionEnsemble, QualityReport, Verdict};
use crate::maskio::{
    load_image, load_mask, save_mask, write_manifest, DatasetManifest, GrayImage, ManifestRecord, Mask, Provenance,
    Split,
};
use crate::model::{check_input_size, ElNet, ModelConfig};
use crate::perturb::{align_prediction, apply_image, make_ensemble_specs, PerturbSpec};
use crate::train::{finetune, Checkpoint, LossConfig, Sample, TrainConfig, TrainState};
use crate::{Error, Result};

pub const PREDICT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every record carries a (coarse) label to be replaced.
    #[default]
    Enhance,
    /// A manual subset is labeled; the unlabeled records get labels.
    Annotate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub mode: Mode,
    /// Number of generate/refine pairs before the final generation.
    pub loop_count: usize,
    /// Snapshot positions as fractions of a training run, one or three.
    pub ensemble_checkpoints: Vec<f64>,
    /// Epochs per refinement; `epochs / 4` when unset.
    pub refine_epochs: Option<usize>,
    /// Refine from the current weights (true) or from the backbone.
    pub warm_start: bool,
    /// Seeds model initialisation, shuffling and perturbations. Overrides
    /// `train.seed`.
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Enhance,
            loop_count: 3,
            ensemble_checkpoints: vec![0.6, 0.8, 1.0],
            refine_epochs: None,
            warm_start: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineOptions,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub lqe: LqeConfig,
    pub model: ModelConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        if p.loop_count > 10 {
            return Err(Error::Config(format!("pipeline.loop_count must be at most 10, got {}", p.loop_count)));
        }
        if !matches!(p.ensemble_checkpoints.len(), 1 | 3) {
            return Err(Error::Config(format!(
                "pipeline.ensemble_checkpoints needs 1 or 3 entries, got {}",
                p.ensemble_checkpoints.len()
            )));
        }
        if let Some(f) = p.ensemble_checkpoints.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("pipeline.ensemble_checkpoints entry {f} outside (0, 1]")));
        }
        if p.refine_epochs == Some(0) {
            return Err(Error::Config("pipeline.refine_epochs must be positive".into()));
        }
        self.train.validate()?;
        self.loss.validate()?;
        self.lqe.validate()?;
        self.model.validate()
    }

    fn train_config(&self, epochs: usize) -> TrainConfig {
        let mut t = TrainConfig {
            epochs,
            seed: self.pipeline.seed,
            ..self.train.clone()
        };
        t.checkpoint_epochs = snapshot_epochs(&self.pipeline.ensemble_checkpoints, epochs);
        t.checkpoint_epochs.sort_unstable();
        t.checkpoint_epochs.dedup();
        t
    }

    fn refine_epochs(&self) -> usize {
        self.pipeline
            .refine_epochs
            .unwrap_or((self.train.epochs / 4).max(1))
    }
}

/// `ceil(f · epochs)` for each selector, at least 1.
pub fn snapshot_epochs(selectors: &[f64], epochs: usize) -> Vec<usize> {
    selectors
        .iter()
        .map(|f| ((f * epochs as f64).ceil() as usize).clamp(1, epochs))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// 0-based index of the generate-and-filter pass.
    pub iteration: usize,
    pub evaluated: usize,
    pub retained: usize,
    pub flagged: usize,
    /// Mean Q over evaluated records.
    pub mean_q: Option<f64>,
    pub mean_q_retained: Option<f64>,
    /// Distinct records retained in this or any earlier pass.
    pub cumulative_retained: usize,
    /// Size of the training set used for the checkpoints of this pass.
    pub train_size: usize,
}

/// Records, images and pools after validation.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Input records with paths resolved against the base directory.
    pub records: Vec<ManifestRecord>,
    /// Paths as written in the input manifest.
    pub original_paths: Vec<PathBuf>,
    pub images: Vec<GrayImage>,
    pub labels: Vec<Option<Mask>>,
    /// Records trained on from the start in annotate mode.
    pub labeled_pool: Vec<usize>,
    /// Records whose labels are generated.
    pub targets: Vec<usize>,
}

/// Validate files and split pools.
pub fn stage1_prepare(cfg: &PipelineConfig, manifest: &DatasetManifest, base: &Path) -> Result<Prepared> {
    cfg.validate()?;
    let resolved = manifest.resolve(base);
    let loaded = resolved
        .records
        .par_iter()
        .map(|r| {
            let img = load_image(&r.image_path)?;
            check_input_size(img.height(), img.width())?;
            if img.channels() != cfg.model.in_channels {
                return Err(Error::Shape(format!(
                    "{}: {} channel(s), model expects {}",
                    r.image_path.display(),
                    img.channels(),
                    cfg.model.in_channels
                )));
            }
            let label = match &r.label_path {
                Some(p) => {
                    let m = load_mask(p)?;
                    if m.shape() != (img.height(), img.width()) {
                        return Err(Error::Shape(format!("{}: label size differs from image", p.display())));
                    }
                    Some(m)
                }
                None => None,
            };
            Ok((img, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, labels): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let records = resolved.records;

    let (labeled_pool, targets): (Vec<usize>, Vec<usize>) = match cfg.pipeline.mode {
        Mode::Enhance => {
            if let Some(r) = records.iter().find(|r| r.label_path.is_none()) {
                return Err(Error::Data(format!(
                    "enhance mode needs a label for every record; {} has none",
                    r.image_path.display()
                )));
            }
            let pool = (0..records.len())
                .filter(|&i| records[i].split == Split::Train && records[i].provenance != Provenance::Flagged)
                .collect();
            let targets = (0..records.len())
                .filter(|&i| records[i].provenance == Provenance::Coarse)
                .collect();
            (pool, targets)
        }
        Mode::Annotate => {
            let pool = (0..records.len())
                .filter(|&i| {
                    let r = &records[i];
                    r.split == Split::Train && r.provenance == Provenance::Manual && r.label_path.is_some()
                })
                .collect();
            let targets = (0..records.len()).filter(|&i| records[i].label_path.is_none()).collect();
            (pool, targets)
        }
    };
    if labeled_pool.is_empty() {
        return Err(Error::Data("no labeled training records".into()));
    }
    log::info!(
        "prepared {} records: {} in the labeled pool, {} targets",
        records.len(),
        labeled_pool.len(),
        targets.len()
    );
    Ok(Prepared {
        original_paths: manifest.records.iter().map(|r| r.image_path.clone()).collect(),
        records,
        images,
        labels,
        labeled_pool,
        targets,
    })
}

/// Everything the loop carries between stages.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub prepared: Prepared,
    /// Current record per input record.
    pub records: Vec<ManifestRecord>,
    /// Current label per record; generated labels replace targets' labels.
    pub labels: Vec<Option<Mask>>,
    pub net: ElNet<f32>,
    pub train_state: TrainState,
    /// One per ensemble selector.
    pub checkpoints: Vec<Checkpoint<f32>>,
    pub stats: Vec<IterationStats>,
    /// Reports of the latest generate-and-filter pass, in target order.
    pub reports: Vec<LqeRecord>,
    pub retained_ever: BTreeSet<usize>,
    pub iteration: usize,
    train_size: usize,
}

impl PipelineState {
    /// Records used for the next training run. In enhance mode a flagged
    /// record trains on its original label; its rejected prediction is never
    /// used. In annotate mode flagged records have no label and are left out.
    pub fn training_indices(&self, mode: Mode) -> Vec<usize> {
        let p = &self.prepared;
        match mode {
            Mode::Enhance => p.labeled_pool.clone(),
            Mode::Annotate => {
                let mut idx: Vec<usize> = p.labeled_pool.clone();
                idx.extend(
                    p.targets
                        .iter()
                        .copied()
                        .filter(|&i| self.records[i].split == Split::Train && self.records[i].provenance == Provenance::Auto),
                );
                idx.sort_unstable();
                idx
            }
        }
    }

    fn samples(&self, idx: &[usize]) -> Vec<Sample> {
        idx.iter()
            .map(|&i| Sample {
                image: self.prepared.images[i].clone(),
                label: self.labels[i].clone().expect("training records carry labels"),
            })
            .collect()
    }
}

fn select_snapshots(
    selectors: &[f64],
    tcfg: &TrainConfig,
    snapshots: Vec<Checkpoint<f32>>,
) -> Result<Vec<Checkpoint<f32>>> {
    let wanted = snapshot_epochs(selectors, tcfg.epochs);
    wanted
        .iter()
        .map(|&e| {
            let pos = tcfg
                .checkpoint_epochs
                .iter()
                .position(|&c| c == e)
                .ok_or_else(|| Error::Data(format!("no snapshot at epoch {e}")))?;
            Ok(snapshots[pos].clone())
        })
        .collect()
}

/// Initial fine-tuning on the labeled pool.
pub fn stage2_finetune(cfg: &PipelineConfig, prepared: Prepared, backbone: Option<&Checkpoint<f32>>) -> Result<PipelineState> {
    let seed = cfg.pipeline.seed;
    let net = match backbone {
        Some(b) => ElNet::from_backbone(cfg.model.clone(), &b.store, seed)?,
        None => ElNet::new(cfg.model.clone(), seed)?,
    };
    let tcfg = cfg.train_config(cfg.train.epochs);
    let mut state = PipelineState {
        records: prepared.records.clone(),
        labels: prepared.labels.clone(),
        prepared,
        net,
        train_state: TrainState::new(&tcfg),
        checkpoints: Vec::new(),
        stats: Vec::new(),
        reports: Vec::new(),
        retained_ever: BTreeSet::new(),
        iteration: 0,
        train_size: 0,
    };
    let idx = state.training_indices(cfg.pipeline.mode);
    train_round(cfg, &mut state, &idx, &tcfg)?;
    Ok(state)
}

fn train_round(cfg: &PipelineConfig, state: &mut PipelineState, idx: &[usize], tcfg: &TrainConfig) -> Result<()> {
    let samples = state.samples(idx);
    log::info!("fine-tuning on {} records for {} epochs", samples.len(), tcfg.epochs);
    let rep = finetune(&mut state.net, &samples, tcfg, &cfg.loss, &mut state.train_state)?;
    state.checkpoints = select_snapshots(&cfg.pipeline.ensemble_checkpoints, tcfg, rep.snapshots)?;
    state.train_size = samples.len();
    Ok(())
}

/// Produces the three aligned predictions and the emitted label for one
/// image. `checkpoint` indexes [`PipelineState::checkpoints`].
pub trait Predictor: Sync {
    fn predict(&self, checkpoint: usize, record: usize, image: &GrayImage) -> Result<Mask>;
}

struct ModelPredictor {
    nets: Vec<ElNet<f32>>,
}

impl Predictor for ModelPredictor {
    fn predict(&self, checkpoint: usize, _record: usize, image: &GrayImage) -> Result<Mask> {
        self.nets[checkpoint].predict(image, PREDICT_THRESHOLD)
    }
}

/// Stream-separated seed for the perturbations of one record in one pass.
fn record_seed(seed: u64, iteration: usize, record: usize) -> u64 {
    let mut z = seed
        .wrapping_add((iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((record as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn ensemble_with(
    p: &dyn Predictor,
    n_ckpt: usize,
    names: &[String],
    seed: u64,
    record: usize,
    image: &GrayImage,
) -> Result<PredictionEnsemble> {
    let specs: [PerturbSpec; 3] = make_ensemble_specs(seed);
    let hw = (image.height(), image.width());
    let mut preds = Vec::with_capacity(3);
    let mut used = Vec::with_capacity(3);
    for (j, spec) in specs.iter().enumerate() {
        let c = j.min(n_ckpt - 1);
        let perturbed = apply_image(image, spec)?;
        let pred = p.predict(c, record, &perturbed)?;
        preds.push(align_prediction(&pred, spec, hw)?);
        used.push(names[c].clone());
    }
    let preds: [Mask; 3] = preds.try_into().expect("three predictions");
    Ok(PredictionEnsemble::new(preds)?.with_provenance(used, specs.to_vec()))
}

/// Perturbed, aligned predictions of one image by one to three models. The
/// j-th perturbation goes to model `min(j, n - 1)`.
pub fn predict_ensemble(nets: &[ElNet<f32>], names: &[String], image: &GrayImage, seed: u64) -> Result<PredictionEnsemble> {
    if nets.is_empty() || nets.len() != names.len() {
        return Err(Error::Data("an ensemble needs one name per model and at least one model".into()));
    }
    let p = ModelPredictor { nets: nets.to_vec() };
    ensemble_with(&p, nets.len(), names, seed, 0, image)
}

struct Generated {
    record: usize,
    report: QualityReport,
    ensemble: PredictionEnsemble,
    label: Mask,
}

fn generate_one(
    p: &dyn Predictor,
    n_ckpt: usize,
    names: &[String],
    seed: u64,
    iteration: usize,
    record: usize,
    image: &GrayImage,
    lqe: &LqeConfig,
) -> Result<Generated> {
    let ensemble = ensemble_with(p, n_ckpt, names, record_seed(seed, iteration, record), record, image)?;
    let report = evaluate(&ensemble, lqe)?;
    let hw = (image.height(), image.width());
    let label = p.predict(n_ckpt - 1, record, image)?;
    if label.shape() != hw {
        return Err(Error::Shape("prediction size differs from image".into()));
    }
    Ok(Generated {
        record,
        report,
        ensemble,
        label,
    })
}

/// Generate labels for every target with the current checkpoints and filter
/// them.
pub fn stage3_generate_and_filter(cfg: &PipelineConfig, state: &mut PipelineState) -> Result<()> {
    if state.checkpoints.is_empty() {
        return Err(Error::Data("no checkpoints to generate labels with".into()));
    }
    let nets = state
        .checkpoints
        .iter()
        .map(Checkpoint::to_model)
        .collect::<Result<Vec<_>>>()?;
    stage3_with(cfg, state, &ModelPredictor { nets })
}

/// [`stage3_generate_and_filter`] with an arbitrary predictor.
pub fn stage3_with(cfg: &PipelineConfig, state: &mut PipelineState, predictor: &dyn Predictor) -> Result<()> {
    let n_ckpt = state.checkpoints.len().max(1);
    let names: Vec<String> = if state.checkpoints.is_empty() {
        vec!["stub".into()]
    } else {
        state.checkpoints.iter().map(|c| format!("epoch{}", c.epoch)).collect()
    };
    let iteration = state.iteration;
    let seed = cfg.pipeline.seed;
    let prepared = &state.prepared;
    let generated = prepared
        .targets
        .par_iter()
        .map(|&i| {
            generate_one(
                predictor,
                n_ckpt,
                &names,
                seed,
                iteration,
                i,
                &prepared.images[i],
                &cfg.lqe,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stats = IterationStats {
        iteration,
        evaluated: generated.len(),
        retained: 0,
        flagged: 0,
        mean_q: None,
        mean_q_retained: None,
        cumulative_retained: 0,
        train_size: state.train_size,
    };
    let (mut q_sum, mut q_ret) = (0.0, 0.0);
    state.reports.clear();
    for g in generated {
        let i = g.record;
        let original = &prepared.records[i];
        let rec = &mut state.records[i];
        q_sum += g.report.q;
        rec.quality = Some(g.report.q.clamp(0.0, 1.0));
        match g.report.verdict {
            Verdict::Retain => {
                stats.retained += 1;
                q_ret += g.report.q;
                rec.provenance = if original.label_path.is_some() {
                    Provenance::Enhanced
                } else {
                    Provenance::Auto
                };
                rec.label_path = Some(generated_label_path(&prepared.original_paths[i]));
                state.labels[i] = Some(g.label);
                state.retained_ever.insert(i);
            }
            Verdict::Flag => {
                stats.flagged += 1;
                rec.provenance = Provenance::Flagged;
                rec.label_path = original.label_path.clone();
                state.labels[i] = prepared.labels[i].clone();
            }
        }
        state.reports.push(LqeRecord {
            image_path: original.image_path.clone(),
            report: g.report,
            checkpoints: g.ensemble.checkpoints.clone(),
            specs: g.ensemble.specs.clone(),
        });
    }
    if stats.evaluated > 0 {
        stats.mean_q = Some(q_sum / stats.evaluated as f64);
    }
    if stats.retained > 0 {
        stats.mean_q_retained = Some(q_ret / stats.retained as f64);
    }
    stats.cumulative_retained = state.retained_ever.len();
    log::info!(
        "pass {iteration}: {} evaluated, {} retained, {} flagged",
        stats.evaluated,
        stats.retained,
        stats.flagged
    );
    state.stats.push(stats);
    Ok(())
}

/// Where a generated label for `image_path` lives, relative to the output
/// directory.
pub fn generated_label_path(image_path: &Path) -> PathBuf {
    let rel: PathBuf = if image_path.is_relative() {
        image_path
            .components()
            .filter(|c| matches!(c, std::path::Component::Normal(_)))
            .collect()
    } else {
        PathBuf::from(image_path.file_name().unwrap_or_default())
    };
    Path::new("masks").join(rel).with_extension("png")
}

/// Fine-tune further on the labeled pool plus the retained labels.
pub fn stage4_refine(cfg: &PipelineConfig, state: &mut PipelineState, backbone: Option<&Checkpoint<f32>>) -> Result<()> {
    let retained_now = state.stats.last().map_or(0, |s| s.retained);
    if retained_now == 0 {
        log::warn!("no labels retained in pass {}; skipping refinement", state.iteration);
        state.iteration += 1;
        return Ok(());
    }
    let idx = state.training_indices(cfg.pipeline.mode);
    if cfg.pipeline.warm_start {
        let tcfg = cfg.train_config(cfg.refine_epochs());
        train_round(cfg, state, &idx, &tcfg)?;
    } else {
        let seed = cfg.pipeline.seed;
        state.net = match backbone {
            Some(b) => ElNet::from_backbone(cfg.model.clone(), &b.store, seed)?,
            None => ElNet::new(cfg.model.clone(), seed)?,
        };
        let tcfg = cfg.train_config(cfg.train.epochs);
        state.train_state = TrainState::new(&tcfg);
        train_round(cfg, state, &idx, &tcfg)?;
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    /// Every input record; generated label paths are relative to the output
    /// directory, other paths are resolved against the input base.
    pub manifest: DatasetManifest,
    pub flagged: DatasetManifest,
    pub stats: Vec<IterationStats>,
    /// Reports of the final pass.
    pub reports: Vec<LqeRecord>,
    /// Generated labels by their manifest path.
    pub masks: Vec<(PathBuf, Mask)>,
    pub checkpoints: Vec<Checkpoint<f32>>,
}

impl PipelineResult {
    fn from_state(state: &PipelineState) -> Result<Self> {
        let manifest = DatasetManifest::new(state.records.clone())?;
        let flagged = DatasetManifest::new(
            state
                .records
                .iter()
                .filter(|r| r.provenance == Provenance::Flagged)
                .cloned()
                .collect(),
        )?;
        let masks = state
            .prepared
            .targets
            .iter()
            .filter(|&&i| matches!(state.records[i].provenance, Provenance::Auto | Provenance::Enhanced))
            .map(|&i| {
                (
                    state.records[i].label_path.clone().expect("retained records have labels"),
                    state.labels[i].clone().expect("retained records have labels"),
                )
            })
            .collect();
        Ok(Self {
            manifest,
            flagged,
            stats: state.stats.clone(),
            reports: state.reports.clone(),
            masks,
            checkpoints: state.checkpoints.clone(),
        })
    }

    /// Generated label for a record, if it was retained.
    pub fn label_for(&self, label_path: &Path) -> Option<&Mask> {
        self.masks.iter().find(|(p, _)| p == label_path).map(|(_, m)| m)
    }

    /// `manifest.jsonl`, `flagged.jsonl`, `stats.json`, `lqe_reports.jsonl`
    /// and the generated masks.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_manifest(&self.manifest, out.join("manifest.jsonl"))?;
        write_manifest(&self.flagged, out.join("flagged.jsonl"))?;
        let stats = serde_json::to_string_pretty(&self.stats).map_err(|e| Error::Data(e.to_string()))?;
        let p = out.join("stats.json");
        fs::write(&p, stats + "\n").map_err(|e| Error::io(&p, e))?;
        let mut lines = String::new();
        for r in &self.reports {
            lines += &serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
            lines.push('\n');
        }
        let p = out.join("lqe_reports.jsonl");
        fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
        for (path, mask) in &self.masks {
            save_mask(mask, &out.join(path))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Progress<'a> {
    stage: &'a str,
    iteration: usize,
    complete: bool,
}

fn mark(out: Option<&Path>, state: &PipelineState, stage: &str, complete: bool) -> Result<()> {
    let Some(out) = out else { return Ok(()) };
    PipelineResult::from_state(state)?.write(out)?;
    for (j, c) in state.checkpoints.iter().enumerate() {
        c.save(&out.join("checkpoints").join(format!("ensemble{j}.eln")))?;
    }
    let p = out.join("progress.json");
    let body = serde_json::to_string(&Progress {
        stage,
        iteration: state.iteration,
        complete,
    })
    .map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&p, body + "\n").map_err(|e| Error::io(&p, e))
}

/// stage 1 → stage 2 → `loop_count` × (stage 3 → stage 4) → stage 3. With
/// `out`, partial results and a `progress.json` marker are written after
/// every pass.
pub fn run(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    base: &Path,
    backbone: Option<&Checkpoint<f32>>,
    out: Option<&Path>,
) -> Result<PipelineResult> {
    let prepared = stage1_prepare(cfg, manifest, base)?;
    let mut state = stage2_finetune(cfg, prepared, backbone)?;
    mark(out, &state, "stage2", false)?;
    for _ in 0..cfg.pipeline.loop_count {
        stage3_generate_and_filter(cfg, &mut state)?;
        mark(out, &state, "stage3", false)?;
        stage4_refine(cfg, &mut state, backbone)?;
        mark(out, &state, "stage4", false)?;
    }
    stage3_generate_and_filter(cfg, &mut state)?;
    mark(out, &state, "stage3", true)?;
    PipelineResult::from_state(&state)
}
