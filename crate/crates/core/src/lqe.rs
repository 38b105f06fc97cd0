//! Label quality evaluation from three aligned predictions.
//!
//! Per pixel `i` the three binary predictions give a mean `p̄_i` and a
//! deviation `R_i = sqrt(mean_j (p_i^j - p̄_i)²)`. The label score combines
//! `1 - mean_i R_i` with the average pairwise IoU and Dice of the predictions.

use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::maskio::{dice, iou, DatasetManifest, Mask, ManifestRecord, Provenance};
use crate::perturb::PerturbSpec;
use crate::{Error, Result};

/// Largest possible per-pixel deviation: a 2-1 split.
pub const MAX_R: f64 = std::f64::consts::SQRT_2 / 3.0;

/// Three predictions in the frame of the original image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionEnsemble {
    predictions: [Mask; 3],
    pub checkpoints: Vec<String>,
    pub specs: Vec<PerturbSpec>,
}

impl PredictionEnsemble {
    pub fn new(predictions: [Mask; 3]) -> Result<Self> {
        let shape = predictions[0].shape();
        if predictions.iter().any(|p| p.shape() != shape) {
            return Err(Error::Shape("ensemble predictions must share a shape".into()));
        }
        Ok(Self {
            predictions,
            checkpoints: Vec::new(),
            specs: Vec::new(),
        })
    }

    pub fn with_provenance(mut self, checkpoints: Vec<String>, specs: Vec<PerturbSpec>) -> Self {
        self.checkpoints = checkpoints;
        self.specs = specs;
        self
    }

    pub fn predictions(&self) -> &[Mask; 3] {
        &self.predictions
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqeConfig {
    pub beta: [f64; 3],
    pub tau_q: f64,
    /// Minimum allowed `1 - r_mean`.
    pub tau_r: f64,
    pub tau_iou: f64,
    pub tau_dice: f64,
}

impl Default for LqeConfig {
    fn default() -> Self {
        Self {
            beta: [1.0 / 3.0; 3],
            tau_q: 0.85,
            tau_r: 0.80,
            tau_iou: 0.70,
            tau_dice: 0.80,
        }
    }
}

impl LqeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::Config(format!("lqe.beta must be non-negative, got {:?}", self.beta)));
        }
        let s: f64 = self.beta.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("lqe.beta must sum to 1, sums to {s}")));
        }
        for (name, t) in [
            ("tau_q", self.tau_q),
            ("tau_r", self.tau_r),
            ("tau_iou", self.tau_iou),
            ("tau_dice", self.tau_dice),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("lqe.{name} must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Retain,
    Flag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    /// Pairs in the order (1,2), (1,3), (2,3).
    pub iou: [f64; 3],
    pub dice: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub r_mean: f64,
    pub iou_avg: f64,
    pub dice_avg: f64,
    pub q: f64,
    pub verdict: Verdict,
    pub per_pair: PairScores,
}

/// Per-pixel deviation for `n` of 3 predictions being foreground.
fn deviation(n: u8) -> f64 {
    let p: [f64; 3] = std::array::from_fn(|j| if (j as u8) < n { 1.0 } else { 0.0 });
    let mean = (p[0] + p[1] + p[2]) / 3.0;
    (p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt()
}

/// Mean over pixels of the per-pixel deviation. The deviation only depends on
/// how many predictions are foreground, so it is tabulated once.
pub fn pixel_rmse(e: &PredictionEnsemble) -> f64 {
    let table: [f64; 4] = std::array::from_fn(|n| deviation(n as u8));
    let [a, b, c] = &e.predictions;
    let total: f64 = a
        .bits()
        .iter()
        .zip(b.bits())
        .zip(c.bits())
        .map(|((&x, &y), &z)| table[(x + y + z) as usize])
        .sum();
    total / a.len() as f64
}

/// Mean of three values summed in sorted order, so any permutation of the
/// inputs gives a bit-identical result.
fn mean3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    (v[0] + v[1] + v[2]) / 3.0
}

pub fn pairwise_consistency(e: &PredictionEnsemble) -> (f64, f64, PairScores) {
    let p = &e.predictions;
    let pairs = [(0, 1), (0, 2), (1, 2)];
    // Shapes are equal by construction, so neither metric can fail.
    let ious = pairs.map(|(i, j)| iou(&p[i], &p[j]).expect("equal shapes"));
    let dices = pairs.map(|(i, j)| dice(&p[i], &p[j]).expect("equal shapes"));
    (mean3(ious), mean3(dices), PairScores { iou: ious, dice: dices })
}

pub fn quality_score(r_mean: f64, iou_avg: f64, dice_avg: f64, cfg: &LqeConfig) -> Result<f64> {
    cfg.validate()?;
    let [b1, b2, b3] = cfg.beta;
    Ok(b1 * (1.0 - r_mean) + b2 * iou_avg + b3 * dice_avg)
}

pub fn evaluate(e: &PredictionEnsemble, cfg: &LqeConfig) -> Result<QualityReport> {
    let r_mean = pixel_rmse(e);
    let (iou_avg, dice_avg, per_pair) = pairwise_consistency(e);
    let q = quality_score(r_mean, iou_avg, dice_avg, cfg)?;
    let flag = (1.0 - r_mean) < cfg.tau_r || iou_avg < cfg.tau_iou || dice_avg < cfg.tau_dice || q < cfg.tau_q;
    Ok(QualityReport {
        r_mean,
        iou_avg,
        dice_avg,
        q,
        verdict: if flag { Verdict::Flag } else { Verdict::Retain },
        per_pair,
    })
}

/// One line of an LQE report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqeRecord {
    pub image_path: PathBuf,
    #[serde(flatten)]
    pub report: QualityReport,
    pub checkpoints: Vec<String>,
    pub specs: Vec<PerturbSpec>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub retained: DatasetManifest,
    pub flagged: DatasetManifest,
    /// In manifest order.
    pub reports: Vec<LqeRecord>,
}

/// Split `manifest` by verdict. Retained records that had a label become
/// `enhanced`, unlabeled ones become `auto`; both carry their `Q`. Flagged
/// records are marked `flagged`.
pub fn filter_dataset(
    manifest: &DatasetManifest,
    ensembles: &HashMap<PathBuf, PredictionEnsemble>,
    cfg: &LqeConfig,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    let evaluated = manifest
        .records
        .par_iter()
        .map(|r| {
            let e = ensembles
                .get(&r.image_path)
                .ok_or_else(|| Error::Data(format!("no prediction ensemble for {}", r.image_path.display())))?;
            Ok((r, e, evaluate(e, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = FilterOutcome::default();
    for (r, e, report) in evaluated {
        let mut rec: ManifestRecord = r.clone();
        rec.quality = Some(report.q.clamp(0.0, 1.0));
        match report.verdict {
            Verdict::Retain => {
                rec.provenance = if r.label_path.is_some() {
                    Provenance::Enhanced
                } else {
                    Provenance::Auto
                };
                out.retained.records.push(rec);
            }
            Verdict::Flag => {
                rec.provenance = Provenance::Flagged;
                out.flagged.records.push(rec);
            }
        }
        out.reports.push(LqeRecord {
            image_path: r.image_path.clone(),
            report,
            checkpoints: e.checkpoints.clone(),
            specs: e.specs.clone(),
        });
    }
    Ok(out)
}
