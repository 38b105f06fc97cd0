use serde::{Deserialize, Serialize};

use super::refnet::{train_refnet, RefNet, RefNetConfig};
use crate::maskio::{evaluate_pairs, GrayImage, Mask};
use crate::train::Sample;
use crate::{Error, Result};

/// One test label set scored against the reference network's predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub test_set: String,
    pub miou: f64,
    /// `miou(HQ) - miou(this set)`; zero for the HQ row itself.
    pub delta_miou: f64,
    pub acc: f64,
    pub delta_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub refnet: RefNetConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub rows: Vec<ProtocolRow>,
}

impl ProtocolReport {
    pub fn row(&self, name: &str) -> Option<&ProtocolRow> {
        self.rows.iter().find(|r| r.test_set == name)
    }
}

/// A named test label set: one mask per test image, in the same order.
pub type LabelSet = (String, Vec<Mask>);

fn check_sets(test_images: &[GrayImage], sets: &[LabelSet]) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::Data("at least one test label set is required".into()));
    }
    for (name, masks) in sets {
        if masks.len() != test_images.len() {
            return Err(Error::Data(format!(
                "test set {name} covers {} images, expected {}",
                masks.len(),
                test_images.len()
            )));
        }
        for (i, (m, img)) in masks.iter().zip(test_images).enumerate() {
            if m.shape() != (img.height(), img.width()) {
                return Err(Error::Data(format!("test set {name}: mask {i} does not match its image")));
            }
        }
    }
    Ok(())
}

/// Score fixed predictions against each label set. The first set is the
/// reference for the deltas.
pub fn score_predictions(preds: &[Mask], sets: &[LabelSet]) -> Result<Vec<ProtocolRow>> {
    let mut rows: Vec<ProtocolRow> = Vec::with_capacity(sets.len());
    for (name, masks) in sets {
        if masks.len() != preds.len() {
            return Err(Error::Data(format!("test set {name} does not cover every prediction")));
        }
        let pairs: Vec<(String, Mask, Mask)> = preds
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (p, m))| (format!("{i}"), p.clone(), m.clone()))
            .collect();
        let report = evaluate_pairs(&pairs)?;
        let (hq_miou, hq_acc) = rows.first().map_or((report.miou, report.acc), |r| (r.miou, r.acc));
        rows.push(ProtocolRow {
            test_set: name.clone(),
            miou: report.miou,
            delta_miou: hq_miou - report.miou,
            acc: report.acc,
            delta_acc: hq_acc - report.acc,
        });
    }
    Ok(rows)
}

/// Train the reference network on `train` and score its test predictions
/// against every label set. `sets[0]` plays the role of the exact labels.
pub fn eval_protocol(
    train: &[Sample],
    test_images: &[GrayImage],
    sets: &[LabelSet],
    cfg: &RefNetConfig,
) -> Result<ProtocolReport> {
    check_sets(test_images, sets)?;
    let net = train_refnet(train, cfg)?;
    let preds = predict_all(&net, test_images)?;
    Ok(ProtocolReport {
        refnet: cfg.clone(),
        train_size: train.len(),
        test_size: test_images.len(),
        rows: score_predictions(&preds, sets)?,
    })
}

pub fn predict_all(net: &RefNet, images: &[GrayImage]) -> Result<Vec<Mask>> {
    images.iter().map(|img| net.predict(img)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: ProtocolReport,
    /// Pixels on which the two generated label sets disagree.
    pub differing_pixels: usize,
    pub predictions_differ: bool,
    /// `|delta miou|` with the edge-attention module is smaller than without.
    pub eam_closer_to_hq: bool,
}

/// Compare test labels generated with and without the edge-attention module
/// through the reference-network protocol.
pub fn eam_ablation(
    train: &[Sample],
    test_images: &[GrayImage],
    hq: &[Mask],
    without_eam: &[Mask],
    with_eam: &[Mask],
    cfg: &RefNetConfig,
) -> Result<AblationReport> {
    let sets = vec![
        ("Test-HQ".to_string(), hq.to_vec()),
        ("Test-NoEAM".to_string(), without_eam.to_vec()),
        ("Test-EAM".to_string(), with_eam.to_vec()),
    ];
    let protocol = eval_protocol(train, test_images, &sets, cfg)?;
    let differing_pixels = without_eam
        .iter()
        .zip(with_eam)
        .map(|(a, b)| a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count())
        .sum();
    let off = protocol.rows[1].delta_miou.abs();
    let on = protocol.rows[2].delta_miou.abs();
    Ok(AblationReport {
        protocol,
        differing_pixels,
        predictions_differ: differing_pixels > 0,
        eam_closer_to_hq: on < off,
    })
}
