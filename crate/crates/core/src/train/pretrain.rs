//! Backbone pretraining by denoising reconstruction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, CheckpointKind, RngState};
use super::finetune::{EpochLog, TrainConfig};
use super::optim::Adam;
use crate::maskio::{stack_images, GrayImage};
use crate::model::{check_input_size, encoder_forward, init_backbone, ModelConfig, ParamStore, Phase, Session, BACKBONE_PREFIX};
use crate::ndarr::{Conv2dOpts, Tensor};
use crate::{Error, Result};

const RECON_PREFIX: &str = "recon.";

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Backbone tensors only, all frozen.
    pub checkpoint: Checkpoint<f32>,
    pub epochs: Vec<EpochLog>,
}

fn add_recon_head(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) {
    for (k, &c) in cfg.stage_channels.iter().enumerate() {
        let std = (1.0 / c as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn(&[cfg.in_channels, c, 1, 1], |_| normal.sample(rng) as f32).expect("positive dims");
        store.insert(format!("{RECON_PREFIX}stage{}.weight", k + 1), w, false);
    }
    store.insert(
        format!("{RECON_PREFIX}bias"),
        Tensor::zeros(&[cfg.in_channels]).expect("positive dims"),
        false,
    );
}

/// Train the backbone to reconstruct clean images from inputs with additive
/// Gaussian noise of standard deviation `noise_sigma`. The reconstruction is a
/// sum of 1×1 projections of every stage output, upsampled to full size; that
/// head is dropped from the result.
pub fn pretrain_backbone(
    images: &[GrayImage],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    noise_sigma: f64,
) -> Result<PretrainReport> {
    mcfg.validate()?;
    tcfg.validate()?;
    let first = images.first().ok_or_else(|| Error::Data("empty pretraining corpus".into()))?;
    let (h, w) = (first.height(), first.width());
    check_input_size(h, w)?;
    if images
        .iter()
        .any(|i| (i.height(), i.width(), i.channels()) != (h, w, mcfg.in_channels))
    {
        return Err(Error::Shape(format!(
            "pretraining images must all be {h}x{w} with {} channel(s)",
            mcfg.in_channels
        )));
    }
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|_| Error::Config(format!("noise sigma must be non-negative, got {noise_sigma}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut store = init_backbone::<f32>(mcfg, tcfg.seed)?;
    store.set_frozen_prefix(BACKBONE_PREFIX, false);
    add_recon_head(mcfg, &mut store, &mut rng);
    let mut opt = Adam::new(tcfg.adam());

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(tcfg.batch_size) {
            let refs: Vec<&GrayImage> = batch.iter().map(|&i| &images[i]).collect();
            let clean = stack_images(&refs)?;
            let mut noisy = clean.clone();
            for v in noisy.data_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
            let (loss, grads) = {
                let mut s = Session::train(&mut store, Phase::Pretrain);
                let x = s.graph.constant(noisy)?;
                let target = s.graph.constant(clean)?;
                let f = encoder_forward(&mut s, mcfg, x, false)?;
                let mut recon = None;
                for (k, &fk) in f.iter().enumerate() {
                    let wk = s.param(&format!("{RECON_PREFIX}stage{}.weight", k + 1))?;
                    let bias = if k == 0 { Some(s.param(&format!("{RECON_PREFIX}bias"))?) } else { None };
                    let p = s.graph.conv2d(fk, wk, bias, Conv2dOpts::default())?;
                    let p = s.graph.upsample_nearest(p, 1 << (k + 1))?;
                    recon = Some(match recon {
                        Some(r) => s.graph.add(r, p)?,
                        None => p,
                    });
                }
                let d = s.graph.sub(recon.expect("four stages"), target)?;
                let sq = s.graph.mul(d, d)?;
                let loss = s.graph.mean(sq)?;
                s.graph.backward(loss)?;
                (s.graph.value(loss).item()? as f64, s.grads())
            };
            if !loss.is_finite() {
                return Err(Error::Data(format!("pretraining loss became {loss}")));
            }
            opt.step(&mut store, &grads)?;
            sum += loss;
            steps += 1;
        }
        let mean_loss = sum / steps as f64;
        log::debug!("pretrain epoch {epoch} loss {mean_loss:.6}");
        epochs.push(EpochLog {
            epoch,
            mean_loss,
            lr: tcfg.learning_rate,
        });
    }

    store.retain(|n| n.starts_with(BACKBONE_PREFIX));
    store.set_frozen_prefix(BACKBONE_PREFIX, true);
    Ok(PretrainReport {
        checkpoint: Checkpoint {
            kind: CheckpointKind::Backbone,
            model: mcfg.clone(),
            store,
            epoch: tcfg.epochs,
            rng: Some(RngState::capture(&rng)),
            optimizer: None,
        },
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ElNet;

    fn small() -> ModelConfig {
        ModelConfig {
            stage_channels: [4, 6, 8, 8],
            adapter_bottleneck: 3,
            rfb_branch_channels: 3,
            decoder_channels: 5,
            ..ModelConfig::default()
        }
    }

    fn corpus() -> Vec<GrayImage> {
        (0..6)
            .map(|k| {
                let v = (0..256)
                    .map(|i| {
                        let (r, c) = (i / 16, i % 16);
                        if (r as isize - 8).abs() + (c as isize - (4 + k)).abs() < 5 {
                            0.2
                        } else {
                            0.7
                        }
                    })
                    .collect();
                GrayImage::new(16, 16, 1, v).unwrap()
            })
            .collect()
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 3,
            learning_rate: 1e-2,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn reconstruction_loss_decreases() {
        let rep = pretrain_backbone(&corpus(), &small(), &tcfg(), 0.05).unwrap();
        let first = rep.epochs[0].mean_loss;
        let last = rep.epochs.last().unwrap().mean_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn emits_a_frozen_backbone_that_loads_into_finetune() {
        let t = TrainConfig { epochs: 2, ..tcfg() };
        let rep = pretrain_backbone(&corpus(), &small(), &t, 0.05).unwrap();
        let ck = &rep.checkpoint;
        assert!(ck.store.params().keys().all(|n| n.starts_with(BACKBONE_PREFIX)));
        assert!(!ck.store.params().keys().any(|n| n.starts_with(RECON_PREFIX)));
        assert_eq!(ck.store.trainable_names().count(), 0);
        let fresh = init_backbone::<f32>(&small(), 4).unwrap();
        assert!(!ck.store.bit_eq(&fresh));

        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        let net = ElNet::from_backbone(small(), &back.store, 9).unwrap();
        for (name, t) in ck.store.params() {
            assert!(net.store.get(name).unwrap().bit_eq(t));
            assert!(net.store.is_frozen(name));
        }
        assert!(back.to_model().is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(pretrain_backbone(&[], &small(), &tcfg(), 0.05).is_err());
    }
}
