use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::loss::{total_loss, weight_batch, LossConfig};
use super::optim::{Adam, AdamConfig};
use crate::maskio::{load_image, load_mask, stack_images, stack_masks, DatasetManifest, GrayImage, Mask};
use crate::model::{check_input_size, forward, ElNet, Phase, Session};
use crate::ndarr::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs (1-based, within this run) after which a snapshot is kept.
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 12,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            seed: 0,
            checkpoint_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::Config(format!(
                "train.checkpoint_epochs entry {e} lies outside [1, {}]",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.weight_decay)
    }
}

/// One image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: Mask,
}

/// Load every labeled record of `manifest`; paths are resolved against `base`.
pub fn load_samples(manifest: &DatasetManifest, base: &Path) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let label = r
                .label_path
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{}: record has no label", r.image_path.display())))?;
            let image = load_image(&base.join(&r.image_path))?;
            let label = load_mask(&base.join(label))?;
            if (image.height(), image.width()) != label.shape() {
                return Err(Error::Shape(format!(
                    "{}: image and label sizes differ",
                    r.image_path.display()
                )));
            }
            Ok(Sample { image, label })
        })
        .collect()
}

/// Optimizer and shuffling state carried across fine-tuning runs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: Adam<f32>,
    pub rng: ChaCha8Rng,
    /// Epochs completed so far, over all runs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            optimizer: Adam::new(cfg.adam()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
        }
    }

    /// Resume from a checkpoint written by [`TrainState::snapshot`].
    pub fn from_checkpoint(ck: &Checkpoint<f32>, cfg: &TrainConfig) -> Result<Self> {
        let rng = match &ck.rng {
            Some(r) => r.restore()?,
            None => ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let mut optimizer = ck.optimizer.clone().unwrap_or_else(|| Adam::new(cfg.adam()));
        optimizer.config = cfg.adam();
        Ok(Self {
            optimizer,
            rng,
            epoch: ck.epoch,
        })
    }

    pub fn snapshot(&self, net: &ElNet<f32>) -> Checkpoint<f32> {
        let mut ck = Checkpoint::from_model(net, self.epoch);
        ck.rng = Some(RngState::capture(&self.rng));
        ck.optimizer = Some(self.optimizer.clone());
        ck
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// Snapshots at `checkpoint_epochs`, in epoch order.
    pub snapshots: Vec<Checkpoint<f32>>,
}

impl FinetuneReport {
    /// The epoch log as JSON Lines.
    pub fn write_log(&self, out: &mut impl Write) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Train the unfrozen part of `net` on `samples` for `tcfg.epochs` epochs.
pub fn finetune(
    net: &mut ElNet<f32>,
    samples: &[Sample],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    state: &mut TrainState,
) -> Result<FinetuneReport> {
    tcfg.validate()?;
    lcfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::Data("empty training set".into()))?;
    let (h, w) = first.label.shape();
    check_input_size(h, w)?;
    for s in samples {
        if s.label.shape() != (h, w) || (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::Shape("training samples must share one size".into()));
        }
        if s.image.channels() != net.config.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                s.image.channels(),
                net.config.in_channels
            )));
        }
    }
    let weights: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| weight_batch(&[&s.label], lcfg))
        .collect::<Result<_>>()?;

    let mut report = FinetuneReport {
        step_losses: Vec::new(),
        epochs: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for local in 1..=tcfg.epochs {
        order.shuffle(&mut state.rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(tcfg.batch_size) {
            let loss = train_step(net, samples, &weights, batch, lcfg, &mut state.optimizer)?;
            report.step_losses.push(loss);
            sum += loss;
            steps += 1;
        }
        state.epoch += 1;
        let mean_loss = sum / steps as f64;
        log::debug!("epoch {} loss {mean_loss:.5}", state.epoch);
        report.epochs.push(EpochLog {
            epoch: state.epoch,
            mean_loss,
            lr: tcfg.learning_rate,
        });
        if tcfg.checkpoint_epochs.contains(&local) {
            report.snapshots.push(state.snapshot(net));
        }
    }
    Ok(report)
}

fn train_step(
    net: &mut ElNet<f32>,
    samples: &[Sample],
    weights: &[Tensor<f32>],
    batch: &[usize],
    lcfg: &LossConfig,
    opt: &mut Adam<f32>,
) -> Result<f64> {
    let images: Vec<&GrayImage> = batch.iter().map(|&i| &samples[i].image).collect();
    let labels: Vec<&Mask> = batch.iter().map(|&i| &samples[i].label).collect();
    let x = stack_images(&images)?;
    let y = stack_masks(&labels)?;
    let (h, w) = labels[0].shape();
    let wdata: Vec<f32> = batch.iter().flat_map(|&i| weights[i].data().iter().copied()).collect();
    let wt = Tensor::new(&[batch.len(), 1, h, w], wdata)?;
    let config = net.config.clone();
    let (loss, grads) = {
        let mut s = Session::train(&mut net.store, Phase::Finetune);
        let xv = s.graph.constant(x)?;
        let yv = s.graph.constant(y)?;
        let wv = s.graph.constant(wt)?;
        let out = forward(&mut s, &config, xv)?;
        let loss = total_loss(&mut s.graph, out, yv, wv, lcfg)?;
        s.graph.backward(loss)?;
        let value = s.graph.value(loss).item()? as f64;
        (value, s.grads())
    };
    if !loss.is_finite() {
        return Err(Error::Data(format!("training loss became {loss}")));
    }
    opt.step(&mut net.store, &grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            stage_channels: [4, 6, 8, 8],
            adapter_bottleneck: 3,
            rfb_branch_channels: 3,
            decoder_channels: 5,
            ..ModelConfig::default()
        }
    }

    /// Dark squares on a bright background.
    fn toy(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|k| {
                let (r0, c0) = (2 + k % 5, 3 + (k * 3) % 6);
                let label = Mask::from_fn(16, 16, |r, c| r >= r0 && r < r0 + 7 && c >= c0 && c < c0 + 6).unwrap();
                let values = label
                    .bits()
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| if b == 1 { 0.2 } else { 0.8 } + 0.02 * ((i * 7 + k) % 5) as f32)
                    .collect();
                Sample {
                    image: GrayImage::new(16, 16, 1, values).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-2,
            seed: 3,
            checkpoint_epochs: vec![epochs / 2, epochs],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_and_backbone_is_untouched() {
        let data = toy(6);
        let mut net = ElNet::new(small(), 1).unwrap();
        let before = net.store.clone();
        let tcfg = cfg(12);
        let mut st = TrainState::new(&tcfg);
        let rep = finetune(&mut net, &data, &tcfg, &LossConfig::default(), &mut st).unwrap();
        assert_eq!(rep.step_losses.len(), 12 * 2);
        assert_eq!(rep.epochs.len(), 12);
        assert_eq!(rep.snapshots.len(), 2);
        assert_eq!(rep.snapshots[1].epoch, 12);
        let first = rep.epochs[0].mean_loss;
        let last = rep.epochs.last().unwrap().mean_loss;
        assert!(last < 0.8 * first, "{first} -> {last}");
        for name in before.frozen_names() {
            assert!(before.get(name).unwrap().bit_eq(net.store.get(name).unwrap()), "{name}");
            if let Ok(b) = before.buffer(name.trim_end_matches(".gamma")) {
                let a = net.store.buffer(name.trim_end_matches(".gamma")).unwrap();
                assert!(a.mean.bit_eq(&b.mean) && a.var.bit_eq(&b.var));
            }
        }
    }

    #[test]
    fn same_seed_same_run() {
        let data = toy(5);
        let run = || {
            let mut net = ElNet::new(small(), 2).unwrap();
            let tcfg = cfg(4);
            let mut st = TrainState::new(&tcfg);
            let rep = finetune(&mut net, &data, &tcfg, &LossConfig::default(), &mut st).unwrap();
            (rep.step_losses, st.snapshot(&net).to_bytes().unwrap())
        };
        let (la, ca) = run();
        let (lb, cb) = run();
        assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ca, cb);
    }

    #[test]
    fn resuming_from_a_snapshot_continues_the_run() {
        let data = toy(5);
        let tcfg = cfg(4);
        let mut net = ElNet::new(small(), 2).unwrap();
        let mut st = TrainState::new(&tcfg);
        finetune(&mut net, &data, &tcfg, &LossConfig::default(), &mut st).unwrap();
        let ck = Checkpoint::from_bytes(&st.snapshot(&net).to_bytes().unwrap()).unwrap();
        let mut net2 = ck.to_model().unwrap();
        let mut st2 = TrainState::from_checkpoint(&ck, &tcfg).unwrap();
        let a = finetune(&mut net, &data, &tcfg, &LossConfig::default(), &mut st).unwrap();
        let b = finetune(&mut net2, &data, &tcfg, &LossConfig::default(), &mut st2).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert!(net.store.bit_eq(&net2.store));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut net = ElNet::new(small(), 1).unwrap();
        let tcfg = cfg(2);
        let mut st = TrainState::new(&tcfg);
        let l = LossConfig::default();
        assert!(finetune(&mut net, &[], &tcfg, &l, &mut st).is_err());
        let odd = Sample {
            image: GrayImage::new(12, 12, 1, vec![0.5; 144]).unwrap(),
            label: Mask::zeros(12, 12).unwrap(),
        };
        assert!(matches!(finetune(&mut net, &[odd], &tcfg, &l, &mut st), Err(Error::Shape(_))));
        let bad = TrainConfig {
            checkpoint_epochs: vec![3],
            ..cfg(2)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn epoch_log_is_json_lines() {
        let rep = FinetuneReport {
            step_losses: vec![],
            epochs: vec![
                EpochLog { epoch: 1, mean_loss: 0.5, lr: 1e-3 },
                EpochLog { epoch: 2, mean_loss: 0.25, lr: 1e-3 },
            ],
            snapshots: vec![],
        };
        let mut buf = Vec::new();
        rep.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, rep.epochs);
    }
}
