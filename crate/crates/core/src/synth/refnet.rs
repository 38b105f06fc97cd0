//! Small independent segmentation network used to judge label sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::maskio::{stack_images, stack_masks, GrayImage, Mask};
use crate::model::{mask_from_logits, ParamStore};
use crate::ndarr::{Conv2dOpts, Graph, Tensor, Var};
use crate::train::{wbce_loss, Adam, AdamConfig, Sample};
use crate::{Error, Result};

/// Three 3×3 convolutions with dilations 1, 2, 4, ReLU between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefNetConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RefNetConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

const DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug)]
pub struct RefNet {
    pub config: RefNetConfig,
    pub store: ParamStore<f32>,
    pub in_channels: usize,
}

impl RefNet {
    pub fn new(config: RefNetConfig, in_channels: usize) -> Result<Self> {
        if config.hidden == 0 || config.epochs == 0 || config.batch_size == 0 {
            return Err(Error::Config("refnet sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let chans = [in_channels, config.hidden, config.hidden, 1];
        for l in 0..3 {
            let (cin, cout) = (chans[l], chans[l + 1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(&mut rng) as f32)?;
            store.insert(format!("conv{}.weight", l + 1), w, false);
            store.insert(format!("conv{}.bias", l + 1), Tensor::zeros(&[cout])?, false);
        }
        Ok(Self {
            config,
            store,
            in_channels,
        })
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var, grad: bool) -> Result<(Var, Vec<(String, Var)>)> {
        let mut leaves = Vec::new();
        let mut y = x;
        for (l, &d) in DILATIONS.iter().enumerate() {
            let wn = format!("conv{}.weight", l + 1);
            let bn = format!("conv{}.bias", l + 1);
            let w = g.leaf(self.store.get(&wn)?.clone(), grad)?;
            let b = g.leaf(self.store.get(&bn)?.clone(), grad)?;
            leaves.push((wn, w));
            leaves.push((bn, b));
            y = g.conv2d(y, w, Some(b), Conv2dOpts::same(3, d))?;
            if l < 2 {
                y = g.relu(y)?;
            }
        }
        Ok((y, leaves))
    }

    pub fn predict(&self, img: &GrayImage) -> Result<Mask> {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor())?;
        let (y, _) = self.forward(&mut g, x, false)?;
        mask_from_logits(g.value(y), 0.5)
    }
}

/// Train from scratch with unweighted BCE and Adam.
pub fn train_refnet(samples: &[Sample], cfg: &RefNetConfig) -> Result<RefNet> {
    let first = samples.first().ok_or_else(|| Error::Data("empty training set".into()))?;
    let mut net = RefNet::new(cfg.clone(), first.image.channels())?;
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate, 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<&GrayImage> = batch.iter().map(|&i| &samples[i].image).collect();
            let masks: Vec<&Mask> = batch.iter().map(|&i| &samples[i].label).collect();
            let x = stack_images(&imgs)?;
            let t = stack_masks(&masks)?;
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let tv = g.constant(t.clone())?;
            let wv = g.constant(Tensor::ones(t.shape())?)?;
            let (y, leaves) = net.forward(&mut g, xv, true)?;
            let loss = wbce_loss(&mut g, y, tv, wv, 1e-7)?;
            g.backward(loss)?;
            let grads = leaves
                .into_iter()
                .map(|(n, v)| {
                    let gr = g.grad(v).cloned().ok_or_else(|| Error::Data(format!("no gradient for {n}")))?;
                    Ok((n, gr))
                })
                .collect::<Result<_>>()?;
            opt.step(&mut net.store, &grads)?;
        }
    }
    Ok(net)
}
