//! The label generation network.
//!
//! A four-stage convolutional backbone (frozen after pretraining) with a
//! trainable bottleneck adapter in front of every stage, one receptive field
//! block per stage projecting to 64 channels, and a three-block decoder that
//! gates each upsampled feature map with edge attention before merging the
//! skip connection. Each decoder block ends in a 1×1 logit head that is
//! upsampled to the input resolution; `S3` is the finest.

mod layers;
mod store;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layers::{
    adapter_forward, bn_mode, conv_bn_relu, eam_forward, rfb_forward, BnParams, EamParams, RfbParams, BN_EPS,
    BN_MOMENTUM, RFB_DILATIONS,
};
pub use store::{BnStats, ParamStore};

use crate::maskio::{GrayImage, Mask};
use crate::ndarr::{BnRunning, Conv2dOpts, Graph, Scalar, Tensor, TensorResult, Var};
use crate::{Error, Result};

/// Names under this prefix form the frozen backbone.
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const RFB_OUT: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub adapter_bottleneck: usize,
    pub rfb_out: usize,
    pub adapter_residual: bool,
    pub eam_enabled: bool,
    /// Width of each dilated RFB branch.
    pub rfb_branch_channels: usize,
    /// Width of the decoder's Conv-BN-ReLU layers.
    pub decoder_channels: usize,
    /// Biases on the RFB and EAM convolutions.
    pub conv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: [16, 32, 64, 128],
            adapter_bottleneck: 8,
            rfb_out: RFB_OUT,
            adapter_residual: true,
            eam_enabled: true,
            rfb_branch_channels: 16,
            decoder_channels: 32,
            conv_bias: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!("model.in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.rfb_out != RFB_OUT {
            return Err(Error::Config(format!("model.rfb_out is fixed at 64, got {}", self.rfb_out)));
        }
        for (key, v) in [
            ("adapter_bottleneck", self.adapter_bottleneck),
            ("rfb_branch_channels", self.rfb_branch_channels),
            ("decoder_channels", self.decoder_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{key} must be positive")));
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("model.stage_channels must be positive".into()));
        }
        Ok(())
    }

    /// Channels entering stage `k` (0-based).
    fn stage_in(&self, k: usize) -> usize {
        if k == 0 {
            self.in_channels
        } else {
            self.stage_channels[k - 1]
        }
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!("input {h}x{w} must be divisible by 16")));
    }
    Ok(())
}

/// Which batch-norm layers use batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Backbone trains; all batch norms use batch statistics.
    Pretrain,
    /// Backbone batch norms use their running statistics; the rest use batch
    /// statistics.
    Finetune,
    /// Running statistics everywhere, no gradients.
    Eval,
}

enum Buffers<'a, T: Scalar> {
    Mut(&'a mut BTreeMap<String, BnStats<T>>),
    Shared(&'a BTreeMap<String, BnStats<T>>),
}

/// One forward pass over a [`ParamStore`]: the graph, the parameter leaves
/// created so far and access to the batch-norm statistics.
pub struct Session<'a, T: Scalar = f32> {
    pub graph: Graph<T>,
    params: &'a BTreeMap<String, Tensor<T>>,
    frozen: &'a BTreeSet<String>,
    buffers: Buffers<'a, T>,
    vars: BTreeMap<String, Var>,
    phase: Phase,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// A training pass; batch-norm layers in train mode update `store`.
    pub fn train(store: &'a mut ParamStore<T>, phase: Phase) -> Self {
        Self::with_graph(Graph::new(), store, phase)
    }

    /// Like [`Session::train`] but continuing an existing graph.
    pub fn with_graph(graph: Graph<T>, store: &'a mut ParamStore<T>, phase: Phase) -> Self {
        let (params, frozen, buffers) = store.split_mut();
        Self {
            graph,
            params,
            frozen,
            buffers: Buffers::Mut(buffers),
            vars: BTreeMap::new(),
            phase,
        }
    }

    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            params: store.params(),
            frozen: store.frozen_set(),
            buffers: Buffers::Shared(store.buffers()),
            vars: BTreeMap::new(),
            phase: Phase::Eval,
        }
    }

    /// Use `var` for parameter `name` instead of a leaf built from the store.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// The leaf for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
        let grad = self.phase != Phase::Eval && !self.frozen.contains(name);
        let v = self.graph.leaf(t.clone(), grad)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn bn_params(&mut self, prefix: &str) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.param(&format!("{prefix}.gamma"))?,
            beta: self.param(&format!("{prefix}.beta"))?,
        })
    }

    fn bn_train(&self, backbone: bool) -> bool {
        match self.phase {
            Phase::Pretrain => true,
            Phase::Finetune => !backbone,
            Phase::Eval => false,
        }
    }

    fn with_running<R>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Graph<T>, BnRunning<'_, T>) -> TensorResult<R>,
    ) -> Result<R> {
        let missing = || Error::Data(format!("unknown batch-norm buffer `{name}`"));
        match &mut self.buffers {
            Buffers::Mut(map) => {
                let s = map.get_mut(name).ok_or_else(missing)?;
                Ok(f(
                    &mut self.graph,
                    BnRunning {
                        mean: &mut s.mean,
                        var: &mut s.var,
                    },
                )?)
            }
            Buffers::Shared(map) => {
                let mut s = map.get(name).ok_or_else(missing)?.clone();
                Ok(f(
                    &mut self.graph,
                    BnRunning {
                        mean: &mut s.mean,
                        var: &mut s.var,
                    },
                )?)
            }
        }
    }

    /// Gradients of every trainable parameter used in this pass. Call after
    /// `graph.backward`.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .filter_map(|(n, &v)| self.graph.grad(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    fn conv_bn_relu(&mut self, x: Var, prefix: &str, conv: &str, bn: &str, backbone: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.{conv}.weight"))?;
        let bnp = self.bn_params(&format!("{prefix}.{bn}"))?;
        let train = self.bn_train(backbone);
        self.with_running(&format!("{prefix}.{bn}"), |g, r| conv_bn_relu(g, x, w, bnp, r, train))
    }
}

fn stage_prefix(k: usize) -> String {
    format!("{BACKBONE_PREFIX}stage{}", k + 1)
}

/// Stage `k` of the backbone (adapter excluded): two Conv-BN-ReLU layers and a
/// 2×2 average pool.
fn backbone_stage<T: Scalar>(s: &mut Session<'_, T>, x: Var, k: usize) -> Result<Var> {
    let p = stage_prefix(k);
    let y = s.conv_bn_relu(x, &p, "conv1", "bn1", true)?;
    let y = s.conv_bn_relu(y, &p, "conv2", "bn2", true)?;
    Ok(s.graph.avg_pool2x(y)?)
}

pub fn adapter<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, x: Var, k: usize) -> Result<Var> {
    let down = s.param(&format!("adapter{}.down", k + 1))?;
    let up = s.param(&format!("adapter{}.up", k + 1))?;
    Ok(adapter_forward(&mut s.graph, x, down, up, cfg.adapter_residual)?)
}

/// Features `f1..f4` at `H/2 .. H/16`. Adapters are skipped when `adapters` is
/// false, which gives the plain backbone used for pretraining.
pub fn encoder_forward<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, x: Var, adapters: bool) -> Result<[Var; 4]> {
    let (_, c, h, w) = s.graph.value(x).dims4()?;
    check_input_size(h, w)?;
    if c != cfg.in_channels {
        return Err(Error::Shape(format!("model expects {} input channels, got {c}", cfg.in_channels)));
    }
    let mut feats = [x; 4];
    let mut cur = x;
    for (k, slot) in feats.iter_mut().enumerate() {
        if adapters {
            cur = adapter(s, cfg, cur, k)?;
        }
        cur = backbone_stage(s, cur, k)?;
        *slot = cur;
    }
    Ok(feats)
}

pub fn rfb<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, x: Var, k: usize) -> Result<Var> {
    let p = format!("rfb{}", k + 1);
    let mut branches = [x; 3];
    let mut biases = [x; 3];
    for i in 0..3 {
        branches[i] = s.param(&format!("{p}.branch{}.weight", i + 1))?;
        if cfg.conv_bias {
            biases[i] = s.param(&format!("{p}.branch{}.bias", i + 1))?;
        }
    }
    let params = RfbParams {
        branches,
        branch_bias: cfg.conv_bias.then_some(biases),
        proj: s.param(&format!("{p}.proj.weight"))?,
        proj_bias: if cfg.conv_bias {
            Some(s.param(&format!("{p}.proj.bias"))?)
        } else {
            None
        },
    };
    Ok(rfb_forward(&mut s.graph, x, &params)?)
}

/// Edge attention of decoder block `j` (1-based); returns `(x ⊙ a, a)`.
pub fn eam<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, x: Var, j: usize) -> Result<(Var, Var)> {
    let p = format!("decoder.block{j}.eam");
    let params = EamParams {
        w: s.param(&format!("{p}.conv.weight"))?,
        bias: if cfg.conv_bias {
            Some(s.param(&format!("{p}.conv.bias"))?)
        } else {
            None
        },
        bn: s.bn_params(&format!("{p}.bn"))?,
    };
    let train = s.bn_train(false);
    s.with_running(&format!("{p}.bn"), |g, r| eam_forward(g, x, &params, r, train))
}

/// Logit maps `[S1, S2, S3]`, each `[N, 1, H, W]`.
pub fn decoder_forward<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, r: [Var; 4]) -> Result<[Var; 3]> {
    let mut y = r[3];
    let mut outs = [y; 3];
    for j in 1..=3 {
        let skip = r[3 - j];
        y = s.graph.upsample2x_nearest(y)?;
        if cfg.eam_enabled {
            y = eam(s, cfg, y, j)?.0;
        }
        y = s.graph.concat_channels(&[y, skip]).map_err(|e| Error::Shape(format!("decoder block {j} skip: {e}")))?;
        let p = format!("decoder.block{j}");
        y = s.conv_bn_relu(y, &p, "conv1", "bn1", false)?;
        y = s.conv_bn_relu(y, &p, "conv2", "bn2", false)?;
        let hw = s.param(&format!("head{j}.weight"))?;
        let hb = s.param(&format!("head{j}.bias"))?;
        let logit = s.graph.conv2d(y, hw, Some(hb), Conv2dOpts::default())?;
        outs[j - 1] = s.graph.upsample_nearest(logit, 1 << (4 - j))?;
    }
    Ok(outs)
}

/// Full network on an `[N, C, H, W]` input.
pub fn forward<T: Scalar>(s: &mut Session<'_, T>, cfg: &ModelConfig, x: Var) -> Result<[Var; 3]> {
    let f = encoder_forward(s, cfg, x, true)?;
    let mut r = f;
    for k in 0..4 {
        r[k] = rfb(s, cfg, f[k], k)?;
    }
    decoder_forward(s, cfg, r)
}

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng))).expect("positive dims")
}

fn add_bn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, frozen: bool) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]).expect("c > 0"), frozen);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]).expect("c > 0"), frozen);
    store.insert_buffer(prefix, BnStats::new(c));
}

fn add_conv<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, shape: [usize; 4], frozen: bool) {
    let fan_in = shape[1] * shape[2] * shape[3];
    store.insert(format!("{name}.weight"), kaiming(rng, &shape, fan_in), frozen);
}

/// Backbone parameters only: what pretraining produces.
pub fn init_backbone<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for k in 0..4 {
        let (cin, c) = (cfg.stage_in(k), cfg.stage_channels[k]);
        let p = stage_prefix(k);
        add_conv(&mut store, &mut rng, &format!("{p}.conv1"), [c, cin, 3, 3], true);
        add_bn(&mut store, &format!("{p}.bn1"), c, true);
        add_conv(&mut store, &mut rng, &format!("{p}.conv2"), [c, c, 3, 3], true);
        add_bn(&mut store, &format!("{p}.bn2"), c, true);
    }
    Ok(store)
}

/// Adapters, RFBs, decoder and heads. Adapter up-projections start at zero so
/// a residual adapter is initially the identity.
pub fn init_head<T: Scalar>(cfg: &ModelConfig, seed: u64, store: &mut ParamStore<T>) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let zero = |shape: &[usize]| Tensor::<T>::zeros(shape).expect("positive dims");
    for k in 0..4 {
        let (c, b) = (cfg.stage_in(k), cfg.adapter_bottleneck);
        store.insert(format!("adapter{}.down", k + 1), kaiming(&mut rng, &[b, c], c), false);
        store.insert(format!("adapter{}.up", k + 1), zero(&[c, b]), false);
    }
    let bch = cfg.rfb_branch_channels;
    for k in 0..4 {
        let p = format!("rfb{}", k + 1);
        let c = cfg.stage_channels[k];
        for i in 1..=3 {
            add_conv(store, &mut rng, &format!("{p}.branch{i}"), [bch, c, 3, 3], false);
            if cfg.conv_bias {
                store.insert(format!("{p}.branch{i}.bias"), zero(&[bch]), false);
            }
        }
        add_conv(store, &mut rng, &format!("{p}.proj"), [RFB_OUT, 3 * bch, 1, 1], false);
        if cfg.conv_bias {
            store.insert(format!("{p}.proj.bias"), zero(&[RFB_OUT]), false);
        }
    }
    let d = cfg.decoder_channels;
    for j in 1..=3 {
        let p = format!("decoder.block{j}");
        let cy = if j == 1 { RFB_OUT } else { d };
        if cfg.eam_enabled {
            add_conv(store, &mut rng, &format!("{p}.eam.conv"), [cy, cy, 3, 3], false);
            if cfg.conv_bias {
                store.insert(format!("{p}.eam.conv.bias"), zero(&[cy]), false);
            }
            add_bn(store, &format!("{p}.eam.bn"), cy, false);
        }
        add_conv(store, &mut rng, &format!("{p}.conv1"), [d, cy + RFB_OUT, 3, 3], false);
        add_bn(store, &format!("{p}.bn1"), d, false);
        add_conv(store, &mut rng, &format!("{p}.conv2"), [d, d, 3, 3], false);
        add_bn(store, &format!("{p}.bn2"), d, false);
        add_conv(store, &mut rng, &format!("head{j}"), [1, d, 1, 1], false);
        store.insert(format!("head{j}.bias"), zero(&[1]), false);
    }
    Ok(())
}

/// Network configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ElNet<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> ElNet<T> {
    /// Fresh weights everywhere, backbone frozen.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = init_backbone(&config, seed)?;
        init_head(&config, seed, &mut store)?;
        Ok(Self { config, store })
    }

    /// Fresh head on top of pretrained backbone weights, which are frozen.
    pub fn from_backbone(config: ModelConfig, backbone: &ParamStore<T>, seed: u64) -> Result<Self> {
        let mut net = Self::new(config, seed)?;
        net.store.load_values(backbone)?;
        Ok(net)
    }

    /// Logit maps `[S1, S2, S3]` in eval mode.
    pub fn logits(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let mut s = Session::eval(&self.store);
        let xv = s.graph.constant(x.clone())?;
        let out = forward(&mut s, &self.config, xv)?;
        Ok(out.map(|v| s.graph.value(v).clone()))
    }

    /// Binary prediction for one image from the finest head.
    pub fn predict(&self, img: &GrayImage, threshold: f64) -> Result<Mask> {
        let x = img.to_tensor().cast::<T>();
        let [_, _, s3] = self.logits(&x)?;
        mask_from_logits(&s3, threshold)
    }
}

/// `σ(logit) > threshold` per pixel of a `[1, 1, H, W]` logit map.
pub fn mask_from_logits<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Result<Mask> {
    let (n, c, h, w) = logits.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("expected one logit map, got {:?}", logits.shape())));
    }
    let bits = logits
        .data()
        .iter()
        .map(|v| {
            let p = 1.0 / (1.0 + (-v.as_f64()).exp());
            u8::from(p > threshold)
        })
        .collect();
    Mask::new(h, w, bits)
}
