//! The finite-difference suite behind `elnet gradcheck`: every block and loss
//! checked in 64-bit on batches of eight 16×16 inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::maskio::Mask;
use crate::model::{
    adapter_forward, decoder_forward, eam_forward, forward, rfb_forward, BnParams, EamParams, ElNet, ModelConfig,
    Phase, RfbParams, Session,
};
use crate::ndarr::{grad_check_many, BnRunning, GradCheckOptions, GradCheckReport, Graph, Tensor, TensorResult, Var};
use crate::train::{combined_loss, total_loss, wbce_loss, wiou_loss, weight_batch, LossConfig};
use crate::{Error, Result};

pub const SUITE_TOL: f64 = 1e-4;
const BATCH: usize = 8;
const SIDE: usize = 16;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).expect("positive dims")
}

fn options(seed: u64, coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        tol: SUITE_TOL,
        max_coords_per_input: Some(coords),
        seed,
        skip_kinks: true,
        ..GradCheckOptions::default()
    }
}

fn named(v: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    v.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `Σ y ⊙ r` for a fixed random `r`. Signs cancel, so `|f|` grows like the
/// square root of the size of `y` and differencing rounding stays small.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> TensorResult<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(rand_tensor(&shape, seed, 1.0))?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn tensor_err(e: Error) -> crate::ndarr::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("unexpected error in gradient check: {other}"),
    }
}

fn labels(seed: u64) -> Vec<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..BATCH)
        .map(|_| {
            let (r0, c0) = (rng.random_range(0..8), rng.random_range(0..8));
            let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
            Mask::from_fn(SIDE, SIDE, |r, c| r >= r0 && r < r0 + h && c >= c0 && c < c0 + w).expect("valid size")
        })
        .collect()
}

fn target_and_weights(seed: u64, cfg: &LossConfig) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let masks = labels(seed);
    let refs: Vec<&Mask> = masks.iter().collect();
    let target = crate::maskio::stack_masks(&refs)?.cast();
    Ok((target, weight_batch(&refs, cfg)?))
}

fn adapter_check(seed: u64) -> TensorResult<GradCheckReport> {
    let inputs = named(vec![
        ("x", rand_tensor(&[BATCH, 4, SIDE, SIDE], seed, 1.0)),
        ("down", rand_tensor(&[3, 4], seed + 1, 1.0)),
        ("up", rand_tensor(&[4, 3], seed + 2, 1.0)),
    ]);
    grad_check_many(
        |g, v| {
            let y = adapter_forward(g, v[0], v[1], v[2], true)?;
            project(g, y, seed + 3)
        },
        &inputs,
        &options(seed, 48),
    )
}

/// Branch weights touch every pre-activation of the ReLU, so a step of 1e-5
/// crosses kinks on a large share of coordinates; 1e-6 keeps that rare while
/// rounding (|f|·1e-16 / step) stays near 1e-8.
fn rfb_check(seed: u64) -> TensorResult<GradCheckReport> {
    let c = 3;
    let inputs = named(vec![
        ("x", rand_tensor(&[BATCH, c, SIDE, SIDE], seed, 1.0)),
        ("branch1", rand_tensor(&[3, c, 3, 3], seed + 1, 0.5)),
        ("branch2", rand_tensor(&[3, c, 3, 3], seed + 2, 0.5)),
        ("branch3", rand_tensor(&[3, c, 3, 3], seed + 3, 0.5)),
        ("proj", rand_tensor(&[64, 9, 1, 1], seed + 4, 0.5)),
    ]);
    grad_check_many(
        |g, v| {
            let p = RfbParams {
                branches: [v[1], v[2], v[3]],
                branch_bias: None,
                proj: v[4],
                proj_bias: None,
            };
            let y = rfb_forward(g, v[0], &p)?;
            project(g, y, seed + 5)
        },
        &inputs,
        &GradCheckOptions {
            step: 1e-6,
            ..options(seed, 32)
        },
    )
}

fn eam_check(seed: u64, train: bool) -> TensorResult<GradCheckReport> {
    let c = 3;
    let inputs = named(vec![
        ("x", rand_tensor(&[BATCH, c, SIDE, SIDE], seed, 1.0)),
        ("w", rand_tensor(&[c, c, 3, 3], seed + 1, 0.5)),
        ("gamma", rand_tensor(&[c], seed + 2, 1.0)),
        ("beta", rand_tensor(&[c], seed + 3, 1.0)),
    ]);
    let mean0 = rand_tensor(&[c], seed + 4, 0.2);
    let var0 = Tensor::from_fn(&[c], |i| 1.0 + 0.1 * i as f64).expect("c > 0");
    grad_check_many(
        |g, v| {
            let (mut mean, mut var) = (mean0.clone(), var0.clone());
            let p = EamParams {
                w: v[1],
                bias: None,
                bn: BnParams { gamma: v[2], beta: v[3] },
            };
            let (y, _) = eam_forward(g, v[0], &p, BnRunning { mean: &mut mean, var: &mut var }, train)?;
            project(g, y, seed + 5)
        },
        &inputs,
        &options(seed, 48),
    )
}

fn small_model() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 6, 8, 8],
        adapter_bottleneck: 3,
        rfb_branch_channels: 3,
        decoder_channels: 5,
        ..ModelConfig::default()
    }
}

/// Model with non-zero adapter up-projections, in 64-bit.
fn test_model(seed: u64) -> Result<ElNet<f64>> {
    let mut net = ElNet::<f64>::new(small_model(), seed)?;
    for k in 1..=4 {
        let up = net.store.get_mut(&format!("adapter{k}.up"))?;
        let shape = up.shape().to_vec();
        *up = rand_tensor(&shape, seed + k, 0.3);
    }
    Ok(net)
}

fn decoder_check(seed: u64) -> Result<GradCheckReport> {
    let net = test_model(seed)?;
    let cfg = net.config.clone();
    let names: Vec<String> = net
        .store
        .trainable_names()
        .filter(|n| n.starts_with("decoder.") || n.starts_with("head"))
        .map(String::from)
        .collect();
    let mut inputs: Vec<(String, Tensor<f64>)> =
        names.iter().map(|n| (n.clone(), net.store.get(n).expect("listed").clone())).collect();
    for k in 0..4 {
        let s = SIDE >> (k + 1);
        inputs.push((format!("r{}", k + 1), rand_tensor(&[BATCH, 64, s, s], seed + 10 + k as u64, 1.0)));
    }
    let store = net.store;
    Ok(grad_check_many(
        |g, v| {
            let mut st = store.clone();
            let mut s = Session::with_graph(std::mem::take(g), &mut st, Phase::Finetune);
            for (name, &var) in names.iter().zip(v) {
                s.bind(name, var);
            }
            let r = [v[names.len()], v[names.len() + 1], v[names.len() + 2], v[names.len() + 3]];
            let out = decoder_forward(&mut s, &cfg, r).map_err(tensor_err)?;
            let mut acc = None;
            for (i, o) in out.into_iter().enumerate() {
                let p = project(&mut s.graph, o, seed + 20 + i as u64)?;
                acc = Some(match acc {
                    Some(a) => s.graph.add(a, p)?,
                    None => p,
                });
            }
            *g = s.into_graph();
            Ok(acc.expect("three heads"))
        },
        &inputs,
        &options(seed, 6),
    )?)
}

/// `total_loss` through the whole network, against every trainable tensor.
fn model_loss_check(seed: u64) -> Result<GradCheckReport> {
    let net = test_model(seed)?;
    let cfg = net.config.clone();
    let lcfg = LossConfig::default();
    let (target, weights) = target_and_weights(seed + 7, &lcfg)?;
    let names: Vec<String> = net.store.trainable_names().map(String::from).collect();
    let mut inputs: Vec<(String, Tensor<f64>)> =
        names.iter().map(|n| (n.clone(), net.store.get(n).expect("listed").clone())).collect();
    inputs.push(("x".into(), rand_tensor(&[BATCH, 1, SIDE, SIDE], seed + 100, 1.0)));
    let store = net.store;
    Ok(grad_check_many(
        |g, v| {
            let mut st = store.clone();
            let mut s = Session::with_graph(std::mem::take(g), &mut st, Phase::Finetune);
            for (name, &var) in names.iter().zip(v) {
                s.bind(name, var);
            }
            let out = forward(&mut s, &cfg, *v.last().expect("x")).map_err(tensor_err)?;
            let t = s.graph.constant(target.clone())?;
            let w = s.graph.constant(weights.clone())?;
            let l = total_loss(&mut s.graph, out, t, w, &lcfg).map_err(tensor_err)?;
            *g = s.into_graph();
            Ok(l)
        },
        &inputs,
        &options(seed, 4),
    )?)
}

#[derive(Clone, Copy)]
enum LossKind {
    Wiou,
    Wbce,
    Combined,
    Total,
}

fn loss_check(seed: u64, kind: LossKind) -> Result<GradCheckReport> {
    let lcfg = LossConfig {
        alpha: [0.2, 0.3, 0.5],
        lambda: 0.4,
        ..LossConfig::default()
    };
    let (target, weights) = target_and_weights(seed, &lcfg)?;
    let heads = if matches!(kind, LossKind::Total) { 3 } else { 1 };
    let inputs: Vec<(String, Tensor<f64>)> = (0..heads)
        .map(|i| (format!("s{}", i + 1), rand_tensor(&[BATCH, 1, SIDE, SIDE], seed + 1 + i as u64, 4.0)))
        .collect();
    Ok(grad_check_many(
        |g, v| {
            let t = g.constant(target.clone())?;
            let w = g.constant(weights.clone())?;
            match kind {
                LossKind::Wiou => wiou_loss(g, v[0], t, w, lcfg.prob_clip),
                LossKind::Wbce => wbce_loss(g, v[0], t, w, lcfg.prob_clip),
                LossKind::Combined => combined_loss(g, v[0], t, w, &lcfg).map_err(tensor_err),
                LossKind::Total => total_loss(g, [v[0], v[1], v[2]], t, w, &lcfg).map_err(tensor_err),
            }
        },
        &inputs,
        &options(seed, 256),
    )?)
}

/// Run every check. Each report passes when its largest relative error is
/// below [`SUITE_TOL`].
pub fn gradcheck_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let entry = |name: &str, report: GradCheckReport| SuiteEntry {
        name: name.to_string(),
        report,
    };
    Ok(vec![
        entry("adapter", adapter_check(seed)?),
        entry("rfb", rfb_check(seed + 1000)?),
        entry("eam_train", eam_check(seed + 2000, true)?),
        entry("eam_eval", eam_check(seed + 3000, false)?),
        entry("decoder", decoder_check(seed + 4000)?),
        entry("wiou_loss", loss_check(seed + 5000, LossKind::Wiou)?),
        entry("wbce_loss", loss_check(seed + 6000, LossKind::Wbce)?),
        entry("combined_loss", loss_check(seed + 7000, LossKind::Combined)?),
        entry("total_loss", loss_check(seed + 8000, LossKind::Total)?),
        entry("total_loss_full_model", model_loss_check(seed + 9000)?),
    ])
}
