//! Graph builders for the network's blocks. Parameters arrive as [`Var`]s so
//! the same code serves training, inference and finite-difference checks.

use crate::ndarr::{BnMode, BnRunning, Conv2dOpts, Graph, Scalar, TensorResult, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const RFB_DILATIONS: [usize; 3] = [1, 3, 5];

/// Affine part of a batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: Var,
    pub beta: Var,
}

pub fn bn_mode(train: bool) -> BnMode {
    if train {
        BnMode::Train { momentum: BN_MOMENTUM }
    } else {
        BnMode::Eval
    }
}

/// Per-position bottleneck: `GeLU(W_up · GeLU(W_down · x))`, plus `x` when
/// `residual`. `down` is `[b, C]` and `up` is `[C, b]`.
pub fn adapter_forward<T: Scalar>(g: &mut Graph<T>, x: Var, down: Var, up: Var, residual: bool) -> TensorResult<Var> {
    let (b, c) = (g.value(down).shape()[0], g.value(down).shape()[1]);
    let down4 = g.reshape(down, &[b, c, 1, 1])?;
    let up4 = g.reshape(up, &[c, b, 1, 1])?;
    let h = g.conv2d(x, down4, None, Conv2dOpts::default())?;
    let h = g.gelu(h)?;
    let a = g.conv2d(h, up4, None, Conv2dOpts::default())?;
    let a = g.gelu(a)?;
    if residual {
        g.add(x, a)
    } else {
        Ok(a)
    }
}

/// Shape-preserving 3×3 convolution, batch norm, ReLU.
pub fn conv_bn_relu<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bn: BnParams,
    running: BnRunning<'_, T>,
    train: bool,
) -> TensorResult<Var> {
    let y = g.conv2d(x, w, None, Conv2dOpts::same(3, 1))?;
    let y = g.batch_norm2d(y, bn.gamma, bn.beta, running, bn_mode(train), BN_EPS)?;
    g.relu(y)
}

#[derive(Clone, Copy, Debug)]
pub struct RfbParams {
    /// `[B, C, 3, 3]` for dilations 1, 3, 5.
    pub branches: [Var; 3],
    pub branch_bias: Option<[Var; 3]>,
    /// `[64, 3B, 1, 1]`.
    pub proj: Var,
    pub proj_bias: Option<Var>,
}

/// Three dilated 3×3 branches, concatenated, projected to 64 channels, ReLU.
pub fn rfb_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &RfbParams) -> TensorResult<Var> {
    let mut outs = Vec::with_capacity(3);
    for (i, &d) in RFB_DILATIONS.iter().enumerate() {
        let bias = p.branch_bias.map(|b| b[i]);
        outs.push(g.conv2d(x, p.branches[i], bias, Conv2dOpts::same(3, d))?);
    }
    let cat = g.concat_channels(&outs)?;
    let y = g.conv2d(cat, p.proj, p.proj_bias, Conv2dOpts::default())?;
    g.relu(y)
}

#[derive(Clone, Copy, Debug)]
pub struct EamParams {
    /// `[C, C, 3, 3]`.
    pub w: Var,
    pub bias: Option<Var>,
    pub bn: BnParams,
}

/// Edge attention: `a = σ(BN(conv3×3(x)))`, returns `(x ⊙ a, a)`.
pub fn eam_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &EamParams,
    running: BnRunning<'_, T>,
    train: bool,
) -> TensorResult<(Var, Var)> {
    let y = g.conv2d(x, p.w, p.bias, Conv2dOpts::same(3, 1))?;
    let y = g.batch_norm2d(y, p.bn.gamma, p.bn.beta, running, bn_mode(train), BN_EPS)?;
    let a = g.sigmoid(y)?;
    let out = g.mul(x, a)?;
    Ok((out, a))
}
