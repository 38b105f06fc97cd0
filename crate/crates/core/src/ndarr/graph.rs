//! Tape-based reverse-mode differentiation.
//!
//! Ops append nodes to a [`Graph`] in evaluation order, so the node list is
//! already a topological order and backward is a single reverse sweep.

use super::linalg::{col2im, gemm, im2col, ConvGeom, Trans};
use super::{Scalar, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOpts {
    /// Shape-preserving stride-1 options for an odd `kernel` at `dilation`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running
    /// estimates with the given momentum.
    Train { momentum: f64 },
    /// Normalize with the running estimates only.
    Eval,
}

/// Running statistics of one batch-norm layer.
pub struct BnRunning<'a, T: Scalar> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
}

type Derivative<T> = Box<dyn Fn(T) -> T + Send + Sync>;

enum Unary<T> {
    Sigmoid,
    Gelu,
    Relu,
    Ln,
    Exp,
    Neg,
    Custom(Derivative<T>),
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Unary {
        x: Var,
        kind: Unary<T>,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumPerSample {
        x: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool2 {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape {
        x: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A recorded computation. Single-writer: one graph belongs to one worker.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_COEF: f64 = 0.044715;

fn gelu_parts(x: f64) -> (f64, f64) {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_COEF * x * x);
    (value, deriv)
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Register an input. Leaves with `requires_grad` receive gradients on
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorResult<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorResult<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> TensorResult<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `ShapeMismatch` unless `a` and `b` have equal shapes.
    pub fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- convolution -------------------------------------------------------

    /// Cross-correlation of `x[N,C,H,W]` with `w[K,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, opts: Conv2dOpts) -> TensorResult<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (k, cw, kh, kw) = self.value(w).dims4()?;
        if cw != c {
            return Err(TensorError::ChannelMismatch {
                op: "conv2d",
                expected: cw,
                found: c,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::EvenKernel { kh, kw });
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride and dilation must be positive".into(),
            });
        }
        let span_h = opts.dilation * (kh - 1) + 1;
        let span_w = opts.dilation * (kw - 1) + 1;
        if h + 2 * opts.padding < span_h || wd + 2 * opts.padding < span_w {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel span {span_h}x{span_w} exceeds padded input"),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [k] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![k],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.padding,
            dil: opts.dilation,
            oh: (h + 2 * opts.padding - span_h) / opts.stride + 1,
            ow: (wd + 2 * opts.padding - span_w) / opts.stride + 1,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * k * ncols];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncols]
        };
        for s in 0..n {
            let xs = &xin[s * c * h * wd..(s + 1) * c * h * wd];
            let colm: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut cols);
                &cols
            };
            gemm(
                k,
                rows,
                ncols,
                wv,
                Trans::No,
                colm,
                Trans::No,
                T::zero(),
                &mut out[s * k * ncols..(s + 1) * k * ncols],
            );
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(ncols).enumerate() {
                let bk = bv[i % k];
                chunk.iter_mut().for_each(|v| *v += bk);
            }
        }
        let value = Tensor::from_parts(vec![n, k, geom.oh, geom.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { x, w, bias, geom }, &inputs)
    }

    // ---- normalization -----------------------------------------------------

    /// Per-channel batch normalization of an NCHW tensor.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: BnRunning<'_, T>,
        mode: BnMode,
        eps: f64,
    ) -> TensorResult<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(TensorError::ChannelMismatch {
                    op: if name == "gamma" { "batch_norm2d gamma" } else { "batch_norm2d beta" },
                    expected: c,
                    found: self.value(v).numel(),
                });
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(TensorError::ChannelMismatch {
                op: "batch_norm2d running stats",
                expected: c,
                found: running.mean.numel(),
            });
        }
        if running.var.data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm2d",
                reason: "running variance is negative".into(),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm2d",
                reason: "eps must be positive".into(),
            });
        }
        let hw = h * w;
        let m = n * hw;
        let train = matches!(mode, BnMode::Train { .. });
        if train && m < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm2d",
                reason: "training mode needs more than one value per channel".into(),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let eps_t = T::from_f64(eps);
        for ch in 0..c {
            let idx = |s: usize, i: usize| (s * c + ch) * hw + i;
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for s in 0..n {
                    for i in 0..hw {
                        sum += xv[idx(s, i)].as_f64();
                    }
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    for i in 0..hw {
                        let d = xv[idx(s, i)].as_f64() - mean;
                        sq += d * d;
                    }
                }
                let var = sq / m as f64;
                if let BnMode::Train { momentum } = mode {
                    let unbiased = sq / (m - 1) as f64;
                    let rm = &mut running.mean.data_mut()[ch];
                    *rm = T::from_f64((1.0 - momentum) * rm.as_f64() + momentum * mean);
                    let rv = &mut running.var.data_mut()[ch];
                    *rv = T::from_f64((1.0 - momentum) * rv.as_f64() + momentum * unbiased);
                }
                (T::from_f64(mean), T::from_f64(var))
            } else {
                (running.mean.data()[ch], running.var.data()[ch])
            };
            let is = T::one() / (var + eps_t).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                for i in 0..hw {
                    let j = idx(s, i);
                    let xh = (xv[j] - mean) * is;
                    xhat[j] = xh;
                    out[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(
            "batch_norm2d",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    // ---- elementwise -------------------------------------------------------

    fn unary(&mut self, name: &'static str, x: Var, kind: Unary<T>, f: impl Fn(T) -> T) -> TensorResult<Var> {
        let src = self.value(x);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        self.push(name, value, Op::Unary { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("sigmoid", x, Unary::Sigmoid, |v| T::from_f64(sigmoid_f64(v.as_f64())))
    }

    /// GeLU, tanh approximation with cubic coefficient 0.044715.
    pub fn gelu(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("gelu", x, Unary::Gelu, |v| T::from_f64(gelu_parts(v.as_f64()).0))
    }

    pub fn relu(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("relu", x, Unary::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn ln(&mut self, x: Var) -> TensorResult<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "ln",
                reason: "input must be positive".into(),
            });
        }
        self.unary("ln", x, Unary::Ln, |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("exp", x, Unary::Exp, |v| v.exp())
    }

    pub fn neg(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("neg", x, Unary::Neg, |v| -v)
    }

    /// Elementwise op with a caller-supplied value and derivative.
    pub fn map_elementwise(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> TensorResult<Var> {
        self.unary("map_elementwise", x, Unary::Custom(Box::new(df)), f)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> TensorResult<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                reason: "lo > hi".into(),
            });
        }
        let src = self.value(x);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| v.max(lo).min(hi)).collect());
        self.push("clamp", value, Op::Clamp { x, lo, hi }, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, kind: Binary) -> TensorResult<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .iter()
            .zip(bv)
            .map(|(&p, &q)| match kind {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
                Binary::Div => p / q,
            })
            .collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        self.push(name, value, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("add", a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("sub", a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("mul", a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("div", a, b, Binary::Div)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> TensorResult<Var> {
        let value = self.value(x).map(|v| v + c)?;
        self.push("add_scalar", value, Op::AddScalar { x }, &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> TensorResult<Var> {
        let value = self.value(x).map(|v| v * c)?;
        self.push("mul_scalar", value, Op::MulScalar { x, c }, &[x])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> TensorResult<Var> {
        let value = Tensor::from_parts(vec![1], vec![self.value(x).sum()]);
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        let value = Tensor::from_parts(vec![1], vec![t.sum() / T::from_f64(t.numel() as f64)]);
        self.push("mean", value, Op::Mean { x }, &[x])
    }

    /// Reduce every dimension except the leading one: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.numel() / n;
        let data = t.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::from_parts(vec![n], data);
        self.push("sum_per_sample", value, Op::SumPerSample { x }, &[x])
    }

    // ---- spatial -----------------------------------------------------------

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> TensorResult<Var> {
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest",
                reason: "factor must be positive".into(),
            });
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                let row = &plane[(i / factor) * w..(i / factor + 1) * w];
                for j in 0..ow {
                    dst[i * ow + j] = row[j / factor];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.push("upsample_nearest", value, Op::Upsample { x, factor }, &[x])
    }

    pub fn upsample2x_nearest(&mut self, x: Var) -> TensorResult<Var> {
        self.upsample_nearest(x, 2)
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2x(&mut self, x: Var) -> TensorResult<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2x",
                reason: format!("spatial size {h}x{w} is not even"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let s = plane[2 * i * w + 2 * j]
                        + plane[2 * i * w + 2 * j + 1]
                        + plane[(2 * i + 1) * w + 2 * j]
                        + plane[(2 * i + 1) * w + 2 * j + 1];
                    out[p * oh * ow + i * ow + j] = s * quarter;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.push("avg_pool2x", value, Op::AvgPool2 { x }, &[x])
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> TensorResult<Var> {
        let first = *xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat_channels",
            reason: "no inputs".into(),
        })?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &v in xs {
                let c = self.value(v).shape()[1];
                out.extend_from_slice(&self.value(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, total_c, h, w], out);
        self.push("concat_channels", value, Op::Concat { xs: xs.to_vec() }, xs)
    }

    /// `y = x · wᵀ + b` over the last axis of `x`; `w` is `[Cout, Cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> TensorResult<Var> {
        let xs = self.value(x).shape().to_vec();
        let cin = *xs.last().expect("non-empty shape");
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[1] != cin {
            return Err(TensorError::ChannelMismatch {
                op: "linear",
                expected: if ws.len() == 2 { ws[1] } else { 0 },
                found: cin,
            });
        }
        let cout = ws[0];
        if let Some(bv) = b {
            if self.value(bv).shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![cout],
                    rhs: self.value(bv).shape().to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        gemm(
            rows,
            cin,
            cout,
            self.value(x).data(),
            Trans::No,
            self.value(w).data(),
            Trans::Yes,
            T::zero(),
            &mut out,
        );
        if let Some(bv) = b {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bd).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty shape") = cout;
        let value = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate `∂loss/∂leaf` into every leaf that requires a gradient.
    ///
    /// Intermediate gradients are dropped afterwards and the graph cannot be
    /// differentiated again.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(Tensor::from_parts(shape, vec![T::one()]));
            for i in (0..=loss.0).rev() {
                if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                    continue;
                }
                let Some(g) = self.nodes[i].grad.take() else {
                    continue;
                };
                for (j, contrib) in self.backward_node(i, &g) {
                    let node = &mut self.nodes[j];
                    match node.grad.as_mut() {
                        Some(acc) => acc.add_assign_tensor(&contrib),
                        None => node.grad = Some(contrib),
                    }
                }
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), vec![T::zero(); node.value.numel()]));
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::from_parts(self.value(v).shape().to_vec(), data)
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, bias, geom } => {
                let (n, k) = (self.value(*x).shape()[0], self.value(*w).shape()[0]);
                let (rows, ncols) = (geom.rows(), geom.cols());
                let plane = geom.c * geom.h * geom.w;
                let xin = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); rows * ncols]
                };
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); k * rows];
                    for s in 0..n {
                        let xs = &xin[s * plane..(s + 1) * plane];
                        let colm: &[T] = if geom.is_pointwise() {
                            xs
                        } else {
                            im2col(xs, geom, &mut cols);
                            &cols
                        };
                        let gs = &gd[s * k * ncols..(s + 1) * k * ncols];
                        gemm(k, ncols, rows, gs, Trans::No, colm, Trans::Yes, T::one(), &mut dw);
                    }
                    out.push((w.0, self.like(*w, dw)));
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * plane];
                    let mut dcols = vec![T::zero(); rows * ncols];
                    for s in 0..n {
                        let gs = &gd[s * k * ncols..(s + 1) * k * ncols];
                        let dxs = &mut dx[s * plane..(s + 1) * plane];
                        if geom.is_pointwise() {
                            gemm(rows, k, ncols, wv, Trans::Yes, gs, Trans::No, T::zero(), dxs);
                        } else {
                            gemm(rows, k, ncols, wv, Trans::Yes, gs, Trans::No, T::zero(), &mut dcols);
                            col2im(&dcols, geom, dxs);
                        }
                    }
                    out.push((x.0, self.like(*x, dx)));
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); k];
                    for (idx, chunk) in gd.chunks(ncols).enumerate() {
                        db[idx % k] += chunk.iter().copied().sum();
                    }
                    out.push((b.0, self.like(b, db)));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for ch in 0..c {
                    let idx = |s: usize, p: usize| (s * c + ch) * hw + p;
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for s in 0..n {
                        for p in 0..hw {
                            let j = idx(s, p);
                            sum_dy += gd[j];
                            sum_dy_xhat += gd[j] * xhat[j];
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    if self.needs(*x) {
                        let scale = gv[ch] * inv_std[ch];
                        for s in 0..n {
                            for p in 0..hw {
                                let j = idx(s, p);
                                dx[j] = if *train {
                                    scale * (gd[j] - sum_dy / m - xhat[j] * sum_dy_xhat / m)
                                } else {
                                    scale * gd[j]
                                };
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    out.push((x.0, self.like(*x, dx)));
                }
                if self.needs(*gamma) {
                    out.push((gamma.0, self.like(*gamma, dgamma)));
                }
                if self.needs(*beta) {
                    out.push((beta.0, self.like(*beta, dbeta)));
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx: Vec<T> = (0..gd.len())
                    .map(|j| {
                        let d = match kind {
                            Unary::Sigmoid => yv[j] * (T::one() - yv[j]),
                            Unary::Gelu => T::from_f64(gelu_parts(xv[j].as_f64()).1),
                            Unary::Relu => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Ln => T::one() / xv[j],
                            Unary::Exp => yv[j],
                            Unary::Neg => -T::one(),
                            Unary::Custom(df) => df(xv[j]),
                        };
                        gd[j] * d
                    })
                    .collect();
                out.push((x.0, self.like(*x, dx)));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| if v >= *lo && v <= *hi { gg } else { T::zero() })
                    .collect();
                out.push((x.0, self.like(*x, dx)));
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = (0..gd.len())
                        .map(|j| match kind {
                            Binary::Add | Binary::Sub => gd[j],
                            Binary::Mul => gd[j] * bv[j],
                            Binary::Div => gd[j] / bv[j],
                        })
                        .collect();
                    out.push((a.0, self.like(*a, da)));
                }
                if self.needs(*b) {
                    let db = (0..gd.len())
                        .map(|j| match kind {
                            Binary::Add => gd[j],
                            Binary::Sub => -gd[j],
                            Binary::Mul => gd[j] * av[j],
                            Binary::Div => -gd[j] * av[j] / (bv[j] * bv[j]),
                        })
                        .collect();
                    out.push((b.0, self.like(*b, db)));
                }
            }
            Op::AddScalar { x } => out.push((x.0, g.clone().reshape(self.value(*x).shape()).expect("same size"))),
            Op::MulScalar { x, c } => out.push((x.0, self.like(*x, gd.iter().map(|&v| v * *c).collect()))),
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                out.push((x.0, self.like(*x, vec![gd[0]; n])));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                out.push((x.0, self.like(*x, vec![gd[0] / T::from_f64(n as f64); n])));
            }
            Op::SumPerSample { x } => {
                let t = self.value(*x);
                let per = t.numel() / t.shape()[0];
                let dx = (0..t.numel()).map(|j| gd[j / per]).collect();
                out.push((x.0, self.like(*x, dx)));
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[p * h * w + (i / factor) * w + j / factor] += gd[p * oh * ow + i * ow + j];
                        }
                    }
                }
                out.push((x.0, self.like(*x, dx)));
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[p * h * w + i * w + j] = gd[p * oh * ow + (i / 2) * ow + j / 2] * quarter;
                        }
                    }
                }
                out.push((x.0, self.like(*x, dx)));
            }
            Op::Concat { xs } => {
                let (n, total_c, h, w) = node.value.dims4().expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                for v in xs {
                    let c = self.value(*v).shape()[1];
                    if self.needs(*v) {
                        let mut dx = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            dx.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        out.push((v.0, self.like(*v, dx)));
                    }
                    offset += c;
                }
            }
            Op::Linear { x, w, b } => {
                let cout = self.value(*w).shape()[0];
                let cin = self.value(*w).shape()[1];
                let rows = self.value(*x).numel() / cin;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * cin];
                    gemm(rows, cout, cin, gd, Trans::No, self.value(*w).data(), Trans::No, T::zero(), &mut dx);
                    out.push((x.0, self.like(*x, dx)));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); cout * cin];
                    gemm(cout, rows, cin, gd, Trans::Yes, self.value(*x).data(), Trans::No, T::zero(), &mut dw);
                    out.push((w.0, self.like(*w, dw)));
                }
                if let Some(bv) = b.filter(|bv| self.needs(*bv)) {
                    let mut db = vec![T::zero(); cout];
                    for row in gd.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    out.push((bv.0, self.like(bv, db)));
                }
            }
            Op::Reshape { x } => out.push((x.0, self.like(*x, gd.to_vec()))),
        }
        out.retain(|(j, _)| self.nodes[*j].requires_grad);
        out
    }
}
