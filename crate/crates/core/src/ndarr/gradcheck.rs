//! Central finite-difference verification of backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, TensorError, TensorResult, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`,
    /// which keeps rounding noise on near-zero gradients from dominating.
    pub floor: f64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_coords_per_input: Option<usize>,
    /// Seeds the coordinate subsample.
    pub seed: u64,
    /// Also difference with a quarter step and skip coordinates where the two
    /// estimates disagree. Such coordinates sit on a ReLU/clamp kink within
    /// one step, where no derivative exists to compare against.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-3,
            max_coords_per_input: None,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped as non-smooth (only with `skip_kinks`).
    pub skipped: usize,
    pub pass: bool,
}

fn eval<F>(f: &F, inputs: &[(String, Tensor<f64>)]) -> TensorResult<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| g.constant(t.clone()))
        .collect::<TensorResult<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Check `f` against central differences for every tensor in `inputs`.
pub fn grad_check_many<F>(f: F, inputs: &[(String, Tensor<f64>)], opts: &GradCheckOptions) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let first = eval(&f, inputs)?;
    let second = eval(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), true))
        .collect::<TensorResult<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("leaf gradients are populated"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        pass: true,
    };
    for (slot, (name, tensor)) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(limit) if limit < n => {
                let mut idx = sample(&mut rng, n, limit).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let base = tensor.data()[i];
            let mut central = |h: f64| -> TensorResult<f64> {
                probe[slot].1.data_mut()[i] = base + h;
                let plus = eval(&f, &probe)?;
                probe[slot].1.data_mut()[i] = base - h;
                let minus = eval(&f, &probe)?;
                probe[slot].1.data_mut()[i] = base;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = central(opts.step)?;
            let rel_to = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(opts.floor);
            if opts.skip_kinks {
                let fine = central(opts.step / 4.0)?;
                if rel_to(numeric, fine) > opts.tol {
                    report.skipped += 1;
                    continue;
                }
            }
            let a = analytic[slot].data()[i];
            let rel = rel_to(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report.pass = report.max_rel_err < opts.tol;
    Ok(report)
}

/// Single-input form: `f` maps one tensor to a scalar.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> TensorResult<Var>,
{
    let opts = GradCheckOptions {
        step,
        tol,
        ..Default::default()
    };
    grad_check_many(|g, v| f(g, v[0]), &[("x".to_string(), x.clone())], &opts)
}
