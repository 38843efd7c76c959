//! Central-difference verification of backward rules, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{Module, Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-3;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar program, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn eval_inputs<P>(f: &P, inputs: &[Tensor<f64>]) -> Result<f64>
where
    P: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

/// Max over all input elements of `|analytic - numeric| / max(1, |analytic|)`.
///
/// Fails with a contract error when two evaluations of `f` disagree bitwise.
pub fn check_gradients<P>(f: P, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    P: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let base = eval_inputs(&f, inputs)?;
    if base.to_bits() != eval_inputs(&f, inputs)?.to_bits() {
        return Err(Error::Contract("program is not deterministic".into()));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let plus = eval_inputs(&f, &probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let minus = eval_inputs(&f, &probe)?;
            probe[i].data_mut()[e] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

fn eval_module<M, P>(module: &M, f: &P) -> Result<f64>
where
    M: Module<f64>,
    P: Fn(&mut Tape<f64>, &M) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let out = f(&mut tape, module)?;
    scalar_of(&tape, out)
}

fn analytic_module_grads<M, P>(module: &mut M, f: &P) -> Result<Vec<Tensor<f64>>>
where
    M: Module<f64>,
    P: Fn(&mut Tape<f64>, &M) -> Result<Var>,
{
    module.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, module)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    grads.accumulate(module.param_list_mut())?;
    Ok(module.param_list().iter().map(|p| p.grad.clone()).collect())
}

/// Outcome of an element-wise check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_error: f64,
    /// Elements compared.
    pub probes: usize,
    /// Elements whose `+-eps` evaluations switched a ReLU unit relative to
    /// the unshifted one and were re-probed with a step shrunk by 10x until
    /// they did not.
    pub refined: usize,
    /// Elements still straddling a kink at the smallest step, left out.
    pub skipped: usize,
}

/// Smallest step tried when shrinking around a kink.
pub const MIN_KINK_EPS: f64 = 1e-7;

fn eval_module_tracked<M, P>(module: &M, f: &P) -> Result<(f64, Option<u64>)>
where
    M: Module<f64>,
    P: Fn(&mut Tape<f64>, &M) -> Result<Var>,
{
    let mut tape = Tape::inference().track_kinks();
    let out = f(&mut tape, module)?;
    Ok((scalar_of(&tape, out)?, tape.kink_signature()))
}

fn module_check<M, P>(module: &mut M, f: &P, eps: f64, max_per_param: Option<usize>, skip_kinks: bool) -> Result<GradReport>
where
    M: Module<f64>,
    P: Fn(&mut Tape<f64>, &M) -> Result<Var>,
{
    let (base, base_sig) = eval_module_tracked(module, f)?;
    if base.to_bits() != eval_module(module, f)?.to_bits() {
        return Err(Error::Contract("program is not deterministic".into()));
    }
    let analytic = analytic_module_grads(module, f)?;
    let mut report = GradReport {
        max_error: 0.0,
        probes: 0,
        refined: 0,
        skipped: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let step = match max_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for e in (0..n).step_by(step) {
            let orig = module.param_list()[pi].value.data()[e];
            let mut h = eps;
            let numeric = loop {
                module.param_list_mut()[pi].value.data_mut()[e] = orig + h;
                let (plus, sig_plus) = eval_module_tracked(module, f)?;
                module.param_list_mut()[pi].value.data_mut()[e] = orig - h;
                let (minus, sig_minus) = eval_module_tracked(module, f)?;
                module.param_list_mut()[pi].value.data_mut()[e] = orig;
                if !skip_kinks || (sig_plus == base_sig && sig_minus == base_sig) {
                    break Some((plus - minus) / (2.0 * h));
                }
                if h / 10.0 < MIN_KINK_EPS {
                    break None;
                }
                h /= 10.0;
            };
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if h != eps {
                report.refined += 1;
            }
            report.probes += 1;
            report.max_error = report.max_error.max(relative_error(grad.data()[e], numeric));
        }
    }
    Ok(report)
}

/// Element-wise check over a module's parameters. `max_per_param` caps how
/// many (evenly spaced) elements of each parameter are probed.
pub fn check_module_gradients<M, P>(module: &mut M, f: P, eps: f64, max_per_param: Option<usize>) -> Result<f64>
where
    M: Module<f64>,
    P: Fn(&mut Tape<f64>, &M) -> Result<Var>,
{
    Ok(module_check(module, &f, eps, max_per_param, false)?.max_error)
}

/// [`check_module_gradients`] that never differences across a ReLU kink,
/// where the quotient is not a derivative: straddling elements are re-probed
/// with smaller steps (see [`GradReport`]).
pub fn check_module_gradients_kink_aware<M, P>(
    module: &mut M,
    f: P,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<GradReport>
where
    M: Module<f64>,
    P: Fn(&mut Tape<f64>, &M) -> Result<Var>,
{
    module_check(module, &f, eps, max_per_param, true)
}

/// Directional derivative check along one random unit-variance direction
/// over all parameters jointly: cheap enough for full-size models.
pub fn directional_check<M, P>(module: &mut M, f: P, eps: f64, seed: u64) -> Result<f64>
where
    M: Module<f64>,
    P: Fn(&mut Tape<f64>, &M) -> Result<Var>,
{
    let analytic = analytic_module_grads(module, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = analytic
        .iter()
        .map(|g| (0..g.numel()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let directional: f64 = analytic
        .iter()
        .zip(&dirs)
        .map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| a * b / norm).sum::<f64>())
        .sum();

    let originals: Vec<Tensor<f64>> = module.param_list().iter().map(|p| p.value.clone()).collect();
    let shift = |module: &mut M, scale: f64| {
        for ((p, orig), d) in module.param_list_mut().into_iter().zip(&originals).zip(&dirs) {
            let mut v = orig.to_vec();
            for (x, dx) in v.iter_mut().zip(d) {
                *x += scale * dx / norm;
            }
            p.value = Tensor::new_unchecked(orig.shape().to_vec(), v);
        }
    };
    shift(module, eps);
    let plus = eval_module(module, &f)?;
    shift(module, -eps);
    let minus = eval_module(module, &f)?;
    for (p, orig) in module.param_list_mut().into_iter().zip(originals) {
        p.value = orig;
    }
    Ok(relative_error(directional, (plus - minus) / (2.0 * eps)))
}
