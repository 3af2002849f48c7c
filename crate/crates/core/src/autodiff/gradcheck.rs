use super::{Tape, Var};
use crate::error::Result;
use crate::nn::Module;
use crate::tensor::Tensor;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

/// Central differences carry roundoff proportional to `|f| eps / step`, so
/// gradients that are exactly zero (a bias feeding a normalization) need a
/// floor scaled by the loss magnitude.
const DENOM_FLOOR: f64 = 1e-6;

fn denom_floor(loss: f64) -> f64 {
    DENOM_FLOOR * loss.abs().max(1.0)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences
/// `(f(x+d) - f(x-d)) / 2d`. Relative error uses `max(|a|, |b|, 1e-6 max(1, |f|))`
/// as the denominator. Failures are reported, not raised; only evaluation errors are.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let floor = denom_floor(tape.value(out).item()?);
    let grads = tape.backward(out)?;

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let mut worst = 0.0f64;
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            probe[k].data_mut()[idx] = orig + step;
            let plus = evaluate(&f, &probe)?;
            probe[k].data_mut()[idx] = orig - step;
            let minus = evaluate(&f, &probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error,
        tolerance: tol,
    })
}

/// Finite-difference check of a network's parameter gradients. `f` binds the
/// module on the tape and returns the scalar loss plus the parameter leaves
/// in `Module::visit` order.
pub fn grad_check_module<M, F>(module: &M, f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    M: Module<f64> + Clone,
    F: Fn(&mut Tape<f64>, &M) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, module)?;
    let floor = denom_floor(tape.value(loss).item()?);
    let grads = tape.backward(loss)?;

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::inference();
        let (loss, _) = f(&mut tape, m)?;
        tape.value(loss).item()
    };

    let mut shapes = Vec::new();
    module.visit("", &mut |_, t| shapes.push(t.len()));
    assert_eq!(
        shapes.len(),
        vars.len(),
        "closure must return one leaf per parameter"
    );

    let mut probe = module.clone();
    let mut max_rel_error = Vec::with_capacity(shapes.len());
    for (k, (&len, &var)) in shapes.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(var);
        let mut worst = 0.0f64;
        for idx in 0..len {
            let nudge = |m: &mut M, delta: f64| {
                let mut i = 0;
                m.visit_mut("", &mut |_, t| {
                    if i == k {
                        t.data_mut()[idx] += delta;
                    }
                    i += 1;
                });
            };
            let orig = probe.clone();
            nudge(&mut probe, step);
            let plus = eval(&probe)?;
            probe = orig.clone();
            nudge(&mut probe, -step);
            let minus = eval(&probe)?;
            probe = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error,
        tolerance: tol,
    })
}
