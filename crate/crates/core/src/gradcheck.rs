//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`.
    /// Zero when both gradients are below the round-off floor of the difference quotient.
    pub max_rel_error: Vec<f64>,
    /// Per input: probes dropped because a kink lies within `eps` of the point.
    pub skipped: Vec<usize>,
    /// Per input: probes actually compared.
    pub probed: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_skipped(&self) -> usize {
        self.skipped.iter().sum()
    }

    pub fn total_probed(&self) -> usize {
        self.probed.iter().sum()
    }
}

/// Compares analytic and central-difference gradients of the scalar function
/// `f` at `inputs`, checking every element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, tol, usize::MAX, 0)
}

/// As [`grad_check`], but probes at most `max_probes` randomly chosen elements
/// per input (chosen by `seed`).
///
/// Each probe also takes a central difference at `eps / 2`. When the two
/// quotients disagree by more than `tol` the function is not smooth on
/// `[x - eps, x + eps]` (a ReLU or interpolation kink), so the quotient is
/// no oracle there; the probe is skipped and replaced by another element.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument("grad_check needs a scalar-valued function".into()));
    }
    let f0 = tape.value(out).item()?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    // round-off in (f(x+e) - f(x-e)) / 2e
    let noise = 1e3 * f64::EPSILON * f0.abs().max(1.0) / eps;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: Vec::with_capacity(inputs.len()),
        skipped: Vec::with_capacity(inputs.len()),
        probed: Vec::with_capacity(inputs.len()),
        tolerance: tol,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let order: Vec<usize> =
            if n <= max_probes { (0..n).collect() } else { sample(&mut rng, n, n).into_vec() };
        let mut quotient = |j: usize, h: f64| -> Result<f64> {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = evaluate(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = evaluate(&probe)?;
            probe[i].data_mut()[j] = x;
            Ok((up - down) / (2.0 * h))
        };
        let (mut worst_diff, mut scale) = (0.0f64, 0.0f64);
        let (mut probed, mut skipped) = (0usize, 0usize);
        for j in order {
            if probed == max_probes {
                break;
            }
            let numeric = quotient(j, eps)?;
            let half = quotient(j, eps / 2.0)?;
            if (numeric - half).abs() > tol * numeric.abs().max(half.abs()).max(noise) {
                skipped += 1;
                continue;
            }
            let a = analytic[i].data()[j];
            worst_diff = worst_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            probed += 1;
        }
        report.max_rel_error.push(if scale > noise { worst_diff / scale } else { 0.0 });
        report.skipped.push(skipped);
        report.probed.push(probed);
    }
    Ok(report)
}
