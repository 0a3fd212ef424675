use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Gradients smaller than this are compared in absolute terms: the
/// relative error denominator is `max(|analytic|, |numeric|, GRADCHECK_FLOOR)`.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
    /// A jump between the one-sided slopes larger than
    /// `kink_tolerance · (|central| + GRADCHECK_FLOOR)` is reported as a
    /// non-differentiable point.
    pub kink_tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_entries_per_input: None,
            seed: 0,
            kink_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central finite differences at `inputs` and returns the largest relative
/// error.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(shape_err("gradcheck", "function must return a scalar"));
    }
    let f0 = tape.scalar(out);
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let h = opts.step;
    let mut probe = inputs.clone();
    for (which, var) in vars.iter().enumerate() {
        let len = inputs[which].len();
        let analytic = tape.grad(*var).unwrap_or_else(|| vec![0.0; len]);
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(k) if k < len => rand::seq::index::sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for idx in entries {
            let x0 = inputs[which].data[idx];
            probe[which].data[idx] = x0 + h;
            let fp = evaluate(&f, &probe)?;
            probe[which].data[idx] = x0 - h;
            let fm = evaluate(&f, &probe)?;
            probe[which].data[idx] = x0;

            let central = (fp - fm) / (2.0 * h);
            let left = (f0 - fm) / h;
            let right = (fp - f0) / h;
            if !central.is_finite() {
                return Err(Error::NonFinite("gradcheck finite difference"));
            }
            if (right - left).abs() > opts.kink_tolerance * (central.abs() + GRADCHECK_FLOOR) {
                return Err(Error::NonDifferentiable {
                    input: which,
                    index: idx,
                    left,
                    right,
                });
            }
            let a = analytic[idx];
            let denom = a.abs().max(central.abs()).max(GRADCHECK_FLOOR);
            let rel = (a - central).abs() / denom;
            report.entries_checked += 1;
            if report.entries_checked == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = which;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = central;
            }
        }
    }
    Ok(report)
}
