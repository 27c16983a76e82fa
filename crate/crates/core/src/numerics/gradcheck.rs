//! Central finite-difference gradient checking.
//!
//! The check only calls the forward function, so it stays independent of the
//! backward rules it is used to verify.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst elementwise disagreement found by [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-3)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks `d f / d inputs` at every coordinate.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    gradcheck_subset(f, inputs, &all, h)
}

/// Checks only the listed coordinates of each input.
pub fn gradcheck_subset<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[Vec<usize>],
    h: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, idxs) in coords.iter().enumerate() {
        for &j in idxs {
            let orig = work[which].data()[j];
            work[which].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[which].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[which][j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || !e.is_finite() {
                report.max_rel_err = e;
                report.worst_input = which;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Scalar probe `Σ r_i · out_i` with fixed pseudo-random weights, so every
/// output coordinate contributes a distinct amount to the checked gradient.
pub fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| {
        let x = ((i as f64 + 1.0) * 0.618_033_988_75).fract();
        x - 0.37
    });
    debug_assert_eq!(w.numel(), n);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}
