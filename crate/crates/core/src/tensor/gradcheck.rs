//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of one gradient check: the worst element across all inputs.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub h: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} (input {}, element {}) h={:.1e} tol={:.1e}",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_input,
            self.worst_element,
            self.h,
            self.tol
        )
    }
}

/// Compare analytic gradients of a scalar-valued tensor function against
/// central finite differences, for every element of every input.
///
/// The function must be deterministic and twice differentiable at the probe
/// point; callers are expected to sample inputs away from relu/max kinks.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t, true))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe
            .iter()
            .map(|t| tape.leaf(t, false))
            .collect::<Result<_>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.data(out)[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
        h,
        tol,
        pass: true,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            probe[pi].data_mut()[ei] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = pi;
                report.worst_element = ei;
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, tol)
}
