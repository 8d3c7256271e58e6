//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step used by the gradient checks throughout the crate.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    pub coordinates: usize,
}

/// Central-difference estimate of `d f / d inputs[which][coord]`.
pub fn numeric_partial<F>(f: &F, inputs: &[Tensor], which: usize, coord: usize, step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut probe = inputs.to_vec();
    let x0 = probe[which].data()[coord];
    probe[which].data_mut()[coord] = x0 + step;
    let plus = f(&probe)?;
    probe[which].data_mut()[coord] = x0 - step;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, over every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        coordinates: 0,
    };
    for (which, grad) in analytic.iter().enumerate() {
        for (coord, &a) in grad.iter().enumerate() {
            let n = numeric_partial(&eval, inputs, which, coord, step)?;
            let err = relative_error(a, n);
            report.coordinates += 1;
            if err > report.max_rel_err || report.coordinates == 1 {
                report.max_rel_err = err;
                report.worst = (which, coord, a, n);
            }
        }
    }
    Ok(report)
}
