//! Finite-difference gradient checking.
//!
//! The oracle only ever calls the forward path: it rebuilds the graph
//! with perturbed leaf values and takes central differences, so it stays
//! independent of the backward implementation it is used to verify.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Var};

/// Outcome of a check: the worst relative error observed and where.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients of `build` (a scalar-valued graph builder)
/// against central finite differences at randomly sampled coordinates of
/// every input. `coords_per_input` coordinates are probed per input
/// array; the step is `1e-5 * max(1, |x|)` per coordinate.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Array2<f64>],
    coords_per_input: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array2<f64>]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok((g, vars, root))
    };

    let (mut g, vars, root) = eval(inputs)?;
    g.backward(root)?;
    let analytic: Vec<Array2<f64>> = vars.iter().map(|v| g.grad(*v)).collect();

    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };

    for (idx, input) in inputs.iter().enumerate() {
        let (rows, cols) = input.dim();
        if rows * cols == 0 {
            continue;
        }
        for _ in 0..coords_per_input {
            let r = rng.gen_range(0..rows);
            let c = rng.gen_range(0..cols);
            let x = input[[r, c]];
            let h = 1e-5 * x.abs().max(1.0);

            let mut plus = inputs.to_vec();
            plus[idx][[r, c]] = x + h;
            let (gp, _, rp) = eval(&plus)?;
            let f_plus = gp.scalar_value(rp);

            let mut minus = inputs.to_vec();
            minus[idx][[r, c]] = x - h;
            let (gm, _, rm) = eval(&minus)?;
            let f_minus = gm.scalar_value(rm);

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[idx][[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = idx;
                report.worst_coord = (r, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Assert helper: panics with a readable message when the check exceeds
/// `rel_tol`.
pub fn assert_gradients<F>(
    label: &str,
    build: F,
    inputs: &[Array2<f64>],
    coords_per_input: usize,
    rng: &mut ChaCha8Rng,
    rel_tol: f64,
) where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check_gradients(build, inputs, coords_per_input, rng)
        .unwrap_or_else(|e| panic!("{label}: graph construction failed: {e}"));
    assert!(
        report.max_rel_error < rel_tol,
        "{label}: gradient check failed at input {} coord {:?}: analytic {} vs numeric {} (rel {})",
        report.worst_input,
        report.worst_coord,
        report.analytic,
        report.numeric,
        report.max_rel_error
    );
}
