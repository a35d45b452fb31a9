use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::numerics::Rng;

/// Finite-difference scheme and error metric for [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub h: f64,
    /// Use `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h))/12h` instead of
    /// `(f(x+h) − f(x−h))/2h`.
    pub fourth_order: bool,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
}

impl CheckOptions {
    pub fn central(h: f64) -> Self {
        Self { h, fourth_order: false, floor: 1e-8 }
    }
}

/// Result of a central-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Inputs skipped because they do not require gradients.
    pub skipped: Vec<usize>,
    /// Coordinate with the largest error.
    pub worst: Option<Mismatch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients of the scalar function `f` against central
/// differences `(f(x+h) − f(x−h))/2h` on up to `coords` random coordinates of
/// every input that requires gradients. The relative error of a coordinate
/// uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[(Tensor, bool)], h: f64, coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, CheckOptions::central(h), coords, seed)
}

pub fn grad_check_with<F>(f: F, inputs: &[(Tensor, bool)], opts: CheckOptions, coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let CheckOptions { h, fourth_order, floor } = opts;
    if !(h > 0.0) || !(floor >= 0.0) {
        bail!(InvalidArgument, "step must be positive and the floor non-negative");
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().zip(inputs).map(|(t, (_, rg))| g.leaf(t.clone(), *rg)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(t, rg)| g.leaf(t.clone(), *rg)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = Rng::new(seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, skipped: Vec::new(), worst: None };
    for (idx, &v) in vars.iter().enumerate() {
        let Some(analytic) = g.grad(v) else {
            report.skipped.push(idx);
            continue;
        };
        let n = analytic.numel();
        let picks: Vec<usize> = if n <= coords { (0..n).collect() } else { (0..coords).map(|_| rng.index(n)).collect() };
        for j in picks {
            let orig = values[idx].data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                values[idx].data_mut()[j] = orig + dx;
                eval(&values)
            };
            let numeric = if fourth_order {
                let (f2, f1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
                (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            values[idx].data_mut()[j] = orig;
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(Mismatch { input: idx, index: j, analytic: a, numeric });
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
