use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::{rng, Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Step is `step * max(1, |x|)`.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-6,
        }
    }
}

/// Worst disagreement for one input block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| b.max_rel_error >= self.tolerance)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<32} n={:<6} max_rel={:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                b.name, b.checked, b.max_rel_error, b.worst_index, b.analytic, b.numeric
            )?;
        }
        write!(f, "overall max_rel={:.3e} tolerance={:.1e}", self.max_rel_error(), self.tolerance)
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` with `h = step * max(1, |x_i|)`.
pub fn central_difference<F>(mut f: F, x: &mut [f64], i: usize, step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let x0 = x[i];
    let h = step * x0.abs().max(1.0);
    x[i] = x0 + h;
    let fp = f(x)?;
    x[i] = x0 - h;
    let fm = f(x)?;
    x[i] = x0;
    for (v, side) in [(fp, "+h"), (fm, "-h")] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: format!("objective at coordinate {i} ({side})"),
            });
        }
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Largest `|a - n| / max(|a|, |n|, floor)` and its index.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let e = (a - n).abs() / denom;
        if e > worst.0 || e.is_nan() {
            worst = (if e.is_nan() { f64::INFINITY } else { e }, i);
        }
    }
    worst
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Option<Vec<f64>>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite { location: "objective".into() });
    }
    let mut g = tape.backward(out)?;
    let grads = vars.iter().map(|v| g.take(*v)).collect();
    Ok((v, grads))
}

fn value_only<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn check_finite(name: &str, grad: &[f64]) -> Result<()> {
    if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("gradient of {name} at index {i}"),
        });
    }
    Ok(())
}

/// Compare every partial derivative of a scalar tape function against
/// central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input {i}")).collect();
    grad_check_named(f, inputs, &names, opts)
}

pub(crate) fn grad_check_named<F>(f: F, inputs: &[Tensor<f64>], names: &[String], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, grads) = eval(&f, inputs)?;
    let mut work = inputs.to_vec();
    let mut blocks = Vec::with_capacity(inputs.len());
    for (b, grad) in grads.iter().enumerate() {
        let analytic = grad.clone().unwrap_or_else(|| vec![0.0; inputs[b].len()]);
        check_finite(&names[b], &analytic)?;
        let mut x = inputs[b].data().to_vec();
        let mut numeric = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let shape = inputs[b].shape().to_vec();
            let n = central_difference(
                |xs| {
                    work[b] = Tensor::new(shape.clone(), xs.to_vec())?;
                    value_only(&f, &work)
                },
                &mut x,
                i,
                opts.step,
            )
            .map_err(|e| locate(e, &names[b]))?;
            numeric.push(n);
        }
        work[b] = inputs[b].clone();
        let (err, idx) = compare_gradients(&analytic, &numeric, opts.floor);
        blocks.push(BlockReport {
            name: names[b].clone(),
            checked: x.len(),
            max_rel_error: err,
            worst_index: idx,
            analytic: analytic.get(idx).copied().unwrap_or(0.0),
            numeric: numeric.get(idx).copied().unwrap_or(0.0),
        });
    }
    Ok(GradReport {
        blocks,
        tolerance: opts.tolerance,
    })
}

fn locate(e: Error, name: &str) -> Error {
    match e {
        Error::NonFinite { location } => Error::NonFinite {
            location: format!("{location} of {name}"),
        },
        other => other,
    }
}

/// Check `grad . u` against a central difference along random unit
/// directions `u`, one block at a time.
///
/// Costs two evaluations per direction instead of two per coordinate, which
/// keeps large parameter blocks tractable.
pub fn directional_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    names: &[String],
    directions: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if names.len() != inputs.len() {
        return Err(Error::dim("directional_check names", inputs.len(), names.len()));
    }
    let (_, grads) = eval(&f, inputs)?;
    let mut rng = rng::rng(seed);
    let mut work = inputs.to_vec();
    let mut blocks = Vec::with_capacity(inputs.len());
    for (b, grad) in grads.iter().enumerate() {
        let analytic_grad = grad.clone().unwrap_or_else(|| vec![0.0; inputs[b].len()]);
        check_finite(&names[b], &analytic_grad)?;
        let base = inputs[b].data();
        let scale = base.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let h = opts.step * scale;
        let mut analytic = Vec::with_capacity(directions);
        let mut numeric = Vec::with_capacity(directions);
        for _ in 0..directions {
            let mut u: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|v| *v /= norm);
            analytic.push(analytic_grad.iter().zip(&u).map(|(g, d)| g * d).sum::<f64>());
            let mut side = |sign: f64| -> Result<f64> {
                let xs = base.iter().zip(&u).map(|(x, d)| x + sign * h * d).collect();
                work[b] = Tensor::new(inputs[b].shape().to_vec(), xs)?;
                let v = value_only(&f, &work)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        location: format!("objective along a direction of {}", names[b]),
                    });
                }
                Ok(v)
            };
            let fp = side(1.0)?;
            let fm = side(-1.0)?;
            numeric.push((fp - fm) / (2.0 * h));
        }
        work[b] = inputs[b].clone();
        let (err, idx) = compare_gradients(&analytic, &numeric, opts.floor);
        blocks.push(BlockReport {
            name: names[b].clone(),
            checked: directions,
            max_rel_error: err,
            worst_index: idx,
            analytic: analytic.get(idx).copied().unwrap_or(0.0),
            numeric: numeric.get(idx).copied().unwrap_or(0.0),
        });
    }
    Ok(GradReport {
        blocks,
        tolerance: opts.tolerance,
    })
}
