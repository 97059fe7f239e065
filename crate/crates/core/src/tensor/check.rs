//! Central finite-difference gradient checks for functions built on a tape.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing one analytic derivative with its numeric estimate.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradComparison {
    /// `|a - n| / (|a| + |n|)`; zero when both vanish.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs() + self.numeric.abs();
        if denom == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }
}

fn eval<F>(params: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Analytic gradients of the scalar `f` at `params`.
pub fn analytic_grads<F>(params: &[Tensor<f64>], f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

/// Every coordinate of every parameter, one central difference each.
pub fn check_elementwise<F>(params: &[Tensor<f64>], f: F, step: f64) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic_grads(params, &f)?;
    let mut out = Vec::new();
    for (p, g) in grads.iter().enumerate() {
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p].data_mut()[i] += step;
            let mut minus = params.to_vec();
            minus[p].data_mut()[i] -= step;
            let numeric = (eval(&plus, &f)? - eval(&minus, &f)?) / (2.0 * step);
            out.push(GradComparison {
                param: p,
                analytic: g.data()[i],
                numeric,
            });
        }
    }
    Ok(out)
}

/// One random unit direction per parameter tensor; compares the directional
/// derivative `∇f · v` with `(f(θ + hv) - f(θ - hv)) / 2h`.
pub fn check_directional<F, R>(
    params: &[Tensor<f64>],
    f: F,
    step: f64,
    rng: &mut R,
) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let grads = analytic_grads(params, &f)?;
    let mut out = Vec::with_capacity(params.len());
    for (p, g) in grads.iter().enumerate() {
        let mut dir: Vec<f64> = (0..params[p].len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let analytic = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let shifted = |sign: f64| {
            let mut ps = params.to_vec();
            ps[p]
                .data_mut()
                .iter_mut()
                .zip(&dir)
                .for_each(|(x, d)| *x += sign * step * d);
            eval(&ps, &f)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);
        out.push(GradComparison {
            param: p,
            analytic,
            numeric,
        });
    }
    Ok(out)
}

/// Norm-relative error `‖a - n‖ / (‖a‖ + ‖n‖)` over all comparisons for one
/// parameter; zero when both vectors vanish.
pub fn tensor_rel_error(cmp: &[GradComparison], param: usize) -> f64 {
    let (mut diff, mut a, mut n) = (0.0, 0.0, 0.0);
    for c in cmp.iter().filter(|c| c.param == param) {
        diff += (c.analytic - c.numeric).powi(2);
        a += c.analytic * c.analytic;
        n += c.numeric * c.numeric;
    }
    let denom = a.sqrt() + n.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
