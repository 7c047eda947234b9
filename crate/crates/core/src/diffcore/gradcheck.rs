//! Central finite-difference check of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates of which input to probe.
#[derive(Clone, Debug)]
pub enum Coords {
    All,
    /// `(input index, flat element index)` pairs.
    Subset(Vec<(usize, usize)>),
}

/// Max relative error between analytic and central-difference gradients of
/// the scalar function `f` at `inputs`, over every input coordinate.
///
/// Relative error is `|analytic − numeric| / max(1e-8, |numeric|)` with
/// `numeric = (f(x+h) − f(x−h)) / 2h`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    gradcheck_coords(f, inputs, step, &Coords::All)
}

pub fn gradcheck_coords<F>(f: F, inputs: &[Tensor], step: f64, coords: &Coords) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let probes: Vec<(usize, usize)> = match coords {
        Coords::All => inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect(),
        Coords::Subset(v) => v.clone(),
    };
    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (i, j) in probes {
        let t = inputs.get(i).ok_or(Error::Range { index: i, len: inputs.len() })?;
        if j >= t.len() {
            return Err(Error::Range { index: j, len: t.len() });
        }
        let x0 = t.data()[j];
        perturbed[i].data_mut()[j] = x0 + step;
        let up = evaluate(&f, &perturbed)?;
        perturbed[i].data_mut()[j] = x0 - step;
        let down = evaluate(&f, &perturbed)?;
        perturbed[i].data_mut()[j] = x0;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
        if rel.is_nan() {
            return Err(Error::Numerics { term: format!("gradcheck input {i}[{j}]") });
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_output(&g, out)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape(format!("gradcheck needs a scalar output, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Gradients of `f` at `inputs` by one backward pass.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect())
}

/// Whether `f` has a kink within `±step` of coordinate `(i, j)`: the forward and
/// backward one-sided differences disagree by more than `tol` relative to their mean.
/// Such coordinates of piecewise-smooth functions cannot be checked by central differences.
pub fn straddles_kink<F>(f: &F, inputs: &[Tensor], (i, j): (usize, usize), step: f64, tol: f64) -> Result<bool>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let t = inputs.get(i).ok_or(Error::Range { index: i, len: inputs.len() })?;
    if j >= t.len() {
        return Err(Error::Range { index: j, len: t.len() });
    }
    let mut x = inputs.to_vec();
    let f0 = evaluate(f, &x)?;
    x[i].data_mut()[j] += step;
    let up = evaluate(f, &x)?;
    x[i].data_mut()[j] -= 2.0 * step;
    let down = evaluate(f, &x)?;
    let (fwd, bwd) = ((up - f0) / step, (f0 - down) / step);
    Ok((fwd - bwd).abs() > tol * (0.5 * (fwd + bwd)).abs().max(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0, 2.5]);
        let err = gradcheck(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn exp_sum_is_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = gradcheck(|g, v| Ok(g.sum(g.exp(v[0]))), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn kink_detection() {
        let f = |g: &Graph, v: &[Var]| Ok(g.sum(g.abs(v[0])));
        let x = [Tensor::from_vec(vec![0.5, 2e-7])];
        assert!(!straddles_kink(&f, &x, (0, 0), 1e-5, 1e-2).unwrap());
        assert!(straddles_kink(&f, &x, (0, 1), 1e-5, 1e-2).unwrap());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(gradcheck(|_, v| Ok(v[0]), &[x], 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn detects_broken_backward_rule() {
        let x = Tensor::from_vec(vec![0.4, 0.9]);
        super::super::inject_backward_fault(Some("tanh"));
        let err = gradcheck(|g, v| Ok(g.sum(g.tanh(v[0]))), &[x], 1e-5).unwrap();
        super::super::inject_backward_fault(None);
        assert!(err > 0.1);
    }
}
