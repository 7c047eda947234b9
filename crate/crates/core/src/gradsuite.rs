//! The full finite-difference suite run by `julkit gradcheck`: every
//! differentiable op and the composite training losses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaat::{adaat_apply, squash_params};
use crate::diffcore::{
    analytic_gradients, gradcheck, gradcheck_coords, straddles_kink, Coords, Graph, Reduce, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::histmatch::{loss_un2, soft_histogram, HistogramSpec};
use crate::lossstack::{
    lsgan_discriminator_loss, lsgan_generator_loss, perception_loss, sync_loss, sync_score, FeatureExtractor, SyncNet,
};
use crate::nn::{Bound, ParamSet};
use crate::synthdata::{make_sample, Identity, Sequence};
use crate::trainer::ModelBundle;
use crate::uncertainty::{loss_un1, predicted_error_loss, uncert_forward, ErrorMap, UncertaintyNet};

/// Threshold for smooth elementary ops.
pub const SMOOTH: f64 = 1e-6;
/// Threshold for piecewise-smooth ops and composite losses.
pub const COMPOSITE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.threshold
    }
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `Σ probe ⊙ op(x)` for a unary op, so every output element carries an O(1) weight.
fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64, op: fn(&Graph, Var) -> Result<Var>) -> Result<f64> {
    let x = uniform(rng, &[3, 4], lo, hi);
    probed(rng, &[x], 1e-5, |g, v| op(g, v[0]))
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[3, 4], 0.5, 1.5);
    let s = Tensor::scalar(rng.gen_range(0.5..1.5));
    let probe = uniform(rng, &[3, 4], -1.0, 1.0);
    let full = gradcheck(|g, v| Ok(g.sum(g.mul(op(g, v[0], v[1])?, g.constant(probe.clone()))?)), &[a.clone(), b], 1e-6)?;
    let broadcast = gradcheck(|g, v| Ok(g.sum(g.mul(op(g, v[0], v[1])?, g.constant(probe.clone()))?)), &[a, s], 1e-6)?;
    Ok(full.max(broadcast))
}

fn probed(rng: &mut ChaCha8Rng, inputs: &[Tensor], step: f64, f: impl Fn(&Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let shape = g.shape(f(&g, &vars)?);
    let probe = uniform(rng, &shape, -1.0, 1.0);
    gradcheck(|g, v| Ok(g.sum(g.mul(f(g, v)?, g.constant(probe.clone()))?)), inputs, step)
}

/// Check a scalar loss at every coordinate with gradient above `min`, skipping kinks.
fn subset(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    step: f64,
    min: f64,
    f: impl Fn(&Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let coords = sample_coords(&f, inputs, usize::MAX, min, step, rng)?;
    check_nonempty(f, inputs, step, coords)
}

/// A subset check that found nothing to compare must not pass.
fn check_nonempty(
    f: impl Fn(&Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    step: f64,
    coords: Vec<(usize, usize)>,
) -> Result<f64> {
    if coords.is_empty() {
        return Err(Error::Domain("no coordinate qualified for the finite-difference check".into()));
    }
    gradcheck_coords(f, inputs, step, &Coords::Subset(coords))
}

/// Like [`probed`], restricted to coordinates whose gradient exceeds `min` and whose
/// stencil does not straddle a kink.
fn probed_subset(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    step: f64,
    min: f64,
    f: impl Fn(&Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let shape = g.shape(f(&g, &vars)?);
    let probe = uniform(rng, &shape, -1.0, 1.0);
    let loss = |g: &Graph, v: &[Var]| Ok(g.sum(g.mul(f(g, v)?, g.constant(probe.clone()))?));
    let coords = sample_coords(&loss, inputs, usize::MAX, min, step, rng)?;
    check_nonempty(loss, inputs, step, coords)
}

/// Up to `n` random coordinates whose analytic gradient exceeds `min` in magnitude
/// and whose finite-difference stencil does not straddle a kink.
pub fn sample_coords<F>(
    f: &F,
    inputs: &[Tensor],
    n: usize,
    min: f64,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(f, inputs)?;
    let mut eligible: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.data().iter().enumerate().filter(|(_, x)| x.abs() > min).map(move |(j, _)| (i, j)))
        .collect();
    eligible.shuffle(rng);
    let mut out = Vec::new();
    for c in eligible {
        if out.len() == n {
            break;
        }
        if !straddles_kink(f, inputs, c, step, 5e-5)? {
            out.push(c);
        }
    }
    Ok(out)
}

fn checks() -> Vec<(&'static str, f64, CheckFn)> {
    vec![
        ("add", SMOOTH, |r| binary(r, |g, a, b| g.add(a, b))),
        ("sub", SMOOTH, |r| binary(r, |g, a, b| g.sub(a, b))),
        ("mul", SMOOTH, |r| binary(r, |g, a, b| g.mul(a, b))),
        ("div", SMOOTH, |r| binary(r, |g, a, b| g.div(a, b))),
        ("neg", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| Ok(g.neg(x)))),
        ("exp", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| Ok(g.exp(x)))),
        ("log", SMOOTH, |r| unary(r, 0.5, 2.0, |g, x| g.log(x))),
        ("sqrt", SMOOTH, |r| unary(r, 0.5, 2.0, |g, x| g.sqrt(x))),
        ("abs", SMOOTH, |r| unary(r, 0.2, 1.0, |g, x| Ok(g.abs(g.shift(x, -0.6))))),
        ("square", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| Ok(g.square(x)))),
        ("sigmoid", SMOOTH, |r| unary(r, -2.0, 2.0, |g, x| Ok(g.sigmoid(x)))),
        ("tanh", SMOOTH, |r| unary(r, -2.0, 2.0, |g, x| Ok(g.tanh(x)))),
        ("softplus", SMOOTH, |r| unary(r, -2.0, 2.0, |g, x| Ok(g.softplus(x)))),
        ("silu", SMOOTH, |r| unary(r, -2.0, 2.0, |g, x| Ok(g.silu(x)))),
        ("sin", SMOOTH, |r| unary(r, -2.0, 2.0, |g, x| Ok(g.sin(x)))),
        ("cos", SMOOTH, |r| unary(r, -2.0, 2.0, |g, x| Ok(g.cos(x)))),
        ("scale", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| Ok(g.scale(x, -2.5)))),
        ("shift", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| Ok(g.exp(g.shift(x, 0.3))))),
        ("clamp", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| Ok(g.exp(g.clamp(x, -5.0, 5.0))))),
        ("sum", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| g.reduce(Reduce::Sum, g.square(x), Some(1)))),
        ("mean", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| g.reduce(Reduce::Mean, g.square(x), Some(0)))),
        ("softmax", SMOOTH, |r| unary(r, -2.0, 2.0, |g, x| Ok(g.softmax_last(x)))),
        ("expand_last", SMOOTH, |r| unary(r, -1.0, 1.0, |g, x| g.expand_last(g.square(x), 3))),
        ("matmul", SMOOTH, |r| {
            let (a, b) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0));
            probed(r, &[a, b], 1e-6, |g, v| g.matmul(v[0], v[1]))
        }),
        ("concat", SMOOTH, |r| {
            let (a, b) = (uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0));
            probed(r, &[a, b], 1e-6, |g, v| Ok(g.square(g.concat(&[v[0], v[1]], 1)?)))
        }),
        ("slice", SMOOTH, |r| {
            let a = uniform(r, &[3, 5], -1.0, 1.0);
            probed(r, &[a], 1e-6, |g, v| Ok(g.square(g.slice(v[0], 1, 1, 3)?)))
        }),
        ("reshape", SMOOTH, |r| {
            let a = uniform(r, &[3, 4], -1.0, 1.0);
            probed(r, &[a], 1e-6, |g, v| Ok(g.square(g.reshape(v[0], &[2, 6])?)))
        }),
        ("conv2d", SMOOTH, |r| {
            let (x, k) = (uniform(r, &[2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0));
            probed(r, &[x, k], 1e-5, |g, v| g.conv2d(v[0], v[1]))
        }),
        ("conv2d_strided", SMOOTH, |r| {
            let (x, k) = (uniform(r, &[2, 6, 6], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0));
            probed(r, &[x, k], 1e-5, |g, v| g.conv2d_strided(v[0], v[1], 2))
        }),
        ("channel_bias", SMOOTH, |r| {
            let (x, b) = (uniform(r, &[2, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0));
            probed(r, &[x, b], 1e-6, |g, v| Ok(g.square(g.channel_bias(v[0], v[1])?)))
        }),
        ("avg_pool2", SMOOTH, |r| {
            let x = uniform(r, &[2, 4, 6], -1.0, 1.0);
            probed(r, &[x], 1e-6, |g, v| g.avg_pool2(v[0]))
        }),
        ("upsample2", SMOOTH, |r| {
            let x = uniform(r, &[2, 3, 2], -1.0, 1.0);
            probed(r, &[x], 1e-6, |g, v| g.upsample2(v[0]))
        }),
        ("bilinear_sample", COMPOSITE, |r| {
            let x = uniform(r, &[2, 5, 5], -1.0, 1.0);
            let grid = uniform(r, &[4, 4, 2], -0.9, 0.9);
            probed_subset(r, &[x, grid], 1e-6, 1e-8, |g, v| g.bilinear_sample(v[0], v[1]))
        }),
        ("affine_grid", SMOOTH, |r| {
            let theta = uniform(r, &[2, 6], -1.0, 1.0);
            probed(r, &[theta], 1e-6, |g, v| g.affine_grid(v[0], 3, 4))
        }),
        ("adaat", COMPOSITE, |r| {
            let feats = uniform(r, &[3, 6, 6], -1.0, 1.0);
            let raw = uniform(r, &[3, 4], -0.3, 0.3);
            probed_subset(r, &[feats, raw], 1e-6, 1e-8, |g, v| adaat_apply(g, v[0], &squash_params(g, v[1])?))
        }),
        ("soft_histogram", COMPOSITE, |r| {
            let x = uniform(r, &[40], 0.0, 0.5);
            let centers = crate::histmatch::bin_centers(x.data(), &HistogramSpec::default())?;
            probed(r, &[x], 1e-5, move |g, v| Ok(soft_histogram(g, v[0], &centers, &HistogramSpec::default())?.mass))
        }),
        ("loss_un1", COMPOSITE, |r| {
            let eps = uniform(r, &[4, 4], 0.01, 1.0);
            let tau = uniform(r, &[4, 4], -2.0, 1.0);
            gradcheck(|g, v| loss_un1(g, ErrorMap::from_var(g, v[0])?, v[1]), &[eps, tau], 1e-6)
        }),
        ("loss_un2", COMPOSITE, |r| {
            // σ inside the span of the bin centers; far outside it the kernel weights
            // underflow and the gradient drops below finite-difference resolution.
            let eps = uniform(r, &[24], 0.1, 0.5);
            let sigma = uniform(r, &[24], 0.3, 0.6);
            gradcheck(
                |g, v| loss_un2(g, ErrorMap::from_var(g, g.constant(eps.clone()))?, v[0], &HistogramSpec::default()),
                &[sigma],
                1e-5,
            )
        }),
        ("predicted_error_loss", COMPOSITE, |r| {
            let eps = uniform(r, &[4, 4], 0.0, 0.5);
            let hat = eps.map(|x| x + 0.05);
            gradcheck(|g, v| predicted_error_loss(g, v[0], ErrorMap::from_var(g, g.constant(eps.clone()))?), &[hat], 1e-6)
        }),
        ("uncertainty_net", COMPOSITE, |r| {
            let mut ps = ParamSet::new();
            let net = UncertaintyNet::new(&mut ps, "unc", 3, 8, r);
            for t in ps.tensors_mut() {
                t.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.05..0.05));
            }
            let (gen, src) = (uniform(r, &[3, 4, 4], 0.0, 1.0), uniform(r, &[3, 4, 4], 0.0, 1.0));
            let inputs: Vec<Tensor> = ps.tensors().to_vec();
            probed(r, &inputs, 1e-6, |g, v| {
                let p = Bound::from_vars(v.to_vec());
                let out = uncert_forward(g, &net, &p, g.constant(gen.clone()), g.constant(src.clone()))?;
                g.add(out.predicted_error, out.log_uncertainty)
            })
        }),
        ("perception_loss", COMPOSITE, |r| {
            let fx = FeatureExtractor::new(3, 3);
            let (gen, truth) = (uniform(r, &[3, 8, 8], 0.0, 1.0), uniform(r, &[3, 8, 8], 0.0, 1.0));
            subset(r, &[gen], 1e-5, 1e-5, |g, v| perception_loss(g, v[0], &truth, &fx))
        }),
        ("lsgan_generator", COMPOSITE, |r| {
            let d = uniform(r, &[6], -1.0, 2.0);
            gradcheck(|g, v| Ok(lsgan_generator_loss(g, v[0])), &[d], 1e-6)
        }),
        ("lsgan_discriminator", COMPOSITE, |r| {
            let (a, b) = (uniform(r, &[6], -1.0, 2.0), uniform(r, &[6], -1.0, 2.0));
            gradcheck(|g, v| lsgan_discriminator_loss(g, v[0], v[1]), &[a, b], 1e-6)
        }),
        ("sync_loss", COMPOSITE, |r| {
            let mut ps = ParamSet::new();
            let net = SyncNet::new(&mut ps, "sync", 9, [3, 4, 8], r);
            let window = uniform(r, &[9], 0.1, 0.9);
            let crop = uniform(r, &[3, 4, 8], 0.0, 1.0);
            gradcheck(
                |g, v| {
                    let p = ps.bind(g, false);
                    Ok(sync_loss(g, sync_score(g, &net, &p, g.constant(window.clone()), v[0])?))
                },
                &[crop],
                1e-6,
            )
        }),
        ("generator_end_to_end", COMPOSITE, |r| {
            let mut bundle = ModelBundle::new(r.gen());
            for t in bundle.gen_params.tensors_mut() {
                if t.data().iter().all(|&x| x == 0.0) {
                    t.data_mut().iter_mut().for_each(|x| *x = r.gen_range(-0.5..0.5));
                }
            }
            let seq = Sequence::render(Identity::new(r.gen()), 20);
            let sample = make_sample(&seq, 10, r)?;
            let gen = bundle.generator.clone();
            let f = |g: &Graph, v: &[Var]| {
                let p = Bound::from_vars(v.to_vec());
                Ok(g.mean(gen.forward(g, &p, (&sample).into())?))
            };
            let inputs = bundle.gen_params.tensors().to_vec();
            // Weights with gradients under 1e-5 are below finite-difference resolution
            // for a loss that sums ~3000 outputs.
            let coords = sample_coords(&f, &inputs, 100, 1e-5, 1e-5, r)?;
            gradcheck_coords(f, &inputs, 1e-5, &Coords::Subset(coords))
        }),
    ]
}

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    checks().into_iter().map(|c| c.0).collect()
}

/// Run every check with a fixed seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    checks()
        .into_iter()
        .map(|(op, threshold, f)| Ok(CheckResult { op: op.to_string(), error: f(&mut rng)?, threshold }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::inject_backward_fault;

    #[test]
    fn passes_across_seeds() {
        for seed in 0..20 {
            for r in run_suite(seed).unwrap() {
                assert!(r.passed(), "seed {seed}: {} {:e} ≥ {:e}", r.op, r.error, r.threshold);
            }
        }
    }

    #[test]
    fn fault_in_exp_is_reported() {
        inject_backward_fault(Some("exp"));
        let results = run_suite(3);
        inject_backward_fault(None);
        let results = results.unwrap();
        let exp = results.iter().find(|r| r.op == "exp").unwrap();
        assert!(!exp.passed());
        assert!(results.iter().find(|r| r.op == "add").unwrap().passed());
    }
}
