//! Differentiable histograms and KL matching of the uncertainty distribution
//! to the error distribution.
//!
//! Bin centers run from the error mean `u` to `u + α_m·s` (`s` the population
//! standard deviation). Each value votes for bin `j` with the Gaussian kernel
//! weight `w_j(v) = λ_w1·exp(−(c_j − v)²/λ_w2)`; the votes are softmax
//! normalised per value and averaged into `H(j)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Reduce, Tensor, Var};
use crate::error::{Error, Result};
use crate::uncertainty::ErrorMap;

/// Lower bound on the error standard deviation used for bin placement.
pub const STD_FLOOR: f64 = 1e-8;

/// Floor applied to histogram masses inside the KL logarithm.
pub const MASS_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Linear,
    Logarithmic,
}

/// Bin construction and kernel policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSpec {
    /// Total number of centers `B` (indices `0..=m`, `m = B − 1`).
    pub bin_count: usize,
    pub alpha_max: f64,
    pub spacing: Spacing,
    /// `λ_w1`.
    pub kernel_scale: f64,
    /// `λ_w2`; `None` ties it to the center span as `2·(B_m − B_0)²`.
    pub kernel_bandwidth: Option<f64>,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bin_count: 11,
            alpha_max: 3.0,
            spacing: Spacing::Linear,
            kernel_scale: 10.0,
            kernel_bandwidth: None,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bin_count < 2 {
            return Err(Error::config("hist.bin_count", "must be at least 2"));
        }
        if !(self.alpha_max > 0.0) {
            return Err(Error::config("hist.alpha_max", "must be positive"));
        }
        if !(self.kernel_scale > 0.0) {
            return Err(Error::config("hist.kernel_scale", "must be positive"));
        }
        if let Some(b) = self.kernel_bandwidth {
            if !(b > 0.0) {
                return Err(Error::config("hist.kernel_bandwidth", "must be positive"));
            }
        }
        Ok(())
    }

    /// `λ_w2` for a given set of centers.
    pub fn bandwidth(&self, centers: &Tensor) -> f64 {
        self.kernel_bandwidth.unwrap_or_else(|| {
            let c = centers.data();
            let span = c[c.len() - 1] - c[0];
            2.0 * span * span
        })
    }
}

/// Centers plus their (differentiable) masses.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub centers: Tensor,
    pub mass: Var,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Bin centers from error statistics. Constants: no gradient flows through them.
pub fn bin_centers(values: &[f64], spec: &HistogramSpec) -> Result<Tensor> {
    if values.is_empty() {
        return Err(Error::shape("bin_centers of an empty population"));
    }
    spec.validate()?;
    let (mean, std) = mean_std(values);
    let std = if std < STD_FLOOR { STD_FLOOR } else { std };
    let m = spec.bin_count - 1;
    let span = spec.alpha_max * std;
    let mut centers: Vec<f64> = (0..=m)
        .map(|j| {
            if j == 0 {
                return mean;
            }
            let offset = match spec.spacing {
                Spacing::Linear => span * j as f64 / m as f64,
                Spacing::Logarithmic => span * 10f64.powi(j as i32 - m as i32),
            };
            mean + offset
        })
        .collect();
    // Offsets below the resolution of `mean` would collapse neighbours.
    for j in 1..centers.len() {
        if centers[j] <= centers[j - 1] {
            centers[j] = centers[j - 1].next_up();
        }
    }
    Ok(Tensor::from_vec(centers))
}

/// Kernel weights `[n, B]` of every value against every center.
pub fn soft_weights(g: &Graph, values: Var, centers: &Tensor, spec: &HistogramSpec) -> Result<Var> {
    let n = g.value(values).len();
    let b = centers.len();
    let flat = g.reshape(values, &[n])?;
    let expanded = g.expand_last(flat, b)?;
    let tiled: Vec<f64> = (0..n).flat_map(|_| centers.data().iter().copied()).collect();
    let c = g.constant(Tensor::new(&[n, b], tiled)?);
    let d2 = g.square(g.sub(c, expanded)?);
    let w = g.exp(g.scale(d2, -1.0 / spec.bandwidth(centers)));
    Ok(g.scale(w, spec.kernel_scale))
}

/// `H(j) = (1/n) Σ_i softmax_j(w_j(v_i))`.
pub fn soft_histogram(g: &Graph, values: Var, centers: &Tensor, spec: &HistogramSpec) -> Result<Histogram> {
    let w = soft_weights(g, values, centers, spec)?;
    let p = g.softmax_last(w);
    let mass = g.reduce(Reduce::Mean, p, Some(0))?;
    Ok(Histogram { centers: centers.clone(), mass })
}

/// `Σ_j H_ref(j)·log(H_ref(j)/H(j))`, both masses floored at [`MASS_FLOOR`].
pub fn histogram_kl(g: &Graph, reference: Var, other: Var) -> Result<Var> {
    let (sr, so) = (g.shape(reference), g.shape(other));
    if sr != so {
        return Err(Error::shape(format!("histogram shapes {sr:?} vs {so:?}")));
    }
    let log_ref = g.log(g.clamp_min(reference, MASS_FLOOR))?;
    let log_other = g.log(g.clamp_min(other, MASS_FLOOR))?;
    let terms = g.mul(reference, g.sub(log_ref, log_other)?)?;
    Ok(g.sum(terms))
}

/// KL from the uncertainty histogram to the error histogram.
///
/// Both histograms share centers computed from `ε`; the error histogram is a
/// constant reference, so gradients reach `σ` only.
pub fn loss_un2(g: &Graph, eps: ErrorMap, sigma: Var, spec: &HistogramSpec) -> Result<Var> {
    let (se, ss) = (g.shape(eps.var()), g.shape(sigma));
    if se != ss {
        return Err(Error::shape(format!("loss_un2 shapes {se:?} vs {ss:?}")));
    }
    let eps_const = g.detach(eps.var());
    let centers = bin_centers(g.value(eps_const).data(), spec)?;
    let h_eps = soft_histogram(g, eps_const, &centers, spec)?;
    let h_sigma = soft_histogram(g, sigma, &centers, spec)?;
    histogram_kl(g, h_eps.mass, h_sigma.mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct scalar evaluation of the kernel weights and softmax histogram.
    fn oracle_histogram(values: &[f64], centers: &[f64], l1: f64, l2: f64) -> Vec<f64> {
        let mut h = vec![0.0; centers.len()];
        for &v in values {
            let w: Vec<f64> = centers.iter().map(|&c| l1 * (-(c - v) * (c - v) / l2).exp()).collect();
            let z: f64 = w.iter().map(|x| x.exp()).sum();
            for (hj, wj) in h.iter_mut().zip(&w) {
                *hj += wj.exp() / z;
            }
        }
        h.iter().map(|x| x / values.len() as f64).collect()
    }

    fn histogram(values: &[f64], centers: &Tensor, spec: &HistogramSpec) -> Vec<f64> {
        let g = Graph::new();
        let v = g.constant(Tensor::from_vec(values.to_vec()));
        let h = soft_histogram(&g, v, centers, spec).unwrap();
        g.value(h.mass).data().to_vec()
    }

    fn un2(eps: &[f64], sigma: &[f64], spec: &HistogramSpec) -> f64 {
        let g = Graph::new();
        let e = ErrorMap::from_var(&g, g.constant(Tensor::from_vec(eps.to_vec()))).unwrap();
        let s = g.constant(Tensor::from_vec(sigma.to_vec()));
        g.item(loss_un2(&g, e, s, spec).unwrap()).unwrap()
    }

    fn spec3() -> HistogramSpec {
        HistogramSpec { bin_count: 3, ..HistogramSpec::default() }
    }

    #[test]
    fn centers_with_floored_std() {
        let c = bin_centers(&[0.1, 0.1, 0.1], &spec3()).unwrap();
        let expect = [0.1, 0.1 + 1.5e-8, 0.1 + 3e-8];
        for (a, b) in c.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn centers_linear_from_stats() {
        // Population mean 0.1, std 0.05.
        let c = bin_centers(&[0.05, 0.15], &spec3()).unwrap();
        for (a, b) in c.data().iter().zip([0.1, 0.175, 0.25]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn centers_logarithmic() {
        let spec = HistogramSpec { bin_count: 4, alpha_max: 2.0, spacing: Spacing::Logarithmic, ..Default::default() };
        let c = bin_centers(&[0.0, 2.0], &spec).unwrap();
        // mean 1, std 1, span 2: offsets 2/100, 2/10, 2.
        for (a, b) in c.data().iter().zip([1.0, 1.02, 1.2, 3.0]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_population_rejected() {
        assert!(matches!(bin_centers(&[], &spec3()), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_at_center_and_unit_distance() {
        let spec = HistogramSpec { kernel_bandwidth: Some(1.0), kernel_scale: 1.0, ..Default::default() };
        let centers = Tensor::from_vec(vec![0.0, 1.0]);
        let g = Graph::new();
        let v = g.constant(Tensor::from_vec(vec![0.0]));
        let w = g.value(soft_weights(&g, v, &centers, &spec).unwrap());
        assert_eq!(w.shape(), &[1, 2]);
        assert_eq!(w.data()[0], 1.0);
        assert!((w.data()[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w.data()[1] - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn equidistant_values_split_evenly() {
        let centers = Tensor::from_vec(vec![0.0, 1.0]);
        let h = histogram(&[0.5, 0.5, 0.5], &centers, &HistogramSpec::default());
        assert!((h[0] - 0.5).abs() < 1e-15 && (h[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_value_matches_scalar_oracle() {
        let delta = 0.2;
        let spec = HistogramSpec { bin_count: 2, kernel_scale: 1.0, kernel_bandwidth: Some(delta * delta), ..Default::default() };
        let centers = Tensor::from_vec(vec![0.3, 0.3 + delta]);
        let h = histogram(&[0.3], &centers, &spec);
        let o = oracle_histogram(&[0.3], centers.data(), 1.0, delta * delta);
        // softmax(e^0·1, e^-1) = softmax(1, 0.3679)
        let expect0 = 1f64.exp() / (1f64.exp() + (-1f64).exp().exp());
        assert!((h[0] - expect0).abs() < 1e-15);
        for (a, b) in h.iter().zip(&o) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn random_histograms_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = HistogramSpec::default();
        let values: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..0.5)).collect();
        let centers = bin_centers(&values, &spec).unwrap();
        let h = histogram(&values, &centers, &spec);
        let o = oracle_histogram(&values, centers.data(), spec.kernel_scale, spec.bandwidth(&centers));
        for (a, b) in h.iter().zip(&o) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn default_bandwidth_follows_center_span() {
        let centers = Tensor::from_vec(vec![0.1, 0.2, 0.4]);
        assert!((HistogramSpec::default().bandwidth(&centers) - 2.0 * 0.09).abs() < 1e-15);
        let fixed = HistogramSpec { kernel_bandwidth: Some(0.5), ..Default::default() };
        assert_eq!(fixed.bandwidth(&centers), 0.5);
    }

    #[test]
    fn loss_grows_as_sigma_scales_away() {
        let spec = HistogramSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let eps: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..0.5)).collect();
            let losses: Vec<f64> = [1.0, 1.5, 2.0, 3.0]
                .iter()
                .map(|c| {
                    let g = Graph::new();
                    let e = ErrorMap::from_var(&g, g.constant(Tensor::from_vec(eps.clone()))).unwrap();
                    let s = g.constant(Tensor::from_vec(eps.iter().map(|v| c * v).collect()));
                    g.item(loss_un2(&g, e, s, &spec).unwrap()).unwrap()
                })
                .collect();
            assert!(losses[0].abs() < 1e-12);
            assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
        }
    }

    #[test]
    fn kl_of_constructed_histograms() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![0.5, 0.5]));
        let b = g.constant(Tensor::from_vec(vec![0.25, 0.75]));
        let kl = g.item(histogram_kl(&g, a, b).unwrap()).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expect).abs() < 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn identical_distributions_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..0.3)).collect();
        assert!(un2(&eps, &eps, &HistogramSpec::default()).abs() < 1e-9);
    }

    #[test]
    fn gradient_reaches_sigma_only() {
        let g = Graph::new();
        let e = g.param(Tensor::from_vec(vec![0.1, 0.2, 0.4, 0.05]));
        let s = g.param(Tensor::from_vec(vec![0.3, 0.1, 0.2, 0.2]));
        let l = loss_un2(&g, ErrorMap::from_var(&g, e).unwrap(), s, &HistogramSpec::default()).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(e).is_none());
        assert!(grads.get(s).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn un2_gradcheck_wrt_sigma() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = Tensor::from_vec((0..12).map(|_| rng.gen_range(0.0..0.4)).collect());
            let sigma = Tensor::from_vec((0..12).map(|_| rng.gen_range(0.0..0.4)).collect());
            let spec = HistogramSpec::default();
            let err = gradcheck(
                |g, v| loss_un2(g, ErrorMap::from_var(g, g.constant(eps.clone()))?, v[0], &spec),
                &[sigma],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn soft_weights_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let values = Tensor::from_vec((0..8).map(|_| rng.gen_range(0.0..0.5)).collect());
        let centers = bin_centers(values.data(), &HistogramSpec::default()).unwrap();
        let probe = Tensor::new(&[8, 11], (0..88).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = gradcheck(
            |g, v| {
                let w = soft_weights(g, v[0], &centers, &HistogramSpec::default())?;
                Ok(g.sum(g.mul(w, g.constant(probe.clone()))?))
            },
            &[values],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn centers_strictly_increase(values in prop::collection::vec(0.0f64..1.0, 1..40), b in 2usize..14, log in any::<bool>()) {
            let spec = HistogramSpec {
                bin_count: b,
                spacing: if log { Spacing::Logarithmic } else { Spacing::Linear },
                ..Default::default()
            };
            let c = bin_centers(&values, &spec).unwrap();
            prop_assert!(c.data().windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn mass_sums_to_one(values in prop::collection::vec(0.0f64..1.0, 1..60), b in 2usize..14) {
            let spec = HistogramSpec { bin_count: b, ..Default::default() };
            let centers = bin_centers(&values, &spec).unwrap();
            let h = histogram(&values, &centers, &spec);
            prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(h.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn kl_non_negative(eps in prop::collection::vec(0.0f64..1.0, 2..40), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma: Vec<f64> = eps.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
            prop_assert!(un2(&eps, &sigma, &HistogramSpec::default()) >= -1e-9);
        }
    }
}
