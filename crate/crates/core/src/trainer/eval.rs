//! Held-out evaluation: image quality, lip-sync error, and uncertainty quality.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::histmatch::{loss_un2, HistogramSpec};
use crate::synthdata::{make_sample, oracle_mouth_opening, FrameSample, Identity, Sequence};
use crate::uncertainty::{error_map, uncert_forward, ErrorMap};

use super::model::ModelBundle;

/// PSNR reported when the mean squared error is below `1e-10`.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub step: usize,
    pub psnr: f64,
    pub l1: f64,
    pub sync_mae: f64,
    /// Absent when the uncertainty losses are disabled.
    pub uncert_corr: Option<f64>,
    pub hist_kl: Option<f64>,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "step,psnr,l1,sync_mae,uncert_corr,hist_kl";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.8},{:.8},{},{}",
            self.step,
            self.psnr,
            self.l1,
            self.sync_mae,
            opt(self.uncert_corr),
            opt(self.hist_kl)
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {:>5}  psnr {:6.2}  l1 {:.4}  sync_mae {:.3}", self.step, self.psnr, self.l1, self.sync_mae)?;
        if let Some(c) = self.uncert_corr {
            write!(f, "  corr {c:.3}")?;
        }
        if let Some(k) = self.hist_kl {
            write!(f, "  kl {k:.5}")?;
        }
        Ok(())
    }
}

/// `10·log10(1/MSE)` for images in `[0,1]`, capped at [`PSNR_CAP`].
pub fn psnr(generated: &Tensor, truth: &Tensor) -> f64 {
    let mse = generated.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth.len() as f64;
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Fixed evaluation samples for one identity.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub identity: Identity,
    pub samples: Vec<FrameSample>,
}

impl EvalSet {
    /// Every frame of `seq`, with references drawn from a generator seeded by `seed`.
    pub fn new(seq: &Sequence, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..seq.len()).map(|t| make_sample(seq, t, &mut rng)).collect::<Result<_>>()?;
        Ok(EvalSet { identity: seq.identity.clone(), samples })
    }
}

/// Per-frame outputs that the metrics are computed from.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub generated: Tensor,
    /// `[H,W]`
    pub sigma: Tensor,
    /// `[H,W]`
    pub error: Tensor,
}

/// Forward one sample through the generator and uncertainty net.
pub fn frame_output(bundle: &ModelBundle, sample: &FrameSample) -> Result<FrameOutput> {
    let g = Graph::new();
    let gp = bundle.gen_params.bind(&g, false);
    let up = bundle.unc_params.bind(&g, false);
    let gen = bundle.generator.forward(&g, &gp, sample.into())?;
    let truth = g.constant(sample.truth.clone());
    let eps = error_map(&g, gen, truth)?;
    let source = g.constant(sample.source.clone());
    let out = uncert_forward(&g, &bundle.uncertainty, &up, gen, source)?;
    let sigma = out.sigma(&g);
    Ok(FrameOutput {
        generated: (*g.value(gen)).clone(),
        sigma: (*g.value(sigma)).clone(),
        error: (*g.value(eps.var())).clone(),
    })
}

/// Run [`frame_output`] over the set on `threads` workers; order is preserved.
pub fn frame_outputs(bundle: &ModelBundle, set: &EvalSet, threads: usize) -> Result<Vec<FrameOutput>> {
    if threads <= 1 {
        return set.samples.iter().map(|s| frame_output(bundle, s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| set.samples.par_iter().map(|s| frame_output(bundle, s)).collect())
}

/// Metrics over already computed outputs.
pub fn compute_metrics(
    step: usize,
    outputs: &[FrameOutput],
    set: &EvalSet,
    spec: &HistogramSpec,
    with_uncertainty: bool,
) -> Result<Metrics> {
    if outputs.is_empty() || outputs.len() != set.samples.len() {
        return Err(Error::config("eval", "empty or mismatched evaluation set"));
    }
    let n = outputs.len() as f64;
    let mut psnr_sum = 0.0;
    let mut l1_sum = 0.0;
    let mut sync_sum = 0.0;
    for (o, s) in outputs.iter().zip(&set.samples) {
        psnr_sum += psnr(&o.generated, &s.truth);
        l1_sum += o.generated.data().iter().zip(s.truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / s.truth.len() as f64;
        let mouth = oracle_mouth_opening(&o.generated, &set.identity);
        sync_sum += (mouth - oracle_mouth_opening(&s.truth, &set.identity)).abs();
    }
    let (uncert_corr, hist_kl) = if with_uncertainty {
        let sigma: Vec<f64> = outputs.iter().flat_map(|o| o.sigma.data().iter().copied()).collect();
        let eps: Vec<f64> = outputs.iter().flat_map(|o| o.error.data().iter().copied()).collect();
        let corr = spearman(&sigma, &eps);
        let g = Graph::new();
        let e = ErrorMap::from_var(&g, g.constant(Tensor::from_vec(eps)))?;
        let s = g.constant(Tensor::from_vec(sigma));
        (Some(corr), Some(g.item(loss_un2(&g, e, s, spec)?)?))
    } else {
        (None, None)
    };
    Ok(Metrics { step, psnr: psnr_sum / n, l1: l1_sum / n, sync_mae: sync_sum / n, uncert_corr, hist_kl })
}

pub fn evaluate(
    step: usize,
    bundle: &ModelBundle,
    set: &EvalSet,
    spec: &HistogramSpec,
    with_uncertainty: bool,
    threads: usize,
) -> Result<Metrics> {
    let outputs = frame_outputs(bundle, set, threads)?;
    compute_metrics(step, &outputs, set, spec, with_uncertainty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> EvalSet {
        let seq = Sequence::render(Identity::new(1), 16);
        EvalSet::new(&seq, 0).unwrap()
    }

    #[test]
    fn perfect_output() {
        let set = set();
        let outputs: Vec<FrameOutput> = set
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let e = Tensor::new(&[32, 32], (0..1024).map(|k| ((k * 7 + i) % 13) as f64 / 50.0).collect()).unwrap();
                FrameOutput { generated: s.truth.clone(), sigma: e.clone(), error: e }
            })
            .collect();
        let m = compute_metrics(0, &outputs, &set, &HistogramSpec::default(), true).unwrap();
        assert_eq!(m.psnr, 99.0);
        assert_eq!(m.l1, 0.0);
        assert_eq!(m.sync_mae, 0.0);
        assert!((m.uncert_corr.unwrap() - 1.0).abs() < 1e-12);
        assert!(m.hist_kl.unwrap() < 1e-6);
    }

    #[test]
    fn psnr_of_known_mse() {
        let truth = Tensor::full(&[3, 4, 4], 0.5);
        assert!((psnr(&truth.map(|x| x + 0.1), &truth) - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&truth, &truth), 99.0);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&a, &[2.0, 4.0, 8.0, 16.0, 32.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Σd² = 2 for one adjacent swap: ρ = 1 − 6·2/(5·24) = 0.9
        assert!((spearman(&a, &[1.0, 3.0, 2.0, 4.0, 5.0]) - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&a, &[1.0; 5]), 0.0);
    }

    #[test]
    fn empty_set_rejected() {
        let set = EvalSet { identity: Identity::new(0), samples: vec![] };
        assert!(matches!(compute_metrics(0, &[], &set, &HistogramSpec::default(), false), Err(Error::Config { .. })));
    }

    #[test]
    fn csv_row_leaves_absent_fields_empty() {
        let m = Metrics { step: 50, psnr: 20.0, l1: 0.1, sync_mae: 1.5, uncert_corr: None, hist_kl: None };
        assert_eq!(m.csv_row(), "50,20.00000000,0.10000000,1.50000000,,");
    }

    #[test]
    fn parallel_matches_serial() {
        let set = set();
        let bundle = ModelBundle::new(3);
        let spec = HistogramSpec::default();
        let a = evaluate(0, &bundle, &set, &spec, true, 1).unwrap();
        let b = evaluate(0, &bundle, &set, &spec, true, 3).unwrap();
        assert_eq!(a, b);
    }
}
