//! Adversarial, perceptual and sync objectives, the networks they rely on,
//! and the weighted total loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, InitKind, Linear, Mlp, ParamSet};

/// Loss weights `λ1..λ4` for the uncertainty, adversarial, perceptual and sync terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_un: f64,
    pub w_ad: f64,
    pub w_pe: f64,
    pub w_sync: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_un: 1.0, w_ad: 1.0, w_pe: 10.0, w_sync: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_un", self.w_un), ("w_ad", self.w_ad), ("w_pe", self.w_pe), ("w_sync", self.w_sync)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(format!("weights.{name}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// `E[(D(fake) − 1)²]`.
pub fn lsgan_generator_loss(g: &Graph, d_fake: Var) -> Var {
    g.mean(g.square(g.shift(d_fake, -1.0)))
}

/// `½(E[(D(real) − 1)²] + E[D(fake)²])`.
pub fn lsgan_discriminator_loss(g: &Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = g.mean(g.square(g.shift(d_real, -1.0)));
    let fake = g.mean(g.square(d_fake));
    Ok(g.scale(g.add(real, fake)?, 0.5))
}

/// Frozen, seeded random feature network standing in for a pretrained
/// perceptual backbone: three 3×3 stride-2 convolutions (8, 16, 32 channels).
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamSet,
    layers: Vec<Conv>,
    taps: Vec<usize>,
}

impl FeatureExtractor {
    pub const CHANNELS: [usize; 3] = [8, 16, 32];

    pub fn new(seed: u64, image_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut c_in = image_channels;
        let layers = Self::CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = Conv::new(&mut params, &format!("fx.{i}"), c_in, c_out, 3, 2, InitKind::He, &mut rng);
                c_in = c_out;
                conv
            })
            .collect();
        FeatureExtractor { params, layers, taps: vec![0, 1, 2] }
    }

    pub fn with_taps(mut self, taps: Vec<usize>) -> Result<Self> {
        if taps.is_empty() || taps.iter().any(|&t| t >= self.layers.len()) {
            return Err(Error::config("taps", format!("indices must lie in 0..{}", self.layers.len())));
        }
        self.taps = taps;
        Ok(self)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Activations of the tapped layers for one `[C,H,W]` image.
    pub fn features(&self, g: &Graph, image: Var) -> Result<Vec<Var>> {
        let p = self.params.bind(g, false);
        let mut x = image;
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = g.silu(layer.forward(g, &p, x)?);
            if self.taps.contains(&i) {
                out.push(x);
            }
        }
        Ok(out)
    }
}

/// `Σ_i mean|φ_i(gt) − φ_i(gen)|` over the extractor's tapped layers.
pub fn perception_loss(g: &Graph, generated: Var, truth: &Tensor, fx: &FeatureExtractor) -> Result<Var> {
    let sg = g.shape(generated);
    if sg != truth.shape() {
        return Err(Error::shape(format!("perception_loss shapes {sg:?} vs {:?}", truth.shape())));
    }
    let gt = g.constant(truth.clone());
    let fg = fx.features(g, generated)?;
    let ft = fx.features(g, gt)?;
    let mut total = g.scalar(0.0);
    for (a, b) in fg.into_iter().zip(ft) {
        total = g.add(total, g.mean(g.abs(g.sub(b, a)?)))?;
    }
    Ok(total)
}

/// Three-layer strided critic ending in a global-mean scalar score.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: [Conv; 3],
}

impl Discriminator {
    pub fn new(ps: &mut ParamSet, prefix: &str, image_channels: usize, rng: &mut impl Rng) -> Self {
        Discriminator {
            layers: [
                Conv::new(ps, &format!("{prefix}.0"), image_channels, 8, 3, 2, InitKind::He, rng),
                Conv::new(ps, &format!("{prefix}.1"), 8, 16, 3, 2, InitKind::He, rng),
                Conv::new(ps, &format!("{prefix}.2"), 16, 1, 1, 1, InitKind::He, rng),
            ],
        }
    }

    /// Scalar score for one `[C,H,W]` image.
    pub fn score(&self, g: &Graph, p: &Bound, image: Var) -> Result<Var> {
        let x = g.silu(self.layers[0].forward(g, p, image)?);
        let x = g.silu(self.layers[1].forward(g, p, x)?);
        let x = self.layers[2].forward(g, p, x)?;
        Ok(g.mean(x))
    }

    /// Scores `[N]` for a batch of images.
    pub fn scores(&self, g: &Graph, p: &Bound, images: &[Var]) -> Result<Var> {
        let s: Vec<Var> = images
            .iter()
            .map(|&im| g.reshape(self.score(g, p, im)?, &[1]))
            .collect::<Result<_>>()?;
        g.concat(&s, 0)
    }
}

/// Embedding width of both sync towers.
pub const SYNC_EMBED: usize = 16;

/// Soft bins per signal sample in the sync network's audio features.
pub const SIGNAL_BINS: usize = 11;
const SIGNAL_BIN_WIDTH: f64 = 0.5;
const SYNC_HIDDEN: usize = 64;
const SYNC_VISUAL_CHANNELS: usize = 8;

/// Two-tower sync network. The audio tower is an MLP over Gaussian soft-binned
/// signal samples (a fixed filterbank, the toy analogue of spectral features);
/// the visual tower runs two stride-1 convs over the mouth crop, averages each
/// feature row across the width and projects the row profile with an MLP.
#[derive(Clone, Debug)]
pub struct SyncNet {
    audio: [Linear; 3],
    visual: [Conv; 2],
    project: Mlp,
    window: usize,
    crop: [usize; 3],
}

/// Soft one-hot encoding of each sample over [`SIGNAL_BINS`] centers spread on `[0, 1]`: `[1, L·K]`.
pub fn signal_features(g: &Graph, window: Var) -> Result<Var> {
    let n: usize = g.shape(window).iter().product();
    let k = SIGNAL_BINS;
    let centers: Vec<f64> = (0..n).flat_map(|_| (0..k).map(|j| j as f64)).collect();
    let x = g.expand_last(g.reshape(window, &[n])?, k)?;
    let d = g.sub(g.scale(x, (k - 1) as f64), g.constant(Tensor::new(&[n, k], centers)?))?;
    let z = g.exp(g.scale(g.square(d), -0.5 / (SIGNAL_BIN_WIDTH * SIGNAL_BIN_WIDTH)));
    g.reshape(z, &[1, n * k])
}

impl SyncNet {
    /// `crop` is the `[C, H/2, W]` shape of the lower-half image.
    pub fn new(ps: &mut ParamSet, prefix: &str, window: usize, crop: [usize; 3], rng: &mut impl Rng) -> Self {
        let audio = [
            Linear::new(ps, &format!("{prefix}.audio0"), window * SIGNAL_BINS, SYNC_HIDDEN, InitKind::He, rng),
            Linear::new(ps, &format!("{prefix}.audio1"), SYNC_HIDDEN, SYNC_HIDDEN, InitKind::He, rng),
            Linear::new(ps, &format!("{prefix}.audio2"), SYNC_HIDDEN, SYNC_EMBED, InitKind::He, rng),
        ];
        let c = SYNC_VISUAL_CHANNELS;
        let visual = [
            Conv::new(ps, &format!("{prefix}.visual0"), crop[0], c, 3, 1, InitKind::He, rng),
            Conv::new(ps, &format!("{prefix}.visual1"), c, c, 3, 1, InitKind::He, rng),
        ];
        let project = Mlp::new(ps, &format!("{prefix}.project"), c * crop[1], SYNC_HIDDEN, SYNC_EMBED, InitKind::He, rng);
        SyncNet { audio, visual, project, window, crop }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn audio_embedding(&self, g: &Graph, p: &Bound, window: Var) -> Result<Var> {
        let n: usize = g.shape(window).iter().product();
        if n != self.window {
            return Err(Error::shape(format!("sync window has {n} samples, expected {}", self.window)));
        }
        let x = g.silu(self.audio[0].forward(g, p, signal_features(g, window)?)?);
        let x = g.silu(self.audio[1].forward(g, p, x)?);
        self.audio[2].forward(g, p, x)
    }

    /// Pixels are mapped to `[−1, 1]` before the convs.
    pub fn visual_embedding(&self, g: &Graph, p: &Bound, crop: Var) -> Result<Var> {
        let s = g.shape(crop);
        if s != self.crop {
            return Err(Error::shape(format!("sync crop {s:?}, expected {:?}", self.crop)));
        }
        let x = g.shift(g.scale(crop, 2.0), -1.0);
        let x = g.silu(self.visual[0].forward(g, p, x)?);
        let x = g.silu(self.visual[1].forward(g, p, x)?);
        let (rows, w) = (SYNC_VISUAL_CHANNELS * s[1], s[2]);
        let profile = g.matmul(g.reshape(x, &[rows, w])?, g.constant(Tensor::full(&[w, 1], 1.0 / w as f64)))?;
        self.project.forward(g, p, profile)
    }
}

/// Cosine similarity of two equally shaped vectors.
pub fn cosine_similarity(g: &Graph, a: Var, b: Var) -> Result<Var> {
    let dot = g.sum(g.mul(a, b)?);
    let na = g.shift(g.sum(g.square(a)), 1e-12);
    let nb = g.shift(g.sum(g.square(b)), 1e-12);
    g.div(dot, g.sqrt(g.mul(na, nb)?)?)
}

/// Map a cosine similarity in `[−1, 1]` to a score in `[0, 1]`.
pub fn score_from_cosine(g: &Graph, cos: Var) -> Var {
    g.scale(g.shift(cos, 1.0), 0.5)
}

/// `(cos(a_emb, v_emb) + 1) / 2` for one signal window and `[C,H/2,W]` crop.
pub fn sync_score(g: &Graph, net: &SyncNet, p: &Bound, window: Var, crop: Var) -> Result<Var> {
    let a = net.audio_embedding(g, p, window)?;
    let v = net.visual_embedding(g, p, crop)?;
    Ok(score_from_cosine(g, cosine_similarity(g, a, v)?))
}

/// `E[(score − 1)²]`.
pub fn sync_loss(g: &Graph, score: Var) -> Var {
    g.mean(g.square(g.shift(score, -1.0)))
}

/// Generator-side loss terms; `None` marks a disabled term.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub un: Option<Var>,
    pub ad_g: Option<Var>,
    pub pe: Option<Var>,
    pub sync: Option<Var>,
}

/// `λ1·L_un + λ2·L_G + λ3·L_pe + λ4·L_sync` over the enabled parts.
pub fn total_loss(g: &Graph, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = [("un", parts.un, w.w_un), ("ad_g", parts.ad_g, w.w_ad), ("pe", parts.pe, w.w_pe), ("sync", parts.sync, w.w_sync)];
    let mut total = g.scalar(0.0);
    for (name, part, weight) in terms {
        let Some(v) = part else { continue };
        let x = g.item(v)?;
        if !x.is_finite() {
            return Err(Error::Numerics { term: name.into() });
        }
        total = g.add(total, g.scale(v, weight))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;

    fn vec1(g: &Graph, xs: &[f64]) -> Var {
        g.constant(Tensor::from_vec(xs.to_vec()))
    }

    fn image(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn lsgan_generator_values() {
        let g = Graph::new();
        for (d, expect) in [(vec![1.0], 0.0), (vec![0.0], 1.0), (vec![0.5, 0.5], 0.25)] {
            assert_eq!(g.item(lsgan_generator_loss(&g, vec1(&g, &d))).unwrap(), expect);
        }
    }

    #[test]
    fn lsgan_discriminator_values() {
        let g = Graph::new();
        let cases = [(1.0, 0.0, 0.0), (0.0, 1.0, 1.0), (0.5, 0.5, 0.25)];
        for (r, f, expect) in cases {
            let l = lsgan_discriminator_loss(&g, vec1(&g, &[r]), vec1(&g, &[f])).unwrap();
            assert_eq!(g.item(l).unwrap(), expect);
        }
    }

    #[test]
    fn lsgan_gradcheck() {
        let d = image(3, &[4]);
        let e1 = gradcheck(|g, v| Ok(lsgan_generator_loss(g, v[0])), &[d.clone()], 1e-6).unwrap();
        let e2 = gradcheck(|g, v| lsgan_discriminator_loss(g, v[0], v[1]), &[d.clone(), image(4, &[4])], 1e-6).unwrap();
        assert!(e1 < 1e-6 && e2 < 1e-6, "{e1} {e2}");
    }

    #[test]
    fn perception_identity_is_zero() {
        let fx = FeatureExtractor::new(5, 3);
        let x = image(1, &[3, 16, 16]);
        let g = Graph::new();
        let l = perception_loss(&g, g.constant(x.clone()), &x, &fx).unwrap();
        assert_eq!(g.item(l).unwrap(), 0.0);
    }

    #[test]
    fn perception_deterministic_from_seed() {
        let (a, b) = (image(1, &[3, 16, 16]), image(2, &[3, 16, 16]));
        let eval = || {
            let fx = FeatureExtractor::new(9, 3);
            let g = Graph::new();
            g.item(perception_loss(&g, g.constant(a.clone()), &b, &fx).unwrap()).unwrap()
        };
        assert_eq!(eval().to_bits(), eval().to_bits());
        assert_eq!(FeatureExtractor::new(9, 3).params(), FeatureExtractor::new(9, 3).params());
    }

    #[test]
    fn perception_shape_mismatch() {
        let fx = FeatureExtractor::new(5, 3);
        let g = Graph::new();
        let gen = g.constant(Tensor::zeros(&[3, 8, 8]));
        assert!(matches!(perception_loss(&g, gen, &Tensor::zeros(&[3, 8, 4]), &fx), Err(Error::Shape(_))));
    }

    #[test]
    fn perception_gradcheck() {
        let fx = FeatureExtractor::new(5, 3);
        let truth = image(7, &[3, 8, 8]);
        let err = gradcheck(|g, v| perception_loss(g, v[0], &truth, &fx), &[image(8, &[3, 8, 8])], 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn bad_taps_rejected() {
        assert!(FeatureExtractor::new(1, 3).with_taps(vec![3]).is_err());
        assert!(FeatureExtractor::new(1, 3).with_taps(vec![]).is_err());
    }

    #[test]
    fn score_from_cosine_cases() {
        let g = Graph::new();
        let a = vec1(&g, &[1.0, 2.0, -1.0]);
        let cases = [(vec![1.0, 2.0, -1.0], 1.0), (vec![-1.0, -2.0, 1.0], 0.0), (vec![2.0, -1.0, 0.0], 0.5)];
        for (b, expect) in cases {
            let s = score_from_cosine(&g, cosine_similarity(&g, a, vec1(&g, &b)).unwrap());
            assert!((g.item(s).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sync_score_range_and_window_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let net = SyncNet::new(&mut ps, "sync", 9, [3, 16, 32], &mut rng);
        let g = Graph::new();
        let p = ps.bind(&g, false);
        let crop = g.constant(image(4, &[3, 16, 32]));
        let s = g.item(sync_score(&g, &net, &p, vec1(&g, &[0.5; 9]), crop).unwrap()).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert!(matches!(sync_score(&g, &net, &p, vec1(&g, &[0.5; 8]), crop), Err(Error::Shape(_))));
    }

    #[test]
    fn signal_features_are_soft_bins() {
        let g = Graph::new();
        let f = g.value(signal_features(&g, vec1(&g, &[0.0, 0.55])).unwrap()).clone();
        assert_eq!(f.shape(), &[1, 2 * SIGNAL_BINS]);
        // exp(−(10a − j)² / (2·0.5²)) per bin j
        let d = f.data();
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert!((d[1] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((d[SIGNAL_BINS + 5] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((d[SIGNAL_BINS + 6] - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn sync_loss_values() {
        let g = Graph::new();
        for (s, expect) in [(1.0, 0.0), (0.0, 1.0), (0.75, 0.0625)] {
            assert_eq!(g.item(sync_loss(&g, vec1(&g, &[s]))).unwrap(), expect);
        }
    }

    #[test]
    fn sync_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let net = SyncNet::new(&mut ps, "sync", 9, [3, 4, 8], &mut rng);
        let window = image(1, &[9]);
        let err = gradcheck(
            |g, v| {
                let p = ps.bind(g, false);
                Ok(sync_loss(g, sync_score(g, &net, &p, g.constant(window.clone()), v[0])?))
            },
            &[image(2, &[3, 4, 8])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn total_of(parts: [f64; 4], w: &LossWeights) -> Result<f64> {
        let g = Graph::new();
        let p = LossParts {
            un: Some(g.scalar(parts[0])),
            ad_g: Some(g.scalar(parts[1])),
            pe: Some(g.scalar(parts[2])),
            sync: Some(g.scalar(parts[3])),
        };
        g.item(total_loss(&g, &p, w)?)
    }

    #[test]
    fn total_with_default_weights() {
        assert!((total_of([1.0; 4], &LossWeights::default()).unwrap() - 12.1).abs() < 1e-12);
        assert_eq!(total_of([0.0; 4], &LossWeights::default()).unwrap(), 0.0);
        let zero = LossWeights { w_un: 0.0, w_ad: 0.0, w_pe: 0.0, w_sync: 0.0 };
        assert_eq!(total_of([3.0, 1.0, 7.0, 2.0], &zero).unwrap(), 0.0);
    }

    #[test]
    fn total_linear_in_weights() {
        let parts = [0.3, 1.7, 0.05, 0.9];
        let base = LossWeights::default();
        let h = 1e-3;
        for k in 0..4 {
            let bump = |d: f64| {
                let mut w = base;
                match k {
                    0 => w.w_un += d,
                    1 => w.w_ad += d,
                    2 => w.w_pe += d,
                    _ => w.w_sync += d,
                }
                total_of(parts, &w).unwrap()
            };
            let slope = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((slope - parts[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn nan_part_named() {
        let err = total_of([0.0, f64::NAN, 0.0, 0.0], &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Numerics { ref term } if term == "ad_g"));
    }

    #[test]
    fn disabled_parts_skipped() {
        let g = Graph::new();
        let parts = LossParts { pe: Some(g.scalar(2.0)), ..Default::default() };
        assert_eq!(g.item(total_loss(&g, &parts, &LossWeights::default()).unwrap()).unwrap(), 20.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { w_pe: -1.0, ..Default::default() };
        assert!(matches!(w.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn discriminator_batch_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let d = Discriminator::new(&mut ps, "disc", 3, &mut rng);
        let g = Graph::new();
        let p = ps.bind(&g, true);
        let ims = [g.constant(image(1, &[3, 8, 8])), g.constant(image(2, &[3, 8, 8]))];
        let s = d.scores(&g, &p, &ims).unwrap();
        assert_eq!(g.shape(s), vec![2]);
        let l = lsgan_discriminator_loss(&g, s, s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(p.vars().iter().any(|&v| grads.get(v).is_some_and(|t| t.max_abs() > 0.0)));
    }
}
