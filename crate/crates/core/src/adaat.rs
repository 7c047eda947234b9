//! Adaptive affine transformation: channel-specific affine warps of feature maps.
//!
//! Every channel `c` of a `[C,H,W]` map is resampled at
//!
//! ```text
//! x̂ = S_c·cos(R_c)·x − S_c·sin(R_c)·y + T_x,c
//! ŷ = S_c·sin(R_c)·x + S_c·cos(R_c)·y + T_y,c
//! ```
//!
//! where `(x, y)` are output coordinates normalized to `[−1, 1]` with the
//! origin at the map center, and `(x̂, ŷ)` is where the output pixel reads
//! from (backward warping).

use std::f64::consts::PI;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-channel scale, rotation (radians) and normalized translation, each `[C]`.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub scale: Var,
    pub rotation: Var,
    pub tx: Var,
    pub ty: Var,
}

impl AffineParams {
    /// Fixed (non-trainable) parameters.
    pub fn constant(g: &Graph, scale: &[f64], rotation: &[f64], tx: &[f64], ty: &[f64]) -> Result<Self> {
        let c = scale.len();
        if rotation.len() != c || tx.len() != c || ty.len() != c {
            return Err(Error::shape("affine parameter vectors differ in length"));
        }
        let v = |xs: &[f64]| g.constant(Tensor::from_vec(xs.to_vec()));
        let p = AffineParams { scale: v(scale), rotation: v(rotation), tx: v(tx), ty: v(ty) };
        p.validate(g)?;
        Ok(p)
    }

    pub fn identity(g: &Graph, channels: usize) -> Self {
        let zeros = vec![0.0; channels];
        Self::constant(g, &vec![1.0; channels], &zeros, &zeros, &zeros).expect("identity parameters are valid")
    }

    pub fn channels(&self, g: &Graph) -> usize {
        g.shape(self.scale)[0]
    }

    /// Check `S > 0`, `|R| ≤ π`, `|T| ≤ 1` and equal channel counts.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let c = self.channels(g);
        for v in [self.scale, self.rotation, self.tx, self.ty] {
            if g.shape(v) != [c] {
                return Err(Error::shape(format!("affine parameter shape {:?}, expected [{c}]", g.shape(v))));
            }
        }
        if g.value(self.scale).data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("affine scale must be positive".into()));
        }
        if g.value(self.rotation).data().iter().any(|&r| r.abs() > PI) {
            return Err(Error::Domain("affine rotation outside [−π, π]".into()));
        }
        for t in [self.tx, self.ty] {
            if g.value(t).data().iter().any(|&x| x.abs() > 1.0) {
                return Err(Error::Domain("affine translation outside [−1, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Map raw network outputs `[C,4]` (columns `s, r, tx, ty`) to valid parameters:
/// `S = 2·sigmoid(s)`, `R = π·tanh(r)`, `T = tanh(t)`. All-zero input gives the identity.
pub fn squash_params(g: &Graph, raw: Var) -> Result<AffineParams> {
    let shape = g.shape(raw);
    let c = match *shape {
        [c, 4] => c,
        _ => return Err(Error::shape(format!("raw affine parameters must be [C,4], got {shape:?}"))),
    };
    let column = |j: usize| -> Result<Var> {
        let col = g.slice(raw, 1, j, 1)?;
        g.reshape(col, &[c])
    };
    Ok(AffineParams {
        scale: g.scale(g.sigmoid(column(0)?), 2.0),
        rotation: g.scale(g.tanh(column(1)?), PI),
        tx: g.tanh(column(2)?),
        ty: g.tanh(column(3)?),
    })
}

/// Affine rows `[C,6]` in the layout expected by [`Graph::affine_grid`].
fn theta(g: &Graph, p: &AffineParams, c: usize) -> Result<Var> {
    let s_cos = g.mul(p.scale, g.cos(p.rotation))?;
    let s_sin = g.mul(p.scale, g.sin(p.rotation))?;
    let cols = [s_cos, g.neg(s_sin), p.tx, s_sin, s_cos, p.ty];
    let cols: Vec<Var> = cols.iter().map(|&v| g.reshape(v, &[c, 1])).collect::<Result<_>>()?;
    g.concat(&cols, 1)
}

/// Warp each channel of `features [C,H,W]` by its own affine transform.
pub fn adaat_apply(g: &Graph, features: Var, params: &AffineParams) -> Result<Var> {
    let shape = g.shape(features);
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("features must be [C,H,W], got {shape:?}"))),
    };
    let pc = params.channels(g);
    if pc != c {
        return Err(Error::shape(format!("{pc} affine parameter channels for {c} feature channels")));
    }
    let th = theta(g, params, c)?;
    let grid = g.affine_grid(th, h, w)?;
    g.bilinear_sample(features, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_map(c: usize, h: usize, w: usize) -> Tensor {
        let mut data = Vec::new();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let (x, y) = (j as f64 / w as f64, i as f64 / h as f64);
                    data.push((2.0 * x + ch as f64).sin() * (1.5 * y).cos());
                }
            }
        }
        Tensor::new(&[c, h, w], data).unwrap()
    }

    #[test]
    fn zero_raw_is_identity() {
        let g = Graph::new();
        let raw = g.constant(Tensor::zeros(&[3, 4]));
        let p = squash_params(&g, raw).unwrap();
        assert_eq!(g.value(p.scale).data(), &[1.0; 3]);
        assert_eq!(g.value(p.rotation).data(), &[0.0; 3]);
        assert_eq!(g.value(p.tx).data(), &[0.0; 3]);
        assert_eq!(g.value(p.ty).data(), &[0.0; 3]);
    }

    #[test]
    fn squash_scale_asymptote() {
        let g = Graph::new();
        let raw = g.constant(Tensor::new(&[1, 4], vec![40.0, 0.0, 0.0, 0.0]).unwrap());
        let p = squash_params(&g, raw).unwrap();
        assert!((g.value(p.scale).data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn squash_rejects_wrong_width() {
        let g = Graph::new();
        let raw = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(squash_params(&g, raw), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_params_bit_exact() {
        let g = Graph::new();
        let x = smooth_map(4, 16, 16);
        let f = g.constant(x.clone());
        let y = adaat_apply(&g, f, &AffineParams::identity(&g, 4)).unwrap();
        assert_eq!(*g.value(y), x);
    }

    #[test]
    fn rotation_by_pi_on_three_by_three() {
        let g = Graph::new();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let f = g.constant(Tensor::new(&[1, 3, 3], data.clone()).unwrap());
        let p = AffineParams::constant(&g, &[1.0], &[PI], &[0.0], &[0.0]).unwrap();
        let y = g.value(adaat_apply(&g, f, &p).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.get(&[0, i, j]).unwrap(), data[(2 - i) * 3 + (2 - j)]);
            }
        }
    }

    #[test]
    fn scale_two_zooms_out() {
        let g = Graph::new();
        let data: Vec<f64> = (1..=25).map(f64::from).collect();
        let f = g.constant(Tensor::new(&[1, 5, 5], data.clone()).unwrap());
        let p = AffineParams::constant(&g, &[2.0], &[0.0], &[0.0], &[0.0]).unwrap();
        let y = g.value(adaat_apply(&g, f, &p).unwrap());
        for i in 0..5i64 {
            for j in 0..5i64 {
                // Source pixel index for output index k on a 5-wide axis is 2k − 2.
                let (si, sj) = (2 * i - 2, 2 * j - 2);
                let expect = if (0..5).contains(&si) && (0..5).contains(&sj) {
                    data[(si * 5 + sj) as usize]
                } else {
                    0.0
                };
                assert_eq!(y.get(&[0, i as usize, j as usize]).unwrap(), expect);
            }
        }
    }

    #[test]
    fn one_pixel_translation() {
        let g = Graph::new();
        let x = smooth_map(2, 6, 8);
        let f = g.constant(x.clone());
        let t = 2.0 / 7.0;
        let p = AffineParams::constant(&g, &[1.0, 1.0], &[0.0, 0.0], &[t, t], &[0.0, 0.0]).unwrap();
        let y = g.value(adaat_apply(&g, f, &p).unwrap());
        for c in 0..2 {
            for i in 0..6 {
                for j in 0..8 {
                    let expect = if j < 7 { x.get(&[c, i, j + 1]).unwrap() } else { 0.0 };
                    assert_eq!(y.get(&[c, i, j]).unwrap(), expect);
                }
            }
        }
    }

    #[test]
    fn rotate_and_back_recovers_interior() {
        let g = Graph::new();
        let x = smooth_map(2, 24, 24);
        let f = g.constant(x.clone());
        let theta = 0.4;
        let fwd = AffineParams::constant(&g, &[1.0; 2], &[theta; 2], &[0.0; 2], &[0.0; 2]).unwrap();
        let back = AffineParams::constant(&g, &[1.0; 2], &[-theta; 2], &[0.0; 2], &[0.0; 2]).unwrap();
        let y = adaat_apply(&g, adaat_apply(&g, f, &fwd).unwrap(), &back).unwrap();
        let y = g.value(y);
        let mut worst = 0.0f64;
        for c in 0..2 {
            for i in 6..18 {
                for j in 6..18 {
                    worst = worst.max((y.get(&[c, i, j]).unwrap() - x.get(&[c, i, j]).unwrap()).abs());
                }
            }
        }
        assert!(worst <= 0.05, "round-trip error {worst}");
    }

    #[test]
    fn channel_mismatch_rejected() {
        let g = Graph::new();
        let f = g.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(matches!(adaat_apply(&g, f, &AffineParams::identity(&g, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        let g = Graph::new();
        assert!(AffineParams::constant(&g, &[0.0], &[0.0], &[0.0], &[0.0]).is_err());
        assert!(AffineParams::constant(&g, &[1.0], &[4.0], &[0.0], &[0.0]).is_err());
        assert!(AffineParams::constant(&g, &[1.0], &[0.0], &[1.5], &[0.0]).is_err());
    }

    #[test]
    fn squash_and_apply_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = Tensor::new(&[2, 6, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let raw = Tensor::new(&[2, 4], (0..8).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
            let weights = Tensor::new(&[2, 6, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let err = gradcheck(
                |g, v| {
                    let p = squash_params(g, v[1])?;
                    let y = adaat_apply(g, v[0], &p)?;
                    let w = g.constant(weights.clone());
                    Ok(g.sum(g.mul(y, w)?))
                },
                &[feats, raw],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
