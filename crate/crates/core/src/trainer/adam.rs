//! Adam with bias correction.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { lr, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!("adam tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_hand_computed() {
        let mut p = vec![Tensor::from_vec(vec![0.0, 0.0])];
        let mut opt = Adam::new(0.01, &p);
        let g = [3.0, -1e-3];
        opt.step(&mut p, &[Tensor::from_vec(g.to_vec())]).unwrap();
        // m̂ = g, v̂ = g², update = −lr·g/(|g| + eps)
        for (x, gk) in p[0].data().iter().zip(g) {
            let expect = -0.01 * gk / (gk.abs() + EPS);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Adam::new(0.1, &p);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * p[0].data()[0]);
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2, "{}", p[0].data()[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Adam::new(0.1, &p);
        assert!(matches!(opt.step(&mut p, &[Tensor::zeros(&[3])]), Err(Error::Shape(_))));
        assert!(matches!(opt.step(&mut p, &[]), Err(Error::Shape(_))));
    }
}
