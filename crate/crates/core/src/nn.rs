//! Minimal neural building blocks: a one-hidden-layer MLP with hand-written
//! backprop, and an Adam optimizer. The projection heads and the VQ
//! encoder/decoders are built from these; the sequence model has its own
//! transformer in [`crate::seqmodel`].

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::Rng;

/// `out = W2 tanh(W1 x + b1) + b2`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Hidden activations saved by [`Mlp::forward`] for the backward pass.
pub struct MlpCache {
    pub h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn seeded(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    g * scale
                })
                .collect()
        };
        let w1 = Matrix {
            rows: hidden,
            cols: in_dim,
            data: gauss(hidden * in_dim, 1.0 / (in_dim as f64).sqrt()),
        };
        let w2 = Matrix {
            rows: out_dim,
            cols: hidden,
            data: gauss(out_dim * hidden, 1.0 / (hidden as f64).sqrt()),
        };
        Mlp {
            in_dim,
            hidden,
            out_dim,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; out_dim],
        }
    }

    /// Zero the output layer so the MLP computes the constant zero function.
    pub fn zero_output(&mut self) {
        self.w2.data.iter_mut().for_each(|v| *v = 0.0);
        self.b2.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut h = self.w1.matvec(x);
        for (hi, bi) in h.iter_mut().zip(&self.b1) {
            *hi = (*hi + bi).tanh();
        }
        let mut y = self.w2.matvec(&h);
        for (yi, bi) in y.iter_mut().zip(&self.b2) {
            *yi += bi;
        }
        (y, MlpCache { h })
    }

    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }

    /// Backprop `dy` through the layer; accumulates into `grads` and returns
    /// the gradient with respect to the input.
    pub fn backward(&self, x: &[f64], cache: &MlpCache, dy: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        debug_assert_eq!(dy.len(), self.out_dim);
        let h = &cache.h;
        for (o, &dyo) in dy.iter().enumerate() {
            if dyo != 0.0 {
                let row = &mut grads.w2[o * self.hidden..(o + 1) * self.hidden];
                for (g, &hj) in row.iter_mut().zip(h) {
                    *g += dyo * hj;
                }
            }
            grads.b2[o] += dyo;
        }
        let dh = self.w2.matvec_t(dy);
        // tanh' = 1 - h^2
        let dpre: Vec<f64> = dh.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
        for (j, &dj) in dpre.iter().enumerate() {
            if dj != 0.0 {
                let row = &mut grads.w1[j * self.in_dim..(j + 1) * self.in_dim];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += dj * xi;
                }
            }
            grads.b1[j] += dj;
        }
        self.w1.matvec_t(&dpre)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: vec![0.0; self.w1.data.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.data.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }

    /// Flatten parameters in a fixed order (w1, b1, w2, b2).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1.data);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2.data);
        out.extend_from_slice(&self.b2);
        out
    }
}

/// Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update step. `params` and `grads` must match the sizes given at
    /// construction, in the same order.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.len(), m.len());
            assert_eq!(grad.len(), m.len());
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Central finite difference of `f` at `x0` with step `h`.
pub fn central_diff<F: FnMut(f64) -> f64>(x0: f64, h: f64, mut f: F) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use approx::assert_relative_eq;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = seed_rng(42);
        let mut mlp = Mlp::seeded(3, 5, 2, &mut rng);
        let x = vec![0.3, -0.7, 1.1];
        // scalar loss: sum of squares of outputs
        let loss = |m: &Mlp| -> f64 { m.infer(&x).iter().map(|v| v * v).sum::<f64>() * 0.5 };

        let (y, cache) = mlp.forward(&x);
        let mut grads = mlp.zero_grads();
        let dx = mlp.backward(&x, &cache, &y, &mut grads);

        let h = 1e-6;
        // spot-check a few parameters from each tensor
        for (idx, analytic) in [(0usize, grads.w1[0]), (7, grads.w1[7])] {
            let fd = central_diff(mlp.w1.data[idx], h, |v| {
                let mut m = mlp.clone();
                m.w1.data[idx] = v;
                loss(&m)
            });
            assert_relative_eq!(analytic, fd, max_relative = 1e-5, epsilon = 1e-9);
        }
        let fd_b2 = central_diff(mlp.b2[1], h, |v| {
            let mut m = mlp.clone();
            m.b2[1] = v;
            loss(&m)
        });
        assert_relative_eq!(grads.b2[1], fd_b2, max_relative = 1e-5, epsilon = 1e-9);

        // input gradient
        let fd_x = central_diff(x[1], h, |v| {
            let mut xx = x.clone();
            xx[1] = v;
            mlp.infer(&xx).iter().map(|v| v * v).sum::<f64>() * 0.5
        });
        assert_relative_eq!(dx[1], fd_x, max_relative = 1e-5, epsilon = 1e-9);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut p = [5.0f64, -3.0];
        let mut adam = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            adam.step(&mut [&mut p], &[&g]);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "p = {p:?}");
    }
}
