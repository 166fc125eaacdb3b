//! Adam with the DCGAN-style β₁ = 0.5 default.
//!
//! Moment buffers live outside the network, aligned with the parameter
//! visitation order, so the same optimizer drives any visitable model and
//! the buffers serialize as plain named tensors.

use crate::gemm::Scalar;
use crate::net::ParamMut;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Completed update steps; bias correction uses t ≥ 1.
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over every parameter the visitor yields. `visit` must
    /// yield the same tensors in the same order on every call.
    pub fn step(&mut self, visit: impl FnOnce(&mut dyn FnMut(ParamMut<'_, T>))) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let step_size = T::from_f64(self.cfg.learning_rate / bc1);
        let inv_sqrt_bc2 = 1.0 / bc2.sqrt();
        let b1 = T::from_f64(self.cfg.beta1);
        let nb1 = T::from_f64(1.0 - self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let nb2 = T::from_f64(1.0 - self.cfg.beta2);
        // fold 1/√bc2 into the denominator: p -= lr/bc1 · m / (√(v/bc2) + ε)
        let scale_v = T::from_f64(inv_sqrt_bc2);
        let eps = T::from_f64(self.cfg.eps);

        let m = &mut self.m;
        let v = &mut self.v;
        let mut slot = 0usize;
        visit(&mut |p: ParamMut<'_, T>| {
            if slot == m.len() {
                m.push(vec![T::zero(); p.value.len()]);
                v.push(vec![T::zero(); p.value.len()]);
            }
            let ms = &mut m[slot];
            let vs = &mut v[slot];
            assert_eq!(ms.len(), p.value.len(), "optimizer slot shape ({})", p.name);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                ms[i] = b1 * ms[i] + nb1 * g;
                vs[i] = b2 * vs[i] + nb2 * g * g;
                let denom = (vs[i].sqrt()) * scale_v + eps;
                p.value[i] = p.value[i] - step_size * ms[i] / denom;
            }
            slot += 1;
        });
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        assert_eq!(m.len(), v.len(), "moment buffer counts");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
