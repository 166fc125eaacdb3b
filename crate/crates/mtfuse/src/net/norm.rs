//! Batch normalization over the spatial axes of a single instance.
//!
//! With batch size 1 (the training recipe here) the batch statistics are the
//! per-channel spatial statistics of the one input, i.e. the layer acts like
//! instance normalization. Eval mode uses the same per-instance statistics
//! by default (`eval_instance_stats`); running averages are still tracked
//! and checkpointed, and can be selected for eval instead.

use crate::gemm::Scalar;
use ndarray::Array3;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BatchNorm2d<T: Scalar> {
    pub channels: usize,
    /// γ
    pub weight: Vec<T>,
    /// β
    pub bias: Vec<T>,
    pub gw: Vec<T>,
    pub gb: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Eval normalizes with the input's own spatial stats instead of the
    /// running averages.
    pub eval_instance_stats: bool,
    cache: Option<Cache<T>>,
}

struct Cache<T> {
    x_hat: Array3<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, eval_instance_stats: bool) -> Self {
        BatchNorm2d {
            channels,
            weight: vec![T::one(); channels],
            bias: vec![T::zero(); channels],
            gw: vec![T::zero(); channels],
            gb: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eval_instance_stats: eval_instance_stats,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<T>, train: bool) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels, "bn channels");
        let n = h * w;
        let xs = x.as_slice().expect("contiguous input");
        let eps = T::from_f64(BN_EPS);

        let use_instance = train || self.eval_instance_stats;
        let mut y = Array3::<T>::zeros((c, h, w));
        let mut x_hat = if train {
            Some(Array3::<T>::zeros((c, h, w)))
        } else {
            None
        };
        let mut inv_stds = vec![T::zero(); c];

        for ci in 0..c {
            let plane = &xs[ci * n..(ci + 1) * n];
            let (mean, var) = if use_instance {
                let mut sum = T::zero();
                for &v in plane {
                    sum = sum + v;
                }
                let mean = sum / T::from_f64(n as f64);
                let mut acc = T::zero();
                for &v in plane {
                    let d = v - mean;
                    acc = acc + d * d;
                }
                (mean, acc / T::from_f64(n as f64))
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds[ci] = inv_std;
            let gamma = self.weight[ci];
            let beta = self.bias[ci];
            let ys = y.as_slice_mut().unwrap();
            if let Some(xh) = x_hat.as_mut() {
                let xhs = xh.as_slice_mut().unwrap();
                for i in 0..n {
                    let v = (plane[i] - mean) * inv_std;
                    xhs[ci * n + i] = v;
                    ys[ci * n + i] = gamma * v + beta;
                }
            } else {
                for i in 0..n {
                    ys[ci * n + i] = gamma * ((plane[i] - mean) * inv_std) + beta;
                }
            }
            if train {
                // running averages follow the usual convention: unbiased
                // variance, momentum-weighted update
                let m = T::from_f64(BN_MOMENTUM);
                let unbiased = if n > 1 {
                    var * T::from_f64(n as f64 / (n as f64 - 1.0))
                } else {
                    var
                };
                self.running_mean[ci] =
                    (T::one() - m) * self.running_mean[ci] + m * mean;
                self.running_var[ci] = (T::one() - m) * self.running_var[ci] + m * unbiased;
            }
        }
        if train {
            self.cache = Some(Cache {
                x_hat: x_hat.unwrap(),
                inv_std: inv_stds,
            });
        } else {
            self.cache = None;
        }
        y
    }

    pub fn backward(&mut self, gy: &Array3<T>) -> Array3<T> {
        let cache = self.cache.take().expect("bn backward without forward");
        let (c, h, w) = gy.dim();
        let n = h * w;
        let n_t = T::from_f64(n as f64);
        let gys = gy.as_slice().expect("contiguous grad");
        let xhs = cache.x_hat.as_slice().unwrap();
        let mut dx = Array3::<T>::zeros((c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for ci in 0..c {
            let mut sum_gy = T::zero();
            let mut sum_gy_xhat = T::zero();
            for i in 0..n {
                let g = gys[ci * n + i];
                sum_gy = sum_gy + g;
                sum_gy_xhat = sum_gy_xhat + g * xhs[ci * n + i];
            }
            self.gb[ci] = self.gb[ci] + sum_gy;
            self.gw[ci] = self.gw[ci] + sum_gy_xhat;
            let scale = self.weight[ci] * cache.inv_std[ci];
            let mean_gy = sum_gy / n_t;
            let mean_gy_xhat = sum_gy_xhat / n_t;
            for i in 0..n {
                let g = gys[ci * n + i];
                dxs[ci * n + i] =
                    scale * (g - mean_gy - xhs[ci * n + i] * mean_gy_xhat);
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(T::zero());
        self.gb.fill(T::zero());
    }
}
