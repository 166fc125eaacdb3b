//! Elementwise layers: ReLU, LeakyReLU, Tanh, Dropout.
//!
//! Backward caches are bit-packed masks (1 bit per element) except Tanh,
//! which needs its output values.

use crate::gemm::Scalar;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Bit-packed boolean mask over a flat tensor.
struct BitMask {
    bits: Vec<u64>,
    len: usize,
}

impl BitMask {
    fn with_capacity(len: usize) -> Self {
        BitMask {
            bits: vec![0u64; len.div_ceil(64)],
            len,
        }
    }

    #[inline]
    fn set(&mut self, i: usize, v: bool) {
        if v {
            self.bits[i / 64] |= 1u64 << (i % 64);
        }
    }

    #[inline]
    fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }
}

pub struct Relu {
    mask: Option<BitMask>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array3<T>, train: bool) -> Array3<T> {
        let mut y = x.clone();
        let ys = y.as_slice_mut().unwrap();
        if train {
            let mut mask = BitMask::with_capacity(ys.len());
            for (i, v) in ys.iter_mut().enumerate() {
                if *v > T::zero() {
                    mask.set(i, true);
                } else {
                    *v = T::zero();
                }
            }
            self.mask = Some(mask);
        } else {
            for v in ys.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            self.mask = None;
        }
        y
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Array3<T>) -> Array3<T> {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut dx = gy.clone();
        for (i, v) in dx.as_slice_mut().unwrap().iter_mut().enumerate() {
            if !mask.get(i) {
                *v = T::zero();
            }
        }
        dx
    }
}

pub struct LeakyRelu {
    pub slope: f64,
    mask: Option<BitMask>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, mask: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array3<T>, train: bool) -> Array3<T> {
        let slope = T::from_f64(self.slope);
        let mut y = x.clone();
        let ys = y.as_slice_mut().unwrap();
        if train {
            let mut mask = BitMask::with_capacity(ys.len());
            for (i, v) in ys.iter_mut().enumerate() {
                if *v > T::zero() {
                    mask.set(i, true);
                } else {
                    *v = *v * slope;
                }
            }
            self.mask = Some(mask);
        } else {
            for v in ys.iter_mut() {
                if *v < T::zero() {
                    *v = *v * slope;
                }
            }
            self.mask = None;
        }
        y
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Array3<T>) -> Array3<T> {
        let mask = self
            .mask
            .take()
            .expect("leaky relu backward without forward");
        let slope = T::from_f64(self.slope);
        let mut dx = gy.clone();
        for (i, v) in dx.as_slice_mut().unwrap().iter_mut().enumerate() {
            if !mask.get(i) {
                *v = *v * slope;
            }
        }
        dx
    }
}

pub struct Tanh<T: Scalar> {
    y: Option<Array3<T>>,
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Tanh { y: None }
    }

    pub fn forward(&mut self, x: &Array3<T>, train: bool) -> Array3<T> {
        let y = x.mapv(|v| v.tanh());
        if train {
            self.y = Some(y.clone());
        } else {
            self.y = None;
        }
        y
    }

    pub fn backward(&mut self, gy: &Array3<T>) -> Array3<T> {
        let y = self.y.take().expect("tanh backward without forward");
        let mut dx = gy.clone();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|g, &yv| {
            *g = *g * (T::one() - yv * yv);
        });
        dx
    }
}

/// Inverted dropout: kept units scale by 1/(1−rate) so eval is identity.
pub struct Dropout {
    pub rate: f64,
    mask: Option<BitMask>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
        Dropout { rate, mask: None }
    }

    pub fn forward<T: Scalar>(
        &mut self,
        x: &Array3<T>,
        train: bool,
        rng: &mut ChaCha12Rng,
    ) -> Array3<T> {
        if !train || self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let scale = T::from_f64(1.0 / keep);
        let mut y = x.clone();
        let ys = y.as_slice_mut().unwrap();
        let mut mask = BitMask::with_capacity(ys.len());
        for (i, v) in ys.iter_mut().enumerate() {
            if rng.gen_range(0.0..1.0) < keep {
                mask.set(i, true);
                *v = *v * scale;
            } else {
                *v = T::zero();
            }
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward<T: Scalar>(&mut self, gy: &Array3<T>) -> Array3<T> {
        match self.mask.take() {
            None => gy.clone(),
            Some(mask) => {
                let scale = T::from_f64(1.0 / (1.0 - self.rate));
                let mut dx = gy.clone();
                for (i, v) in dx.as_slice_mut().unwrap().iter_mut().enumerate() {
                    if mask.get(i) {
                        *v = *v * scale;
                    } else {
                        *v = T::zero();
                    }
                }
                dx
            }
        }
    }
}
