//! The residual generator and patchGAN discriminator.
//!
//! Both networks are explicit structs of layers with hand-written forward
//! and backward passes, generic over f32 (training) and f64 (gradient
//! verification). Architecture descriptors fully determine every parameter
//! shape; parameters and buffers are reachable through named visitors, which
//! the optimizer and checkpoint formats build on.

pub mod act;
pub mod conv;
pub mod norm;

use crate::error::{validation, Result};
use crate::gemm::Scalar;
use crate::seed::derive_rng;
use act::{Dropout, LeakyRelu, Relu, Tanh};
use conv::Conv2d;
use ndarray::Array3;
use norm::BatchNorm2d;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    #[inline]
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Mutable access to one named parameter tensor and its gradient.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

/// Mutable access to one named non-trainable buffer (BN running stats).
pub struct BufMut<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
}

/// Generator shape: kernel 7 at the ends, 3 elsewhere, all strides 1,
/// zero padding preserving spatial size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Head widths; features rise to the last entry, where the residual
    /// body lives. The tail mirrors the head back down.
    pub head_widths: Vec<usize>,
    pub n_res_blocks: usize,
    pub dropout: f64,
    /// BN eval statistics: per-instance spatial stats (true) or running
    /// averages (false).
    pub eval_instance_stats: bool,
}

impl GeneratorArch {
    /// Full-scale architecture: 64-128-256 head, 9 residual blocks.
    pub fn standard(in_channels: usize) -> Self {
        GeneratorArch {
            in_channels,
            out_channels: 4,
            head_widths: vec![64, 128, 256],
            n_res_blocks: 9,
            dropout: 0.5,
            eval_instance_stats: true,
        }
    }

    /// Desk-scale preset: same topology, narrow features.
    pub fn small(in_channels: usize) -> Self {
        GeneratorArch {
            in_channels,
            out_channels: 4,
            head_widths: vec![12, 20, 28],
            n_res_blocks: 2,
            dropout: 0.5,
            eval_instance_stats: true,
        }
    }

    /// Miniature configuration for gradient checks.
    pub fn mini(in_channels: usize) -> Self {
        GeneratorArch {
            in_channels,
            out_channels: 4,
            head_widths: vec![4, 6, 8],
            n_res_blocks: 1,
            dropout: 0.5,
            eval_instance_stats: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(validation("generator channel counts must be positive"));
        }
        if self.head_widths.is_empty() || self.head_widths.iter().any(|&w| w == 0) {
            return Err(validation("generator head widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(validation(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    fn tail_widths(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.head_widths[..self.head_widths.len() - 1].to_vec();
        t.reverse();
        t
    }

    /// Layer plan as (kernel, in, out) triples: head, body convs, tail.
    fn head_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut prev = self.in_channels;
        for (i, &wd) in self.head_widths.iter().enumerate() {
            plan.push((if i == 0 { 7 } else { 3 }, prev, wd));
            prev = wd;
        }
        plan
    }

    fn tail_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut prev = *self.head_widths.last().unwrap();
        for &wd in &self.tail_widths() {
            plan.push((3, prev, wd));
            prev = wd;
        }
        plan.push((7, prev, self.out_channels));
        plan
    }

    /// Every parameter the descriptor implies, as (name, shape), in
    /// visitation order. Conv weights are (out, in, kh, kw).
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<(String, Vec<usize>)>, p: &str, k, ci, co| {
            specs.push((format!("{p}.conv.weight"), vec![co, ci, k, k]));
            specs.push((format!("{p}.conv.bias"), vec![co]));
        };
        let bn = |specs: &mut Vec<(String, Vec<usize>)>, p: &str, c: usize| {
            specs.push((format!("{p}.bn.weight"), vec![c]));
            specs.push((format!("{p}.bn.bias"), vec![c]));
        };
        for (i, &(k, ci, co)) in self.head_plan().iter().enumerate() {
            let p = format!("head.{i}");
            conv(&mut specs, &p, k, ci, co);
            bn(&mut specs, &p, co);
        }
        let body_w = *self.head_widths.last().unwrap();
        for i in 0..self.n_res_blocks {
            let p = format!("body.{i}");
            specs.push((format!("{p}.conv1.weight"), vec![body_w, body_w, 3, 3]));
            specs.push((format!("{p}.conv1.bias"), vec![body_w]));
            specs.push((format!("{p}.bn1.weight"), vec![body_w]));
            specs.push((format!("{p}.bn1.bias"), vec![body_w]));
            specs.push((format!("{p}.conv2.weight"), vec![body_w, body_w, 3, 3]));
            specs.push((format!("{p}.conv2.bias"), vec![body_w]));
        }
        let tail = self.tail_plan();
        let last = tail.len() - 1;
        for (i, &(k, ci, co)) in tail.iter().enumerate() {
            let p = format!("tail.{i}");
            conv(&mut specs, &p, k, ci, co);
            if i < last {
                bn(&mut specs, &p, co);
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Discriminator shape: 4×4 kernels, stride 2 except the last stage and the
/// final 1-channel projection, BN everywhere but the first stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub eval_instance_stats: bool,
}

impl DiscriminatorArch {
    /// The 70×70 patchGAN.
    pub fn standard(in_channels: usize) -> Self {
        DiscriminatorArch {
            in_channels,
            widths: vec![64, 128, 256, 512],
            eval_instance_stats: true,
        }
    }

    pub fn small(in_channels: usize) -> Self {
        DiscriminatorArch {
            in_channels,
            widths: vec![16, 32, 64],
            eval_instance_stats: true,
        }
    }

    /// Miniature configuration for gradient checks.
    pub fn mini(in_channels: usize) -> Self {
        DiscriminatorArch {
            in_channels,
            widths: vec![4, 8],
            eval_instance_stats: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(validation("discriminator needs input channels"));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(validation("discriminator widths must be positive"));
        }
        Ok(())
    }

    /// (kernel, stride, in, out, has_bn) per layer including the final
    /// projection.
    fn plan(&self) -> Vec<(usize, usize, usize, usize, bool)> {
        let mut plan = Vec::new();
        let mut prev = self.in_channels;
        let n = self.widths.len();
        for (i, &wd) in self.widths.iter().enumerate() {
            let stride = if i + 1 == n { 1 } else { 2 };
            plan.push((4, stride, prev, wd, i > 0));
            prev = wd;
        }
        plan.push((4, 1, prev, 1, false));
        plan
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for (i, &(k, _, ci, co, has_bn)) in self.plan().iter().enumerate() {
            let p = format!("stage.{i}");
            specs.push((format!("{p}.conv.weight"), vec![co, ci, k, k]));
            specs.push((format!("{p}.conv.bias"), vec![co]));
            if has_bn {
                specs.push((format!("{p}.bn.weight"), vec![co]));
                specs.push((format!("{p}.bn.bias"), vec![co]));
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Receptive field of one score-map cell in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut stride_prod = 1usize;
        for (k, s, ..) in self.plan() {
            rf += (k - 1) * stride_prod;
            stride_prod *= s;
        }
        rf
    }

    /// Score-map spatial size for a square input.
    pub fn score_map_size(&self, input: usize) -> usize {
        let mut size = input;
        for (k, s, ..) in self.plan() {
            size = (size + 2 - k) / s + 1;
        }
        size
    }
}

struct ConvBnRelu<T: Scalar> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn forward(&mut self, x: &Array3<T>, train: bool) -> Array3<T> {
        let h = self.conv.forward(x, train);
        let h = self.bn.forward(&h, train);
        self.relu.forward(&h, train)
    }

    fn backward(&mut self, gy: &Array3<T>) -> Array3<T> {
        let g = self.relu.backward(gy);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

/// Residual block: Conv-BN-ReLU-Dropout-Conv, shortcut add, output ReLU.
/// With zeroed conv weights the block is the identity on its (non-negative,
/// post-ReLU) input features.
pub(crate) struct ResBlock<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    dropout: Dropout,
    conv2: Conv2d<T>,
    relu_out: Relu,
}

impl<T: Scalar> ResBlock<T> {
    fn new(width: usize, dropout: f64, instance_stats: bool, rng: &mut ChaCha12Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(width, width, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(width, instance_stats),
            relu1: Relu::new(),
            dropout: Dropout::new(dropout),
            conv2: Conv2d::new(width, width, 3, 1, 1, rng),
            relu_out: Relu::new(),
        }
    }

    pub(crate) fn forward(
        &mut self,
        x: &Array3<T>,
        train: bool,
        rng: &mut ChaCha12Rng,
    ) -> Array3<T> {
        let h = self.conv1.forward(x, train);
        let h = self.bn1.forward(&h, train);
        let h = self.relu1.forward(&h, train);
        let h = self.dropout.forward(&h, train, rng);
        let h = self.conv2.forward(&h, train);
        self.relu_out.forward(&(x + &h), train)
    }

    fn backward(&mut self, gy: &Array3<T>) -> Array3<T> {
        let g = self.relu_out.backward(gy);
        let b = self.conv2.backward(&g);
        let b = self.dropout.backward(&b);
        let b = self.relu1.backward(&b);
        let b = self.bn1.backward(&b);
        let b = self.conv1.backward(&b);
        g + b
    }

    #[cfg(test)]
    pub(crate) fn zero_convs(&mut self) {
        self.conv1.weight.fill(T::zero());
        self.conv1.bias.fill(T::zero());
        self.conv2.weight.fill(T::zero());
        self.conv2.bias.fill(T::zero());
    }
}

pub struct Generator<T: Scalar> {
    pub arch: GeneratorArch,
    head: Vec<ConvBnRelu<T>>,
    pub(crate) body: Vec<ResBlock<T>>,
    tail: Vec<ConvBnRelu<T>>,
    last_conv: Conv2d<T>,
    last_tanh: Tanh<T>,
}

impl<T: Scalar> Generator<T> {
    /// Build with seeded N(0, 0.02) conv weights, zero biases, unit BN.
    pub fn new(arch: &GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = derive_rng(seed, "gen", 0);
        let instance = arch.eval_instance_stats;
        let mut head: Vec<ConvBnRelu<T>> = arch
            .head_plan()
            .into_iter()
            .map(|(k, ci, co)| ConvBnRelu {
                conv: Conv2d::new(ci, co, k, 1, k / 2, &mut rng),
                bn: BatchNorm2d::new(co, instance),
                relu: Relu::new(),
            })
            .collect();
        // nothing consumes the gradient w.r.t. the input image
        head[0].conv.skip_input_grad = true;
        let body_w = *arch.head_widths.last().unwrap();
        let body = (0..arch.n_res_blocks)
            .map(|_| ResBlock::new(body_w, arch.dropout, instance, &mut rng))
            .collect();
        let tail_plan = arch.tail_plan();
        let (mid, last) = tail_plan.split_at(tail_plan.len() - 1);
        let tail = mid
            .iter()
            .map(|&(k, ci, co)| ConvBnRelu {
                conv: Conv2d::new(ci, co, k, 1, k / 2, &mut rng),
                bn: BatchNorm2d::new(co, instance),
                relu: Relu::new(),
            })
            .collect();
        let (k, ci, co) = last[0];
        let last_conv = Conv2d::new(ci, co, k, 1, k / 2, &mut rng);
        Ok(Generator {
            arch: arch.clone(),
            head,
            body,
            tail,
            last_conv,
            last_tanh: Tanh::new(),
        })
    }

    /// Map (n, H, W) in [-1, 1] to (4, H, W) in (-1, 1). Dropout fires in
    /// train mode, driven by `rng`.
    pub fn forward(
        &mut self,
        x: &Array3<T>,
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Result<Array3<T>> {
        if x.dim().0 != self.arch.in_channels {
            return Err(validation(format!(
                "generator input has {} channels, architecture expects {}",
                x.dim().0,
                self.arch.in_channels
            )));
        }
        let train = mode.is_train();
        let mut h = x.clone();
        for blk in &mut self.head {
            h = blk.forward(&h, train);
        }
        for rb in &mut self.body {
            h = rb.forward(&h, train, rng);
        }
        for blk in &mut self.tail {
            h = blk.forward(&h, train);
        }
        let h = self.last_conv.forward(&h, train);
        Ok(self.last_tanh.forward(&h, train))
    }

    /// Propagate loss gradient; parameter gradients accumulate in place.
    pub fn backward(&mut self, gy: &Array3<T>) -> Array3<T> {
        let g = self.last_tanh.backward(gy);
        let mut g = self.last_conv.backward(&g);
        for blk in self.tail.iter_mut().rev() {
            g = blk.backward(&g);
        }
        for rb in self.body.iter_mut().rev() {
            g = rb.backward(&g);
        }
        for blk in self.head.iter_mut().rev() {
            g = blk.backward(&g);
        }
        g
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (i, blk) in self.head.iter_mut().enumerate() {
            visit_conv(&format!("head.{i}.conv"), &mut blk.conv, f);
            visit_bn_params(&format!("head.{i}.bn"), &mut blk.bn, f);
        }
        for (i, rb) in self.body.iter_mut().enumerate() {
            visit_conv(&format!("body.{i}.conv1"), &mut rb.conv1, f);
            visit_bn_params(&format!("body.{i}.bn1"), &mut rb.bn1, f);
            visit_conv(&format!("body.{i}.conv2"), &mut rb.conv2, f);
        }
        for (i, blk) in self.tail.iter_mut().enumerate() {
            visit_conv(&format!("tail.{i}.conv"), &mut blk.conv, f);
            visit_bn_params(&format!("tail.{i}.bn"), &mut blk.bn, f);
        }
        let last = self.tail.len();
        visit_conv(&format!("tail.{last}.conv"), &mut self.last_conv, f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(BufMut<'_, T>)) {
        for (i, blk) in self.head.iter_mut().enumerate() {
            visit_bn_buffers(&format!("head.{i}.bn"), &mut blk.bn, f);
        }
        for (i, rb) in self.body.iter_mut().enumerate() {
            visit_bn_buffers(&format!("body.{i}.bn1"), &mut rb.bn1, f);
        }
        for (i, blk) in self.tail.iter_mut().enumerate() {
            visit_bn_buffers(&format!("tail.{i}.bn"), &mut blk.bn, f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(T::zero()));
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |p| count += p.value.len());
        count
    }
}

pub struct Discriminator<T: Scalar> {
    pub arch: DiscriminatorArch,
    stages: Vec<DiscStage<T>>,
    final_conv: Conv2d<T>,
}

struct DiscStage<T: Scalar> {
    conv: Conv2d<T>,
    bn: Option<BatchNorm2d<T>>,
    act: LeakyRelu,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(arch: &DiscriminatorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = derive_rng(seed, "disc", 0);
        let plan = arch.plan();
        let (stage_plan, final_plan) = plan.split_at(plan.len() - 1);
        let stages = stage_plan
            .iter()
            .map(|&(k, s, ci, co, has_bn)| DiscStage {
                conv: Conv2d::new(ci, co, k, s, 1, &mut rng),
                bn: has_bn.then(|| BatchNorm2d::new(co, arch.eval_instance_stats)),
                act: LeakyRelu::new(0.2),
            })
            .collect();
        let (k, s, ci, co, _) = final_plan[0];
        Ok(Discriminator {
            arch: arch.clone(),
            stages,
            final_conv: Conv2d::new(ci, co, k, s, 1, &mut rng),
        })
    }

    /// Map a stacked (input ‖ optical) tensor to a patch logit map (1, h, w).
    pub fn forward(&mut self, x: &Array3<T>, mode: Mode) -> Result<Array3<T>> {
        if x.dim().0 != self.arch.in_channels {
            return Err(validation(format!(
                "discriminator input has {} channels, architecture expects {}",
                x.dim().0,
                self.arch.in_channels
            )));
        }
        let train = mode.is_train();
        let mut h = x.clone();
        for stage in &mut self.stages {
            h = stage.conv.forward(&h, train);
            if let Some(bn) = stage.bn.as_mut() {
                h = bn.forward(&h, train);
            }
            h = stage.act.forward(&h, train);
        }
        Ok(self.final_conv.forward(&h, train))
    }

    /// `need_input_grad` matters when the gradient must flow on into the
    /// generator that produced part of the input; a plain discriminator
    /// update can skip that final (large) convolution transpose.
    pub fn backward(&mut self, gy: &Array3<T>, need_input_grad: bool) -> Array3<T> {
        self.stages[0].conv.skip_input_grad = !need_input_grad;
        let mut g = self.final_conv.backward(gy);
        for stage in self.stages.iter_mut().rev() {
            g = stage.act.backward(&g);
            if let Some(bn) = stage.bn.as_mut() {
                g = bn.backward(&g);
            }
            g = stage.conv.backward(&g);
        }
        g
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            visit_conv(&format!("stage.{i}.conv"), &mut stage.conv, f);
            if let Some(bn) = stage.bn.as_mut() {
                visit_bn_params(&format!("stage.{i}.bn"), bn, f);
            }
        }
        let last = self.stages.len();
        visit_conv(&format!("stage.{last}.conv"), &mut self.final_conv, f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(BufMut<'_, T>)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if let Some(bn) = stage.bn.as_mut() {
                visit_bn_buffers(&format!("stage.{i}.bn"), bn, f);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(T::zero()));
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |p| count += p.value.len());
        count
    }
}

fn visit_conv<T: Scalar>(
    prefix: &str,
    conv: &mut Conv2d<T>,
    f: &mut dyn FnMut(ParamMut<'_, T>),
) {
    f(ParamMut {
        name: format!("{prefix}.weight"),
        shape: vec![conv.out_ch, conv.in_ch, conv.k, conv.k],
        value: &mut conv.weight,
        grad: &mut conv.gw,
    });
    f(ParamMut {
        name: format!("{prefix}.bias"),
        shape: vec![conv.out_ch],
        value: &mut conv.bias,
        grad: &mut conv.gb,
    });
}

fn visit_bn_params<T: Scalar>(
    prefix: &str,
    bn: &mut BatchNorm2d<T>,
    f: &mut dyn FnMut(ParamMut<'_, T>),
) {
    f(ParamMut {
        name: format!("{prefix}.weight"),
        shape: vec![bn.channels],
        value: &mut bn.weight,
        grad: &mut bn.gw,
    });
    f(ParamMut {
        name: format!("{prefix}.bias"),
        shape: vec![bn.channels],
        value: &mut bn.bias,
        grad: &mut bn.gb,
    });
}

fn visit_bn_buffers<T: Scalar>(
    prefix: &str,
    bn: &mut BatchNorm2d<T>,
    f: &mut dyn FnMut(BufMut<'_, T>),
) {
    f(BufMut {
        name: format!("{prefix}.running_mean"),
        value: &mut bn.running_mean,
    });
    f(BufMut {
        name: format!("{prefix}.running_var"),
        value: &mut bn.running_var,
    });
}
