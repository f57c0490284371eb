//! Layers, parameter bookkeeping and optimizers on top of [`crate::tensor`].

pub mod maps;
pub mod optim;

use crate::tensor::{Array, Tensor};
use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// Named view over every tensor a model owns. Trainable parameters are
/// leaves with `requires_grad`; buffers (running statistics, frozen constants)
/// are plain constants.
pub trait Module {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.named_tensors().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    fn state_dict(&self) -> BTreeMap<String, Array> {
        self.named_tensors().into_iter().map(|(k, t)| (k, t.to_array())).collect()
    }

    /// Overwrites every tensor from `state`; all names and shapes must match.
    fn load_state_dict(&self, state: &BTreeMap<String, Array>) -> Result<(), String> {
        let mine = self.named_tensors();
        let mut problems = Vec::new();
        for (name, t) in &mine {
            match state.get(name) {
                None => problems.push(format!("missing {name}")),
                Some(v) if v.shape() != t.shape().as_slice() => {
                    problems.push(format!("{name}: expected {:?}, found {:?}", t.shape(), v.shape()))
                }
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(problems.join("; "));
        }
        for (name, t) in &mine {
            t.set_value(state[name].clone());
        }
        Ok(())
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Array {
    Array::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

pub fn param(value: Array) -> Tensor {
    Tensor::leaf(value)
}

/// Fully connected layer on `[N, in]` inputs.
///
/// Weights are stored pre-scaled by `1/gain` and multiplied back at runtime,
/// which gives the equalized learning rate used by the generator when
/// `gain = lr_mul / sqrt(fan_in)`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub gain: f64,
    pub bias_gain: f64,
}

impl Linear {
    /// He-initialised layer with unit runtime gain.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Linear {
            weight: param(randn(rng, &[fan_in, fan_out], std)),
            bias: bias.then(|| param(Array::zeros(IxDyn(&[fan_out])))),
            gain: 1.0,
            bias_gain: 1.0,
        }
    }

    pub fn equalized<R: Rng + ?Sized>(
        rng: &mut R,
        fan_in: usize,
        fan_out: usize,
        bias_init: f64,
        lr_mul: f64,
    ) -> Self {
        Linear {
            weight: param(randn(rng, &[fan_in, fan_out], 1.0 / lr_mul)),
            bias: Some(param(Array::from_elem(IxDyn(&[fan_out]), bias_init / lr_mul))),
            gain: lr_mul / (fan_in as f64).sqrt(),
            bias_gain: lr_mul,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = if self.gain == 1.0 { self.weight.clone() } else { self.weight.mul_scalar(self.gain) };
        let y = x.matmul(&w);
        match &self.bias {
            Some(b) if self.bias_gain == 1.0 => y.add(b),
            Some(b) => y.add(&b.mul_scalar(self.bias_gain)),
            None => y,
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Square-kernel convolution on NHWC tensors. Weight layout `[K*K*C_in, C_out]`.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub gain: f64,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: param(randn(rng, &[fan_in, out_channels], std)),
            bias: bias.then(|| param(Array::zeros(IxDyn(&[out_channels])))),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            gain: 1.0,
        }
    }

    /// Unit-variance storage with runtime gain `1/sqrt(fan_in)`.
    pub fn equalized<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let mut c = Self::new(rng, in_channels, out_channels, kernel, stride, bias);
        let fan_in = kernel * kernel * in_channels;
        c.weight = param(randn(rng, &[fan_in, out_channels], 1.0));
        c.gain = 1.0 / (fan_in as f64).sqrt();
        c
    }

    pub fn effective_weight(&self) -> Tensor {
        if self.gain == 1.0 {
            self.weight.clone()
        } else {
            self.weight.mul_scalar(self.gain)
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = conv2d(x, &self.effective_weight(), self.kernel, self.stride, self.padding);
        match &self.bias {
            Some(b) => y.add(b),
            None => y,
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Functional convolution: `x` is `[N, H, W, C]`, `weight` is `[K*K*C, O]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let o = weight.shape()[1];
    assert_eq!(weight.shape()[0], k * k * c, "conv weight expects {} input rows", k * k * c);
    let oh = maps::conv_out_size(h, k, stride, pad);
    let ow = maps::conv_out_size(w, k, stride, pad);
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.reshape(&[n * h * w, c])
    } else {
        x.linear_map(&maps::im2col(h, w, c, k, stride, pad), &[oh, ow, k * k * c])
            .reshape(&[n * oh * ow, k * k * c])
    };
    cols.matmul(weight).reshape(&[n, oh, ow, o])
}

/// Batch normalisation over every axis but the last.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: param(Array::ones(IxDyn(&[channels]))),
            beta: param(Array::zeros(IxDyn(&[channels]))),
            running_mean: Tensor::constant(Array::zeros(IxDyn(&[channels]))),
            running_var: Tensor::constant(Array::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalises with batch statistics when `train` (updating the running
    /// estimates), with the running estimates otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let nd = x.ndim();
        let axes: Vec<usize> = (0..nd - 1).collect();
        let normed = if train {
            let mean = x.mean_axes(&axes, false);
            let centered = x.sub(&mean);
            let var = centered.square().mean_axes(&axes, false);
            let count = x.numel() / x.shape()[nd - 1];
            {
                let m = self.momentum;
                let mv = mean.to_array();
                let unbiased = count as f64 / (count.max(2) - 1) as f64;
                let vv = var.to_array().mapv(|v| v * unbiased);
                self.running_mean.update_value(|r| r.zip_mut_with(&mv, |a, b| *a = (1.0 - m) * *a + m * b));
                self.running_var.update_value(|r| r.zip_mut_with(&vv, |a, b| *a = (1.0 - m) * *a + m * b));
            }
            centered.div(&var.add_scalar(self.eps).sqrt())
        } else {
            let inv = self.running_var.to_array().mapv(|v| 1.0 / (v + self.eps).sqrt());
            x.sub(&self.running_mean).mul(&Tensor::constant(inv))
        };
        normed.mul(&self.gamma).add(&self.beta)
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
        out.push((join(prefix, "running_mean"), self.running_mean.clone()));
        out.push((join(prefix, "running_var"), self.running_var.clone()));
    }
}

/// Parametric ReLU with one slope per channel.
pub struct PRelu {
    pub alpha: Tensor,
}

impl PRelu {
    pub fn new(channels: usize) -> Self {
        PRelu {
            alpha: param(Array::from_elem(IxDyn(&[channels]), 0.25)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.relu().sub(&x.neg().relu().mul(&self.alpha))
    }
}

impl Module for PRelu {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "alpha"), self.alpha.clone()));
    }
}

/// Inverted dropout; identity when `p == 0`.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Tensor {
    if p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let mask = Array::from_shape_simple_fn(IxDyn(&x.shape()), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    x.mul(&Tensor::constant(mask))
}

/// Scales rows of a `[N, D]` tensor to unit length.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    let norm = x.square().sum_axes(&[1], true).add_scalar(eps).sqrt();
    x.div(&norm)
}

/// Stable hash of every named tensor, used to prove parameters were untouched.
pub fn state_hash(module: &dyn Module) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in module.named_tensors() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.value().iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
