//! Stage 1: a compact style-based generator and residual discriminator,
//! trained non-saturating with lazy R1 and path-length regularisation and an
//! adaptive augmentation probability.

use std::collections::BTreeSet;
use std::f64::consts::SQRT_2;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;

use image::RgbImage;
use ndarray::{Axis, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{arg, Error, Result};
use crate::features::RandomConvPyramid;
use crate::imaging::images_to_array;
use crate::nn::optim::Adam;
use crate::nn::{self, join, maps, param, randn, Conv2d, Linear, Module};
use crate::seeding::{self, Rng};
use crate::tensor::{grad, no_grad, Array, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPipeline {
    pub flip: bool,
    pub rot90: bool,
    pub translate: bool,
    pub color: bool,
    /// Largest shift as a fraction of the image side.
    pub max_translate: f64,
}

impl Default for AugmentPipeline {
    fn default() -> Self {
        AugmentPipeline { flip: true, rot90: true, translate: true, color: true, max_translate: 0.125 }
    }
}

impl AugmentPipeline {
    pub fn flip_only() -> Self {
        AugmentPipeline { flip: true, rot90: false, translate: false, color: false, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub resolution: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub lambda_gp: f64,
    pub lambda_plp: f64,
    pub ada_start_p: f64,
    pub ada_target: f64,
    pub total_samples: u64,
    pub batch_size: usize,
    pub r1_interval: u64,
    pub plp_interval: u64,
    pub ada_step: f64,
    pub ada_half_life_batches: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mapping_lr_mul: f64,
    pub channel_base: usize,
    pub channel_max: usize,
    pub w_avg_beta: f64,
    pub pl_decay: f64,
    pub augment: AugmentPipeline,
    pub log_every: u64,
    /// FID is measured at the start, at the end, and every this many samples
    /// (0 disables the periodic checks).
    pub fid_every: u64,
    pub fid_samples: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 512,
            mapping_layers: 8,
            resolution: 128,
            g_lr: 0.002,
            d_lr: 0.00235,
            lambda_gp: 4.0,
            lambda_plp: 2.0,
            ada_start_p: 0.0,
            ada_target: 0.6,
            total_samples: 8_000_000,
            batch_size: 32,
            r1_interval: 16,
            plp_interval: 8,
            ada_step: 0.005,
            ada_half_life_batches: 500.0,
            beta1: 0.0,
            beta2: 0.99,
            mapping_lr_mul: 0.01,
            channel_base: 16384,
            channel_max: 512,
            w_avg_beta: 0.995,
            pl_decay: 0.01,
            augment: AugmentPipeline::default(),
            log_every: 10_000,
            fid_every: 1_000_000,
            fid_samples: 10_000,
        }
    }
}

impl GanConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn desk() -> Self {
        GanConfig {
            latent_dim: 64,
            mapping_layers: 4,
            resolution: 32,
            total_samples: 20_000,
            batch_size: 16,
            channel_base: 512,
            channel_max: 32,
            log_every: 2_000,
            fid_every: 10_000,
            fid_samples: 1_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("gan: {m}")));
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return bad(format!("resolution must be a power of two >= 8, got {}", self.resolution));
        }
        if !(self.g_lr > 0.0 && self.d_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ada_start_p) {
            return bad("ada_start_p must lie in [0, 1]".into());
        }
        if !(self.ada_target > 0.0 && self.ada_target < 1.0) {
            return bad("ada_target must lie in (0, 1)".into());
        }
        if self.latent_dim == 0 || self.mapping_layers == 0 || self.batch_size == 0 {
            return bad("latent_dim, mapping_layers and batch_size must be positive".into());
        }
        if self.r1_interval == 0 || self.plp_interval == 0 {
            return bad("regularisation intervals must be positive".into());
        }
        if self.lambda_gp < 0.0 || self.lambda_plp < 0.0 {
            return bad("penalty weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max.max(1))
    }
}

/// `2 * (log2(res) - 1)`: two per resolution from 4 up, counting each
/// to-RGB layer as sharing its style with the next block's first conv.
pub fn style_count(resolution: usize) -> usize {
    2 * (resolution.trailing_zeros() as usize - 1)
}

fn lrelu(x: &Tensor) -> Tensor {
    x.leaky_relu(0.2).mul_scalar(SQRT_2)
}

pub struct MappingNetwork {
    pub layers: Vec<Linear>,
    pub normalize_input: bool,
}

impl MappingNetwork {
    pub fn new(rng: &mut Rng, dim: usize, depth: usize, lr_mul: f64) -> Self {
        MappingNetwork {
            layers: (0..depth).map(|_| Linear::equalized(rng, dim, dim, 0.0, lr_mul)).collect(),
            normalize_input: true,
        }
    }

    /// Single identity layer without input normalisation: maps `z` to itself.
    pub fn identity(dim: usize) -> Self {
        let eye = Array::from_shape_fn(IxDyn(&[dim, dim]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        MappingNetwork {
            layers: vec![Linear {
                weight: param(eye),
                bias: Some(param(Array::zeros(IxDyn(&[dim])))),
                gain: 1.0,
                bias_gain: 1.0,
            }],
            normalize_input: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].in_features()
    }

    /// Activations sit between layers, so the last layer is affine.
    pub fn forward(&self, z: &Tensor) -> Tensor {
        let mut h = if self.normalize_input {
            z.div(&z.square().mean_axes(&[1], true).add_scalar(1e-8).sqrt())
        } else {
            z.clone()
        };
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h);
            if i + 1 < self.layers.len() {
                h = lrelu(&h);
            }
        }
        h
    }
}

impl Module for MappingNetwork {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), out);
        }
    }
}

pub enum Noise<'a> {
    /// The per-layer noise images fixed at construction.
    Const,
    Zero,
    Random(&'a mut Rng),
}

/// Modulated convolution reading style `w_index`.
pub struct StyleConv {
    pub affine: Linear,
    pub conv: Conv2d,
    pub bias: Tensor,
    pub noise_strength: Option<Tensor>,
    pub noise_const: Option<Tensor>,
    pub w_index: usize,
    pub demodulate: bool,
    pub activate: bool,
    pub upsample: bool,
}

impl StyleConv {
    #[allow(clippy::too_many_arguments)]
    fn new(rng: &mut Rng, dim: usize, cin: usize, cout: usize, k: usize, res: usize, w_index: usize, to_rgb: bool, upsample: bool) -> Self {
        StyleConv {
            affine: Linear::equalized(rng, dim, cin, 1.0, 1.0),
            conv: Conv2d::equalized(rng, cin, cout, k, 1, false),
            bias: param(Array::zeros(IxDyn(&[cout]))),
            noise_strength: (!to_rgb).then(|| param(Array::zeros(IxDyn(&[1])))),
            noise_const: (!to_rgb).then(|| Tensor::constant(randn(rng, &[1, res, res, 1], 1.0))),
            w_index,
            demodulate: !to_rgb,
            activate: !to_rgb,
            upsample,
        }
    }

    fn forward(&self, x: &Tensor, ws: &Tensor, noise: &mut Noise) -> Tensor {
        let n = x.shape()[0];
        let d = ws.shape()[2];
        let cin = self.conv.in_channels;
        let cout = self.conv.out_channels;
        let k = self.conv.kernel;
        let s = self.affine.forward(&ws.narrow(1, self.w_index, 1).reshape(&[n, d]));
        let x = if self.upsample { maps::upsample(x) } else { x.clone() };
        let weight = self.conv.effective_weight();
        let mut y = nn::conv2d(&x.mul(&s.reshape(&[n, 1, 1, cin])), &weight, k, 1, k / 2);
        if self.demodulate {
            let wsq = weight.square().reshape(&[k * k, cin, cout]).sum_axes(&[0], false);
            let demod = s.square().matmul(&wsq).add_scalar(1e-8).powf(-0.5);
            y = y.mul(&demod.reshape(&[n, 1, 1, cout]));
        }
        if let (Some(strength), Some(fixed)) = (&self.noise_strength, &self.noise_const) {
            let fs = fixed.shape();
            let field = match noise {
                Noise::Const => Some(fixed.clone()),
                Noise::Zero => None,
                Noise::Random(rng) => Some(Tensor::constant(randn(*rng, &[n, fs[1], fs[2], 1], 1.0))),
            };
            if let Some(f) = field {
                y = y.add(&f.mul(strength));
            }
        }
        y = y.add(&self.bias);
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }
}

impl Module for StyleConv {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.affine.visit(&join(prefix, "affine"), out);
        self.conv.visit(&join(prefix, "conv"), out);
        out.push((join(prefix, "bias"), self.bias.clone()));
        if let Some(t) = &self.noise_strength {
            out.push((join(prefix, "noise_strength"), t.clone()));
        }
        if let Some(t) = &self.noise_const {
            out.push((join(prefix, "noise_const"), t.clone()));
        }
    }
}

pub struct SynthesisBlock {
    pub resolution: usize,
    pub conv0: Option<StyleConv>,
    pub conv1: StyleConv,
    pub to_rgb: StyleConv,
}

pub struct Synthesis {
    pub const_input: Tensor,
    pub blocks: Vec<SynthesisBlock>,
    pub resolution: usize,
    num_ws: usize,
}

impl Synthesis {
    pub fn new(rng: &mut Rng, cfg: &GanConfig) -> Self {
        let d = cfg.latent_dim;
        let c4 = cfg.channels(4);
        let mut blocks = vec![SynthesisBlock {
            resolution: 4,
            conv0: None,
            conv1: StyleConv::new(rng, d, c4, c4, 3, 4, 0, false, false),
            to_rgb: StyleConv::new(rng, d, c4, 3, 1, 4, 1, true, false),
        }];
        let mut res = 8;
        let mut b = 1;
        while res <= cfg.resolution {
            let (cin, cout) = (cfg.channels(res / 2), cfg.channels(res));
            blocks.push(SynthesisBlock {
                resolution: res,
                conv0: Some(StyleConv::new(rng, d, cin, cout, 3, res, 2 * b - 1, false, true)),
                conv1: StyleConv::new(rng, d, cout, cout, 3, res, 2 * b, false, false),
                to_rgb: StyleConv::new(rng, d, cout, 3, 1, res, 2 * b + 1, true, false),
            });
            res *= 2;
            b += 1;
        }
        let mut s = Synthesis {
            const_input: param(randn(rng, &[1, 4, 4, c4], 1.0)),
            blocks,
            resolution: cfg.resolution,
            num_ws: 0,
        };
        s.num_ws = s.style_indices().len();
        s
    }

    /// Every style index some layer reads.
    pub fn style_indices(&self) -> BTreeSet<usize> {
        self.blocks
            .iter()
            .flat_map(|b| b.conv0.iter().chain([&b.conv1, &b.to_rgb]))
            .map(|l| l.w_index)
            .collect()
    }

    pub fn num_ws(&self) -> usize {
        self.num_ws
    }

    pub fn forward(&self, ws: &Tensor, mut noise: Noise) -> Tensor {
        let n = ws.shape()[0];
        let c4 = self.const_input.shape()[3];
        let mut x = self.const_input.broadcast_to(&[n, 4, 4, c4]);
        let mut img: Option<Tensor> = None;
        for b in &self.blocks {
            if let Some(c0) = &b.conv0 {
                x = c0.forward(&x, ws, &mut noise);
            }
            x = b.conv1.forward(&x, ws, &mut noise);
            let rgb = b.to_rgb.forward(&x, ws, &mut noise);
            img = Some(match img {
                Some(prev) => maps::upsample(&prev).add(&rgb),
                None => rgb,
            });
        }
        img.expect("at least one block")
    }
}

impl Module for Synthesis {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "const"), self.const_input.clone()));
        for b in &self.blocks {
            let p = join(prefix, &format!("b{}", b.resolution));
            if let Some(c0) = &b.conv0 {
                c0.visit(&join(&p, "conv0"), out);
            }
            b.conv1.visit(&join(&p, "conv1"), out);
            b.to_rgb.visit(&join(&p, "torgb"), out);
        }
    }
}

pub struct Generator {
    pub mapping: MappingNetwork,
    pub synthesis: Synthesis,
    /// Running mean of mapped latents.
    pub w_avg: Tensor,
    pub config: GanConfig,
}

impl Generator {
    pub fn new(cfg: &GanConfig, rng: &mut Rng) -> Self {
        Generator {
            mapping: MappingNetwork::new(rng, cfg.latent_dim, cfg.mapping_layers, cfg.mapping_lr_mul),
            synthesis: Synthesis::new(rng, cfg),
            w_avg: Tensor::constant(Array::zeros(IxDyn(&[cfg.latent_dim]))),
            config: cfg.clone(),
        }
    }

    pub fn num_ws(&self) -> usize {
        self.synthesis.num_ws()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn map(&self, z: &Tensor) -> Result<Tensor> {
        map_latent(&self.mapping, z)
    }

    pub fn synthesize(&self, w_plus: &Tensor, noise: Noise) -> Result<Tensor> {
        let s = w_plus.shape();
        if s.len() != 3 || s[1] != self.num_ws() || s[2] != self.latent_dim() {
            return Err(arg(format!(
                "expected W+ codes of shape [N, {}, {}], got {s:?}",
                self.num_ws(),
                self.latent_dim()
            )));
        }
        Ok(self.synthesis.forward(w_plus, noise))
    }

    pub fn parameters_list(&self) -> Vec<Tensor> {
        self.parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Generator> {
        let cfg: GanConfig = serde_json::from_value(ckpt.meta.config.clone())
            .map_err(|e| Error::Config(format!("generator checkpoint config: {e}")))?;
        let g = Generator::new(&cfg, &mut seeding::rng(0));
        ckpt.load_module("generator", &g)?;
        Ok(g)
    }
}

impl Module for Generator {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.mapping.visit(&join(prefix, "mapping"), out);
        self.synthesis.visit(&join(prefix, "synthesis"), out);
        out.push((join(prefix, "w_avg"), self.w_avg.clone()));
    }
}

pub fn map_latent(mapping: &MappingNetwork, z: &Tensor) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 2 || s[1] != mapping.dim() {
        return Err(arg(format!("expected latents of shape [N, {}], got {s:?}", mapping.dim())));
    }
    Ok(mapping.forward(z))
}

/// `[N, d]` to `[N, L, d]` with every row equal to `w`.
pub fn broadcast_latent(w: &Tensor, num_ws: usize) -> Tensor {
    let s = w.shape();
    w.reshape(&[s[0], 1, s[1]]).broadcast_to(&[s[0], num_ws, s[1]])
}

struct DBlock {
    conv0: Conv2d,
    conv1: Conv2d,
    skip: Conv2d,
}

pub struct Discriminator {
    from_rgb: Conv2d,
    blocks: Vec<(usize, DBlock)>,
    epilogue_conv: Conv2d,
    fc: Linear,
    out: Linear,
}

impl Discriminator {
    pub fn new(cfg: &GanConfig, rng: &mut Rng) -> Self {
        let mut blocks = Vec::new();
        let mut res = cfg.resolution;
        while res > 4 {
            let (cin, cout) = (cfg.channels(res), cfg.channels(res / 2));
            blocks.push((
                res,
                DBlock {
                    conv0: Conv2d::equalized(rng, cin, cin, 3, 1, true),
                    conv1: Conv2d::equalized(rng, cin, cout, 3, 1, true),
                    skip: Conv2d::equalized(rng, cin, cout, 1, 1, false),
                },
            ));
            res /= 2;
        }
        let c4 = cfg.channels(4);
        Discriminator {
            from_rgb: Conv2d::equalized(rng, 3, cfg.channels(cfg.resolution), 1, 1, true),
            blocks,
            epilogue_conv: Conv2d::equalized(rng, c4 + 1, c4, 3, 1, true),
            fc: Linear::equalized(rng, c4 * 16, c4, 0.0, 1.0),
            out: Linear::equalized(rng, c4, 1, 0.0, 1.0),
        }
    }

    /// One logit per image.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.shape()[0];
        let mut h = lrelu(&self.from_rgb.forward(x));
        for (_, b) in &self.blocks {
            let y = lrelu(&b.conv0.forward(&h));
            let y = maps::avg_pool(&lrelu(&b.conv1.forward(&y)));
            let s = b.skip.forward(&maps::avg_pool(&h));
            h = y.add(&s).mul_scalar(std::f64::consts::FRAC_1_SQRT_2);
        }
        let c = h.shape()[3];
        let mean = h.mean_axes(&[0], true);
        let sd = h.sub(&mean).square().mean_axes(&[0], false).add_scalar(1e-8).sqrt().mean_all();
        let stat = sd.reshape(&[1, 1, 1, 1]).broadcast_to(&[n, 4, 4, 1]);
        let h = lrelu(&self.epilogue_conv.forward(&Tensor::concat(&[h, stat], 3)));
        let h = lrelu(&self.fc.forward(&h.reshape(&[n, 16 * c])));
        self.out.forward(&h).reshape(&[n])
    }

    pub fn parameters_list(&self) -> Vec<Tensor> {
        self.parameters().into_iter().map(|(_, t)| t).collect()
    }
}

impl Module for Discriminator {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), out);
        for (res, b) in &self.blocks {
            let p = join(prefix, &format!("b{res}"));
            b.conv0.visit(&join(&p, "conv0"), out);
            b.conv1.visit(&join(&p, "conv1"), out);
            b.skip.visit(&join(&p, "skip"), out);
        }
        self.epilogue_conv.visit(&join(prefix, "epilogue.conv"), out);
        self.fc.visit(&join(prefix, "epilogue.fc"), out);
        self.out.visit(&join(prefix, "epilogue.out"), out);
    }
}

/// Batch mean of the squared input-gradient norm of `d` at `real`, which must
/// be a gradient-tracking leaf. Differentiable with respect to `d`'s weights.
pub fn r1_penalty(d: &dyn Fn(&Tensor) -> Tensor, real: &Tensor) -> Tensor {
    let n = real.shape()[0];
    let logits = d(real);
    let g = grad(&logits.sum_all(), &[real], true).remove(0);
    g.square().sum_all().mul_scalar(1.0 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlpState {
    pub mean: f64,
    pub decay: f64,
}

impl PlpState {
    pub fn new(decay: f64) -> Self {
        PlpState { mean: 0.0, decay }
    }
}

pub struct PlpOutput {
    pub penalty: Tensor,
    pub lengths: Vec<f64>,
    pub noise: Array,
}

/// Path-length regulariser. `g` maps `[N, L, d]` codes to NHWC images; the
/// image-space probe is unit Gaussian noise scaled by `1/sqrt(H*W)`. Each
/// length is `sqrt(mean_L sum_d J^T y)^2`; the running mean moves first and the
/// penalty is the mean squared deviation from the updated value.
pub fn path_length_penalty(g: &dyn Fn(&Tensor) -> Tensor, w_plus: &Tensor, state: &mut PlpState, rng: &mut Rng) -> PlpOutput {
    let img = g(w_plus);
    let s = img.shape();
    let scale = 1.0 / ((s[1] * s[2]) as f64).sqrt();
    let noise = randn(rng, &s, scale);
    let jvp = grad(&img.mul(&Tensor::constant(noise.clone())).sum_all(), &[w_plus], true).remove(0);
    let lengths_t = jvp.square().sum_axes(&[2], false).mean_axes(&[1], false).sqrt();
    let lengths = lengths_t.to_vec();
    let batch_mean = lengths.iter().sum::<f64>() / lengths.len().max(1) as f64;
    state.mean += state.decay * (batch_mean - state.mean);
    let penalty = lengths_t.add_scalar(-state.mean).square().mean_all();
    PlpOutput { penalty, lengths, noise }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaState {
    pub p: f64,
    pub overfit_estimate: f64,
}

impl AdaState {
    pub fn new(p: f64) -> Self {
        AdaState { p, overfit_estimate: 0.0 }
    }
}

/// EMA of `mean(sign(real_logits))` with the configured half-life in batches,
/// then one fixed step of `p` toward the side that brings the estimate back
/// to the target.
pub fn ada_update(state: AdaState, real_logits: &[f64], cfg: &GanConfig) -> AdaState {
    assert!(!real_logits.is_empty(), "ada_update needs logits");
    let batch = real_logits.iter().map(|&v| sign(v)).sum::<f64>() / real_logits.len() as f64;
    let alpha = 1.0 - 0.5f64.powf(1.0 / cfg.ada_half_life_batches.max(1e-9));
    let est = state.overfit_estimate + alpha * (batch - state.overfit_estimate);
    let p = (state.p + cfg.ada_step * sign(est - cfg.ada_target)).clamp(0.0, 1.0);
    AdaState { p, overfit_estimate: est }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugPlan {
    pub flip: bool,
    pub rot: u8,
    pub dx: i32,
    pub dy: i32,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugPlan {
    pub const IDENTITY: AugPlan = AugPlan { flip: false, rot: 0, dx: 0, dy: 0, brightness: 0.0, contrast: 1.0 };

    fn is_geometric(&self) -> bool {
        self.flip || self.rot != 0 || self.dx != 0 || self.dy != 0
    }
}

/// Each enabled stage fires independently per image with probability `p`.
pub fn plan_augmentation(n: usize, size: usize, p: f64, pipeline: &AugmentPipeline, rng: &mut Rng) -> Vec<AugPlan> {
    let shift = ((size as f64 * pipeline.max_translate).round() as i32).max(1);
    let bright = Normal::new(0.0, 0.2).unwrap();
    let log_contrast = Normal::new(0.0, 0.5 * std::f64::consts::LN_2).unwrap();
    (0..n)
        .map(|_| {
            let mut a = AugPlan::IDENTITY;
            if pipeline.flip && rng.random::<f64>() < p {
                a.flip = true;
            }
            if pipeline.rot90 && rng.random::<f64>() < p {
                a.rot = rng.random_range(1..=3);
            }
            if pipeline.translate && rng.random::<f64>() < p {
                a.dx = rng.random_range(-shift..=shift);
                a.dy = rng.random_range(-shift..=shift);
            }
            if pipeline.color && rng.random::<f64>() < p {
                a.brightness = bright.sample(rng);
                a.contrast = log_contrast.sample(rng).exp();
            }
            a
        })
        .collect()
}

pub fn apply_plan(images: &Tensor, plans: &[AugPlan]) -> Tensor {
    if plans.iter().all(|p| *p == AugPlan::IDENTITY) {
        return images.clone();
    }
    let s = images.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let parts: Vec<Tensor> = plans
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut x = images.narrow(0, i, 1);
            if a.is_geometric() {
                x = x.linear_map(&maps::geometric(h, w, c, a.flip, a.rot, a.dx, a.dy), &[h, w, c]);
            }
            if a.brightness != 0.0 || a.contrast != 1.0 {
                let m = x.mean_all();
                x = x.sub(&m).mul_scalar(a.contrast).add(&m).add_scalar(a.brightness);
            }
            x
        })
        .collect();
    Tensor::concat(&parts, 0)
}

/// Differentiable augmentation; `p == 0` returns the input untouched.
pub fn apply_augmentation(images: &Tensor, p: f64, pipeline: &AugmentPipeline, rng: &mut Rng) -> Tensor {
    if p <= 0.0 {
        return images.clone();
    }
    let s = images.shape();
    let plans = plan_augmentation(s[0], s[1], p, pipeline, rng);
    apply_plan(images, &plans)
}

fn gather(data: &Array, idx: &[usize]) -> Array {
    data.select(Axis(0), idx)
}

pub fn sample_latents(n: usize, dim: usize, rng: &mut Rng) -> Tensor {
    Tensor::constant(Array::from_shape_simple_fn(IxDyn(&[n, dim]), || StandardNormal.sample(rng)))
}

/// `n` images from `z ~ N(0, I)` through map, broadcast and synthesis with the
/// fixed noise images. Returns `[n, R, R, 3]` in `[-1, 1]` units.
pub fn sample_faces(generator: &Generator, n: usize, rng: &mut Rng) -> Array {
    let r = generator.config.resolution;
    let _g = no_grad();
    let mut chunks = Vec::new();
    let mut done = 0;
    while done < n {
        let b = (n - done).min(64);
        let z = sample_latents(b, generator.latent_dim(), rng);
        let w = generator.mapping.forward(&z);
        let img = generator.synthesis.forward(&broadcast_latent(&w, generator.num_ws()), Noise::Const);
        chunks.push(img.to_array());
        done += b;
    }
    if chunks.is_empty() {
        return Array::zeros(IxDyn(&[0, r, r, 3]));
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogRecord {
    pub samples_seen: u64,
    pub g_loss: f64,
    pub d_loss: f64,
    pub r1: Option<f64>,
    pub plp: Option<f64>,
    pub ada_p: f64,
    pub fid: Option<f64>,
}

#[derive(Default)]
pub struct GanTrainOptions {
    /// Held-out real images for FID tracking; no FID when absent.
    pub fid_reference: Option<Array>,
    pub feature_seed: u64,
    pub log_path: Option<PathBuf>,
    /// Where to dump the models if a loss goes non-finite.
    pub diagnostic_path: Option<PathBuf>,
}

pub struct TrainedGan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub ada: AdaState,
    pub plp: PlpState,
    pub samples_seen: u64,
    pub log: Vec<GanLogRecord>,
    pub fid_initial: Option<f64>,
    pub fid_final: Option<f64>,
    pub rng: Rng,
}

impl TrainedGan {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("gan", serde_json::to_value(&self.generator.config).unwrap());
        c.insert_module("generator", &self.generator);
        c.insert_module("discriminator", &self.discriminator);
        c.meta.samples_seen = self.samples_seen;
        c.meta.rng_state = Some(checkpoint::rng_state(&self.rng));
        c.with_extra("ada_p", self.ada.p)
            .with_extra("pl_mean", self.plp.mean)
            .with_extra("fid_initial", self.fid_initial)
            .with_extra("fid_final", self.fid_final)
    }
}

fn fid_of(generator: &Generator, reference: &Array, n: usize, seed: u64) -> Result<f64> {
    let feats = RandomConvPyramid::standard(seed);
    let fake = sample_faces(generator, n.max(2), &mut seeding::rng_for(seed, "fid-latents"));
    crate::latent_encoder::fid(&feats, &fake, reference)
}

/// Trains on `images` (any size; resized to the configured resolution).
pub fn train_gan(images: &[RgbImage], cfg: &GanConfig, seed: u64, opts: &GanTrainOptions) -> Result<TrainedGan> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(arg("cannot train a GAN on an empty dataset"));
    }
    let r = cfg.resolution as u32;
    let resized: Vec<RgbImage> = images
        .iter()
        .map(|im| if im.dimensions() == (r, r) { im.clone() } else { crate::imaging::resize_rgb(im, r, r) })
        .collect();
    let data = images_to_array(&resized);
    let mut rng = seeding::rng_for(seed, "gan");
    let generator = Generator::new(cfg, &mut seeding::rng_for(seed, "gan-init-g"));
    let discriminator = Discriminator::new(cfg, &mut seeding::rng_for(seed, "gan-init-d"));
    let g_params = generator.parameters_list();
    let d_params = discriminator.parameters_list();
    let mut g_opt = Adam::new(cfg.g_lr, cfg.beta1, cfg.beta2);
    let mut d_opt = Adam::new(cfg.d_lr, cfg.beta1, cfg.beta2);
    let mut ada = AdaState::new(cfg.ada_start_p);
    let mut plp = PlpState::new(cfg.pl_decay);
    let mut log = Vec::new();
    let mut log_file = match &opts.log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(OpenOptions::new().create(true).append(true).open(p)?)
        }
        None => None,
    };

    let fid_n = cfg.fid_samples;
    let fid_initial = match &opts.fid_reference {
        Some(reference) => Some(fid_of(&generator, reference, fid_n, opts.feature_seed)?),
        None => None,
    };
    let mut fid_final = fid_initial;
    let mut samples_seen = 0u64;
    let mut step = 0u64;
    let mut next_log = cfg.log_every;
    let mut next_fid = if cfg.fid_every > 0 { cfg.fid_every } else { u64::MAX };
    let b = cfg.batch_size;
    let n_ws = generator.num_ws();
    let pipeline = cfg.augment.clone();

    let abort = |what: &str, generator: &Generator, discriminator: &Discriminator, seen: u64| -> Error {
        if let Some(path) = &opts.diagnostic_path {
            let mut c = Checkpoint::new("gan-diagnostic", serde_json::to_value(cfg).unwrap());
            c.insert_module("generator", generator);
            c.insert_module("discriminator", discriminator);
            c.meta.samples_seen = seen;
            if let Err(e) = c.save(path) {
                log::error!("could not write diagnostic checkpoint: {e}");
            }
        }
        Error::Numerical(format!("non-finite {what} after {seen} samples"))
    };

    while samples_seen < cfg.total_samples {
        step += 1;
        // Discriminator.
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.shape()[0])).collect();
        let real = Tensor::constant(gather(&data, &idx));
        let fake = {
            let _g = no_grad();
            let z = sample_latents(b, cfg.latent_dim, &mut rng);
            let w = generator.mapping.forward(&z);
            generator.synthesis.forward(&broadcast_latent(&w, n_ws), Noise::Random(&mut rng)).detach()
        };
        let real_aug = apply_augmentation(&real, ada.p, &pipeline, &mut rng);
        let fake_aug = apply_augmentation(&fake, ada.p, &pipeline, &mut rng);
        let real_logits = discriminator.forward(&real_aug);
        let d_loss = discriminator
            .forward(&fake_aug)
            .softplus()
            .mean_all()
            .add(&real_logits.neg().softplus().mean_all());
        let d_loss_v = d_loss.item();
        if !d_loss_v.is_finite() {
            return Err(abort("discriminator loss", &generator, &discriminator, samples_seen));
        }
        let grads = grad(&d_loss, &d_params.iter().collect::<Vec<_>>(), false);
        d_opt.step(&d_params, &grads);
        ada = ada_update(ada, &real_logits.to_vec(), cfg);

        let mut r1_v = None;
        if cfg.lambda_gp > 0.0 && step % cfg.r1_interval == 0 {
            let leaf = Tensor::leaf(real_aug.to_array());
            let r1 = r1_penalty(&|x| discriminator.forward(x), &leaf);
            let loss = r1.mul_scalar(0.5 * cfg.lambda_gp * cfg.r1_interval as f64);
            let v = r1.item();
            if !v.is_finite() {
                return Err(abort("R1 penalty", &generator, &discriminator, samples_seen));
            }
            r1_v = Some(v);
            let grads = grad(&loss, &d_params.iter().collect::<Vec<_>>(), false);
            d_opt.step(&d_params, &grads);
        }

        // Generator.
        let z = sample_latents(b, cfg.latent_dim, &mut rng);
        let w = generator.mapping.forward(&z);
        {
            let mean_w = w.value().mean_axis(Axis(0)).unwrap();
            let beta = cfg.w_avg_beta;
            generator.w_avg.update_value(|a| a.zip_mut_with(&mean_w, |x, m| *x = m + beta * (*x - m)));
        }
        let fake = generator.synthesis.forward(&broadcast_latent(&w, n_ws), Noise::Random(&mut rng));
        let fake_aug = apply_augmentation(&fake, ada.p, &pipeline, &mut rng);
        let g_loss = discriminator.forward(&fake_aug).neg().softplus().mean_all();
        let g_loss_v = g_loss.item();
        if !g_loss_v.is_finite() {
            return Err(abort("generator loss", &generator, &discriminator, samples_seen));
        }
        let grads = grad(&g_loss, &g_params.iter().collect::<Vec<_>>(), false);
        g_opt.step(&g_params, &grads);

        let mut plp_v = None;
        if cfg.lambda_plp > 0.0 && step % cfg.plp_interval == 0 {
            let pb = (b / 2).max(1);
            let z = sample_latents(pb, cfg.latent_dim, &mut rng);
            let ws = broadcast_latent(&generator.mapping.forward(&z), n_ws);
            let noise_seed: u64 = rng.random();
            let out = path_length_penalty(
                &|wp| generator.synthesis.forward(wp, Noise::Random(&mut seeding::rng(noise_seed))),
                &ws,
                &mut plp,
                &mut rng,
            );
            let v = out.penalty.item();
            if !v.is_finite() {
                return Err(abort("path-length penalty", &generator, &discriminator, samples_seen));
            }
            plp_v = Some(v);
            let loss = out.penalty.mul_scalar(cfg.lambda_plp * cfg.plp_interval as f64);
            if loss.requires_grad() {
                let grads = grad(&loss, &g_params.iter().collect::<Vec<_>>(), false);
                g_opt.step(&g_params, &grads);
            }
        }

        samples_seen += b as u64;
        let mut fid = None;
        let finished = samples_seen >= cfg.total_samples;
        if let Some(reference) = &opts.fid_reference {
            if samples_seen >= next_fid || finished {
                let v = fid_of(&generator, reference, fid_n, opts.feature_seed)?;
                fid = Some(v);
                fid_final = Some(v);
                while next_fid <= samples_seen {
                    next_fid = next_fid.saturating_add(cfg.fid_every.max(1));
                }
            }
        }
        if samples_seen >= next_log || finished || fid.is_some() {
            let rec = GanLogRecord { samples_seen, g_loss: g_loss_v, d_loss: d_loss_v, r1: r1_v, plp: plp_v, ada_p: ada.p, fid };
            log::info!("gan {samples_seen}: g {g_loss_v:.4} d {d_loss_v:.4} p {:.3}{}", ada.p, fid.map(|f| format!(" fid {f:.3}")).unwrap_or_default());
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            log.push(rec);
            while next_log <= samples_seen {
                next_log += cfg.log_every.max(1);
            }
        }
    }

    Ok(TrainedGan {
        generator,
        discriminator,
        ada,
        plp,
        samples_seen,
        log,
        fid_initial,
        fid_final,
        rng,
    })
}

pub fn generator_hash(g: &Generator) -> String {
    nn::state_hash(g)
}

#[cfg(test)]
mod tests;
