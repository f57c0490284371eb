//! Stage 2: an inversion encoder trained against the frozen generator, the
//! AE/VAE pretraining baselines, and the image-set metrics they report.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{arg, Error, Result};
use crate::features::FeatureExtractor;
use crate::gan_prior::{Generator, Noise};
use crate::imaging::{array_to_images, images_to_array};
use crate::nn::optim::Adam;
use crate::nn::{self, join, maps, randn, Conv2d, Linear, Module};
use crate::seeding::{self, Rng};
use crate::tensor::{grad, no_grad, Array, Tensor};
use crate::trunk::{RunMode, Trunk, TrunkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub lambda_id: f64,
    pub lambda_reg: f64,
    pub input_size: usize,
    /// Counted in single images.
    pub total_steps: u64,
    pub trunk_depth: usize,
    pub use_squeeze_excitation: bool,
    pub base_channels: usize,
    pub fpn_channels: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: u64,
    pub preview_every: u64,
    pub running_loss_decay: f64,
    /// AE/VAE baselines.
    pub ae_latent_dim: usize,
    pub vae_beta: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            lambda_l2: 1.0,
            lambda_lpips: 0.8,
            lambda_id: 0.0,
            lambda_reg: 0.0,
            input_size: 112,
            total_steps: 16_000_000,
            trunk_depth: 50,
            use_squeeze_excitation: true,
            base_channels: 64,
            fpn_channels: 512,
            batch_size: 8,
            lr: 1e-4,
            log_every: 10_000,
            preview_every: 100_000,
            running_loss_decay: 0.98,
            ae_latent_dim: 512,
            vae_beta: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn desk() -> Self {
        EncoderConfig {
            input_size: 32,
            total_steps: 40_000,
            trunk_depth: 1,
            base_channels: 8,
            fpn_channels: 32,
            lr: 1e-3,
            log_every: 1_000,
            preview_every: 10_000,
            ae_latent_dim: 64,
            ..Self::default()
        }
    }

    pub fn trunk(&self) -> TrunkConfig {
        TrunkConfig {
            input_size: self.input_size,
            depth: self.trunk_depth,
            base_channels: self.base_channels,
            use_squeeze_excitation: self.use_squeeze_excitation,
            ..TrunkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_l2", self.lambda_l2), ("lambda_lpips", self.lambda_lpips), ("lambda_id", self.lambda_id), ("lambda_reg", self.lambda_reg)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("encoder: {name} must be non-negative")));
            }
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || self.fpn_channels == 0 {
            return Err(Error::Config("encoder: batch_size, lr and fpn_channels must be positive".into()));
        }
        self.trunk().validate()
    }
}

struct Map2Style {
    convs: Vec<Conv2d>,
    linear: Linear,
}

impl Map2Style {
    fn new(rng: &mut Rng, channels: usize, spatial: usize, latent: usize) -> Self {
        let mut s = spatial;
        let mut convs = Vec::new();
        while s > 1 {
            convs.push(Conv2d::new(rng, channels, channels, 3, 2, true));
            s = maps::conv_out_size(s, 3, 2, 1);
        }
        Map2Style { convs, linear: Linear::equalized(rng, channels, latent, 0.0, 1.0) }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h).leaky_relu(0.2);
        }
        let s = h.shape();
        self.linear.forward(&h.reshape(&[s[0], s[3]]))
    }
}

impl Module for Map2Style {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), out);
        }
        self.linear.visit(&join(prefix, "linear"), out);
    }
}

/// Which pyramid level (0 shallow, 1 mid, 2 deep) feeds style head `i` of `l`.
pub fn head_level(i: usize, l: usize) -> usize {
    if i < l.div_ceil(3) {
        2
    } else if i < (2 * l).div_ceil(3) {
        1
    } else {
        0
    }
}

/// Residual trunk, a three-level feature pyramid from its last three
/// stages, and one style head per generator layer. Codes are offsets from
/// the generator's average latent.
pub struct Encoder {
    pub trunk: Trunk,
    laterals: Vec<Conv2d>,
    heads: Vec<Map2Style>,
    pub w_avg: Tensor,
    pub num_ws: usize,
    pub latent_dim: usize,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, num_ws: usize, latent_dim: usize, w_avg: &Array, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tc = cfg.trunk();
        let trunk = Trunk::new(&tc, rng)?;
        let ch = tc.stage_channels();
        let sizes = tc.stage_sizes();
        let f = cfg.fpn_channels;
        let laterals = (1..4).map(|s| Conv2d::new(rng, ch[s], f, 1, 1, true)).collect();
        let heads = (0..num_ws).map(|i| Map2Style::new(rng, f, sizes[1 + head_level(i, num_ws)], latent_dim)).collect();
        Ok(Encoder {
            trunk,
            laterals,
            heads,
            w_avg: Tensor::constant(w_avg.clone()),
            num_ws,
            latent_dim,
            config: cfg.clone(),
        })
    }

    pub fn for_generator(cfg: &EncoderConfig, g: &Generator, rng: &mut Rng) -> Result<Self> {
        if cfg.input_size > g.config.resolution {
            return Err(Error::Config(format!(
                "encoder input {} exceeds generator resolution {}",
                cfg.input_size, g.config.resolution
            )));
        }
        Self::new(cfg, g.num_ws(), g.latent_dim(), &g.w_avg.to_array(), rng)
    }

    /// `[N, L, d]` codes for `[N, s, s, 3]` images.
    pub fn forward(&self, x: &Tensor, mode: &mut RunMode) -> Tensor {
        let feats = self.trunk.forward(x, mode);
        let deep = self.laterals[2].forward(&feats[3]);
        let up = |t: &Tensor, like: &Tensor| {
            let s = like.shape();
            maps::resize(t, s[1], s[2])
        };
        let mid = up(&deep, &feats[2]).add(&self.laterals[1].forward(&feats[2]));
        let shallow = up(&mid, &feats[1]).add(&self.laterals[0].forward(&feats[1]));
        let levels = [shallow, mid, deep];
        let styles: Vec<Tensor> = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| h.forward(&levels[head_level(i, self.num_ws)]))
            .collect();
        Tensor::stack(&styles, 1).add(&self.w_avg)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.trunk.check_input(x)?;
        let _g = no_grad();
        Ok(self.forward(x, &mut RunMode::eval()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Encoder> {
        let cfg: EncoderConfig = serde_json::from_value(ckpt.meta.config.clone())
            .map_err(|e| Error::Config(format!("encoder checkpoint config: {e}")))?;
        let num_ws = ckpt.meta.extra.get("num_ws").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let latent = ckpt.meta.extra.get("latent_dim").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let w_avg = Array::zeros(IxDyn(&[latent]));
        let e = Encoder::new(&cfg, num_ws, latent, &w_avg, &mut seeding::rng(0))?;
        ckpt.load_module("encoder", &e)?;
        Ok(e)
    }

    pub fn checkpoint(&self, stage: &str) -> Checkpoint {
        let mut c = Checkpoint::new(stage, serde_json::to_value(&self.config).unwrap());
        c.insert_module("encoder", self);
        c.with_extra("num_ws", self.num_ws).with_extra("latent_dim", self.latent_dim)
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.trunk.visit(&join(prefix, "trunk"), out);
        for (i, l) in self.laterals.iter().enumerate() {
            l.visit(&join(prefix, &format!("fpn.lateral{}", i + 1)), out);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("map2style.{i}")), out);
        }
        out.push((join(prefix, "w_avg"), self.w_avg.clone()));
    }
}

/// Per-image distance: for each feature level, channel vectors are scaled
/// to unit length, then the squared difference is summed over channels and
/// averaged over positions; levels are summed. Returns `[N]`.
pub fn perceptual_distance_per_image(net: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Tensor {
    let fa = net.feature_maps(a);
    let fb = net.feature_maps(b);
    let unit = |f: &Tensor| f.div(&f.square().sum_axes(&[3], true).add_scalar(1e-10).sqrt());
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let d = unit(x).sub(&unit(y)).square().sum_axes(&[3], false).mean_axes(&[1, 2], false);
        total = Some(match total {
            Some(t) => t.add(&d),
            None => d,
        });
    }
    total.expect("feature extractor returned no levels")
}

pub fn perceptual_distance(net: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Tensor {
    perceptual_distance_per_image(net, a, b).mean_all()
}

/// Per-image Euclidean norm of the residual, averaged over the batch. Exactly
/// zero at equality.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Tensor {
    let ss = a.sub(b).square().sum_axes(&[1, 2, 3], false);
    ss.add_scalar(1e-12).sqrt().add_scalar(-1e-6).mean_all()
}

pub struct ReconLoss {
    pub total: Tensor,
    pub l2: f64,
    pub lpips: f64,
}

/// Downscales `recon_full` bilinearly to the size of `target`, then
/// `lambda_l2 * L2 + lambda_lpips * perceptual`.
pub fn reconstruction_loss(cfg: &EncoderConfig, net: &dyn FeatureExtractor, target: &Tensor, recon_full: &Tensor) -> ReconLoss {
    let s = target.shape();
    let recon = maps::resize(recon_full, s[1], s[2]);
    let l2 = l2_distance(target, &recon);
    let mut total = l2.mul_scalar(cfg.lambda_l2);
    let mut lp = 0.0;
    if cfg.lambda_lpips > 0.0 {
        let p = perceptual_distance(net, target, &recon);
        lp = p.item();
        total = total.add(&p.mul_scalar(cfg.lambda_lpips));
    }
    ReconLoss { l2: l2.item(), lpips: lp, total }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLogRecord {
    pub samples_seen: u64,
    pub loss: f64,
    pub running_loss: f64,
    pub l2: f64,
    pub lpips: f64,
    pub kl: Option<f64>,
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub lambda_id: f64,
    pub lambda_reg: f64,
}

#[derive(Default)]
pub struct EncoderTrainOptions {
    pub log_path: Option<PathBuf>,
    pub preview_dir: Option<PathBuf>,
    pub diagnostic_path: Option<PathBuf>,
}

pub struct TrainedEncoder {
    pub encoder: Encoder,
    pub samples_seen: u64,
    pub log: Vec<EncoderLogRecord>,
    pub initial_running_loss: Option<f64>,
    pub final_running_loss: Option<f64>,
    pub rng: Rng,
}

impl TrainedEncoder {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.encoder.checkpoint("encoder");
        c.meta.samples_seen = self.samples_seen;
        c.meta.rng_state = Some(checkpoint::rng_state(&self.rng));
        c
    }
}

/// Inputs row above reconstructions row, both at the input size.
pub fn preview_grid(inputs: &Array, recons: &Array) -> RgbImage {
    let a = array_to_images(inputs);
    let b = array_to_images(recons);
    let n = a.len().min(b.len()).max(1);
    let (w, h) = a.first().map(|i| i.dimensions()).unwrap_or((1, 1));
    let mut grid = RgbImage::new(w * n as u32, h * 2);
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        image::imageops::replace(&mut grid, x, (i as u32 * w) as i64, 0);
        image::imageops::replace(&mut grid, y, (i as u32 * w) as i64, h as i64);
    }
    grid
}

fn prepare(images: &[RgbImage], size: usize) -> Array {
    let s = size as u32;
    let resized: Vec<RgbImage> = images
        .iter()
        .map(|im| if im.dimensions() == (s, s) { im.clone() } else { crate::imaging::resize_rgb(im, s, s) })
        .collect();
    images_to_array(&resized)
}

struct Logger {
    file: Option<std::fs::File>,
}

impl Logger {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(d) = p.parent() {
                    std::fs::create_dir_all(d)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p)?)
            }
            None => None,
        };
        Ok(Logger { file })
    }

    fn write(&mut self, rec: &EncoderLogRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(rec)?)?;
        }
        Ok(())
    }
}

/// Minimises the reconstruction loss through the frozen generator. Only the
/// encoder is handed to the optimizer; the generator hash is checked at the
/// end.
pub fn train_encoder(
    prior: &[RgbImage],
    generator: &Generator,
    cfg: &EncoderConfig,
    feature_net: &dyn FeatureExtractor,
    seed: u64,
    opts: &EncoderTrainOptions,
) -> Result<TrainedEncoder> {
    cfg.validate()?;
    if prior.is_empty() {
        return Err(arg("cannot train an encoder on an empty dataset"));
    }
    let g_hash = nn::state_hash(generator);
    let data = prepare(prior, cfg.input_size);
    let mut rng = seeding::rng_for(seed, "encoder");
    let encoder = Encoder::for_generator(cfg, generator, &mut seeding::rng_for(seed, "encoder-init"))?;
    let params: Vec<Tensor> = encoder.parameters().into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut logger = Logger::open(&opts.log_path)?;
    let mut log = Vec::new();
    let (mut running, mut initial) = (None::<f64>, None);
    let mut seen = 0u64;
    let mut next_log = cfg.log_every.max(1);
    let mut next_preview = cfg.preview_every.max(1);
    while seen < cfg.total_steps {
        let b = (cfg.batch_size as u64).min(cfg.total_steps - seen) as usize;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.shape()[0])).collect();
        let x = Tensor::constant(data.select(Axis(0), &idx));
        let codes = encoder.forward(&x, &mut RunMode::train());
        let recon = generator.synthesis.forward(&codes, Noise::Const);
        let loss = reconstruction_loss(cfg, feature_net, &x, &recon);
        let v = loss.total.item();
        if !v.is_finite() {
            if let Some(p) = &opts.diagnostic_path {
                let _ = encoder.checkpoint("encoder-diagnostic").save(p);
            }
            return Err(Error::Numerical(format!("non-finite encoder loss after {seen} samples")));
        }
        let grads = grad(&loss.total, &params.iter().collect::<Vec<_>>(), false);
        opt.step(&params, &grads);
        seen += b as u64;
        let r = match running {
            None => v,
            Some(r) => cfg.running_loss_decay * r + (1.0 - cfg.running_loss_decay) * v,
        };
        running = Some(r);
        initial.get_or_insert(r);
        let finished = seen >= cfg.total_steps;
        if seen >= next_log || finished {
            let rec = EncoderLogRecord {
                samples_seen: seen,
                loss: v,
                running_loss: r,
                l2: loss.l2,
                lpips: loss.lpips,
                kl: None,
                lambda_l2: cfg.lambda_l2,
                lambda_lpips: cfg.lambda_lpips,
                lambda_id: cfg.lambda_id,
                lambda_reg: cfg.lambda_reg,
            };
            log::info!("encoder {seen}: loss {v:.4} running {r:.4}");
            logger.write(&rec)?;
            log.push(rec);
            while next_log <= seen {
                next_log += cfg.log_every.max(1);
            }
        }
        if let Some(dir) = &opts.preview_dir {
            if seen >= next_preview || finished {
                let s = cfg.input_size;
                let k = b.min(8);
                let _g = no_grad();
                let small = maps::resize(&recon.narrow(0, 0, k), s, s).to_array();
                std::fs::create_dir_all(dir)?;
                preview_grid(&x.narrow(0, 0, k).to_array(), &small).save(dir.join(format!("preview_{seen:09}.png")))?;
                while next_preview <= seen {
                    next_preview += cfg.preview_every.max(1);
                }
            }
        }
    }
    if nn::state_hash(generator) != g_hash {
        return Err(Error::Numerical("generator parameters changed during encoder training".into()));
    }
    Ok(TrainedEncoder { encoder, samples_seen: seen, log, initial_running_loss: initial, final_running_loss: running, rng })
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))` per row of `[N, d]`.
pub fn kl_standard_normal(mu: &Tensor, logvar: &Tensor) -> Tensor {
    mu.square().add(&logvar.exp()).add_scalar(-1.0).sub(logvar).sum_axes(&[1], false).mul_scalar(0.5)
}

/// Trunk encoder, a latent bottleneck, and a decoder that retraces the
/// trunk's resolutions with upsample-conv stages.
pub struct AutoEncoder {
    pub trunk: Trunk,
    to_latent: Linear,
    from_latent: Linear,
    decoder: Vec<Conv2d>,
    to_rgb: Conv2d,
    pub variational: bool,
    pub config: EncoderConfig,
    sizes: Vec<usize>,
}

impl AutoEncoder {
    pub fn new(cfg: &EncoderConfig, variational: bool, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tc = cfg.trunk();
        let trunk = Trunk::new(&tc, rng)?;
        let ch = tc.stage_channels();
        let st = tc.stage_sizes();
        let flat = ch[3] * st[3] * st[3];
        let d = cfg.ae_latent_dim;
        let mut sizes: Vec<usize> = st.iter().rev().skip(1).copied().collect();
        sizes.push(cfg.input_size);
        let outs = [ch[2], ch[1], ch[0], ch[0]];
        let mut cin = ch[3];
        let decoder = outs
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(rng, cin, c, 3, 1, true);
                cin = c;
                conv
            })
            .collect();
        Ok(AutoEncoder {
            trunk,
            to_latent: Linear::new(rng, flat, if variational { 2 * d } else { d }, true),
            from_latent: Linear::new(rng, d, flat, true),
            decoder,
            to_rgb: Conv2d::new(rng, cin, 3, 1, 1, true),
            variational,
            config: cfg.clone(),
            sizes,
        })
    }

    /// Returns the reconstruction and, for the variational model, `(mu, logvar)`.
    pub fn forward(&self, x: &Tensor, mode: &mut RunMode, rng: &mut Rng) -> (Tensor, Option<(Tensor, Tensor)>) {
        let n = x.shape()[0];
        let feats = self.trunk.forward(x, mode);
        let deep = &feats[3];
        let s = deep.shape();
        let h = self.to_latent.forward(&deep.reshape(&[n, s[1] * s[2] * s[3]]));
        let d = self.config.ae_latent_dim;
        let (z, stats) = if self.variational {
            let mu = h.narrow(1, 0, d);
            let logvar = h.narrow(1, d, d);
            let eps = Tensor::constant(randn(rng, &[n, d], 1.0));
            (mu.add(&logvar.mul_scalar(0.5).exp().mul(&eps)), Some((mu, logvar)))
        } else {
            (h, None)
        };
        let mut y = self.from_latent.forward(&z).reshape(&[n, s[1], s[2], s[3]]);
        for (conv, &size) in self.decoder.iter().zip(&self.sizes) {
            y = conv.forward(&maps::resize(&y, size, size)).leaky_relu(0.2);
        }
        (self.to_rgb.forward(&y), stats)
    }

    pub fn stage(&self) -> &'static str {
        if self.variational {
            "vae"
        } else {
            "ae"
        }
    }

    /// Stored under the same `encoder.trunk` names as the inversion encoder,
    /// so weight transfer reads either.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.stage(), serde_json::to_value(&self.config).unwrap());
        c.insert_module("encoder.trunk", &self.trunk);
        c.insert_module("decoder", &DecoderView(self));
        c
    }
}

struct DecoderView<'a>(&'a AutoEncoder);

impl Module for DecoderView<'_> {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let a = self.0;
        a.to_latent.visit(&join(prefix, "to_latent"), out);
        a.from_latent.visit(&join(prefix, "from_latent"), out);
        for (i, c) in a.decoder.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), out);
        }
        a.to_rgb.visit(&join(prefix, "to_rgb"), out);
    }
}

impl Module for AutoEncoder {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.trunk.visit(&join(prefix, "trunk"), out);
        DecoderView(self).visit(prefix, out);
    }
}

pub struct TrainedAutoEncoder {
    pub model: AutoEncoder,
    pub samples_seen: u64,
    pub log: Vec<EncoderLogRecord>,
}

impl TrainedAutoEncoder {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.checkpoint();
        c.meta.samples_seen = self.samples_seen;
        c
    }
}

/// Per-image sum of squared pixel errors, plus `beta * KL` when variational.
pub fn train_autoencoder(prior: &[RgbImage], variational: bool, cfg: &EncoderConfig, seed: u64, opts: &EncoderTrainOptions) -> Result<TrainedAutoEncoder> {
    cfg.validate()?;
    if prior.is_empty() {
        return Err(arg("cannot train an autoencoder on an empty dataset"));
    }
    let data = prepare(prior, cfg.input_size);
    let label = if variational { "vae" } else { "ae" };
    let mut rng = seeding::rng_for(seed, label);
    let model = AutoEncoder::new(cfg, variational, &mut seeding::rng_for(seed, &format!("{label}-init")))?;
    let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut logger = Logger::open(&opts.log_path)?;
    let mut log = Vec::new();
    let mut running = None::<f64>;
    let mut seen = 0u64;
    let mut next_log = cfg.log_every.max(1);
    while seen < cfg.total_steps {
        let b = (cfg.batch_size as u64).min(cfg.total_steps - seen) as usize;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.shape()[0])).collect();
        let x = Tensor::constant(data.select(Axis(0), &idx));
        let (recon, stats) = model.forward(&x, &mut RunMode::train(), &mut rng);
        let pix = recon.sub(&x).square().sum_axes(&[1, 2, 3], false).mean_all();
        let (loss, kl) = match &stats {
            Some((mu, logvar)) => {
                let kl = kl_standard_normal(mu, logvar).mean_all();
                let k = kl.item();
                (pix.add(&kl.mul_scalar(cfg.vae_beta)), Some(k))
            }
            None => (pix.clone(), None),
        };
        let v = loss.item();
        if !v.is_finite() {
            if let Some(p) = &opts.diagnostic_path {
                let _ = model.checkpoint().save(p);
            }
            return Err(Error::Numerical(format!("non-finite {label} loss after {seen} samples")));
        }
        let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
        opt.step(&params, &grads);
        seen += b as u64;
        let r = running.map_or(v, |r| cfg.running_loss_decay * r + (1.0 - cfg.running_loss_decay) * v);
        running = Some(r);
        if seen >= next_log || seen >= cfg.total_steps {
            let rec = EncoderLogRecord {
                samples_seen: seen,
                loss: v,
                running_loss: r,
                l2: pix.item(),
                lpips: 0.0,
                kl,
                lambda_l2: 1.0,
                lambda_lpips: 0.0,
                lambda_id: 0.0,
                lambda_reg: 0.0,
            };
            logger.write(&rec)?;
            log.push(rec);
            while next_log <= seen {
                next_log += cfg.log_every.max(1);
            }
        }
    }
    Ok(TrainedAutoEncoder { model, samples_seen: seen, log })
}

/// Pooled features for a batch of `[-1, 1]` NHWC images, in chunks.
pub fn pooled_features(net: &dyn FeatureExtractor, images: &Array) -> Array2<f64> {
    let _g = no_grad();
    let n = images.shape()[0];
    let mut rows = Vec::new();
    let mut dim = 0;
    for start in (0..n).step_by(64) {
        let len = (n - start).min(64);
        let chunk = Tensor::constant(images.slice_axis(Axis(0), (start..start + len).into()).to_owned());
        let f = net.pooled(&chunk).to_array();
        dim = f.shape()[1];
        rows.extend(f.iter().copied());
    }
    Array2::from_shape_vec((n, dim), rows).unwrap()
}

pub fn fid(net: &dyn FeatureExtractor, a: &Array, b: &Array) -> Result<f64> {
    if a.shape()[0] < 2 || b.shape()[0] < 2 {
        return Err(arg("FID needs at least two images per set"));
    }
    fid_from_features(&pooled_features(net, a), &pooled_features(net, b))
}

fn mean_cov(x: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mu: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.iter().cloned().fold(0.0f64, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    min <= 1e-12 * max.max(1e-300)
}

/// Frechet distance between Gaussian fits of two `[n, d]` feature sets.
/// The matrix square root comes from symmetric eigendecompositions with
/// negative eigenvalues clipped to zero.
pub fn fid_from_features(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(arg("feature dimensions differ"));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(arg("FID needs at least two samples per set"));
    }
    let (ma, mut ca) = mean_cov(a);
    let (mb, mut cb) = mean_cov(b);
    if is_singular(&ca) || is_singular(&cb) {
        log::warn!("singular covariance in FID; adding 1e-6 to the diagonal");
        let d = ca.nrows();
        ca += DMatrix::identity(d, d) * 1e-6;
        cb += DMatrix::identity(d, d) * 1e-6;
    }
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sqrt_psd(&ca);
    let m = &sa * &cb * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}
