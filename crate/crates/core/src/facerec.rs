//! Stage 3: the recognition backbone, weight transfer from a pretrained
//! trunk, angular-margin losses and fine-tuning, plus the latent
//! interpolation baseline.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{arg, Error, Result};
use crate::gan_prior::{Generator, Noise};
use crate::groups::GroupClassifier;
use crate::imaging::{array_to_images, images_to_array, resize_rgb};
use crate::latent_encoder::{Encoder, EncoderConfig};
use crate::nn::optim::{Adam, Sgd};
use crate::nn::{self, join, l2_normalize_rows, param, randn, BatchNorm, Linear, Module};
use crate::seeding::{self, Rng};
use crate::tensor::{grad, no_grad, Array, Tensor};
use crate::trunk::{layout_diff, RunMode, Trunk, TrunkConfig, FIRST_CONV};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    ArcFace,
    SphereFace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub conv_dropout: f64,
    /// Dropout inside the output block.
    pub output_dropout: f64,
    pub margin_s: f64,
    pub margin_m: f64,
    pub sphereface_m: f64,
    pub loss: LossKind,
    pub batch_size: usize,
    pub embedding_dim: usize,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        FinetuneSchedule {
            epochs: 100,
            freeze_epochs: 3,
            momentum: 0.9,
            weight_decay: 2e-3,
            lr0: 0.03,
            lr_decay_factor: 1.5,
            lr_decay_every: 5,
            conv_dropout: 0.15,
            output_dropout: 0.15,
            margin_s: 64.0,
            margin_m: 0.5,
            sphereface_m: 4.0,
            loss: LossKind::ArcFace,
            batch_size: 256,
            embedding_dim: 512,
        }
    }
}

impl FinetuneSchedule {
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn desk() -> Self {
        FinetuneSchedule { epochs: 20, batch_size: 32, embedding_dim: 64, margin_s: 16.0, margin_m: 0.3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.momentum, self.weight_decay, self.lr0, self.lr_decay_factor, self.margin_s];
        if self.epochs == 0 || self.lr_decay_every == 0 || self.batch_size == 0 || self.embedding_dim == 0 || pos.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("finetune: schedule values must be positive".into()));
        }
        if self.freeze_epochs >= self.epochs {
            return Err(Error::Config("finetune: freeze_epochs must be below epochs".into()));
        }
        if !(0.0..1.0).contains(&self.conv_dropout) || !(0.0..1.0).contains(&self.output_dropout) {
            return Err(Error::Config("finetune: dropout rates must lie in [0, 1)".into()));
        }
        if !(0.0..PI / 2.0).contains(&self.margin_m) || self.sphereface_m < 1.0 {
            return Err(Error::Config("finetune: margin out of range".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.lr_decay_every;
        self.lr0 / self.lr_decay_factor.powi(steps as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub trunk: TrunkConfig,
    pub embedding_dim: usize,
    pub output_dropout: f64,
}

impl BackboneConfig {
    /// Same trunk as `enc`, so a trained encoder transfers into it.
    pub fn matching(enc: &EncoderConfig, schedule: &FinetuneSchedule) -> Self {
        BackboneConfig { trunk: enc.trunk(), embedding_dim: schedule.embedding_dim, output_dropout: schedule.output_dropout }
    }
}

/// Trunk, then BatchNorm, dropout, fully-connected and BatchNorm producing the
/// embedding; class weights are rows `[C, D]` used after normalisation.
pub struct Backbone {
    pub trunk: Trunk,
    out_bn: BatchNorm,
    fc: Linear,
    emb_bn: BatchNorm,
    pub class_weights: Tensor,
    pub config: BackboneConfig,
    /// "scratch", "encoder", "ae" or "vae".
    pub init: String,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let trunk = Trunk::new(&cfg.trunk, rng)?;
        let c = cfg.trunk.stage_channels()[3];
        let s = cfg.trunk.stage_sizes()[3];
        Ok(Backbone {
            trunk,
            out_bn: BatchNorm::new(c),
            fc: Linear::new(rng, c * s * s, cfg.embedding_dim, true),
            emb_bn: BatchNorm::new(cfg.embedding_dim),
            class_weights: param(randn(rng, &[num_classes.max(1), cfg.embedding_dim], 0.01)),
            config: cfg.clone(),
            init: "scratch".into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.shape()[0]
    }

    pub fn input_size(&self) -> usize {
        self.config.trunk.input_size
    }

    /// Raw embeddings `[N, D]`.
    pub fn forward(&self, x: &Tensor, trunk_mode: &mut RunMode, head_train: bool) -> Tensor {
        let h = self.trunk.forward(x, trunk_mode).pop().unwrap();
        let n = h.shape()[0];
        let mut h = self.out_bn.forward(&h, head_train);
        if head_train && self.config.output_dropout > 0.0 {
            if let Some(rng) = trunk_mode.rng.as_deref_mut() {
                h = nn::dropout(&h, self.config.output_dropout, rng);
            }
        }
        let flat = h.flatten_from(1);
        debug_assert_eq!(flat.shape()[0], n);
        self.emb_bn.forward(&self.fc.forward(&flat), head_train)
    }

    pub fn trunk_features(&self, x: &Tensor) -> Vec<Tensor> {
        let _g = no_grad();
        self.trunk.forward(x, &mut RunMode::eval())
    }

    /// Evaluation-mode embeddings of a batch already at the input size.
    pub fn embed(&self, x: &Tensor) -> Result<Array2<f64>> {
        self.trunk.check_input(x)?;
        let _g = no_grad();
        let e = self.forward(x, &mut RunMode::eval(), false).to_array();
        let s = e.shape().to_vec();
        Ok(e.into_shape_with_order((s[0], s[1])).unwrap())
    }

    /// Embeddings for arbitrary images, resized to the input size, in chunks.
    pub fn embed_images(&self, images: &[RgbImage]) -> Array2<f64> {
        let s = self.input_size() as u32;
        let mut out = Array2::zeros((images.len(), self.config.embedding_dim));
        for (c, chunk) in images.chunks(64).enumerate() {
            let batch: Vec<RgbImage> = chunk
                .iter()
                .map(|im| if im.dimensions() == (s, s) { im.clone() } else { resize_rgb(im, s, s) })
                .collect();
            let e = self.embed(&Tensor::constant(images_to_array(&batch))).expect("resized input");
            out.slice_mut(ndarray::s![c * 64..c * 64 + chunk.len(), ..]).assign(&e);
        }
        out
    }

    /// Names of the parameters trained while the rest is frozen.
    pub fn is_unfrozen(name: &str) -> bool {
        name.starts_with(&format!("trunk.{FIRST_CONV}.")) || name.starts_with("output.") || name == "class_weights"
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("facerec", serde_json::to_value(&self.config).unwrap());
        c.insert_module("backbone", self);
        c.with_extra("init", &self.init).with_extra("num_classes", self.num_classes())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Backbone> {
        let cfg: BackboneConfig = serde_json::from_value(ckpt.meta.config.clone())
            .map_err(|e| Error::Config(format!("backbone checkpoint config: {e}")))?;
        let classes = ckpt.meta.extra.get("num_classes").and_then(|v| v.as_u64()).unwrap_or(1) as usize;
        let mut b = Backbone::new(&cfg, classes, &mut seeding::rng(0))?;
        ckpt.load_module("backbone", &b)?;
        b.init = ckpt.meta.extra.get("init").and_then(|v| v.as_str()).unwrap_or("scratch").to_string();
        Ok(b)
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.trunk.visit(&join(prefix, "trunk"), out);
        self.out_bn.visit(&join(prefix, "output.bn"), out);
        self.fc.visit(&join(prefix, "output.fc"), out);
        self.emb_bn.visit(&join(prefix, "output.bn_emb"), out);
        out.push((join(prefix, "class_weights"), self.class_weights.clone()));
    }
}

/// Fresh backbone whose trunk is copied from the `encoder.trunk` section of a
/// stage-2 (or AE/VAE) checkpoint; the style heads are ignored and the output
/// block and class weights are newly initialised.
pub fn transfer_weights(ckpt: &Checkpoint, cfg: &BackboneConfig, num_classes: usize, rng: &mut Rng) -> Result<Backbone> {
    let mut b = Backbone::new(cfg, num_classes, rng)?;
    let found = ckpt.section("encoder.trunk");
    let expected: Vec<(String, Vec<usize>)> = b.trunk.named_tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();
    let diff = layout_diff(&expected, &found);
    if !diff.is_empty() {
        return Err(Error::Layout(diff.join("\n")));
    }
    b.trunk.load_state_dict(&found).map_err(Error::Layout)?;
    b.init = ckpt.meta.stage.clone();
    Ok(b)
}

fn check_labels(labels: &[usize], classes: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(arg(format!("{} labels for {n} embeddings", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(arg(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// `[N, C]` cosines between unit embeddings and unit class weights.
pub fn cosine_logits(embeddings: &Tensor, class_weights: &Tensor) -> Tensor {
    l2_normalize_rows(embeddings, 1e-12).matmul(&l2_normalize_rows(class_weights, 1e-12).t())
}

fn mask(n: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::constant(Array::from_shape_fn(IxDyn(&[n, c]), |i| f(i[0], i[1])))
}

/// `cos(theta + m)` where that is still monotone in theta, and the linear
/// continuation `cos theta - m sin m` past `theta + m > pi`.
fn additive_margin(cos: &Tensor, m: f64) -> Tensor {
    let sin = cos.square().rsub_scalar(1.0).clamp(1e-12, 1.0).sqrt();
    let inside = cos.mul_scalar(m.cos()).sub(&sin.mul_scalar(m.sin()));
    let outside = cos.add_scalar(-m * m.sin());
    let th = (PI - m).cos();
    let s = cos.shape();
    let v = cos.value().clone();
    let sel = mask(s[0], s[1], |i, j| if v[[i, j]] > th { 1.0 } else { 0.0 });
    inside.mul(&sel).add(&outside.mul(&sel.rsub_scalar(1.0)))
}

fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Tensor {
    let n = logits.shape()[0] as f64;
    logits.log_softmax(1).mul(targets).sum_all().mul_scalar(-1.0 / n)
}

/// Cross-entropy over `s * cos(theta_j + m [j = label])`, batch mean.
pub fn arcface_loss(embeddings: &Tensor, labels: &[usize], class_weights: &Tensor, s: f64, m: f64) -> Result<Tensor> {
    let (n, c) = (embeddings.shape()[0], class_weights.shape()[0]);
    check_labels(labels, c, n)?;
    let targets = mask(n, c, |i, j| (labels[i] == j) as u8 as f64);
    let cos = cosine_logits(embeddings, class_weights);
    let logits = cos.add(&additive_margin(&cos, m).sub(&cos).mul(&targets)).mul_scalar(s);
    Ok(soft_cross_entropy(&logits, &targets))
}

/// Target logit `s * ((-1)^k cos(m theta) - 2k)` with `k = floor(m theta / pi)`.
pub fn sphereface_loss(embeddings: &Tensor, labels: &[usize], class_weights: &Tensor, s: f64, m_mult: f64) -> Result<Tensor> {
    if m_mult < 1.0 {
        return Err(arg("sphereface multiplier must be at least 1"));
    }
    let (n, c) = (embeddings.shape()[0], class_weights.shape()[0]);
    check_labels(labels, c, n)?;
    let targets = mask(n, c, |i, j| (labels[i] == j) as u8 as f64);
    let cos = cosine_logits(embeddings, class_weights);
    let theta = cos.clamp(-1.0 + 1e-12, 1.0 - 1e-12).acos();
    let tv = theta.value().clone();
    let k = |i: usize, j: usize| (m_mult * tv[[i, j]] / PI).floor();
    let sign = mask(n, c, |i, j| if k(i, j) as i64 % 2 == 0 { 1.0 } else { -1.0 });
    let offset = mask(n, c, |i, j| -2.0 * k(i, j));
    let psi = theta.mul_scalar(m_mult).cos().mul(&sign).add(&offset);
    let logits = cos.add(&psi.sub(&cos).mul(&targets)).mul_scalar(s);
    Ok(soft_cross_entropy(&logits, &targets))
}

/// Soft target with weight `1 - lambda` on `index_a` and `lambda` on `index_b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoHotLabel {
    pub index_a: usize,
    pub index_b: usize,
    pub lambda: f64,
}

impl TwoHotLabel {
    pub fn new(index_a: usize, index_b: usize, lambda: f64) -> Result<Self> {
        let l = TwoHotLabel { index_a, index_b, lambda };
        l.validate()?;
        Ok(l)
    }

    pub fn hard(index: usize) -> Self {
        TwoHotLabel { index_a: index, index_b: index, lambda: 0.0 }
    }

    pub fn weight_a(&self) -> f64 {
        1.0 - self.lambda
    }

    pub fn weight_b(&self) -> f64 {
        self.lambda
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(arg("two-hot lambda must lie in [0, 1]"));
        }
        if self.index_a == self.index_b && self.lambda != 0.0 && self.lambda != 1.0 {
            return Err(arg("two-hot indices must differ for interior lambda"));
        }
        Ok(())
    }
}

/// Soft-target cross-entropy where the additive margin applies to every class
/// carrying target mass.
pub fn soft_margin_loss(embeddings: &Tensor, labels: &[TwoHotLabel], class_weights: &Tensor, s: f64, m: f64) -> Result<Tensor> {
    let (n, c) = (embeddings.shape()[0], class_weights.shape()[0]);
    let flat: Vec<usize> = labels.iter().flat_map(|l| [l.index_a, l.index_b]).collect();
    check_labels(&flat, c, 2 * n)?;
    for l in labels {
        l.validate()?;
    }
    let weight = |i: usize, j: usize| {
        let l = &labels[i];
        let mut w = 0.0;
        if l.index_a == j {
            w += l.weight_a();
        }
        if l.index_b == j {
            w += l.weight_b();
        }
        w
    };
    let targets = mask(n, c, weight);
    let active = mask(n, c, |i, j| (weight(i, j) > 0.0) as u8 as f64);
    let cos = cosine_logits(embeddings, class_weights);
    let logits = cos.add(&additive_margin(&cos, m).sub(&cos).mul(&active)).mul_scalar(s);
    Ok(soft_cross_entropy(&logits, &targets))
}

/// One labeled face image.
#[derive(Clone, Debug)]
pub struct IdentitySample {
    pub image: RgbImage,
    /// Index into [`IdentityDataset::identities`].
    pub identity: usize,
    pub group: Option<u32>,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct IdentityDataset {
    pub samples: Vec<IdentitySample>,
    /// Identity names; the position is the class index.
    pub identities: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestRecord {
    image_path: PathBuf,
    identity_id: String,
    group_id: Option<u32>,
}

impl IdentityDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    fn from_named(records: Vec<(RgbImage, String, Option<u32>, Option<PathBuf>)>) -> Self {
        let mut names: Vec<String> = records.iter().map(|r| r.1.clone()).collect();
        names.sort();
        names.dedup();
        let index: BTreeMap<&String, usize> = names.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let samples = records
            .iter()
            .map(|(image, id, group, path)| IdentitySample { image: image.clone(), identity: index[id], group: *group, path: path.clone() })
            .collect();
        IdentityDataset { samples, identities: names }
    }

    /// One directory per identity (directory name = identity), or a CSV
    /// manifest `image_path,identity_id,group_id` with paths relative to it.
    /// Images are resized to `size`.
    pub fn load(path: &Path, size: u32) -> Result<Self> {
        let fit = |im: image::DynamicImage| {
            let im = im.to_rgb8();
            if im.dimensions() == (size, size) {
                im
            } else {
                resize_rgb(&im, size, size)
            }
        };
        let mut records = Vec::new();
        if path.is_dir() {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
            dirs.sort();
            for d in dirs {
                let id = d.file_name().unwrap().to_string_lossy().to_string();
                for p in crate::prior_data::list_images(&d)? {
                    records.push((fit(image::open(&p)?), id.clone(), None, Some(p)));
                }
            }
        } else {
            let root = path.parent().unwrap_or(Path::new("."));
            let mut rdr = csv::Reader::from_path(path)?;
            for rec in rdr.deserialize() {
                let rec: ManifestRecord = rec?;
                let p = root.join(&rec.image_path);
                let im = image::open(&p).map_err(|e| Error::Format { path: p.display().to_string(), message: e.to_string() })?;
                records.push((fit(im), rec.identity_id, rec.group_id, Some(p)));
            }
        }
        if records.is_empty() {
            return Err(arg(format!("no labeled images under {}", path.display())));
        }
        Ok(Self::from_named(records))
    }

    /// Writes PNGs plus `labels.csv` in the manifest layout; returns its path.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(root.join("images"))?;
        let manifest = root.join("labels.csv");
        let mut w = csv::Writer::from_path(&manifest)?;
        w.write_record(["image_path", "identity_id", "group_id"])?;
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("images/{i:07}.png");
            s.image.save(root.join(&rel))?;
            let g = s.group.map(|g| g.to_string()).unwrap_or_default();
            w.write_record([rel.as_str(), self.identities[s.identity].as_str(), g.as_str()])?;
        }
        w.flush()?;
        Ok(manifest)
    }

    /// Procedural identities from [`crate::synth`], groups assigned in
    /// rotation.
    pub fn synthetic(identities: usize, per_identity: usize, size: u32, seed: u64) -> Self {
        use crate::synth::{render, FaceIdentity, Pose, GROUP_COUNT};
        let mut rng = seeding::rng_for(seed, "synthetic-identities");
        let mut records = Vec::with_capacity(identities * per_identity);
        for i in 0..identities {
            let group = 1 + (i as u32 % GROUP_COUNT);
            let id = FaceIdentity::sample(&mut rng, group);
            for _ in 0..per_identity {
                let pose = Pose::sample(&mut rng);
                let (img, _) = render(&id, &pose, size, &mut rng);
                records.push((img, format!("id{i:06}"), Some(group), None));
            }
        }
        Self::from_named(records)
    }

    fn restrict(&self, keep: &[usize]) -> Self {
        let keep: std::collections::BTreeSet<usize> = keep.iter().copied().collect();
        let records = self
            .samples
            .iter()
            .filter(|s| keep.contains(&s.identity))
            .map(|s| (s.image.clone(), self.identities[s.identity].clone(), s.group, s.path.clone()))
            .collect();
        Self::from_named(records)
    }

    /// Splits whole identities: the first `round(fraction * n)` of a seeded
    /// permutation, and the rest.
    pub fn split_identities(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.num_identities();
        let k = seeding::fraction_count(n, fraction)?;
        let perm = seeding::permutation(n, seed);
        Ok((self.restrict(&perm[..k]), self.restrict(&perm[k..])))
    }

    pub fn images(&self) -> Vec<RgbImage> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Images grouped per identity name.
    pub fn by_identity(&self) -> Vec<(String, Vec<&IdentitySample>)> {
        let mut out: Vec<(String, Vec<&IdentitySample>)> = self.identities.iter().map(|n| (n.clone(), Vec::new())).collect();
        for s in &self.samples {
            out[s.identity].1.push(s);
        }
        out
    }
}

/// Keeps `round(fraction * people)` uniformly sampled identities with all
/// their images. Prefixes of one seeded permutation, so smaller fractions are
/// nested in larger ones.
pub fn subsample_identities(ds: &IdentityDataset, fraction: f64, seed: u64) -> Result<IdentityDataset> {
    Ok(ds.split_identities(fraction, seed)?.0)
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Resize to `crop * 128 / 112`, random `crop x crop` window, horizontal flip
/// with probability one half.
pub fn augment_image(img: &RgbImage, crop: u32, rng: &mut Rng) -> RgbImage {
    let big = ((crop as f64) * 128.0 / 112.0).round().max(crop as f64) as u32;
    let resized = resize_rgb(img, big, big);
    let x = rng.random_range(0..=big - crop);
    let y = rng.random_range(0..=big - crop);
    let out = image::imageops::crop_imm(&resized, x, y, crop, crop).to_image();
    if rng.random_bool(0.5) {
        flip_horizontal(&out)
    } else {
        out
    }
}

/// Synthesises from `lambda * f(I1) + (1 - lambda) * f(I2)`; the label puts
/// `lambda` on `id1` (slot b) and `1 - lambda` on `id2` (slot a).
pub fn interpolate_with(
    i1: &RgbImage,
    i2: &RgbImage,
    id1: usize,
    id2: usize,
    lambda: f64,
    encoder: &Encoder,
    generator: &Generator,
) -> Result<(RgbImage, TwoHotLabel)> {
    let s = encoder.config.input_size as u32;
    let prep = |im: &RgbImage| if im.dimensions() == (s, s) { im.clone() } else { resize_rgb(im, s, s) };
    let x = Tensor::constant(images_to_array(&[prep(i1), prep(i2)]));
    let codes = encoder.encode(&x)?;
    let _g = no_grad();
    let w = codes.narrow(0, 0, 1).mul_scalar(lambda).add(&codes.narrow(0, 1, 1).mul_scalar(1.0 - lambda));
    let img = generator.synthesize(&w, Noise::Const)?;
    let label = if id1 == id2 { TwoHotLabel::hard(id1) } else { TwoHotLabel::new(id2, id1, lambda)? };
    Ok((array_to_images(&img.to_array()).remove(0), label))
}

/// As [`interpolate_with`] with `lambda ~ U[0, 1]`.
pub fn make_interpolation(
    i1: &RgbImage,
    i2: &RgbImage,
    id1: usize,
    id2: usize,
    encoder: &Encoder,
    generator: &Generator,
    rng: &mut Rng,
) -> Result<(RgbImage, TwoHotLabel)> {
    let lambda = rng.random::<f64>();
    interpolate_with(i1, i2, id1, id2, lambda, encoder, generator)
}

#[derive(Clone, Debug, Default)]
pub struct InterpolationPool {
    pub images: Vec<RgbImage>,
    pub labels: Vec<TwoHotLabel>,
}

#[derive(Serialize, Deserialize)]
struct PoolRecord {
    image_path: String,
    index_a: usize,
    index_b: usize,
    lambda: f64,
}

impl InterpolationPool {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root.join("images"))?;
        let mut w = csv::Writer::from_path(root.join("pool.csv"))?;
        for (i, (img, l)) in self.images.iter().zip(&self.labels).enumerate() {
            let rel = format!("images/{i:07}.png");
            img.save(root.join(&rel))?;
            w.serialize(PoolRecord { image_path: rel, index_a: l.index_a, index_b: l.index_b, lambda: l.lambda })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let mut pool = InterpolationPool::default();
        for rec in csv::Reader::from_path(root.join("pool.csv"))?.deserialize() {
            let r: PoolRecord = rec?;
            pool.images.push(image::open(root.join(&r.image_path))?.to_rgb8());
            pool.labels.push(TwoHotLabel::new(r.index_a, r.index_b, r.lambda)?);
        }
        Ok(pool)
    }
}

/// `count` interpolations between random image pairs of distinct identities.
pub fn build_interpolation_pool(ds: &IdentityDataset, encoder: &Encoder, generator: &Generator, count: usize, seed: u64) -> Result<InterpolationPool> {
    if ds.num_identities() < 2 {
        return Err(arg("interpolation needs at least two identities"));
    }
    let mut rng = seeding::rng_for(seed, "interpolation");
    let mut pool = InterpolationPool::default();
    while pool.len() < count {
        let a = &ds.samples[rng.random_range(0..ds.len())];
        let b = &ds.samples[rng.random_range(0..ds.len())];
        if a.identity == b.identity {
            continue;
        }
        let (img, label) = make_interpolation(&a.image, &b.image, a.identity, b.identity, encoder, generator, &mut rng)?;
        pool.images.push(img);
        pool.labels.push(label);
    }
    Ok(pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub frozen: bool,
}

#[derive(Default)]
pub struct FinetuneOptions {
    pub log_path: Option<PathBuf>,
    pub diagnostic_path: Option<PathBuf>,
    /// Called after every optimizer step with the 1-based epoch.
    pub on_step: Option<Box<dyn FnMut(usize, &Backbone)>>,
}

pub struct TrainedBackbone {
    pub backbone: Backbone,
    pub log: Vec<FinetuneLogRecord>,
}

impl TrainedBackbone {
    pub fn checkpoint(&self) -> Checkpoint {
        self.backbone.checkpoint()
    }
}

/// SGD with momentum and weight decay under the step schedule. A pretrained
/// initialisation trains only the first conv, the output block and the class
/// weights for `freeze_epochs`; frozen BatchNorm layers keep their running
/// statistics during that phase. Pool samples are shuffled in with the real
/// ones and scored with the soft-target margin loss.
pub fn finetune(
    ds: &IdentityDataset,
    backbone: Backbone,
    schedule: &FinetuneSchedule,
    pool: Option<&InterpolationPool>,
    seed: u64,
    mut opts: FinetuneOptions,
) -> Result<TrainedBackbone> {
    schedule.validate()?;
    if ds.is_empty() {
        return Err(arg("cannot fine-tune on an empty dataset"));
    }
    if backbone.num_classes() != ds.num_identities() {
        return Err(arg(format!("backbone has {} classes, dataset {}", backbone.num_classes(), ds.num_identities())));
    }
    let size = backbone.input_size() as u32;
    let mut rng = seeding::rng_for(seed, "finetune");
    let n_real = ds.len();
    let n_pool = pool.map_or(0, |p| p.len());
    let named = backbone.parameters();
    let all: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let unfrozen: Vec<Tensor> = named.iter().filter(|(n, _)| Backbone::is_unfrozen(n)).map(|(_, t)| t.clone()).collect();
    let pretrained = backbone.init != "scratch";
    let mut opt = Sgd::new(schedule.lr0, schedule.momentum, schedule.weight_decay);
    let mut log_file = match &opts.log_path {
        Some(p) => {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d)?;
            }
            Some(OpenOptions::new().create(true).append(true).open(p)?)
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..n_real + n_pool).collect();
    for epoch in 1..=schedule.epochs {
        let frozen = pretrained && epoch <= schedule.freeze_epochs;
        opt.lr = schedule.lr_at_epoch(epoch);
        let params = if frozen { &unfrozen } else { &all };
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen_real) = (0.0, 0usize, 0usize);
        for batch in order.chunks(schedule.batch_size) {
            let (real, syn): (Vec<usize>, Vec<usize>) = batch.iter().partition(|&&i| i < n_real);
            let mut images = Vec::with_capacity(batch.len());
            for &i in &real {
                images.push(augment_image(&ds.samples[i].image, size, &mut rng));
            }
            let p = pool.map(|p| p.images.as_slice()).unwrap_or(&[]);
            for &i in &syn {
                images.push(augment_image(&p[i - n_real], size, &mut rng));
            }
            let x = Tensor::constant(images_to_array(&images));
            let mut drop_rng = seeding::rng(rng.random());
            let emb = {
                let mut mode = RunMode { train: !frozen, conv_dropout: schedule.conv_dropout, rng: Some(&mut drop_rng) };
                backbone.forward(&x, &mut mode, true)
            };
            let nr = real.len();
            let mut loss: Option<Tensor> = None;
            if nr > 0 {
                let labels: Vec<usize> = real.iter().map(|&i| ds.samples[i].identity).collect();
                let e = emb.narrow(0, 0, nr);
                let l = match schedule.loss {
                    LossKind::ArcFace => arcface_loss(&e, &labels, &backbone.class_weights, schedule.margin_s, schedule.margin_m)?,
                    LossKind::SphereFace => sphereface_loss(&e, &labels, &backbone.class_weights, schedule.margin_s, schedule.sphereface_m)?,
                };
                let cos = cosine_logits(&e, &backbone.class_weights).to_array();
                for (row, &lab) in cos.axis_iter(Axis(0)).zip(&labels) {
                    let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0;
                    correct += (best == lab) as usize;
                }
                seen_real += nr;
                loss = Some(l.mul_scalar(nr as f64 / batch.len() as f64));
            }
            if !syn.is_empty() {
                let labels: Vec<TwoHotLabel> = syn.iter().map(|&i| pool.unwrap().labels[i - n_real]).collect();
                let l = soft_margin_loss(&emb.narrow(0, nr, syn.len()), &labels, &backbone.class_weights, schedule.margin_s, schedule.margin_m)?
                    .mul_scalar(syn.len() as f64 / batch.len() as f64);
                loss = Some(match loss {
                    Some(a) => a.add(&l),
                    None => l,
                });
            }
            let loss = loss.expect("non-empty batch");
            let v = loss.item();
            if !v.is_finite() {
                if let Some(p) = &opts.diagnostic_path {
                    let _ = backbone.checkpoint().save(p);
                }
                return Err(Error::Numerical(format!("non-finite fine-tuning loss in epoch {epoch}")));
            }
            let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
            opt.step(params, &grads);
            loss_sum += v * batch.len() as f64;
            if let Some(cb) = opts.on_step.as_mut() {
                cb(epoch, &backbone);
            }
        }
        let rec = FinetuneLogRecord {
            epoch,
            lr: opt.lr,
            loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / seen_real.max(1) as f64,
            frozen,
        };
        log::info!("finetune epoch {epoch}: loss {:.4} acc {:.3} lr {:.5}", rec.loss, rec.train_accuracy, rec.lr);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        log.push(rec);
    }
    Ok(TrainedBackbone { backbone, log })
}

/// Linear group head on frozen embeddings, usable as a consensus classifier.
pub struct GroupHead<'a> {
    pub backbone: &'a Backbone,
    linear: Linear,
    groups: u32,
}

impl GroupHead<'_> {
    pub fn predict(&self, images: &[RgbImage]) -> Vec<u32> {
        let e = self.backbone.embed_images(images);
        let e = l2_normalize_rows(&Tensor::constant(e.into_dyn()), 1e-12);
        let logits = self.linear.forward(&e).to_array();
        logits
            .axis_iter(Axis(0))
            .map(|r| 1 + r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0 as u32)
            .collect()
    }
}

impl GroupClassifier for GroupHead<'_> {
    fn num_groups(&self) -> u32 {
        self.groups
    }

    fn classify(&self, item: &RgbImage) -> u32 {
        self.predict(std::slice::from_ref(item))[0]
    }
}

/// Softmax regression from unit embeddings to the dataset's group labels.
pub fn train_group_head<'a>(backbone: &'a Backbone, ds: &IdentityDataset, groups: u32, steps: usize, seed: u64) -> Result<GroupHead<'a>> {
    let labeled: Vec<&IdentitySample> = ds.samples.iter().filter(|s| s.group.is_some()).collect();
    if labeled.is_empty() {
        return Err(arg("no group labels to train a group head"));
    }
    let imgs: Vec<RgbImage> = labeled.iter().map(|s| s.image.clone()).collect();
    let e = backbone.embed_images(&imgs);
    let x = l2_normalize_rows(&Tensor::constant(e.into_dyn()), 1e-12);
    let g = groups as usize;
    let targets = mask(labeled.len(), g, |i, j| (labeled[i].group.unwrap() as usize == j + 1) as u8 as f64);
    let mut rng = seeding::rng_for(seed, "group-head");
    let linear = Linear::new(&mut rng, backbone.config.embedding_dim, g, true);
    let params: Vec<Tensor> = linear.parameters().into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(0.05, 0.9, 0.999);
    for _ in 0..steps {
        let loss = soft_cross_entropy(&linear.forward(&x), &targets);
        let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
        opt.step(&params, &grads);
    }
    Ok(GroupHead { backbone, linear, groups })
}
