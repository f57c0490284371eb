//! Labeled-fraction trend experiment: pretraining runs once on a rendered
//! prior, then every seed fine-tunes each initialisation on nested identity
//! subsets and scores held-out identities with balanced verification.

use std::collections::HashSet;
use std::time::Instant;

use image::RgbImage;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{arg, Result};
use crate::evalbench;
use crate::facerec::{self, Backbone, BackboneConfig, FinetuneOptions, FinetuneSchedule, IdentityDataset};
use crate::features::RandomConvPyramid;
use crate::gan_prior::{self, GanConfig, GanTrainOptions};
use crate::latent_encoder::{self, EncoderConfig, EncoderTrainOptions};
use crate::seeding::{self, derive_seed};
use crate::synth;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendConfig {
    pub prior_images: usize,
    pub identities: usize,
    pub images_per_identity: usize,
    pub test_fraction: f64,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Any of scratch, encoder, ae, vae. Scratch is always run as the baseline.
    pub inits: Vec<String>,
    pub folds: usize,
    pub gan: GanConfig,
    pub encoder: EncoderConfig,
    pub finetune: FinetuneSchedule,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            prior_images: 10_000,
            identities: 200,
            images_per_identity: 20,
            test_fraction: 0.2,
            fractions: vec![0.01, 1.0],
            seeds: (0..5).collect(),
            inits: vec!["encoder".into()],
            folds: 10,
            gan: GanConfig { fid_every: 0, ..GanConfig::desk() },
            encoder: EncoderConfig { preview_every: u64::MAX, ..EncoderConfig::desk() },
            finetune: FinetuneSchedule::desk(),
        }
    }
}

impl TrendConfig {
    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        self.encoder.validate()?;
        self.finetune.validate()?;
        if self.encoder.input_size != self.gan.resolution {
            return Err(arg("trend: encoder input and GAN resolution must match"));
        }
        if self.prior_images == 0 || self.identities < 2 || self.images_per_identity < 2 || self.seeds.is_empty() || self.fractions.is_empty() {
            return Err(arg("trend: empty experiment"));
        }
        if let Some(bad) = self.inits.iter().find(|i| !["scratch", "encoder", "ae", "vae"].contains(&i.as_str())) {
            return Err(arg(format!("trend: unknown init `{bad}`")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrendRow {
    pub seed: u64,
    pub fraction: f64,
    pub identities: usize,
    pub init: String,
    pub accuracy: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
    pub pretrain_s: f64,
}

impl TrendReport {
    pub fn accuracy(&self, seed: u64, fraction: f64, init: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed && r.fraction == fraction && r.init == init).map(|r| r.accuracy)
    }

    /// Per-seed `init - scratch` accuracy differences at one fraction.
    pub fn gaps(&self, fraction: f64, init: &str) -> Vec<f64> {
        let seeds: Vec<u64> = self.rows.iter().filter(|r| r.fraction == fraction && r.init == init).map(|r| r.seed).collect();
        seeds.iter().filter_map(|&s| Some(self.accuracy(s, fraction, init)? - self.accuracy(s, fraction, "scratch")?)).collect()
    }

    pub fn mean_gap(&self, fraction: f64, init: &str) -> f64 {
        let g = self.gaps(fraction, init);
        g.iter().sum::<f64>() / g.len().max(1) as f64
    }
}

/// Unlabeled prior: one fresh identity and pose per image.
pub fn render_prior(n: usize, size: u32, seed: u64) -> Vec<RgbImage> {
    let mut rng = seeding::rng(seed);
    (0..n)
        .map(|_| {
            let group = 1 + rng.random_range(0..synth::GROUP_COUNT);
            let id = synth::FaceIdentity::sample(&mut rng, group);
            let pose = synth::Pose::sample(&mut rng);
            synth::render(&id, &pose, size, &mut rng).0
        })
        .collect()
}

/// Cross-validated accuracy over every same-label pair and as many distinct
/// different-label pairs drawn at random (all of them if there are fewer).
pub fn balanced_verification_accuracy(embeddings: &Array2<f64>, labels: &[usize], folds: usize, seed: u64) -> Result<f64> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(arg(format!("{} labels for {n} embeddings", labels.len())));
    }
    let norms: Vec<f64> = embeddings.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let score = |i: usize, j: usize| embeddings.row(i).dot(&embeddings.row(j)) / (norms[i] * norms[j]);
    let mut pos = Vec::new();
    let mut n_neg = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                pos.push(score(i, j));
            } else {
                n_neg += 1;
            }
        }
    }
    let mut neg = Vec::new();
    if n_neg <= pos.len() {
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] != labels[j] {
                    neg.push(score(i, j));
                }
            }
        }
    } else {
        let mut rng = seeding::rng(seed);
        let mut seen = HashSet::new();
        while neg.len() < pos.len() {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if labels[i] != labels[j] && seen.insert((i.min(j), i.max(j))) {
                neg.push(score(i, j));
            }
        }
    }
    Ok(evalbench::lfw_accuracy(&pos, &neg, folds, seed)?.cross_validated)
}

fn pretrain(cfg: &TrendConfig, master: u64) -> Result<Vec<(String, Checkpoint)>> {
    let wanted: Vec<&str> = cfg.inits.iter().map(String::as_str).filter(|i| *i != "scratch").collect();
    if wanted.is_empty() {
        return Ok(Vec::new());
    }
    let size = cfg.gan.resolution as u32;
    let prior = render_prior(cfg.prior_images, size, derive_seed(master, "trend-prior"));
    let mut out = Vec::new();
    for init in wanted {
        let t = Instant::now();
        let ckpt = match init {
            "encoder" => {
                let gan = gan_prior::train_gan(&prior, &cfg.gan, derive_seed(master, "trend-gan"), &GanTrainOptions::default())?;
                let net = RandomConvPyramid::standard(derive_seed(master, "trend-perceptual"));
                let enc = latent_encoder::train_encoder(&prior, &gan.generator, &cfg.encoder, &net, derive_seed(master, "trend-encoder"), &EncoderTrainOptions::default())?;
                enc.checkpoint()
            }
            other => {
                let ae = latent_encoder::train_autoencoder(&prior, other == "vae", &cfg.encoder, derive_seed(master, other), &EncoderTrainOptions::default())?;
                ae.checkpoint()
            }
        };
        log::info!("trend: pretrained {init} in {:.1}s", t.elapsed().as_secs_f64());
        out.push((init.to_string(), ckpt));
    }
    Ok(out)
}

/// Runs the whole grid, calling `progress` after every fine-tune.
pub fn run_trend(cfg: &TrendConfig, master: u64, progress: &mut dyn FnMut(&TrendRow)) -> Result<TrendReport> {
    cfg.validate()?;
    let mut report = TrendReport::default();
    let t = Instant::now();
    let pretrained = pretrain(cfg, master)?;
    report.pretrain_s = t.elapsed().as_secs_f64();

    let size = cfg.gan.resolution as u32;
    let full = IdentityDataset::synthetic(cfg.identities, cfg.images_per_identity, size, derive_seed(master, "trend-labeled"));
    let (test, train) = full.split_identities(cfg.test_fraction, derive_seed(master, "trend-split"))?;
    let (test_images, test_labels) = (test.images(), test.labels());
    let bcfg = BackboneConfig::matching(&cfg.encoder, &cfg.finetune);

    let mut inits: Vec<(String, Option<&Checkpoint>)> = vec![("scratch".into(), None)];
    inits.extend(pretrained.iter().map(|(n, c)| (n.clone(), Some(c))));
    for &seed in &cfg.seeds {
        for &fraction in &cfg.fractions {
            let ds = facerec::subsample_identities(&train, fraction, seed)?;
            for (init, ckpt) in &inits {
                let t = Instant::now();
                // Same stream for the new layers of every init, so only the
                // trunk differs between the paired runs.
                let mut rng = seeding::rng_for(seed, "trend-init");
                let backbone = match ckpt {
                    None => Backbone::new(&bcfg, ds.num_identities(), &mut rng)?,
                    Some(c) => facerec::transfer_weights(c, &bcfg, ds.num_identities(), &mut rng)?,
                };
                let trained = facerec::finetune(&ds, backbone, &cfg.finetune, None, derive_seed(seed, "trend-finetune"), FinetuneOptions::default())?;
                let emb = trained.backbone.embed_images(&test_images);
                let accuracy = balanced_verification_accuracy(&emb, &test_labels, cfg.folds, derive_seed(seed, "trend-pairs"))?;
                let row = TrendRow { seed, fraction, identities: ds.num_identities(), init: init.clone(), accuracy, wall_s: t.elapsed().as_secs_f64() };
                progress(&row);
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_separable_and_random() {
        let labels = [0, 0, 1, 1, 2, 2];
        let mut e = Array2::zeros((6, 3));
        for (i, &l) in labels.iter().enumerate() {
            e[[i, l]] = 1.0 + i as f64 * 0.01;
        }
        assert_eq!(balanced_verification_accuracy(&e, &labels, 2, 1).unwrap(), 100.0);
        assert!(balanced_verification_accuracy(&e, &labels[..5], 2, 1).is_err());
        // Fewer negatives than positives: all negatives are used.
        let l2 = [0, 0, 0, 0, 1];
        let e2 = Array2::from_shape_fn((5, 2), |(i, j)| if (i == 4) == (j == 1) { 1.0 } else { 0.0 });
        assert_eq!(balanced_verification_accuracy(&e2, &l2, 2, 1).unwrap(), 100.0);
    }

    #[test]
    fn gaps_pair_seeds() {
        let row = |seed, init: &str, accuracy| TrendRow { seed, fraction: 0.5, identities: 2, init: init.into(), accuracy, wall_s: 0.0 };
        let r = TrendReport { rows: vec![row(0, "scratch", 60.0), row(0, "encoder", 63.0), row(1, "scratch", 70.0), row(1, "encoder", 69.0)], ..Default::default() };
        assert_eq!(r.gaps(0.5, "encoder"), vec![3.0, -1.0]);
        assert_eq!(r.mean_gap(0.5, "encoder"), 1.0);
        assert!(r.gaps(1.0, "encoder").is_empty());
    }

    #[test]
    fn tiny_grid_runs_every_init() {
        let cfg = TrendConfig {
            prior_images: 16,
            identities: 6,
            images_per_identity: 3,
            test_fraction: 0.34,
            fractions: vec![0.5],
            seeds: vec![1],
            inits: vec!["encoder".into(), "ae".into(), "vae".into()],
            folds: 2,
            gan: GanConfig { resolution: 8, latent_dim: 8, mapping_layers: 2, channel_base: 32, channel_max: 4, batch_size: 4, total_samples: 8, ..TrendConfig::default().gan },
            encoder: EncoderConfig { input_size: 8, trunk_depth: 1, base_channels: 4, fpn_channels: 4, batch_size: 4, ae_latent_dim: 6, total_steps: 8, ..TrendConfig::default().encoder },
            finetune: FinetuneSchedule { epochs: 2, freeze_epochs: 1, batch_size: 4, embedding_dim: 8, ..FinetuneSchedule::desk() },
        };
        let mut seen = 0;
        let r = run_trend(&cfg, 2, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(r.rows.iter().map(|r| r.init.as_str()).collect::<Vec<_>>(), ["scratch", "encoder", "ae", "vae"]);
        assert!(r.rows.iter().all(|r| (0.0..=100.0).contains(&r.accuracy) && r.identities == 2));
        assert!(TrendConfig { inits: vec!["pca".into()], ..cfg }.validate().is_err());
    }
}
