//! Stage orchestration over an experiment directory.
//!
//! Layout under the experiment directory:
//! `data/{prior,train,test,interp}`, `checkpoints/*.ckpt`, `pairs/`,
//! `reports/`, `logs/<stage>.jsonl` and the append-only `runs.jsonl`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::evalbench::{self, EmbeddingTable, GroupedPeople, PairProtocol, Person, VerificationReport};
use crate::facerec::{self, Backbone, BackboneConfig, FinetuneOptions, FinetuneSchedule, IdentityDataset, InterpolationPool};
use crate::features::RandomConvPyramid;
use crate::gan_prior::{self, GanConfig, GanTrainOptions, Generator};
use crate::groups::GroupClassifier;
use crate::imaging::images_to_array;
use crate::latent_encoder::{self, Encoder, EncoderConfig, EncoderTrainOptions};
use crate::prior_data::{self, IngestConfig, PriorDataset, SidecarDetector};
use crate::seeding;
use crate::synth::GROUP_COUNT;
use crate::{Error, Result};

pub const CACHE_ENV: &str = "FRBOOST_CACHE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected desk or paper)"))),
        }
    }
}

/// Where the data comes from. Without a media manifest or labeled set the
/// `prep` stage renders procedural faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub media_manifest: Option<PathBuf>,
    pub labeled: Option<PathBuf>,
    pub synthetic_sources: usize,
    pub synthetic_frames: usize,
    pub synthetic_canvas: u32,
    pub labeled_identities: usize,
    pub images_per_identity: usize,
    /// Identities held out for evaluation.
    pub test_fraction: f64,
    /// Fraction of the prior the GAN sees.
    pub prior_fraction: f64,
    /// Fraction of training identities used for fine-tuning.
    pub identity_fraction: f64,
    /// "scratch", "encoder", "ae" or "vae".
    pub init: String,
    pub use_interpolation: bool,
    pub interpolation_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            media_manifest: None,
            labeled: None,
            synthetic_sources: 100,
            synthetic_frames: 100,
            synthetic_canvas: 160,
            labeled_identities: 1000,
            images_per_identity: 20,
            test_fraction: 0.2,
            prior_fraction: 1.0,
            identity_fraction: 1.0,
            init: "encoder".into(),
            use_interpolation: false,
            interpolation_count: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_people: usize,
    pub pos_per_person: usize,
    pub folds: usize,
    pub fpr_targets: Vec<f64>,
    pub chunk: usize,
    /// Above this many negatives per run, scores are streamed and only
    /// TPR@FPR is reported.
    pub max_materialized_negatives: u64,
    pub fid_samples: usize,
    /// "head": consensus of a group head trained on the training split's
    /// group labels; "labels": the evaluation set's own group labels.
    pub group_source: String,
    pub group_head_steps: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_people: 18_000,
            pos_per_person: 5,
            folds: 10,
            fpr_targets: vec![1e-3, 1e-4],
            chunk: 1 << 16,
            max_materialized_negatives: 20_000_000,
            fid_samples: 10_000,
            group_source: "head".into(),
            group_head_steps: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale_preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub ingest: IngestConfig,
    pub gan: GanConfig,
    pub encoder: EncoderConfig,
    pub finetune: FinetuneSchedule,
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let paper = ExperimentConfig {
            scale_preset: Preset::Paper,
            seed: 0,
            data: DataConfig::default(),
            ingest: IngestConfig::default(),
            gan: GanConfig::paper(),
            encoder: EncoderConfig::paper(),
            finetune: FinetuneSchedule::paper(),
            protocol: ProtocolConfig::default(),
        };
        match preset {
            Preset::Paper => paper,
            Preset::Desk => ExperimentConfig {
                scale_preset: Preset::Desk,
                data: DataConfig {
                    synthetic_sources: 100,
                    synthetic_frames: 100,
                    synthetic_canvas: 48,
                    labeled_identities: 200,
                    interpolation_count: 1000,
                    ..DataConfig::default()
                },
                ingest: IngestConfig { target_size: 32, ..IngestConfig::desk() },
                gan: GanConfig::desk(),
                encoder: EncoderConfig::desk(),
                finetune: FinetuneSchedule::desk(),
                protocol: ProtocolConfig { n_people: 10, fid_samples: 500, chunk: 4096, ..ProtocolConfig::default() },
                ..paper
            },
        }
    }

    /// Overlays `file` on the preset it names (or `preset` when given, which
    /// wins), then applies `seed`.
    pub fn resolve(file: &Value, preset: Option<Preset>, seed: Option<u64>) -> Result<Self> {
        if !file.is_object() {
            return Err(Error::Config("the config file must hold a JSON object".into()));
        }
        let named = match file.get("scale_preset") {
            Some(Value::String(s)) => Some(s.parse()?),
            Some(_) => return Err(Error::Config("scale_preset must be a string".into())),
            None => None,
        };
        let preset = preset.or(named).unwrap_or(Preset::Desk);
        let mut merged = serde_json::to_value(Self::preset(preset))?;
        overlay(&mut merged, file);
        merged["scale_preset"] = serde_json::to_value(preset)?;
        if let Some(s) = seed {
            merged["seed"] = s.into();
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(&v, preset, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.ingest.validate()?;
        self.gan.validate()?;
        self.encoder.validate()?;
        self.finetune.validate()?;
        let d = &self.data;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !["scratch", "encoder", "ae", "vae"].contains(&d.init.as_str()) {
            return bad("data.init must be scratch, encoder, ae or vae");
        }
        for (name, f) in [("test_fraction", d.test_fraction), ("prior_fraction", d.prior_fraction), ("identity_fraction", d.identity_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("data.{name} must lie in (0, 1]")));
            }
        }
        if d.test_fraction >= 1.0 {
            return bad("data.test_fraction must leave training identities");
        }
        if self.encoder.input_size > self.gan.resolution {
            return bad("encoder.input_size cannot exceed gan.resolution");
        }
        let p = &self.protocol;
        if p.fpr_targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("protocol.fpr_targets must lie in (0, 1)");
        }
        if !["head", "labels"].contains(&p.group_source.as_str()) {
            return bad("protocol.group_source must be head or labels");
        }
        if p.folds < 2 || p.chunk == 0 || p.pos_per_person == 0 || p.n_people == 0 {
            return bad("protocol.folds must be at least 2 and chunk, pos_per_person, n_people positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }

    pub fn stage_seed(&self, label: &str) -> u64 {
        seeding::derive_seed(self.seed, label)
    }
}

fn overlay(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prep,
    TrainGan,
    TrainEncoder,
    PretrainAe,
    PretrainVae,
    AugmentInterp,
    TrainFacerec,
    BuildPairs,
    Embed,
    Evaluate,
    Fid,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Prep,
        Stage::TrainGan,
        Stage::TrainEncoder,
        Stage::PretrainAe,
        Stage::PretrainVae,
        Stage::AugmentInterp,
        Stage::TrainFacerec,
        Stage::BuildPairs,
        Stage::Embed,
        Stage::Evaluate,
        Stage::Fid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prep => "prep",
            Stage::TrainGan => "train-gan",
            Stage::TrainEncoder => "train-encoder",
            Stage::PretrainAe => "pretrain-ae",
            Stage::PretrainVae => "pretrain-vae",
            Stage::AugmentInterp => "augment-interp",
            Stage::TrainFacerec => "train-facerec",
            Stage::BuildPairs => "build-pairs",
            Stage::Embed => "embed",
            Stage::Evaluate => "evaluate",
            Stage::Fid => "fid",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Argument(format!("unknown stage `{s}`")))
    }
}

/// One line of `runs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub config_hash: String,
    pub build: String,
    pub seed: u64,
    pub started_unix_s: f64,
    pub wall_s: f64,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), option_env!("FRBOOST_BUILD_ID").unwrap_or("dev"))
}

pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let p = dir.join("runs.jsonl");
    if !p.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(&p)?.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn append_run(dir: &Path, rec: &RunRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join("runs.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

/// Held while a stage runs; removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                write!(f, "{}", std::process::id())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(Error::Locked(format!("{} (pid {})", path.display(), owner.trim())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Paths inside one experiment directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn prior(&self) -> PathBuf {
        self.root.join("data/prior")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("data/train/labels.csv")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("data/test/labels.csv")
    }
    pub fn interp(&self) -> PathBuf {
        self.root.join("data/interp")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.jsonl"))
    }
    pub fn diagnostic(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.diagnostic.ckpt"))
    }
    /// `FRBOOST_CACHE` if set, else `<root>/cache`.
    pub fn cache(&self) -> PathBuf {
        std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| self.root.join("cache"))
    }
    /// Records which cache file `embed` last wrote.
    fn embedding_pointer(&self) -> PathBuf {
        self.root.join("pairs/embeddings.path")
    }
}

fn require(path: &Path, stage: Stage, upstream: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Prerequisite { stage: stage.to_string(), upstream: upstream.into(), detail: format!("{} not found", path.display()) })
    }
}

fn rel(l: &Layout, p: &Path) -> String {
    p.strip_prefix(&l.root).unwrap_or(p).display().to_string()
}

/// Runs one stage under the directory lock and appends its [`RunRecord`].
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let _lock = DirLock::acquire(out)?;
    let l = Layout::new(out);
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let t0 = Instant::now();
    log::info!("stage {stage} in {}", out.display());
    let result = dispatch(stage, cfg, &l);
    let rec = RunRecord {
        stage: stage.to_string(),
        config_hash: cfg.hash(),
        build: build_id(),
        seed: cfg.seed,
        started_unix_s: started,
        wall_s: t0.elapsed().as_secs_f64(),
        artifacts: result.as_ref().map(|a| a.iter().map(|p| rel(&l, p)).collect()).unwrap_or_default(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    append_run(out, &rec)?;
    result
}

fn dispatch(stage: Stage, cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Prep => prep(cfg, l),
        Stage::TrainGan => train_gan(cfg, l),
        Stage::TrainEncoder => train_encoder(cfg, l),
        Stage::PretrainAe => pretrain_ae(cfg, l, false),
        Stage::PretrainVae => pretrain_ae(cfg, l, true),
        Stage::AugmentInterp => augment_interp(cfg, l),
        Stage::TrainFacerec => train_facerec(cfg, l),
        Stage::BuildPairs => build_pairs(cfg, l),
        Stage::Embed => embed(cfg, l),
        Stage::Evaluate => evaluate(cfg, l),
        Stage::Fid => fid(cfg, l),
    }
}

fn prep(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let d = &cfg.data;
    let manifest = match &d.media_manifest {
        Some(m) => m.clone(),
        None => prior_data::write_synthetic_media(&l.root.join("data/media"), d.synthetic_sources, d.synthetic_frames, d.synthetic_canvas, cfg.stage_seed("media"))?,
    };
    prior_data::ingest_manifest(&manifest, &SidecarDetector, &cfg.ingest, &l.prior())?;

    let size = cfg.encoder.input_size as u32;
    let labeled = match &d.labeled {
        Some(p) => IdentityDataset::load(p, size)?,
        None => IdentityDataset::synthetic(d.labeled_identities, d.images_per_identity, size, cfg.stage_seed("labeled")),
    };
    let (test, train) = labeled.split_identities(d.test_fraction, cfg.stage_seed("test-split"))?;
    let train_path = train.save(&l.root.join("data/train"))?;
    let test_path = test.save(&l.root.join("data/test"))?;
    Ok(vec![l.prior(), train_path, test_path])
}

fn load_prior(l: &Layout, stage: Stage) -> Result<PriorDataset> {
    require(&l.prior().join("dataset.json"), stage, "prep")?;
    PriorDataset::load(&l.prior())
}

fn load_split(path: &Path, stage: Stage, cfg: &ExperimentConfig) -> Result<IdentityDataset> {
    require(path, stage, "prep")?;
    IdentityDataset::load(path, cfg.encoder.input_size as u32)
}

/// Fine-tuning identities: a nested prefix of the training split.
fn finetune_identities(cfg: &ExperimentConfig, l: &Layout, stage: Stage) -> Result<IdentityDataset> {
    let train = load_split(&l.train(), stage, cfg)?;
    facerec::subsample_identities(&train, cfg.data.identity_fraction, cfg.stage_seed("identity-subsample"))
}

fn load_generator(l: &Layout, stage: Stage) -> Result<Generator> {
    let p = l.checkpoint("gan");
    require(&p, stage, "train-gan")?;
    Generator::from_checkpoint(&Checkpoint::load(&p)?)
}

fn save_ckpt(ckpt: &Checkpoint, path: PathBuf) -> Result<Vec<PathBuf>> {
    ckpt.save(&path)?;
    Ok(vec![path])
}

fn ensure_logs(l: &Layout) -> Result<()> {
    fs::create_dir_all(l.root.join("logs"))?;
    Ok(())
}

fn train_gan(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let prior = load_prior(l, Stage::TrainGan)?;
    let seed = cfg.stage_seed("gan");
    let used = prior.subsample(cfg.data.prior_fraction, seed)?;
    ensure_logs(l)?;
    let r = cfg.gan.resolution as u32;
    let opts = GanTrainOptions {
        fid_reference: Some(images_to_array(&prior.images_at(r))),
        feature_seed: cfg.stage_seed("fid-features"),
        log_path: Some(l.log(Stage::TrainGan)),
        diagnostic_path: Some(l.diagnostic(Stage::TrainGan)),
    };
    let trained = gan_prior::train_gan(&used.images, &cfg.gan, seed, &opts)?;
    save_ckpt(&trained.checkpoint(), l.checkpoint("gan"))
}

fn train_encoder(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let generator = load_generator(l, Stage::TrainEncoder)?;
    let prior = load_prior(l, Stage::TrainEncoder)?;
    ensure_logs(l)?;
    let opts = EncoderTrainOptions {
        log_path: Some(l.log(Stage::TrainEncoder)),
        preview_dir: Some(l.root.join("previews")),
        diagnostic_path: Some(l.diagnostic(Stage::TrainEncoder)),
    };
    let net = RandomConvPyramid::standard(cfg.stage_seed("perceptual-features"));
    let images = prior.images_at(cfg.encoder.input_size as u32);
    let trained = latent_encoder::train_encoder(&images, &generator, &cfg.encoder, &net, cfg.stage_seed("encoder"), &opts)?;
    save_ckpt(&trained.checkpoint(), l.checkpoint("encoder"))
}

fn pretrain_ae(cfg: &ExperimentConfig, l: &Layout, variational: bool) -> Result<Vec<PathBuf>> {
    let stage = if variational { Stage::PretrainVae } else { Stage::PretrainAe };
    let prior = load_prior(l, stage)?;
    ensure_logs(l)?;
    let opts = EncoderTrainOptions { log_path: Some(l.log(stage)), preview_dir: None, diagnostic_path: Some(l.diagnostic(stage)) };
    let images = prior.images_at(cfg.encoder.input_size as u32);
    let trained = latent_encoder::train_autoencoder(&images, variational, &cfg.encoder, cfg.stage_seed(stage.name()), &opts)?;
    save_ckpt(&trained.checkpoint(), l.checkpoint(if variational { "vae" } else { "ae" }))
}

fn augment_interp(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let generator = load_generator(l, Stage::AugmentInterp)?;
    let enc_path = l.checkpoint("encoder");
    require(&enc_path, Stage::AugmentInterp, "train-encoder")?;
    let encoder = Encoder::from_checkpoint(&Checkpoint::load(&enc_path)?)?;
    let ds = finetune_identities(cfg, l, Stage::AugmentInterp)?;
    let pool = facerec::build_interpolation_pool(&ds, &encoder, &generator, cfg.data.interpolation_count, cfg.stage_seed("interpolation"))?;
    pool.save(&l.interp())?;
    Ok(vec![l.interp().join("pool.csv")])
}

fn train_facerec(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let stage = Stage::TrainFacerec;
    let ds = finetune_identities(cfg, l, stage)?;
    let bcfg = BackboneConfig::matching(&cfg.encoder, &cfg.finetune);
    let mut rng = seeding::rng_for(cfg.seed, "facerec-init");
    let backbone = match cfg.data.init.as_str() {
        "scratch" => Backbone::new(&bcfg, ds.num_identities(), &mut rng)?,
        init => {
            let upstream = match init {
                "encoder" => "train-encoder",
                "ae" => "pretrain-ae",
                _ => "pretrain-vae",
            };
            let p = l.checkpoint(init);
            require(&p, stage, upstream)?;
            facerec::transfer_weights(&Checkpoint::load(&p)?, &bcfg, ds.num_identities(), &mut rng)?
        }
    };
    let pool = if cfg.data.use_interpolation {
        let p = l.interp().join("pool.csv");
        require(&p, stage, "augment-interp")?;
        let pool = InterpolationPool::load(&l.interp())?;
        let resized = pool.images.iter().map(|im| fit(im, cfg.encoder.input_size as u32)).collect();
        Some(InterpolationPool { images: resized, labels: pool.labels })
    } else {
        None
    };
    ensure_logs(l)?;
    let opts = FinetuneOptions { log_path: Some(l.log(stage)), diagnostic_path: Some(l.diagnostic(stage)), on_step: None };
    let trained = facerec::finetune(&ds, backbone, &cfg.finetune, pool.as_ref(), cfg.stage_seed("finetune"), opts)?;
    save_ckpt(&trained.checkpoint(), l.checkpoint("facerec"))
}

fn fit(im: &RgbImage, size: u32) -> RgbImage {
    if im.dimensions() == (size, size) {
        im.clone()
    } else {
        crate::imaging::resize_rgb(im, size, size)
    }
}

/// People of a labeled set grouped by consensus of `classifier`, or by
/// their own label when no classifier is given. Image ids are paths relative
/// to `root`.
pub fn group_people(ds: &IdentityDataset, root: &Path, classifier: Option<&dyn GroupClassifier>, seed: u64) -> GroupedPeople {
    let mut rng = seeding::rng_for(seed, "consensus");
    let mut out = GroupedPeople::new();
    for (name, samples) in ds.by_identity() {
        let group = match classifier {
            Some(c) => {
                let imgs: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
                evalbench::consensus_group(&imgs, c, &mut rng)
            }
            None => samples.iter().find_map(|s| s.group),
        };
        let Some(g) = group else {
            log::debug!("no group decided for {name}; left out of the protocol");
            continue;
        };
        let images = samples
            .iter()
            .enumerate()
            .map(|(i, s)| match &s.path {
                Some(p) => p.strip_prefix(root).unwrap_or(p).display().to_string(),
                None => format!("{name}/{i}"),
            })
            .collect();
        out.entry(g).or_default().push(Person { id: name, images });
    }
    out
}

fn build_pairs(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let test = load_split(&l.test(), Stage::BuildPairs, cfg)?;
    let p = &cfg.protocol;
    let seed = cfg.stage_seed("groups");
    let mut grouped = if p.group_source == "head" {
        let (backbone, _) = load_facerec(l, Stage::BuildPairs)?;
        let train = load_split(&l.train(), Stage::BuildPairs, cfg)?;
        let head = facerec::train_group_head(&backbone, &train, GROUP_COUNT, p.group_head_steps, seed)?;
        group_people(&test, &l.root, Some(&head), seed)
    } else {
        group_people(&test, &l.root, None, seed)
    };
    let need = |k: usize| k * (k.saturating_sub(1)) / 2 >= p.pos_per_person;
    let eligible = |ps: &Vec<Person>| ps.iter().filter(|x| need(x.images.len())).count();
    grouped.retain(|g, ps| {
        let keep = eligible(ps) >= 2;
        if !keep {
            log::warn!("group {g} has fewer than two eligible people; left out");
        }
        keep
    });
    let available = grouped.values().map(eligible).min().unwrap_or(0);
    if available == 0 {
        return Err(Error::Protocol { group: 0, message: "no group has two eligible people".into() });
    }
    let n = p.n_people.min(available);
    if n < p.n_people {
        log::warn!("only {n} eligible people in the smallest group; protocol capped from {}", p.n_people);
    }
    let proto = evalbench::build_rbweb_protocol(&grouped, n, p.pos_per_person, cfg.stage_seed("pairs"))?;
    proto.save(&l.pairs(), "rbweb")?;
    Ok(vec![l.pairs().join("rbweb.tsv")])
}

fn load_facerec(l: &Layout, stage: Stage) -> Result<(Backbone, Vec<u8>)> {
    let p = l.checkpoint("facerec");
    require(&p, stage, "train-facerec")?;
    let bytes = fs::read(&p)?;
    Ok((Backbone::from_checkpoint(&Checkpoint::load(&p)?)?, bytes))
}

fn load_protocol(l: &Layout, stage: Stage) -> Result<PairProtocol> {
    require(&l.pairs().join("rbweb.tsv"), stage, "build-pairs")?;
    PairProtocol::load(&l.pairs(), "rbweb")
}

fn embed(_cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let (backbone, ckpt_bytes) = load_facerec(l, Stage::Embed)?;
    let proto = load_protocol(l, Stage::Embed)?;
    let ids = proto.images();
    let mut h = Sha256::new();
    h.update(&ckpt_bytes);
    for id in &ids {
        h.update(id.as_bytes());
        h.update([0]);
    }
    let key = hex::encode(h.finalize());
    let path = l.cache().join(format!("emb-{}.bin", &key[..16]));
    if !path.exists() {
        let size = backbone.input_size() as u32;
        let load = |id: &str| -> Result<RgbImage> { Ok(fit(&image::open(l.root.join(id))?.to_rgb8(), size)) };
        let embed = |imgs: &[RgbImage]| backbone.embed_images(imgs);
        let table = EmbeddingTable::build(&ids, &load, &embed, 256);
        if let Some((id, why)) = table.failed.iter().next() {
            log::warn!("{} image(s) failed to embed, first {id}: {why}", table.failed.len());
        }
        fs::create_dir_all(l.cache())?;
        table.save(&path)?;
    }
    fs::create_dir_all(l.pairs())?;
    fs::write(l.embedding_pointer(), path.display().to_string())?;
    Ok(vec![path])
}

fn evaluate(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let proto = load_protocol(l, Stage::Evaluate)?;
    let pointer = l.embedding_pointer();
    require(&pointer, Stage::Evaluate, "embed")?;
    let emb = PathBuf::from(fs::read_to_string(&pointer)?.trim());
    require(&emb, Stage::Evaluate, "embed")?;
    let table = EmbeddingTable::load(&emb)?;
    let p = &cfg.protocol;
    let total_neg: u64 = proto.groups().iter().map(|&g| proto.negative_count(g)).sum();
    let report = if total_neg <= p.max_materialized_negatives {
        let scores = evalbench::score_pairs(&table, &proto, p.chunk)?;
        for (g, s) in &scores {
            let roc = evalbench::roc_sweep(&s.positives, &s.negatives, 0.1, 0.75, 66)?;
            write_roc(&l.reports().join(format!("roc_g{g}.csv")), &roc)?;
        }
        evalbench::evaluate_scores(&scores, &p.fpr_targets, p.folds, cfg.stage_seed("folds"))?
    } else {
        evalbench::evaluate_streaming(&table, &proto, &p.fpr_targets, p.chunk)?
    };
    report.save(&l.reports(), "verification")?;
    Ok(vec![l.reports().join("verification.csv"), l.reports().join("verification.json")])
}

fn write_roc(path: &Path, roc: &evalbench::RocCurve) -> Result<()> {
    fs::create_dir_all(path.parent().unwrap())?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "tpr", "fpr"])?;
    for i in 0..roc.thresholds.len() {
        w.write_record([roc.thresholds[i].to_string(), roc.tpr[i].to_string(), roc.fpr[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub samples: usize,
    pub reference_images: usize,
}

fn fid(cfg: &ExperimentConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let generator = load_generator(l, Stage::Fid)?;
    let prior = load_prior(l, Stage::Fid)?;
    let r = generator.config.resolution as u32;
    let reference = images_to_array(&prior.images_at(r));
    let n = cfg.protocol.fid_samples.max(2);
    let fake = gan_prior::sample_faces(&generator, n, &mut seeding::rng_for(cfg.seed, "fid-samples"));
    let net = RandomConvPyramid::standard(cfg.stage_seed("fid-features"));
    let value = latent_encoder::fid(&net, &fake, &reference)?;
    let rep = FidReport { fid: value, samples: n, reference_images: prior.len() };
    fs::create_dir_all(l.reports())?;
    let path = l.reports().join("fid.json");
    crate::checkpoint::write_atomic(&path, serde_json::to_string_pretty(&rep)?.as_bytes())?;
    Ok(vec![path])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub group: String,
    pub metric: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    pub fn get(&self, group: &str, metric: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.group == group && r.metric == metric)
    }
}

impl fmt::Display for DeltaTable {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        writeln!(f, "{:<6} {:<16} {:>9} {:>9} {:>9}", "group", "metric", "before", "after", "increase")?;
        for r in &self.rows {
            writeln!(f, "{:<6} {:<16} {:>9.2} {:>9.2} {:>+9.2}", r.group, r.metric, r.before, r.after, r.delta)?;
        }
        Ok(())
    }
}

/// Per-group `b - a` for every metric both reports carry, then avg and std.
pub fn compare_runs(a: &VerificationReport, b: &VerificationReport) -> Result<DeltaTable> {
    let ga: Vec<u32> = a.per_group.keys().copied().collect();
    let gb: Vec<u32> = b.per_group.keys().copied().collect();
    if ga != gb {
        return Err(Error::Argument(format!("reports cover different groups: {ga:?} vs {gb:?}")));
    }
    let mut rows = Vec::new();
    let mut push = |group: String, metric: String, x: f64, y: f64| rows.push(DeltaRow { group, metric, before: x, after: y, delta: y - x });
    for (g, ma) in &a.per_group {
        let mb = &b.per_group[g];
        let mut metrics: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
        metrics.insert("accuracy".into(), (ma.accuracy, mb.accuracy));
        for (k, t) in &ma.tpr_at_fpr {
            metrics.insert(format!("tpr@{k}"), (Some(t.tpr), mb.tpr_at_fpr.get(k).map(|t| t.tpr)));
        }
        for (k, t) in &mb.tpr_at_fpr {
            metrics.entry(format!("tpr@{k}")).or_insert((None, Some(t.tpr)));
        }
        for (m, pair) in metrics {
            match pair {
                (Some(x), Some(y)) => push(g.to_string(), m, x, y),
                (None, None) => {}
                _ => return Err(Error::Argument(format!("metric {m} of group {g} is missing from one report"))),
            }
        }
    }
    for (name, x, y) in [("avg", a.avg, b.avg), ("std", a.std, b.std)] {
        if let (Some(x), Some(y)) = (x, y) {
            push("all".into(), name.into(), x, y);
        }
    }
    Ok(DeltaTable { rows })
}
