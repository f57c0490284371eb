//! Unlabeled prior datasets: frame extraction, detection gates, landmark
//! alignment, sharded storage, subsampling and group filtering.
//!
//! Landmark and box coordinates are pixel-index coordinates: the centre of
//! pixel `(i, j)` sits at `(i, j)`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::groups::GroupClassifier;
use crate::imaging::{resize_rgb, warp_similarity, Similarity};
use crate::seeding;

/// Five-point template for a 112x112 crop: left eye, right eye, nose tip,
/// left and right mouth corners.
pub const CANONICAL_LANDMARKS_112: [(f64, f64); 5] = [
    (38.2946, 51.6963),
    (73.5318, 51.5014),
    (56.0252, 71.7366),
    (41.5493, 92.3655),
    (70.7299, 92.2041),
];

pub const SHARD_SIZE: u64 = 10_000;

/// The template rescaled to a `size` crop.
pub fn canonical_landmarks(size: u32) -> [(f64, f64); 5] {
    let k = size as f64 / 112.0;
    CANONICAL_LANDMARKS_112.map(|(x, y)| ((x + 0.5) * k - 0.5, (y + 0.5) * k - 0.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub frame_period_s: f64,
    pub max_minutes_per_video: f64,
    pub min_face_px: u32,
    pub detector_confidence: f64,
    pub target_size: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            frame_period_s: 5.0,
            max_minutes_per_video: 20.0,
            min_face_px: 100,
            detector_confidence: 0.9,
            target_size: 112,
        }
    }
}

impl IngestConfig {
    pub fn desk() -> Self {
        IngestConfig {
            min_face_px: 24,
            target_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ingest: {m}")));
        if !(self.frame_period_s > 0.0 && self.frame_period_s.is_finite()) {
            return bad("frame_period_s must be positive");
        }
        if !(self.max_minutes_per_video > 0.0) {
            return bad("max_minutes_per_video must be positive");
        }
        if self.min_face_px < 1 {
            return bad("min_face_px must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.detector_confidence) {
            return bad("detector_confidence must lie in [0, 1]");
        }
        if self.target_size < 8 {
            return bad("target_size must be at least 8");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceDetection {
    /// `[x, y, w, h]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub landmarks: [(f64, f64); 5],
    pub confidence: f64,
}

impl FaceDetection {
    pub fn is_well_formed(&self, width: u32, height: u32) -> bool {
        let inside = |&(x, y): &(f64, f64)| x >= -0.5 && y >= -0.5 && x <= width as f64 - 0.5 && y <= height as f64 - 0.5;
        self.bbox[2] > 0.0 && self.bbox[3] > 0.0 && self.landmarks.iter().all(inside)
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub image: RgbImage,
    pub timestamp_s: f64,
    pub source: String,
    /// File the frame was read from, when it came from an image folder.
    pub origin: Option<PathBuf>,
}

pub trait VideoSource {
    fn source_id(&self) -> String;
    fn duration_s(&self) -> Result<f64>;
    fn read_frame(&self, timestamp_s: f64) -> Result<(RgbImage, Option<PathBuf>)>;
}

/// `0, P, 2P, ...` strictly below `min(duration, cap)`.
pub fn frame_timestamps(duration_s: f64, config: &IngestConfig) -> Vec<f64> {
    let limit = duration_s.min(config.max_minutes_per_video * 60.0);
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * config.frame_period_s;
        if t >= limit {
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

pub fn extract_frames(source: &dyn VideoSource, config: &IngestConfig) -> Result<Vec<Frame>> {
    config.validate()?;
    let id = source.source_id();
    let wrap = |e: Error| match e {
        e @ Error::Ingestion { .. } => e,
        other => Error::Ingestion { source_id: id.clone(), message: other.to_string() },
    };
    let duration = source.duration_s().map_err(wrap)?;
    if !duration.is_finite() || duration < 0.0 {
        return Err(Error::Ingestion { source_id: id, message: format!("invalid duration {duration}") });
    }
    frame_timestamps(duration, config)
        .into_iter()
        .map(|t| {
            let (image, origin) = source.read_frame(t).map_err(wrap)?;
            Ok(Frame { image, timestamp_s: t, source: id.clone(), origin })
        })
        .collect()
}

/// Decodes through the `ffprobe`/`ffmpeg` executables, one call per frame.
pub struct FfmpegVideo {
    pub path: PathBuf,
    pub id: String,
}

impl FfmpegVideo {
    pub fn new(path: impl Into<PathBuf>, id: impl Into<String>) -> Self {
        FfmpegVideo { path: path.into(), id: id.into() }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Ingestion { source_id: self.id.clone(), message: message.into() }
    }
}

impl VideoSource for FfmpegVideo {
    fn source_id(&self) -> String {
        self.id.clone()
    }

    fn duration_s(&self) -> Result<f64> {
        let out = Command::new("ffprobe")
            .args(["-v", "error", "-show_entries", "format=duration", "-of", "csv=p=0"])
            .arg(&self.path)
            .output()
            .map_err(|e| self.fail(format!("cannot run ffprobe: {e}")))?;
        if !out.status.success() {
            return Err(self.fail(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let text = text.trim();
        if text.is_empty() || text == "N/A" {
            return Ok(0.0);
        }
        text.parse().map_err(|_| self.fail(format!("unparseable duration {text:?}")))
    }

    fn read_frame(&self, timestamp_s: f64) -> Result<(RgbImage, Option<PathBuf>)> {
        let out = Command::new("ffmpeg")
            .args(["-v", "error", "-ss", &format!("{timestamp_s:.3}"), "-i"])
            .arg(&self.path)
            .args(["-frames:v", "1", "-f", "image2pipe", "-vcodec", "png", "-"])
            .output()
            .map_err(|e| self.fail(format!("cannot run ffmpeg: {e}")))?;
        if !out.status.success() || out.stdout.is_empty() {
            return Err(self.fail(format!("no frame at {timestamp_s} s: {}", String::from_utf8_lossy(&out.stderr).trim())));
        }
        let img = image::load_from_memory(&out.stdout).map_err(|e| self.fail(e.to_string()))?;
        Ok((img.to_rgb8(), None))
    }
}

/// A directory of pre-extracted frames in file-name order. Frame `i` is
/// stamped `i * P`, so the folder plays back like a video sampled at `P`.
pub struct ImageFolder {
    pub id: String,
    files: Vec<PathBuf>,
    period_s: f64,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

impl ImageFolder {
    pub fn open(dir: &Path, id: impl Into<String>, period_s: f64) -> Result<Self> {
        let id = id.into();
        let files = list_images(dir).map_err(|e| Error::Ingestion { source_id: id.clone(), message: e.to_string() })?;
        Ok(ImageFolder { id, files, period_s })
    }
}

impl VideoSource for ImageFolder {
    fn source_id(&self) -> String {
        self.id.clone()
    }

    fn duration_s(&self) -> Result<f64> {
        Ok(self.files.len() as f64 * self.period_s)
    }

    fn read_frame(&self, timestamp_s: f64) -> Result<(RgbImage, Option<PathBuf>)> {
        let i = (timestamp_s / self.period_s).round() as usize;
        let path = self.files.get(i).ok_or_else(|| Error::Ingestion {
            source_id: self.id.clone(),
            message: format!("no frame {i}"),
        })?;
        let img = image::open(path).map_err(|e| Error::Ingestion {
            source_id: self.id.clone(),
            message: format!("{}: {e}", path.display()),
        })?;
        Ok((img.to_rgb8(), Some(path.clone())))
    }
}

/// In-memory video for tests: `render(t)` produces the frame at time `t`.
pub struct SyntheticVideo<F> {
    pub id: String,
    pub duration_s: f64,
    pub render: F,
}

impl<F: Fn(f64) -> RgbImage> VideoSource for SyntheticVideo<F> {
    fn source_id(&self) -> String {
        self.id.clone()
    }

    fn duration_s(&self) -> Result<f64> {
        Ok(self.duration_s)
    }

    fn read_frame(&self, timestamp_s: f64) -> Result<(RgbImage, Option<PathBuf>)> {
        Ok(((self.render)(timestamp_s), None))
    }
}

pub trait FaceDetector {
    fn detect(&self, frame: &Frame) -> Result<Vec<FaceDetection>>;
}

/// Returns the same detections for every frame.
pub struct StubDetector {
    pub detections: Vec<FaceDetection>,
}

impl StubDetector {
    pub fn new(detections: Vec<FaceDetection>) -> Self {
        StubDetector { detections }
    }

    /// One face whose landmarks are the canonical template scaled into the
    /// square box `(x, y, side)`.
    pub fn single(x: f64, y: f64, side: f64, confidence: f64) -> Self {
        StubDetector::new(vec![template_detection(x, y, side, confidence)])
    }
}

pub fn template_detection(x: f64, y: f64, side: f64, confidence: f64) -> FaceDetection {
    let k = side / 112.0;
    FaceDetection {
        bbox: [x, y, side, side],
        landmarks: CANONICAL_LANDMARKS_112.map(|(lx, ly)| (x + (lx + 0.5) * k - 0.5, y + (ly + 0.5) * k - 0.5)),
        confidence,
    }
}

impl FaceDetector for StubDetector {
    fn detect(&self, _frame: &Frame) -> Result<Vec<FaceDetection>> {
        Ok(self.detections.clone())
    }
}

/// Reads detections from a JSON file next to each frame (`frame.png` ->
/// `frame.json`, holding a list of detections). Frames without a sidecar
/// have no faces.
pub struct SidecarDetector;

impl FaceDetector for SidecarDetector {
    fn detect(&self, frame: &Frame) -> Result<Vec<FaceDetection>> {
        let Some(origin) = &frame.origin else {
            return Ok(Vec::new());
        };
        let path = origin.with_extension("json");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), message: e.to_string() })
    }
}

#[derive(Clone, Debug)]
pub struct AlignedFace {
    pub image: RgbImage,
    pub detection: FaceDetection,
}

/// Similarity warp taking `landmarks` onto the template at `size`.
pub fn alignment_transform(landmarks: &[(f64, f64); 5], size: u32) -> Similarity {
    Similarity::estimate(landmarks, &canonical_landmarks(size)).unwrap_or(Similarity::IDENTITY)
}

pub fn align_face(image: &RgbImage, landmarks: &[(f64, f64); 5], size: u32) -> RgbImage {
    warp_similarity(image, &alignment_transform(landmarks, size), size)
}

pub fn detect_and_align(frame: &Frame, detector: &dyn FaceDetector, config: &IngestConfig) -> Result<Vec<AlignedFace>> {
    let (w, h) = frame.image.dimensions();
    let min = config.min_face_px as f64;
    Ok(detector
        .detect(frame)?
        .into_iter()
        .filter(|d| d.is_well_formed(w, h))
        .filter(|d| d.bbox[2] >= min && d.bbox[3] >= min && d.confidence >= config.detector_confidence)
        .map(|d| AlignedFace { image: align_face(&frame.image, &d.landmarks, config.target_size), detection: d })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_id: u64,
    pub source: String,
    pub timestamp_s: f64,
    pub box_x: f64,
    pub box_y: f64,
    pub box_w: f64,
    pub box_h: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PriorDataset {
    pub images: Vec<RgbImage>,
    pub manifest: Vec<ManifestRow>,
    pub target_size: u32,
}

pub fn shard_path(root: &Path, image_id: u64) -> PathBuf {
    root.join("shards")
        .join(format!("{:05}", image_id / SHARD_SIZE))
        .join(format!("{image_id:09}.png"))
}

impl PriorDataset {
    pub fn empty(target_size: u32) -> Self {
        PriorDataset { images: Vec::new(), manifest: Vec::new(), target_size }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.images.len() != self.manifest.len() {
            return Err(arg(format!("{} images but {} manifest rows", self.images.len(), self.manifest.len())));
        }
        let t = self.target_size;
        if let Some((i, _)) = self.images.iter().enumerate().find(|(_, im)| im.dimensions() != (t, t)) {
            return Err(arg(format!("image {i} is not {t}x{t}")));
        }
        Ok(())
    }

    fn select(&self, keep: &[usize]) -> PriorDataset {
        PriorDataset {
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            manifest: keep.iter().map(|&i| self.manifest[i].clone()).collect(),
            target_size: self.target_size,
        }
    }

    /// Seeded permutation prefix of length `round(fraction * len)`, kept in
    /// original order. Smaller fractions under one seed give nested subsets.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<PriorDataset> {
        let k = seeding::fraction_count(self.len(), fraction)?;
        let mut keep = seeding::permutation(self.len(), seed);
        keep.truncate(k);
        keep.sort_unstable();
        Ok(self.select(&keep))
    }

    pub fn filter_by_group(&self, classifier: &dyn GroupClassifier, group_id: u32) -> Result<PriorDataset> {
        if group_id == 0 || group_id > classifier.num_groups() {
            return Err(arg(format!("unknown group {group_id}; classifier has {} groups", classifier.num_groups())));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classifier.classify(&self.images[i]) == group_id)
            .collect();
        Ok(self.select(&keep))
    }

    /// Images resized to `size` if needed.
    pub fn images_at(&self, size: u32) -> Vec<RgbImage> {
        self.images
            .iter()
            .map(|im| if im.dimensions() == (size, size) { im.clone() } else { resize_rgb(im, size, size) })
            .collect()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.check()?;
        fs::create_dir_all(root)?;
        for (img, row) in self.images.iter().zip(&self.manifest) {
            let p = shard_path(root, row.image_id);
            fs::create_dir_all(p.parent().unwrap())?;
            img.save(&p)?;
        }
        write_manifest(&root.join("manifest.csv"), &self.manifest)?;
        let meta = serde_json::json!({ "size": self.len(), "target_size": self.target_size });
        fs::write(root.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<PriorDataset> {
        let meta_path = root.join("dataset.json");
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let target_size = meta["target_size"].as_u64().ok_or_else(|| Error::Format {
            path: meta_path.display().to_string(),
            message: "missing target_size".into(),
        })? as u32;
        let manifest = read_manifest(&root.join("manifest.csv"))?;
        let images = manifest
            .iter()
            .map(|row| Ok(image::open(shard_path(root, row.image_id))?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        let ds = PriorDataset { images, manifest, target_size };
        ds.check().map_err(|e| Error::Format { path: root.display().to_string(), message: e.to_string() })?;
        Ok(ds)
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["image_id", "source", "timestamp_s", "box_x", "box_y", "box_w", "box_h", "confidence"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<ManifestRow>, _>>()?)
}

/// One path per line, `#` comments and blank lines skipped. Relative paths
/// resolve against the manifest's directory.
pub fn read_media_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

pub fn open_media(path: &Path, config: &IngestConfig) -> Result<Box<dyn VideoSource>> {
    let id = path.display().to_string();
    if path.is_dir() {
        Ok(Box::new(ImageFolder::open(path, id, config.frame_period_s)?))
    } else if path.is_file() {
        Ok(Box::new(FfmpegVideo::new(path, id)))
    } else {
        Err(Error::Ingestion { source_id: id, message: "no such file or directory".into() })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestFailure {
    pub source: String,
    pub message: String,
}

pub struct BuildOutcome {
    pub dataset: PriorDataset,
    pub failures: Vec<IngestFailure>,
}

/// Ingests every source in order; image ids are assigned sequentially in
/// that order, so the result depends only on the source list and detector.
pub fn build_prior_dataset(sources: &[Box<dyn VideoSource>], detector: &dyn FaceDetector, config: &IngestConfig) -> Result<BuildOutcome> {
    config.validate()?;
    let mut ds = PriorDataset::empty(config.target_size);
    let mut failures = Vec::new();
    for src in sources {
        let frames = match extract_frames(src.as_ref(), config) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("skipping {}: {e}", src.source_id());
                failures.push(IngestFailure { source: src.source_id(), message: e.to_string() });
                continue;
            }
        };
        let mut faces = Vec::new();
        let mut failed = None;
        for frame in &frames {
            match detect_and_align(frame, detector, config) {
                Ok(fs) => faces.extend(fs.into_iter().map(|f| (frame.timestamp_s, f))),
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            failures.push(IngestFailure { source: src.source_id(), message: e.to_string() });
            continue;
        }
        for (t, face) in faces {
            let b = face.detection.bbox;
            ds.manifest.push(ManifestRow {
                image_id: ds.images.len() as u64,
                source: src.source_id(),
                timestamp_s: t,
                box_x: b[0],
                box_y: b[1],
                box_w: b[2],
                box_h: b[3],
                confidence: face.detection.confidence,
            });
            ds.images.push(face.image);
        }
    }
    Ok(BuildOutcome { dataset: ds, failures })
}

/// File-level driver: reads the media manifest, ingests, writes the dataset
/// and `failures.json` under `out`. Any per-source failure is returned as
/// an ingestion error after the partial dataset has been flushed.
pub fn ingest_manifest(media_manifest: &Path, detector: &dyn FaceDetector, config: &IngestConfig, out: &Path) -> Result<PriorDataset> {
    let mut sources = Vec::new();
    let mut open_failures = Vec::new();
    for p in read_media_manifest(media_manifest)? {
        match open_media(&p, config) {
            Ok(s) => sources.push(s),
            Err(e) => open_failures.push(IngestFailure { source: p.display().to_string(), message: e.to_string() }),
        }
    }
    let mut outcome = build_prior_dataset(&sources, detector, config)?;
    open_failures.append(&mut outcome.failures);
    outcome.failures = open_failures;
    outcome.dataset.save(out)?;
    let mut f = fs::File::create(out.join("failures.json"))?;
    f.write_all(serde_json::to_string_pretty(&outcome.failures)?.as_bytes())?;
    if let Some(first) = outcome.failures.first() {
        return Err(Error::Ingestion {
            source_id: first.source.clone(),
            message: format!("{} ({} source(s) failed, see failures.json)", first.message, outcome.failures.len()),
        });
    }
    Ok(outcome.dataset)
}

/// Writes `sources` image folders of procedurally rendered faces placed on
/// larger canvases, each frame with a JSON detection sidecar, plus a media
/// manifest listing them. Used by the desk-scale `prep` stage.
pub fn write_synthetic_media(root: &Path, sources: usize, frames_per_source: usize, canvas: u32, seed: u64) -> Result<PathBuf> {
    use crate::synth::{self, FaceIdentity, Pose};
    use rand::Rng;
    fs::create_dir_all(root)?;
    let mut rng = seeding::rng_for(seed, "synthetic-media");
    let mut lines = String::from("# synthetic media\n");
    for s in 0..sources {
        let dir = root.join(format!("source_{s:04}"));
        fs::create_dir_all(&dir)?;
        for f in 0..frames_per_source {
            let group = rng.random_range(1..=synth::GROUP_COUNT);
            let id = FaceIdentity::sample(&mut rng, group);
            let pose = Pose::sample(&mut rng);
            let face = rng.random_range(canvas * 5 / 8..=canvas * 7 / 8);
            let (img, lm) = synth::render(&id, &pose, face, &mut rng);
            let ox = rng.random_range(0..=canvas - face);
            let oy = rng.random_range(0..=canvas - face);
            let mut frame = RgbImage::from_pixel(canvas, canvas, image::Rgb([90, 90, 90]));
            image::imageops::replace(&mut frame, &img, ox as i64, oy as i64);
            let det = FaceDetection {
                bbox: [ox as f64, oy as f64, face as f64, face as f64],
                landmarks: lm.map(|(x, y)| (x + ox as f64, y + oy as f64)),
                confidence: rng.random_range(0.8..1.0),
            };
            let stem = dir.join(format!("frame_{f:05}"));
            frame.save(stem.with_extension("png"))?;
            fs::write(stem.with_extension("json"), serde_json::to_string(&vec![det])?)?;
        }
        lines.push_str(&format!("source_{s:04}\n"));
    }
    let manifest = root.join("media.txt");
    fs::write(&manifest, lines)?;
    Ok(manifest)
}
