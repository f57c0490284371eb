//! Procedurally generated face-like images with identity and group structure.
//!
//! An identity fixes colours and coarse geometry; a pose adds per-photo
//! nuisance (shift, scale, tilt, lighting, background, expression, sensor
//! noise). Four groups differ in their skin and hair palettes, which gives the
//! group-aware tooling something real to work on.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::prior_data::CANONICAL_LANDMARKS_112;

pub const GROUP_COUNT: u32 = 4;
/// Per-channel background level range. Wide enough to matter, narrow enough
/// that the face carries most of the pixel variance.
const BACKGROUND: (f64, f64) = (90.0, 170.0);

const SKIN_BASE: [[f64; 3]; 4] = [
    [92.0, 58.0, 40.0],
    [226.0, 192.0, 152.0],
    [168.0, 118.0, 84.0],
    [236.0, 196.0, 178.0],
];

const HAIR_BASE: [[f64; 3]; 4] = [
    [28.0, 22.0, 20.0],
    [18.0, 18.0, 24.0],
    [52.0, 34.0, 24.0],
    [150.0, 110.0, 60.0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct FaceIdentity {
    pub group: u32,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub face_rx: f64,
    pub face_ry: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub brow_gap: f64,
    pub brow_tilt: f64,
    pub nose_len: f64,
    pub nose_w: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub hairline: f64,
    pub hair_volume: f64,
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], sd: f64) -> [f64; 3] {
    let n = Normal::new(0.0, sd).unwrap();
    [
        (base[0] + n.sample(rng)).clamp(0.0, 255.0),
        (base[1] + n.sample(rng)).clamp(0.0, 255.0),
        (base[2] + n.sample(rng)).clamp(0.0, 255.0),
    ]
}

impl FaceIdentity {
    /// `group` is 1-based.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, group: u32) -> Self {
        assert!((1..=GROUP_COUNT).contains(&group), "group {group} out of range");
        let g = (group - 1) as usize;
        let hair_sd = if g == 3 { 45.0 } else { 14.0 };
        FaceIdentity {
            group,
            skin: jitter(rng, SKIN_BASE[g], 16.0),
            hair: jitter(rng, HAIR_BASE[g], hair_sd),
            iris: jitter(rng, [70.0, 60.0, 50.0], 35.0),
            lips: jitter(rng, [150.0, 70.0, 70.0], 25.0),
            face_rx: rng.random_range(28.0..40.0),
            face_ry: rng.random_range(38.0..50.0),
            eye_dx: rng.random_range(14.0..22.0),
            eye_y: rng.random_range(46.0..56.0),
            eye_r: rng.random_range(4.0..8.0),
            brow_gap: rng.random_range(7.0..12.0),
            brow_tilt: rng.random_range(-0.25..0.25),
            nose_len: rng.random_range(10.0..20.0),
            nose_w: rng.random_range(4.0..9.0),
            mouth_y: rng.random_range(84.0..96.0),
            mouth_w: rng.random_range(10.0..20.0),
            hairline: rng.random_range(16.0..40.0),
            hair_volume: rng.random_range(1.0..1.25),
        }
    }
}

/// Per-photo nuisance, in the 112-pixel canonical frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub angle: f64,
    pub brightness: f64,
    pub background: [f64; 3],
    pub noise_sd: f64,
    pub mouth_open: f64,
    pub eye_open: f64,
}

impl Pose {
    pub fn neutral() -> Self {
        Pose {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            angle: 0.0,
            brightness: 1.0,
            background: [120.0, 120.0, 120.0],
            noise_sd: 0.0,
            mouth_open: 0.5,
            eye_open: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Pose {
            dx: rng.random_range(-4.0..4.0),
            dy: rng.random_range(-4.0..4.0),
            scale: rng.random_range(0.92..1.08),
            angle: rng.random_range(-0.09..0.09),
            brightness: rng.random_range(0.8..1.2),
            background: [
                rng.random_range(BACKGROUND.0..BACKGROUND.1),
                rng.random_range(BACKGROUND.0..BACKGROUND.1),
                rng.random_range(BACKGROUND.0..BACKGROUND.1),
            ],
            noise_sd: 4.0,
            mouth_open: rng.random_range(0.0..1.0),
            eye_open: rng.random_range(0.6..1.0),
        }
    }

    /// Canonical-frame point to pose-transformed canonical-frame point.
    fn forward(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (cx, cy) = (56.0, 62.0);
        let (s, c) = self.angle.sin_cos();
        let (px, py) = (x - cx, y - cy);
        (
            cx + self.scale * (c * px - s * py) + self.dx,
            cy + self.scale * (s * px + c * py) + self.dy,
        )
    }

    fn inverse(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (cx, cy) = (56.0, 62.0);
        let (s, c) = self.angle.sin_cos();
        let (px, py) = ((x - cx - self.dx) / self.scale, (y - cy - self.dy) / self.scale);
        (cx + c * px + s * py, cy - s * px + c * py)
    }
}

fn ellipse_sdf(p: (f64, f64), c: (f64, f64), rx: f64, ry: f64) -> f64 {
    let (x, y) = ((p.0 - c.0) / rx, (p.1 - c.1) / ry);
    ((x * x + y * y).sqrt() - 1.0) * rx.min(ry)
}

fn segment_sdf(p: (f64, f64), a: (f64, f64), b: (f64, f64), half_width: f64) -> f64 {
    let (pax, pay) = (p.0 - a.0, p.1 - a.1);
    let (bax, bay) = (b.0 - a.0, b.1 - a.1);
    let h = ((pax * bax + pay * bay) / (bax * bax + bay * bay)).clamp(0.0, 1.0);
    let (dx, dy) = (pax - bax * h, pay - bay * h);
    (dx * dx + dy * dy).sqrt() - half_width
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    if alpha <= 0.0 {
        return;
    }
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Colour of one canonical-frame point (before pose, lighting and noise).
fn shade_point(id: &FaceIdentity, pose: &Pose, p: (f64, f64), aa: f64) -> [f64; 3] {
    let cov = |d: f64| (0.5 - d / aa).clamp(0.0, 1.0);
    let mut col = pose.background;
    let face_c = (56.0, 62.0);

    let hair_d = ellipse_sdf(p, (56.0, 58.0), id.face_rx * id.hair_volume + 4.0, id.face_ry * id.hair_volume + 2.0);
    let hair_mask = cov(hair_d) * cov(p.1 - (62.0 + 0.2 * id.face_ry));
    blend(&mut col, id.hair, hair_mask);

    let face_d = ellipse_sdf(p, face_c, id.face_rx, id.face_ry);
    let r = (((p.0 - face_c.0) / id.face_rx).powi(2) + ((p.1 - face_c.1) / id.face_ry).powi(2)).sqrt();
    blend(&mut col, shade(id.skin, 1.05 - 0.2 * r.min(1.0)), cov(face_d));

    // Fringe above the hairline, clipped to the face.
    let fringe = cov(p.1 - id.hairline) * cov(face_d);
    blend(&mut col, id.hair, fringe);

    for side in [-1.0, 1.0] {
        let ec = (56.0 + side * id.eye_dx, id.eye_y);
        let open = id.eye_r * 0.6 * pose.eye_open;
        blend(&mut col, [235.0, 235.0, 230.0], cov(ellipse_sdf(p, ec, id.eye_r * 1.3, open.max(0.5))));
        blend(&mut col, id.iris, cov(ellipse_sdf(p, ec, id.eye_r * 0.6, id.eye_r * 0.6)) * cov(ellipse_sdf(p, ec, id.eye_r * 1.3, open.max(0.5))));
        let by = id.eye_y - id.eye_r - id.brow_gap * 0.5;
        let a = (ec.0 - side * id.eye_r * 1.4, by + side * id.brow_tilt * 6.0);
        let b = (ec.0 + side * id.eye_r * 1.4, by - side * id.brow_tilt * 6.0);
        blend(&mut col, shade(id.hair, 0.8), cov(segment_sdf(p, a, b, 1.6)));
    }

    let nose_top = (56.0, id.eye_y + 4.0);
    let nose_tip = (56.0, id.eye_y + 4.0 + id.nose_len);
    blend(&mut col, shade(id.skin, 0.78), cov(segment_sdf(p, nose_top, nose_tip, id.nose_w * 0.35)));

    let mouth_h = 2.0 + 4.0 * pose.mouth_open;
    blend(&mut col, id.lips, cov(ellipse_sdf(p, (56.0, id.mouth_y), id.mouth_w, mouth_h)));
    col
}

/// Renders one face at `size` pixels. Returns the image and the five
/// landmarks (eyes, nose, mouth corners) in output pixel coordinates.
pub fn render<R: Rng + ?Sized>(id: &FaceIdentity, pose: &Pose, size: u32, rng: &mut R) -> (RgbImage, [(f64, f64); 5]) {
    let k = 112.0 / size as f64;
    let aa = k.max(1.0);
    let noise = Normal::new(0.0, pose.noise_sd.max(1e-9)).unwrap();
    let img = RgbImage::from_fn(size, size, |x, y| {
        let canon = pose.inverse(((x as f64 + 0.5) * k - 0.5, (y as f64 + 0.5) * k - 0.5));
        let c = shade_point(id, pose, canon, aa / pose.scale);
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let v = c[ch] * pose.brightness + if pose.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
            px[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    });
    let landmarks = landmarks_for(id, pose, size);
    (img, landmarks)
}

/// Landmarks of a rendered face, in pixels of a `size` render.
pub fn landmarks_for(id: &FaceIdentity, pose: &Pose, size: u32) -> [(f64, f64); 5] {
    let k = size as f64 / 112.0;
    let canon = [
        (56.0 - id.eye_dx, id.eye_y),
        (56.0 + id.eye_dx, id.eye_y),
        (56.0, id.eye_y + 4.0 + id.nose_len),
        (56.0 - id.mouth_w, id.mouth_y),
        (56.0 + id.mouth_w, id.mouth_y),
    ];
    let mut out = [(0.0, 0.0); 5];
    for (o, c) in out.iter_mut().zip(canon) {
        let (x, y) = pose.forward(c);
        *o = ((x + 0.5) * k - 0.5, (y + 0.5) * k - 0.5);
    }
    out
}

/// Distance of an identity's landmark layout from the canonical template,
/// useful to sanity-check that alignment has something to correct.
pub fn template_offset(id: &FaceIdentity) -> f64 {
    let l = landmarks_for(id, &Pose::neutral(), 112);
    l.iter()
        .zip(CANONICAL_LANDMARKS_112.iter())
        .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
        .sum::<f64>()
        / 5.0
}

/// Group membership drawn uniformly from `groups`.
pub fn sample_group<R: Rng + ?Sized>(rng: &mut R, groups: &[u32]) -> u32 {
    groups[rng.random_range(0..groups.len())]
}

/// Nearest-palette group guess from the mean colour of the central face
/// region. Serves as a cheap, deterministic group classifier for synthetic data.
pub fn palette_group(img: &RgbImage) -> u32 {
    let (w, h) = img.dimensions();
    let (x0, x1, y0, y1) = (w * 3 / 8, w * 5 / 8, h * 9 / 16, h * 11 / 16);
    let mut mean = [0.0; 3];
    let mut n = 0.0;
    for y in y0..y1.max(y0 + 1) {
        for x in x0..x1.max(x0 + 1) {
            let p = img.get_pixel(x.min(w - 1), y.min(h - 1));
            for c in 0..3 {
                mean[c] += p[c] as f64;
            }
            n += 1.0;
        }
    }
    let mean = mean.map(|v| v / n);
    let mut best = (f64::INFINITY, 1);
    for (g, base) in SKIN_BASE.iter().enumerate() {
        let d: f64 = (0..3).map(|c| (mean[c] - base[c]).powi(2)).sum();
        if d < best.0 {
            best = (d, g as u32 + 1);
        }
    }
    best.1
}
