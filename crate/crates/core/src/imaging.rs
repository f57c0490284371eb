//! Conversions between 8-bit RGB images and NHWC tensors, plus the few
//! resampling routines the data pipeline needs.

use crate::tensor::{Array, Tensor};
use image::{Rgb, RgbImage};
use ndarray::IxDyn;

/// Maps `[0, 255]` to `[-1, 1]`.
pub fn images_to_tensor(images: &[RgbImage]) -> Tensor {
    Tensor::constant(images_to_array(images))
}

pub fn images_to_array(images: &[RgbImage]) -> Array {
    if images.is_empty() {
        return Array::zeros(IxDyn(&[0, 0, 0, 3]));
    }
    let (w, h) = images[0].dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
    for img in images {
        assert_eq!(img.dimensions(), (w, h), "mixed image sizes in one batch");
        data.extend(img.as_raw().iter().map(|&v| v as f64 / 127.5 - 1.0));
    }
    Array::from_shape_vec(IxDyn(&[images.len(), h as usize, w as usize, 3]), data).expect("image batch shape")
}

/// Inverse of [`images_to_tensor`], clamping and rounding to 8 bits.
pub fn array_to_images(a: &Array) -> Vec<RgbImage> {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected NHWC");
    let (n, h, w) = (s[0], s[1], s[2]);
    let std = a.as_standard_layout();
    let flat = std.as_slice().unwrap();
    let per = h * w * 3;
    (0..n)
        .map(|i| {
            let raw: Vec<u8> = flat[i * per..(i + 1) * per]
                .iter()
                .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
                .collect();
            RgbImage::from_raw(w as u32, h as u32, raw).unwrap()
        })
        .collect()
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = img.dimensions();
    if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
        return [0.0; 3];
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xx: u32, yy: u32| img.get_pixel(xx, yy)[c] as f64;
        *o = (1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x1, y0)) + fy * ((1.0 - fx) * p(x0, y1) + fx * p(x1, y1));
    }
    out
}

/// Half-pixel-centred bilinear resize.
pub fn resize_rgb(img: &RgbImage, ow: u32, oh: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if (w, h) == (ow, oh) {
        return img.clone();
    }
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    RgbImage::from_fn(ow, oh, |x, y| {
        let src_x = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
        let src_y = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        let v = sample_bilinear(img, src_x, src_y);
        Rgb([to_u8(v[0]), to_u8(v[1]), to_u8(v[2])])
    })
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// 2x3 similarity transform `[a, -b, tx; b, a, ty]` stored as `[a, b, tx, ty]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 };

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    pub fn inverse(&self) -> Option<Similarity> {
        let det = self.a * self.a + self.b * self.b;
        if det < 1e-18 {
            return None;
        }
        let ia = self.a / det;
        let ib = -self.b / det;
        let tx = -(ia * self.tx - ib * self.ty);
        let ty = -(ib * self.tx + ia * self.ty);
        Some(Similarity { a: ia, b: ib, tx, ty })
    }

    pub fn scale(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    /// Least-squares similarity mapping `src[i]` onto `dst[i]`.
    pub fn estimate(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Similarity> {
        assert_eq!(src.len(), dst.len());
        let n = src.len() as f64;
        if src.len() < 2 {
            return None;
        }
        let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            sx += s.0;
            sy += s.1;
            dx += d.0;
            dy += d.1;
        }
        let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);
        let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let (px, py) = (s.0 - sx, s.1 - sy);
            let (qx, qy) = (d.0 - dx, d.1 - dy);
            num_a += px * qx + py * qy;
            num_b += px * qy - py * qx;
            den += px * px + py * py;
        }
        if den < 1e-12 {
            return None;
        }
        let a = num_a / den;
        let b = num_b / den;
        Some(Similarity {
            a,
            b,
            tx: dx - (a * sx - b * sy),
            ty: dy - (b * sx + a * sy),
        })
    }
}

/// Warps `src` into an `out_size` square: each output pixel centre `p`
/// samples `src` at `to_output.inverse()(p)` bilinearly, zero outside.
pub fn warp_similarity(src: &RgbImage, to_output: &Similarity, out_size: u32) -> RgbImage {
    let inv = to_output.inverse().unwrap_or(Similarity::IDENTITY);
    RgbImage::from_fn(out_size, out_size, |x, y| {
        let (sx, sy) = inv.apply((x as f64, y as f64));
        let v = sample_bilinear(src, sx, sy);
        Rgb([to_u8(v[0]), to_u8(v[1]), to_u8(v[2])])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_exact_on_u8() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([(x * 40) as u8, (y * 60) as u8, 255]));
        let back = array_to_images(&images_to_array(std::slice::from_ref(&img)));
        assert_eq!(back[0], img);
    }

    #[test]
    fn similarity_estimate_recovers_transform() {
        let t = Similarity { a: 0.8, b: 0.3, tx: 5.0, ty: -2.0 };
        let src = [(1.0, 2.0), (10.0, 3.0), (4.0, 8.0), (7.0, 7.0)];
        let dst: Vec<_> = src.iter().map(|&p| t.apply(p)).collect();
        let est = Similarity::estimate(&src, &dst).unwrap();
        assert!((est.a - t.a).abs() < 1e-12 && (est.b - t.b).abs() < 1e-12);
        assert!((est.tx - t.tx).abs() < 1e-9 && (est.ty - t.ty).abs() < 1e-9);
        let inv = t.inverse().unwrap();
        let p = inv.apply(t.apply((3.0, 4.0)));
        assert!((p.0 - 3.0).abs() < 1e-12 && (p.1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 30) as u8, 7]));
        assert_eq!(warp_similarity(&img, &Similarity::IDENTITY, 8), img);
    }
}
