//! Cached spatial operators on NHWC images, expressed as [`LinearMap`]s.

use crate::tensor::{LinearMap, MapBuilder, Tensor};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Key {
    Im2col { h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize },
    AvgPool2 { h: usize, w: usize, c: usize },
    Upsample2 { h: usize, w: usize, c: usize },
    Bilinear { h: usize, w: usize, c: usize, oh: usize, ow: usize },
    Geometric { h: usize, w: usize, c: usize, flip: bool, rot: u8, dx: i32, dy: i32 },
}

thread_local! {
    static CACHE: RefCell<HashMap<Key, Arc<LinearMap>>> = RefCell::new(HashMap::new());
}

fn cached(key: Key, build: impl FnOnce() -> LinearMap) -> Arc<LinearMap> {
    if let Some(m) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return m;
    }
    let m = Arc::new(build());
    CACHE.with(|c| c.borrow_mut().insert(key, Arc::clone(&m)));
    m
}

pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Patch extraction: `[H, W, C]` to `[OH, OW, K*K*C]` with zero padding.
pub fn im2col(h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Arc<LinearMap> {
    cached(Key::Im2col { h, w, c, k, stride, pad }, || {
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(w, k, stride, pad);
        let rows = oh * ow * k * k * c;
        let mut b = MapBuilder::with_capacity(h * w * c, rows, rows);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ch in 0..c {
                            let col = inside.then(|| ((iy as usize) * w + ix as usize) * c + ch);
                            b.push_single(col);
                        }
                    }
                }
            }
        }
        b.build()
    })
}

/// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
pub fn avg_pool2(h: usize, w: usize, c: usize) -> Arc<LinearMap> {
    cached(Key::AvgPool2 { h, w, c }, || {
        let (oh, ow) = (h / 2, w / 2);
        let mut b = MapBuilder::with_capacity(h * w * c, oh * ow * c, oh * ow * c * 4);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let at = |y: usize, x: usize| ((y * w + x) * c + ch, 0.25);
                    b.push_row(&[
                        at(2 * oy, 2 * ox),
                        at(2 * oy, 2 * ox + 1),
                        at(2 * oy + 1, 2 * ox),
                        at(2 * oy + 1, 2 * ox + 1),
                    ]);
                }
            }
        }
        b.build()
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(h: usize, w: usize, c: usize) -> Arc<LinearMap> {
    cached(Key::Upsample2 { h, w, c }, || {
        let (oh, ow) = (h * 2, w * 2);
        let mut b = MapBuilder::with_capacity(h * w * c, oh * ow * c, oh * ow * c);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    b.push_single(Some(((oy / 2) * w + ox / 2) * c + ch));
                }
            }
        }
        b.build()
    })
}

/// Source taps and weights for one output coordinate of a half-pixel-centred
/// bilinear resize (no antialiasing).
pub fn bilinear_taps(out_index: usize, in_size: usize, out_size: usize) -> [(usize, f64); 2] {
    let scale = in_size as f64 / out_size as f64;
    let src = ((out_index as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_size - 1);
    let i1 = (i0 + 1).min(in_size - 1);
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    [(i0, 1.0 - frac), (i1, frac)]
}

pub fn bilinear_resize(h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Arc<LinearMap> {
    cached(Key::Bilinear { h, w, c, oh, ow }, || {
        let mut b = MapBuilder::with_capacity(h * w * c, oh * ow * c, oh * ow * c * 4);
        let mut entries = Vec::with_capacity(4);
        for oy in 0..oh {
            let ty = bilinear_taps(oy, h, oh);
            for ox in 0..ow {
                let tx = bilinear_taps(ox, w, ow);
                for ch in 0..c {
                    entries.clear();
                    for &(y, wy) in &ty {
                        for &(x, wx) in &tx {
                            let idx = (y * w + x) * c + ch;
                            if let Some(e) = entries.iter_mut().find(|(i, _)| *i == idx) {
                                e.1 += wy * wx;
                            } else {
                                entries.push((idx, wy * wx));
                            }
                        }
                    }
                    b.push_row(&entries);
                }
            }
        }
        b.build()
    })
}

/// Horizontal flip, then `rot` quarter turns counter-clockwise, then an
/// integer translation with zero fill. Requires square images when rotating.
pub fn geometric(h: usize, w: usize, c: usize, flip: bool, rot: u8, dx: i32, dy: i32) -> Arc<LinearMap> {
    cached(Key::Geometric { h, w, c, flip, rot, dx, dy }, || {
        assert!(rot % 2 == 0 || h == w, "quarter-turn rotation needs a square image");
        let mut b = MapBuilder::with_capacity(h * w * c, h * w * c, h * w * c);
        for oy in 0..h as i32 {
            for ox in 0..w as i32 {
                // Undo the translation, then the rotation, then the flip.
                let (ty, tx) = (oy - dy, ox - dx);
                let src = if ty < 0 || tx < 0 || ty >= h as i32 || tx >= w as i32 {
                    None
                } else {
                    let (mut y, mut x) = (ty as usize, tx as usize);
                    for _ in 0..(rot % 4) {
                        // Inverse of a counter-clockwise quarter turn.
                        let (ny, nx) = (x, w - 1 - y);
                        y = ny;
                        x = nx;
                    }
                    if flip {
                        x = w - 1 - x;
                    }
                    Some((y, x))
                };
                for ch in 0..c {
                    b.push_single(src.map(|(y, x)| (y * w + x) * c + ch));
                }
            }
        }
        b.build()
    })
}

fn hwc(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected an NHWC tensor, got {s:?}");
    (s[1], s[2], s[3])
}

pub fn avg_pool(x: &Tensor) -> Tensor {
    let (h, w, c) = hwc(x);
    x.linear_map(&avg_pool2(h, w, c), &[h / 2, w / 2, c])
}

pub fn upsample(x: &Tensor) -> Tensor {
    let (h, w, c) = hwc(x);
    x.linear_map(&upsample2(h, w, c), &[h * 2, w * 2, c])
}

pub fn resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = hwc(x);
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    x.linear_map(&bilinear_resize(h, w, c, oh, ow), &[oh, ow, c])
}
