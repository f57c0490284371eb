//! Numerical helpers shared by unit and integration tests.
//!
//! Everything here evaluates functions on plain arrays and never touches the
//! autodiff graph, so it can serve as an independent check of it.

use crate::tensor::{Array, Tensor};

/// Central finite-difference gradient of a scalar function of one array.
pub fn central_difference(f: &mut dyn FnMut(&Array) -> f64, x: &Array, eps: f64) -> Array {
    let mut xp = x.as_standard_layout().into_owned();
    let mut g = Array::zeros(x.raw_dim());
    let n = xp.len();
    for i in 0..n {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Max elementwise relative error, with `floor` guarding near-zero entries.
pub fn max_relative_error(a: &Array, b: &Array, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares the autodiff gradient of `f` at `x` against central differences.
///
/// Returns the max relative error.
pub fn check_gradient(f: &dyn Fn(&Tensor) -> Tensor, x: &Array, eps: f64) -> f64 {
    let leaf = Tensor::leaf(x.clone());
    let y = f(&leaf);
    let analytic = crate::tensor::grad(&y.sum_all(), &[&leaf], false).remove(0).to_array();
    let mut scalar = |a: &Array| {
        let _g = crate::tensor::no_grad();
        f(&Tensor::constant(a.clone())).value().sum()
    };
    let numeric = central_difference(&mut scalar, x, eps);
    max_relative_error(&analytic, &numeric, 1e-6)
}

/// A complete experiment small enough to run every stage in seconds.
pub fn tiny_experiment() -> serde_json::Value {
    serde_json::json!({
        "scale_preset": "desk",
        "seed": 3,
        "data": {
            "synthetic_sources": 4, "synthetic_frames": 8, "synthetic_canvas": 48,
            "labeled_identities": 40, "images_per_identity": 14, "test_fraction": 0.5,
            "interpolation_count": 8
        },
        "ingest": { "target_size": 16, "min_face_px": 24, "detector_confidence": 0.5 },
        "gan": {
            "resolution": 16, "latent_dim": 16, "mapping_layers": 2, "total_samples": 128,
            "batch_size": 8, "channel_base": 128, "channel_max": 16, "log_every": 32,
            "fid_every": 0, "fid_samples": 16
        },
        "encoder": {
            "input_size": 16, "total_steps": 48, "batch_size": 4, "trunk_depth": 1,
            "base_channels": 4, "fpn_channels": 8, "ae_latent_dim": 8, "log_every": 16,
            "preview_every": 32
        },
        "finetune": { "epochs": 3, "freeze_epochs": 1, "batch_size": 16, "embedding_dim": 8 },
        "protocol": { "n_people": 2, "pos_per_person": 2, "folds": 2, "fid_samples": 16 }
    })
}
