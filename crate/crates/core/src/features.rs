//! Fixed feature extractor shared by the perceptual distance and FID.
//!
//! The default is a seeded, randomly initialised convolutional pyramid with
//! frozen weights. Anything implementing [`FeatureExtractor`] can replace it.

use crate::nn::{conv2d, maps, Conv2d};
use crate::seeding;
use crate::tensor::Tensor;

pub trait FeatureExtractor {
    /// Feature maps, shallow to deep, for an NHWC batch in `[-1, 1]`.
    fn feature_maps(&self, x: &Tensor) -> Vec<Tensor>;

    /// One vector per image: the spatial mean of every feature map,
    /// concatenated.
    fn pooled(&self, x: &Tensor) -> Tensor {
        let parts: Vec<Tensor> = self.feature_maps(x).iter().map(|f| f.mean_axes(&[1, 2], false)).collect();
        Tensor::concat(&parts, 1)
    }
}

pub struct RandomConvPyramid {
    /// Frozen `[9 * C_in, C_out]` kernels.
    weights: Vec<Tensor>,
}

impl RandomConvPyramid {
    pub fn new(seed: u64, widths: &[usize]) -> Self {
        let mut rng = seeding::rng_for(seed, "feature-net");
        let mut cin = 3;
        let weights = widths
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(&mut rng, cin, c, 3, 1, false);
                cin = c;
                Tensor::constant(conv.weight.to_array())
            })
            .collect();
        RandomConvPyramid { weights }
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(seed, &[16, 32, 64])
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn feature_maps(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 && h.shape()[1] >= 2 {
                h = maps::avg_pool(&h);
            }
            h = conv2d(&h, w, 3, 1, 1).leaky_relu(0.2);
            out.push(h.clone());
        }
        out
    }
}
