//! Residual convolutional trunk (improved-residual units with optional
//! squeeze-excitation). The encoder, the autoencoder baselines and the
//! recognition backbone all use this exact layout, which is what makes
//! weight transfer a plain copy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, join, maps, BatchNorm, Conv2d, Linear, Module, PRelu};
use crate::seeding::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrunkConfig {
    pub input_size: usize,
    /// 18, 34, 50 or 100 for the standard layouts; 1 to 4 gives that many
    /// units in each of the four stages.
    pub depth: usize,
    pub base_channels: usize,
    pub use_squeeze_excitation: bool,
    pub se_reduction: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig { input_size: 112, depth: 50, base_channels: 64, use_squeeze_excitation: true, se_reduction: 16 }
    }
}

impl TrunkConfig {
    pub fn units(&self) -> Result<[usize; 4]> {
        Ok(match self.depth {
            18 => [2, 2, 2, 2],
            34 => [3, 4, 6, 3],
            50 => [3, 4, 14, 3],
            100 => [3, 13, 30, 3],
            d @ 1..=4 => [d; 4],
            d => return Err(Error::Config(format!("unsupported trunk depth {d}"))),
        })
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Spatial side after each stage.
    pub fn stage_sizes(&self) -> [usize; 4] {
        let mut s = self.input_size;
        [0; 4].map(|_| {
            s = maps::conv_out_size(s, 3, 2, 1);
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.units()?;
        if self.input_size < 8 {
            return Err(Error::Config("trunk input_size must be at least 8".into()));
        }
        if self.base_channels == 0 || self.se_reduction == 0 {
            return Err(Error::Config("trunk widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-call behaviour. `train` selects batch statistics (and updates the
/// running estimates); dropout after every conv is active whenever a rate and
/// an rng are given.
pub struct RunMode<'a> {
    pub train: bool,
    pub conv_dropout: f64,
    pub rng: Option<&'a mut Rng>,
}

impl RunMode<'_> {
    pub fn eval() -> RunMode<'static> {
        RunMode { train: false, conv_dropout: 0.0, rng: None }
    }

    pub fn train() -> RunMode<'static> {
        RunMode { train: true, conv_dropout: 0.0, rng: None }
    }

    fn drop(&mut self, x: Tensor) -> Tensor {
        match (&mut self.rng, self.conv_dropout > 0.0) {
            (Some(rng), true) => nn::dropout(&x, self.conv_dropout, &mut **rng),
            _ => x,
        }
    }
}

struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let pooled = x.mean_axes(&[1, 2], false);
        let gate = self.fc2.forward(&self.fc1.forward(&pooled).relu()).sigmoid();
        x.mul(&gate.reshape(&[s[0], 1, 1, s[3]]))
    }
}

struct Unit {
    shortcut: Option<(Conv2d, BatchNorm)>,
    stride: usize,
    bn1: BatchNorm,
    conv1: Conv2d,
    prelu: PRelu,
    conv2: Conv2d,
    bn2: BatchNorm,
    se: Option<SqueezeExcite>,
}

impl Unit {
    fn new(rng: &mut Rng, cin: usize, cout: usize, stride: usize, se: Option<usize>) -> Self {
        Unit {
            shortcut: (cin != cout).then(|| (Conv2d::new(rng, cin, cout, 1, stride, false), BatchNorm::new(cout))),
            stride,
            bn1: BatchNorm::new(cin),
            conv1: Conv2d::new(rng, cin, cout, 3, 1, false),
            prelu: PRelu::new(cout),
            conv2: Conv2d::new(rng, cout, cout, 3, stride, false),
            bn2: BatchNorm::new(cout),
            se: se.map(|r| {
                let mid = (cout / r).max(1);
                SqueezeExcite { fc1: Linear::new(rng, cout, mid, false), fc2: Linear::new(rng, mid, cout, false) }
            }),
        }
    }

    fn forward(&self, x: &Tensor, mode: &mut RunMode) -> Tensor {
        let short = match &self.shortcut {
            Some((conv, bn)) => {
                let y = mode.drop(conv.forward(x));
                bn.forward(&y, mode.train)
            }
            None if self.stride == 1 => x.clone(),
            None => {
                let s = x.shape();
                let (oh, ow) = (maps::conv_out_size(s[1], 1, self.stride, 0), maps::conv_out_size(s[2], 1, self.stride, 0));
                x.linear_map(&maps::im2col(s[1], s[2], s[3], 1, self.stride, 0), &[oh, ow, s[3]])
            }
        };
        let h = self.bn1.forward(x, mode.train);
        let h = mode.drop(self.conv1.forward(&h));
        let h = self.prelu.forward(&h);
        let h = mode.drop(self.conv2.forward(&h));
        let mut h = self.bn2.forward(&h, mode.train);
        if let Some(se) = &self.se {
            h = se.forward(&h);
        }
        h.add(&short)
    }
}

impl Module for Unit {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some((c, b)) = &self.shortcut {
            c.visit(&join(prefix, "shortcut.conv"), out);
            b.visit(&join(prefix, "shortcut.bn"), out);
        }
        self.bn1.visit(&join(prefix, "bn1"), out);
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.prelu.visit(&join(prefix, "prelu"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        self.bn2.visit(&join(prefix, "bn2"), out);
        if let Some(se) = &self.se {
            se.fc1.visit(&join(prefix, "se.fc1"), out);
            se.fc2.visit(&join(prefix, "se.fc2"), out);
        }
    }
}

pub struct Trunk {
    pub config: TrunkConfig,
    input_conv: Conv2d,
    input_bn: BatchNorm,
    input_prelu: PRelu,
    stages: Vec<Vec<Unit>>,
}

/// Name of the first convolution inside a trunk's tensor namespace.
pub const FIRST_CONV: &str = "input.conv";

impl Trunk {
    pub fn new(cfg: &TrunkConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let units = cfg.units()?;
        let ch = cfg.stage_channels();
        let se = cfg.use_squeeze_excitation.then_some(cfg.se_reduction);
        let mut cin = cfg.base_channels;
        let stages = (0..4)
            .map(|s| {
                (0..units[s])
                    .map(|u| {
                        let unit = Unit::new(rng, cin, ch[s], if u == 0 { 2 } else { 1 }, se);
                        cin = ch[s];
                        unit
                    })
                    .collect()
            })
            .collect();
        Ok(Trunk {
            config: cfg.clone(),
            input_conv: Conv2d::new(rng, 3, cfg.base_channels, 3, 1, false),
            input_bn: BatchNorm::new(cfg.base_channels),
            input_prelu: PRelu::new(cfg.base_channels),
            stages,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != 3 {
            return Err(crate::error::arg(format!("expected [N, {n}, {n}, 3] images, got {s:?}")));
        }
        Ok(())
    }

    /// Output of each of the four stages, shallow to deep.
    pub fn forward(&self, x: &Tensor, mode: &mut RunMode) -> Vec<Tensor> {
        let h = mode.drop(self.input_conv.forward(x));
        let mut h = self.input_prelu.forward(&self.input_bn.forward(&h, mode.train));
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for unit in stage {
                h = unit.forward(&h, mode);
            }
            out.push(h.clone());
        }
        out
    }
}

impl Module for Trunk {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.input_conv.visit(&join(prefix, FIRST_CONV), out);
        self.input_bn.visit(&join(prefix, "input.bn"), out);
        self.input_prelu.visit(&join(prefix, "input.prelu"), out);
        for (s, stage) in self.stages.iter().enumerate() {
            for (u, unit) in stage.iter().enumerate() {
                unit.visit(&join(prefix, &format!("stages.{s}.{u}")), out);
            }
        }
    }
}

/// Human-readable difference between two named-shape layouts; empty when
/// they agree.
pub fn layout_diff(expected: &[(String, Vec<usize>)], found: &std::collections::BTreeMap<String, crate::tensor::Array>) -> Vec<String> {
    let mut out = Vec::new();
    for (name, shape) in expected {
        match found.get(name) {
            None => out.push(format!("missing {name} {shape:?}")),
            Some(a) if a.shape() != shape.as_slice() => out.push(format!("{name}: expected {shape:?}, found {:?}", a.shape())),
            _ => {}
        }
    }
    let known: std::collections::BTreeSet<&String> = expected.iter().map(|(n, _)| n).collect();
    for (name, a) in found {
        if !known.contains(name) {
            out.push(format!("unexpected {name} {:?}", a.shape()));
        }
    }
    out
}
