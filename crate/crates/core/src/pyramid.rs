//! Micro backbone producing the stride-4,8,16,... feature pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::LevelShape;
use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSet};
use crate::tensor::{Graph, Real, Var};

/// Constant subtracted from every pixel before the backbone.
pub const PIXEL_MEAN: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub levels: usize,
    /// Channels of each emitted level; only the first `levels` entries are used.
    pub channels_per_level: Vec<usize>,
    /// Levels passed through learnable L2 rescaling. Indices past the last
    /// level are ignored.
    pub l2norm_levels: Vec<usize>,
    pub l2norm_init_scale: f64,
    /// Whether backbone convolutions carry bias terms.
    pub bias: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            levels: 3,
            channels_per_level: vec![32, 64, 128],
            l2norm_levels: vec![0, 1],
            l2norm_init_scale: 10.0,
            bias: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("backbone.levels must be at least 1".into()));
        }
        if self.levels > 16 {
            return Err(Error::Config("backbone.levels must be at most 16".into()));
        }
        let unit = 1usize << (self.levels + 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "backbone.input_size {} must be a positive multiple of 2^(levels+1) = {unit}",
                self.input_size
            )));
        }
        if self.channels_per_level.len() < self.levels {
            return Err(Error::Config(format!(
                "backbone.channels_per_level has {} entries for {} levels",
                self.channels_per_level.len(),
                self.levels
            )));
        }
        if self.channels_per_level[..self.levels].contains(&0) {
            return Err(Error::Config("backbone.channels_per_level entries must be positive".into()));
        }
        if !(self.l2norm_init_scale > 0.0) {
            return Err(Error::Config("backbone.l2norm_init_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(level: usize) -> usize {
        4 << level
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels_per_level[..self.levels]
    }

    pub fn level_shapes(&self) -> Vec<LevelShape> {
        (0..self.levels)
            .map(|i| LevelShape {
                size: self.input_size / Self::stride(i),
                stride: Self::stride(i),
            })
            .collect()
    }

    fn normalizes(&self, level: usize) -> bool {
        self.l2norm_levels.contains(&level)
    }

    fn stem_channels(&self) -> usize {
        (self.channels_per_level[0] / 2).max(1)
    }
}

/// One emitted pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    pub feature: Var,
    pub stride: usize,
}

/// Backbone output on a graph, shallowest level first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn feature(&self, level: usize) -> Var {
        self.levels[level].feature
    }
}

fn add_conv<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    dims: [usize; 4],
    bias: bool,
    init: Init,
    rng: &mut R,
) {
    params.insert(format!("{name}.weight"), init.sample(&dims, rng));
    if bias {
        params.insert(format!("{name}.bias"), Init::Constant(0.0).sample(&[dims[0]], rng));
    }
}

/// Adds the backbone parameters to `params`, drawing from `rng` in a fixed
/// order.
pub fn init_backbone<R: Rng + ?Sized>(cfg: &BackboneConfig, params: &mut ParamSet, rng: &mut R) {
    let ch = cfg.channels();
    let stem = cfg.stem_channels();
    add_conv(params, "backbone.stem0", [stem, 3, 3, 3], cfg.bias, Init::Xavier, rng);
    add_conv(params, "backbone.stem1", [ch[0], stem, 3, 3], cfg.bias, Init::Xavier, rng);
    add_conv(params, "backbone.level0.conv", [ch[0], ch[0], 3, 3], cfg.bias, Init::Xavier, rng);
    for i in 1..cfg.levels {
        add_conv(
            params,
            &format!("backbone.level{i}.down"),
            [ch[i], ch[i - 1], 3, 3],
            cfg.bias,
            Init::Xavier,
            rng,
        );
        add_conv(
            params,
            &format!("backbone.level{i}.conv"),
            [ch[i], ch[i], 3, 3],
            cfg.bias,
            Init::Xavier,
            rng,
        );
    }
    for i in 0..cfg.levels {
        if cfg.normalizes(i) {
            params.insert(
                format!("backbone.l2norm{i}.scale"),
                Init::Constant(cfg.l2norm_init_scale).sample(&[ch[i]], rng),
            );
        }
    }
}

/// Names of every backbone parameter for `cfg`.
pub fn backbone_param_names(cfg: &BackboneConfig) -> Vec<String> {
    let mut names = Vec::new();
    let mut conv = |n: String| {
        names.push(format!("{n}.weight"));
        if cfg.bias {
            names.push(format!("{n}.bias"));
        }
    };
    conv("backbone.stem0".into());
    conv("backbone.stem1".into());
    conv("backbone.level0.conv".into());
    for i in 1..cfg.levels {
        conv(format!("backbone.level{i}.down"));
        conv(format!("backbone.level{i}.conv"));
    }
    for i in 0..cfg.levels {
        if cfg.normalizes(i) {
            names.push(format!("backbone.l2norm{i}.scale"));
        }
    }
    names
}

fn conv_relu<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    x: Var,
    name: &str,
    bias: bool,
    stride: usize,
) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = if bias {
        Some(p.var(&format!("{name}.bias"))?)
    } else {
        None
    };
    let y = g.conv2d(x, w, b, stride, 1)?;
    Ok(g.relu(y))
}

/// Runs the backbone on a mean-subtracted `[3, S, S]` image.
pub fn forward_pyramid<T: Real>(
    cfg: &BackboneConfig,
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    image: Var,
) -> Result<FeaturePyramid> {
    let dims = g.value(image).dims().to_vec();
    if dims != [3, cfg.input_size, cfg.input_size] {
        return Err(Error::Shape(format!(
            "backbone expects [3, {s}, {s}], got {dims:?}",
            s = cfg.input_size
        )));
    }
    let mut x = conv_relu(g, p, image, "backbone.stem0", cfg.bias, 2)?;
    x = conv_relu(g, p, x, "backbone.stem1", cfg.bias, 2)?;
    x = conv_relu(g, p, x, "backbone.level0.conv", cfg.bias, 1)?;
    let mut raw = vec![x];
    for i in 1..cfg.levels {
        x = conv_relu(g, p, x, &format!("backbone.level{i}.down"), cfg.bias, 2)?;
        x = conv_relu(g, p, x, &format!("backbone.level{i}.conv"), cfg.bias, 1)?;
        raw.push(x);
    }
    let mut levels = Vec::with_capacity(cfg.levels);
    for (i, feat) in raw.into_iter().enumerate() {
        let feature = if cfg.normalizes(i) {
            let s = p.var(&format!("backbone.l2norm{i}.scale"))?;
            g.l2norm_channels(feat, s)?
        } else {
            feat
        };
        levels.push(PyramidLevel {
            feature,
            stride: BackboneConfig::stride(i),
        });
    }
    Ok(FeaturePyramid { levels })
}
