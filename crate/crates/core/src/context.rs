//! Context-Texture agglomeration: each pyramid level is fused with its two
//! immediate neighbours after channel reduction and 2x resampling.
//!
//! For level `n` (1-indexed) the fused map is
//! `relu(concat(pool(reduce(f[n-1])), reduce(f[n]), upsample(reduce(f[n+1]))))`,
//! with the shallow and deep paths dropped at the pyramid boundaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSet};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextTextureConfig {
    /// Channels of the reduced centre path (`N`); neighbours get `N / 8`.
    pub reduced_channels: usize,
}

impl Default for ContextTextureConfig {
    fn default() -> Self {
        Self {
            reduced_channels: 64,
        }
    }
}

impl ContextTextureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduced_channels == 0 || !self.reduced_channels.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "context.reduced_channels must be a positive multiple of 8, got {}",
                self.reduced_channels
            )));
        }
        Ok(())
    }

    pub fn neighbor_channels(&self) -> usize {
        self.reduced_channels / 8
    }

    /// Channel count of fused level `n` (1-indexed) in an `levels`-level pyramid.
    pub fn fused_channels(&self, levels: usize, n: usize) -> usize {
        let neighbours = usize::from(n > 1) + usize::from(n < levels);
        self.reduced_channels + neighbours * self.neighbor_channels()
    }

    /// Width of a fused map with both neighbours present.
    pub fn full_channels(&self) -> usize {
        self.reduced_channels + 2 * self.neighbor_channels()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusedLevel {
    pub feature: Var,
    pub stride: usize,
    pub has_shallow: bool,
    pub has_deep: bool,
}

#[derive(Clone, Debug)]
pub struct FusedPyramid {
    pub levels: Vec<FusedLevel>,
}

/// Adds per-level reduction convolutions (1x1, Xavier weights, zero bias).
pub fn init_context<R: Rng + ?Sized>(
    cfg: &ContextTextureConfig,
    level_channels: &[usize],
    params: &mut ParamSet,
    rng: &mut R,
) {
    let levels = level_channels.len();
    let (n_center, n_side) = (cfg.reduced_channels, cfg.neighbor_channels());
    for n in 1..=levels {
        let mut conv = |path: &str, out: usize, inp: usize| {
            params.insert(
                format!("context.level{n}.{path}.weight"),
                Init::Xavier.sample(&[out, inp, 1, 1], rng),
            );
            params.insert(
                format!("context.level{n}.{path}.bias"),
                Init::Constant(0.0).sample(&[out], rng),
            );
        };
        conv("center", n_center, level_channels[n - 1]);
        if n > 1 {
            conv("shallow", n_side, level_channels[n - 2]);
        }
        if n < levels {
            conv("deep", n_side, level_channels[n]);
        }
    }
}

pub fn context_param_names(levels: usize) -> Vec<String> {
    let mut names = Vec::new();
    for n in 1..=levels {
        let mut paths = vec!["center"];
        if n > 1 {
            paths.push("shallow");
        }
        if n < levels {
            paths.push("deep");
        }
        for path in paths {
            names.push(format!("context.level{n}.{path}.weight"));
            names.push(format!("context.level{n}.{path}.bias"));
        }
    }
    names
}

fn reduce<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), 1, 0)
}

/// Fuses level `n` (1-indexed) with its adjacent levels.
pub fn fuse_level<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    pyramid: &FeaturePyramid,
    n: usize,
) -> Result<FusedLevel> {
    let levels = pyramid.len();
    if n == 0 || n > levels {
        return Err(Error::Range { index: n, len: levels });
    }
    let mut parts = Vec::with_capacity(3);
    let has_shallow = n > 1;
    let has_deep = n < levels;
    if has_shallow {
        let r = reduce(g, p, pyramid.feature(n - 2), &format!("context.level{n}.shallow"))?;
        parts.push(g.maxpool2x2(r)?);
    }
    parts.push(reduce(g, p, pyramid.feature(n - 1), &format!("context.level{n}.center"))?);
    if has_deep {
        let r = reduce(g, p, pyramid.feature(n), &format!("context.level{n}.deep"))?;
        parts.push(g.upsample2x(r)?);
    }
    let cat = g.concat_channels(&parts)?;
    Ok(FusedLevel {
        feature: g.relu(cat),
        stride: pyramid.levels[n - 1].stride,
        has_shallow,
        has_deep,
    })
}

/// Applies [`fuse_level`] at every level; each level owns its parameters.
pub fn fuse_pyramid<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    pyramid: &FeaturePyramid,
) -> Result<FusedPyramid> {
    let levels = (1..=pyramid.len())
        .map(|n| fuse_level(g, p, pyramid, n))
        .collect::<Result<_>>()?;
    Ok(FusedPyramid { levels })
}
