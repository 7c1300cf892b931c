//! Classification and box-regression subnets, shared across pyramid levels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextTextureConfig, FusedLevel};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSet};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_channels: usize,
    /// Anchors per feature-map location (`A`); must equal the number of
    /// aspect ratios.
    pub anchors_per_location: usize,
    /// Classes scored per anchor (`K`), one sigmoid logit each.
    pub classes: usize,
    /// Initial face probability (`pi`) encoded in the classifier bias.
    pub prior_probability: f64,
    /// Standard deviation of the Gaussian weight filler.
    pub init_sigma: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 128,
            anchors_per_location: 2,
            classes: 1,
            prior_probability: 0.01,
            init_sigma: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.anchors_per_location == 0 {
            return Err(Error::Config("head channel counts must be positive".into()));
        }
        if self.classes != 1 {
            return Err(Error::Config(format!(
                "head.classes must be 1 (sigmoid face score), got {}",
                self.classes
            )));
        }
        if !(self.prior_probability > 0.0 && self.prior_probability < 1.0) {
            return Err(Error::Config("head.prior_probability must lie in (0, 1)".into()));
        }
        if !(self.init_sigma > 0.0) {
            return Err(Error::Config("head.init_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn cls_channels(&self) -> usize {
        self.classes * self.anchors_per_location
    }

    pub fn box_channels(&self) -> usize {
        4 * self.anchors_per_location
    }

    /// `-ln((1 - pi) / pi)`.
    pub fn prior_bias(&self) -> f64 {
        -((1.0 - self.prior_probability) / self.prior_probability).ln()
    }
}

const BRANCHES: [&str; 2] = ["cls", "box"];

pub fn init_heads<R: Rng + ?Sized>(
    cfg: &HeadConfig,
    in_channels: usize,
    params: &mut ParamSet,
    rng: &mut R,
) {
    let w = Init::Gaussian(cfg.init_sigma);
    let hid = cfg.hidden_channels;
    for branch in BRANCHES {
        let out = if branch == "cls" {
            cfg.cls_channels()
        } else {
            cfg.box_channels()
        };
        let out_bias = if branch == "cls" { cfg.prior_bias() } else { 0.0 };
        let layers = [
            ("conv0", [hid, in_channels, 3, 3], 0.0),
            ("conv1", [hid, hid, 3, 3], 0.0),
            ("out", [out, hid, 3, 3], out_bias),
        ];
        for (layer, dims, bias) in layers {
            params.insert(format!("head.{branch}.{layer}.weight"), w.sample(&dims, rng));
            params.insert(
                format!("head.{branch}.{layer}.bias"),
                Init::Constant(bias).sample(&[dims[0]], rng),
            );
        }
    }
}

pub fn head_param_names() -> Vec<String> {
    let mut names = Vec::new();
    for branch in BRANCHES {
        for layer in ["conv0", "conv1", "out"] {
            names.push(format!("head.{branch}.{layer}.weight"));
            names.push(format!("head.{branch}.{layer}.bias"));
        }
    }
    names
}

/// Widens a boundary fused map to the full `N + 2 * N/8` channels by putting
/// zeros where the missing neighbour block would sit, so one set of head
/// weights serves every level.
pub fn pad_for_head<T: Real>(
    g: &mut Graph<T>,
    level: &FusedLevel,
    ctx: &ContextTextureConfig,
) -> Result<Var> {
    if level.has_shallow && level.has_deep {
        return Ok(level.feature);
    }
    let (_, h, w) = g.value(level.feature).chw()?;
    let side = ctx.neighbor_channels();
    let mut parts = Vec::with_capacity(3);
    if !level.has_shallow {
        parts.push(g.constant(Tensor::zeros(&[side, h, w])));
    }
    parts.push(level.feature);
    if !level.has_deep {
        parts.push(g.constant(Tensor::zeros(&[side, h, w])));
    }
    g.concat_channels(&parts)
}

/// Per-level head output handles: `cls` is `[K*A, S, S]`, `boxes` is `[4*A, S, S]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls: Var,
    pub boxes: Var,
}

fn branch<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let mut h = x;
    for layer in ["conv0", "conv1"] {
        let w = p.var(&format!("head.{name}.{layer}.weight"))?;
        let b = p.var(&format!("head.{name}.{layer}.bias"))?;
        let y = g.conv2d(h, w, Some(b), 1, 1)?;
        h = g.relu(y);
    }
    let w = p.var(&format!("head.{name}.out.weight"))?;
    let b = p.var(&format!("head.{name}.out.bias"))?;
    g.conv2d(h, w, Some(b), 1, 1)
}

pub fn head_forward<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    cfg: &HeadConfig,
    fused: Var,
) -> Result<HeadVars> {
    let (c, _, _) = g.value(fused).chw()?;
    let expected = g.value(p.var("head.cls.conv0.weight")?).dims()[1];
    if c != expected {
        return Err(Error::Shape(format!(
            "head expects {expected} input channels, fused map has {c}"
        )));
    }
    let cls = branch(g, p, fused, "cls")?;
    let boxes = branch(g, p, fused, "box")?;
    debug_assert_eq!(g.value(cls).dims()[0], cfg.cls_channels());
    Ok(HeadVars { cls, boxes })
}

/// Evaluated head outputs of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs<T: Real = f32> {
    pub cls: Tensor<T>,
    pub boxes: Tensor<T>,
}

impl<T: Real> LevelOutputs<T> {
    /// Spatial size `S` and anchors per location `A`.
    pub fn layout(&self) -> Result<(usize, usize)> {
        let (ca, s, s2) = self.cls.chw()?;
        let (cb, t, t2) = self.boxes.chw()?;
        if s != s2 || (t, t2) != (s, s) || cb != 4 * ca {
            return Err(Error::Shape(format!(
                "inconsistent head outputs {:?} / {:?}",
                self.cls.dims(),
                self.boxes.dims()
            )));
        }
        Ok((s, ca))
    }

    pub fn num_anchors(&self) -> Result<usize> {
        let (s, a) = self.layout()?;
        Ok(s * s * a)
    }
}

/// Tensor offset of the logit for flattened anchor `(y * S + x) * A + a`.
pub fn cls_offset(anchor: usize, s: usize, a: usize) -> usize {
    let cell = anchor / a;
    (anchor % a) * s * s + cell
}

/// Tensor offset of coordinate `j` of the deltas for a flattened anchor.
pub fn box_offset(anchor: usize, j: usize, s: usize, a: usize) -> usize {
    let cell = anchor / a;
    ((anchor % a) * 4 + j) * s * s + cell
}

/// Logits in flattened anchor order.
pub fn flatten_cls<T: Real>(cls: &Tensor<T>, a: usize) -> Result<Vec<T>> {
    let (c, s, _) = cls.chw()?;
    if c != a {
        return Err(Error::Shape(format!("cls has {c} channels, expected {a}")));
    }
    Ok((0..s * s * a).map(|i| cls.data()[cls_offset(i, s, a)]).collect())
}

/// Deltas in flattened anchor order.
pub fn flatten_boxes<T: Real>(boxes: &Tensor<T>, a: usize) -> Result<Vec<[T; 4]>> {
    let (c, s, _) = boxes.chw()?;
    if c != 4 * a {
        return Err(Error::Shape(format!("boxes have {c} channels, expected {}", 4 * a)));
    }
    Ok((0..s * s * a)
        .map(|i| std::array::from_fn(|j| boxes.data()[box_offset(i, j, s, a)]))
        .collect())
}

pub fn unflatten_cls<T: Real>(flat: &[T], s: usize, a: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); a * s * s];
    for (i, &v) in flat.iter().enumerate() {
        data[cls_offset(i, s, a)] = v;
    }
    Tensor::new(vec![a, s, s], data)
}

pub fn unflatten_boxes<T: Real>(flat: &[[T; 4]], s: usize, a: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); 4 * a * s * s];
    for (i, d) in flat.iter().enumerate() {
        for (j, &v) in d.iter().enumerate() {
            data[box_offset(i, j, s, a)] = v;
        }
    }
    Tensor::new(vec![4 * a, s, s], data)
}
