//! The full detector: backbone, Context-Texture fusion and shared heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorSet, AssignmentConfig};
use crate::context::{context_param_names, fuse_pyramid, init_context, ContextTextureConfig};
use crate::error::{Error, Result};
use crate::heads::{head_forward, head_param_names, init_heads, pad_for_head, HeadConfig, HeadVars, LevelOutputs};
use crate::params::{BoundParams, ParamSet};
use crate::pyramid::{backbone_param_names, forward_pyramid, init_backbone, BackboneConfig, PIXEL_MEAN};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub context: ContextTextureConfig,
    pub head: HeadConfig,
    pub assignment: AssignmentConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.context.validate()?;
        self.head.validate()?;
        self.assignment.validate()?;
        if self.head.anchors_per_location != self.assignment.anchors_per_location() {
            return Err(Error::Config(format!(
                "head.anchors_per_location = {} but {} aspect ratios are configured",
                self.head.anchors_per_location,
                self.assignment.anchors_per_location()
            )));
        }
        Ok(())
    }

    /// Every parameter name the model owns, in initialization order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = backbone_param_names(&self.backbone);
        names.extend(context_param_names(self.backbone.levels));
        names.extend(head_param_names());
        names
    }

    pub fn anchors(&self) -> AnchorSet {
        generate_anchors(&self.backbone.level_shapes(), &self.assignment)
    }
}

/// Deterministic parameter initialization for `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    init_backbone(&cfg.backbone, &mut params, &mut rng);
    init_context(&cfg.context, cfg.backbone.channels(), &mut params, &mut rng);
    init_heads(&cfg.head, cfg.context.full_channels(), &mut params, &mut rng);
    Ok(params)
}

/// Subtracts the fixed pixel mean from a `[3, H, W]` image in `[0, 1]`.
pub fn preprocess(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| v - PIXEL_MEAN)
}

/// Full forward pass from a preprocessed image to per-level head outputs.
pub fn forward<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    image: Var,
) -> Result<Vec<HeadVars>> {
    let pyramid = forward_pyramid(&cfg.backbone, g, p, image)?;
    let fused = fuse_pyramid(g, p, &pyramid)?;
    fused
        .levels
        .iter()
        .map(|lvl| {
            let x = pad_for_head(g, lvl, &cfg.context)?;
            head_forward(g, p, &cfg.head, x)
        })
        .collect()
}

/// A configured model with its parameters and anchors.
#[derive(Clone, Debug)]
pub struct Detector {
    cfg: ModelConfig,
    params: ParamSet,
    anchors: AnchorSet,
}

impl Detector {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        let anchors = cfg.anchors();
        Ok(Self {
            cfg,
            params,
            anchors,
        })
    }

    /// Adopts externally loaded parameters, checking every expected tensor is
    /// present with the shape `cfg` implies.
    pub fn from_params(cfg: ModelConfig, loaded: &ParamSet) -> Result<Self> {
        let reference = init_params(&cfg, 0)?;
        let missing: Vec<String> = reference
            .names()
            .iter()
            .filter(|n| loaded.get(n).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        let mut params = ParamSet::new();
        for (name, want) in reference.iter() {
            let got = loaded.require(name)?;
            if got.dims() != want.dims() {
                return Err(Error::Format(format!(
                    "tensor {name} has dims {:?}, config expects {:?}",
                    got.dims(),
                    want.dims()
                )));
            }
            params.insert(name, got.clone());
        }
        let anchors = cfg.anchors();
        Ok(Self {
            cfg,
            params,
            anchors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Forward pass on a raw `[3, S, S]` image in `[0, 1]`.
    pub fn infer(&self, image: &Tensor<f32>) -> Result<Vec<LevelOutputs<f32>>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.constant(preprocess(image));
        let heads = forward(&self.cfg, &mut g, &bound, x)?;
        Ok(heads
            .iter()
            .map(|h| LevelOutputs {
                cls: g.value(h.cls).clone(),
                boxes: g.value(h.boxes).clone(),
            })
            .collect())
    }
}
