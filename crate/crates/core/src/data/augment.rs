//! Training-time augmentation: square random crop, center-rule box filtering,
//! colour distortion, resize and horizontal flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::SyntheticScene;
use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the shorter image side.
    pub crop_scale_range: [f64; 2],
    pub flip_prob: f64,
    pub output_size: usize,
    /// Additive brightness shift is drawn from `±brightness_delta`.
    pub brightness_delta: f64,
    pub contrast_range: [f64; 2],
    pub saturation_range: [f64; 2],
    /// Probability of applying each colour distortion.
    pub color_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: [0.3, 1.0],
            flip_prob: 0.5,
            output_size: 128,
            brightness_delta: 0.125,
            contrast_range: [0.5, 1.5],
            saturation_range: [0.5, 1.5],
            color_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "augment.crop_scale_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("color_prob", self.color_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0, 1]")));
            }
        }
        if self.output_size == 0 {
            return Err(Error::Config("augment.output_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.brightness_delta) {
            return Err(Error::Config("augment.brightness_delta must lie in [0, 1]".into()));
        }
        for (name, [a, b]) in [
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
        ] {
            if !(a > 0.0 && a <= b) {
                return Err(Error::Config(format!("augment.{name} must satisfy 0 < lo <= hi")));
            }
        }
        Ok(())
    }
}

/// Square crop window in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropWindow {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x0 + self.side && y >= self.y0 && y < self.y0 + self.side
    }
}

/// Every random choice of one augmentation, so the transform can be replayed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub crop: CropWindow,
    pub flip: bool,
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
    pub saturation: Option<f32>,
}

impl AugmentPlan {
    /// Whole image, no colour change, no flip.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            crop: CropWindow {
                x0: 0.0,
                y0: 0.0,
                side: width.min(height) as f64,
            },
            flip: false,
            brightness: None,
            contrast: None,
            saturation: None,
        }
    }
}

pub fn sample_crop<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> CropWindow {
    let short = width.min(height) as f64;
    let [lo, hi] = cfg.crop_scale_range;
    let u = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = u * short;
    let pick = |room: f64, rng: &mut R| if room > 0.0 { rng.random_range(0.0..=room) } else { 0.0 };
    let x0 = pick(width as f64 - side, rng);
    let y0 = pick(height as f64 - side, rng);
    CropWindow { x0, y0, side }
}

pub fn sample_plan<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> AugmentPlan {
    let crop = sample_crop(width, height, cfg, rng);
    let maybe = |range: (f64, f64), rng: &mut R| -> Option<f32> {
        rng.random_bool(cfg.color_prob).then(|| {
            if range.1 > range.0 {
                rng.random_range(range.0..=range.1) as f32
            } else {
                range.0 as f32
            }
        })
    };
    let brightness = maybe((-cfg.brightness_delta, cfg.brightness_delta), rng);
    let contrast = maybe((cfg.contrast_range[0], cfg.contrast_range[1]), rng);
    let saturation = maybe((cfg.saturation_range[0], cfg.saturation_range[1]), rng);
    let flip = rng.random_bool(cfg.flip_prob);
    AugmentPlan {
        crop,
        flip,
        brightness,
        contrast,
        saturation,
    }
}

/// Keeps boxes whose center lies inside the crop, clipped to it, in crop
/// coordinates.
pub fn crop_boxes(boxes: &[BBox], crop: &CropWindow) -> Vec<BBox> {
    boxes
        .iter()
        .filter(|b| {
            let (cx, cy) = b.center();
            crop.contains(cx, cy)
        })
        .filter_map(|b| {
            let shifted = BBox {
                x1: b.x1 - crop.x0,
                y1: b.y1 - crop.y0,
                x2: b.x2 - crop.x0,
                y2: b.y2 - crop.y0,
            };
            shifted.clip(crop.side, crop.side)
        })
        .collect()
}

/// Bilinear resample of the crop window to `out x out`, half-pixel centers,
/// edge clamped.
pub fn resize_crop(image: &Tensor<f32>, crop: &CropWindow, out: usize) -> Tensor<f32> {
    let (c, h, w) = image.chw().expect("scene images are [3, H, W]");
    let scale = crop.side / out as f64;
    let taps = |origin: f64, limit: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|d| {
                let s = (origin + (d as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
                let lo = s.floor() as usize;
                ((lo), (lo + 1).min(limit - 1), (s - lo as f64) as f32)
            })
            .collect()
    };
    let tx = taps(crop.x0, w);
    let ty = taps(crop.y0, h);
    let src = image.data();
    let mut data = vec![0.0f32; c * out * out];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data[(ch * out + oy) * out + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out, out], data).expect("consistent dims")
}

fn apply_color(image: &mut Tensor<f32>, plan: &AugmentPlan) {
    let (_, h, w) = image.chw().expect("rank 3");
    let hw = h * w;
    let data = image.data_mut();
    if let Some(delta) = plan.brightness {
        data.iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
    }
    if let Some(c) = plan.contrast {
        data.iter_mut().for_each(|v| *v = (*v * c).clamp(0.0, 1.0));
    }
    if let Some(s) = plan.saturation {
        for p in 0..hw {
            let (r, g, b) = (data[p], data[hw + p], data[2 * hw + p]);
            let gray = 0.299 * r + 0.587 * g + 0.114 * b;
            for k in 0..3 {
                let v = &mut data[k * hw + p];
                *v = (gray + (*v - gray) * s).clamp(0.0, 1.0);
            }
        }
    }
}

pub fn flip_image(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = image.chw().expect("rank 3");
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        image.data()[i - x + (w - 1 - x)]
    })
}

/// Applies a fixed plan; `out` is the square output side.
pub fn apply_plan(scene: &SyntheticScene, plan: &AugmentPlan, out: usize) -> SyntheticScene {
    let mut image = resize_crop(&scene.image, &plan.crop, out);
    let scale = out as f64 / plan.crop.side;
    let mut boxes: Vec<BBox> = crop_boxes(&scene.gt_boxes, &plan.crop)
        .into_iter()
        .map(|b| BBox {
            x1: b.x1 * scale,
            y1: b.y1 * scale,
            x2: b.x2 * scale,
            y2: b.y2 * scale,
        })
        .collect();
    apply_color(&mut image, plan);
    if plan.flip {
        image = flip_image(&image);
        boxes = boxes.iter().map(|b| b.flip_horizontal(out as f64)).collect();
    }
    SyntheticScene {
        image,
        gt_boxes: boxes,
        seed: scene.seed,
    }
}

pub fn augment<R: Rng + ?Sized>(scene: &SyntheticScene, cfg: &AugmentConfig, rng: &mut R) -> SyntheticScene {
    let (_, h, w) = scene.image.chw().expect("rank 3");
    let plan = sample_plan(w, h, cfg, rng);
    apply_plan(scene, &plan, cfg.output_size)
}
