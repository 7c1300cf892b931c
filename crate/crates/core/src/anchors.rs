//! Anchor generation, box geometry, anchor-to-face assignment and the
//! match-count diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anchor side length in pixels per unit of feature stride.
pub const ANCHOR_SCALE_PER_STRIDE: f64 = 4.0;

/// Upper bound applied to `tw`/`th` before exponentiation in [`decode`].
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137; // ln(1000)

/// Axis-aligned box in pixel coordinates, corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validating constructor: coordinates finite, `x2 > x1`, `y2 > y1`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Contract(format!("degenerate box {b:?}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Box regression offsets `(tx, ty, tw, th)`.
pub type Deltas = [f64; 4];

pub fn encode(anchor: &BBox, gt: &BBox) -> Deltas {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

pub fn decode(anchor: &BBox, d: &Deltas) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Spatial extent and stride of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Height over width.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.4,
            aspect_ratios: vec![1.0, 1.5],
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "assignment thresholds need 0 <= neg_iou < pos_iou <= 1, got {} / {}",
                self.neg_iou, self.pos_iou
            )));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("aspect_ratios must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorProvenance {
    pub level: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub ratio_index: usize,
}

/// Every anchor of every level, flattened as `level, cell_y, cell_x, ratio`.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub provenance: Vec<AnchorProvenance>,
    /// Anchor side length per level; anchor area is `scale^2` for every ratio.
    pub scales: Vec<f64>,
    pub levels: Vec<LevelShape>,
    pub per_location: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Index of the first anchor of `level`.
    pub fn level_offset(&self, level: usize) -> usize {
        self.levels[..level]
            .iter()
            .map(|l| l.size * l.size * self.per_location)
            .sum()
    }
}

pub fn generate_anchors(levels: &[LevelShape], cfg: &AssignmentConfig) -> AnchorSet {
    let a = cfg.anchors_per_location();
    let total: usize = levels.iter().map(|l| l.size * l.size * a).sum();
    let mut boxes = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    let mut scales = Vec::with_capacity(levels.len());
    for (li, lvl) in levels.iter().enumerate() {
        let stride = lvl.stride as f64;
        let scale = ANCHOR_SCALE_PER_STRIDE * stride;
        scales.push(scale);
        for cy in 0..lvl.size {
            for cx in 0..lvl.size {
                let (x, y) = ((cx as f64 + 0.5) * stride, (cy as f64 + 0.5) * stride);
                for (ri, &r) in cfg.aspect_ratios.iter().enumerate() {
                    let s = r.sqrt();
                    boxes.push(BBox::from_center(x, y, scale / s, scale * s));
                    provenance.push(AnchorProvenance {
                        level: li,
                        cell_x: cx,
                        cell_y: cy,
                        ratio_index: ri,
                    });
                }
            }
        }
    }
    AnchorSet {
        boxes,
        provenance,
        scales,
        levels: levels.to_vec(),
        per_location: a,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Clone, Debug)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    /// Regression targets; zero for anchors that are not positive.
    pub targets: Vec<Deltas>,
    /// Highest IoU of each anchor over all ground truths (0 with none).
    pub max_iou: Vec<f64>,
}

impl AssignmentResult {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }
}

/// Per-anchor argmax-IoU assignment: positive at `>= pos_iou`, negative below
/// `neg_iou`, ignored in between. Ties go to the lowest ground-truth index.
pub fn assign(anchors: &AnchorSet, gts: &[BBox], cfg: &AssignmentConfig) -> AssignmentResult {
    let n = anchors.len();
    let mut labels = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut max_iou = Vec::with_capacity(n);
    for anchor in &anchors.boxes {
        let mut best = (0.0, None);
        for (gi, gt) in gts.iter().enumerate() {
            let v = anchor.iou(gt);
            if best.1.is_none() || v > best.0 {
                best = (v, Some(gi));
            }
        }
        let (v, arg) = best;
        max_iou.push(v);
        match arg {
            Some(gi) if v >= cfg.pos_iou => {
                labels.push(AnchorLabel::Positive(gi));
                targets.push(encode(anchor, &gts[gi]));
            }
            _ if v < cfg.neg_iou => {
                labels.push(AnchorLabel::Negative);
                targets.push([0.0; 4]);
            }
            _ => {
                labels.push(AnchorLabel::Ignored);
                targets.push([0.0; 4]);
            }
        }
    }
    AssignmentResult {
        labels,
        targets,
        max_iou,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchRow {
    pub size: f64,
    pub pos_x: f64,
    pub pos_y: f64,
    pub matched_count: usize,
}

/// Number of positive anchors for a square face of each size centered at each
/// position.
pub fn match_histogram(
    anchors: &AnchorSet,
    sizes: &[f64],
    positions: &[(f64, f64)],
    cfg: &AssignmentConfig,
) -> Vec<MatchRow> {
    let mut rows = Vec::with_capacity(sizes.len() * positions.len());
    for &size in sizes {
        for &(x, y) in positions {
            let face = BBox::from_center(x, y, size, size);
            let matched_count = assign(anchors, &[face], cfg).num_positive();
            rows.push(MatchRow {
                size,
                pos_x: x,
                pos_y: y,
                matched_count,
            });
        }
    }
    rows
}

pub fn match_rows_to_csv(rows: &[MatchRow]) -> String {
    let mut out = String::from("size,pos_x,pos_y,matched_count\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.size, r.pos_x, r.pos_y, r.matched_count);
    }
    out
}
