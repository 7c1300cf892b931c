//! Inference post-processing (score filter, decode, NMS) and AP@0.5 evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchors::{decode, AnchorSet, BBox};
use crate::data::SyntheticScene;
use crate::error::{Error, Result};
use crate::heads::{flatten_boxes, flatten_cls, LevelOutputs};
use crate::model::Detector;
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub pre_nms_topk: usize,
    pub nms_iou: f64,
    pub post_nms_topk: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            pre_nms_topk: 300,
            nms_iou: 0.3,
            post_nms_topk: 200,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("inference.{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.pre_nms_topk == 0 || self.post_nms_topk == 0 {
            return Err(Error::Config("inference top-k limits must be positive".into()));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Greedy NMS. Picks in descending score order (ties by lower input index)
/// and suppresses any remaining box with IoU above `iou_thresh` against a pick.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort keeps the lower index first among equal scores.
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && dets[i].bbox.iou(&dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Turns per-level head outputs into final detections for a `width x height`
/// image.
pub fn postprocess(
    outputs: &[LevelOutputs<f32>],
    anchors: &AnchorSet,
    cfg: &InferenceConfig,
    width: f64,
    height: f64,
) -> Result<Vec<Detection>> {
    if outputs.len() != anchors.levels.len() {
        return Err(Error::Contract(format!(
            "{} output levels for {} anchor levels",
            outputs.len(),
            anchors.levels.len()
        )));
    }
    let a = anchors.per_location;
    let mut candidates: Vec<(usize, f64, [f32; 4])> = Vec::new();
    for (level, out) in outputs.iter().enumerate() {
        let (s, _) = out.layout()?;
        if s != anchors.levels[level].size {
            return Err(Error::Contract(format!(
                "level {level} output is {s}x{s}, anchors expect {}",
                anchors.levels[level].size
            )));
        }
        let logits = flatten_cls(&out.cls, a)?;
        let deltas = flatten_boxes(&out.boxes, a)?;
        let offset = anchors.level_offset(level);
        for (i, (&z, d)) in logits.iter().zip(deltas).enumerate() {
            let p = sigmoid(z as f64);
            if p >= cfg.score_threshold {
                candidates.push((offset + i, p, d));
            }
        }
    }
    candidates.sort_by(|x, y| y.1.total_cmp(&x.1));
    candidates.truncate(cfg.pre_nms_topk);
    let decoded: Vec<Detection> = candidates
        .iter()
        .map(|&(idx, score, d)| Detection {
            bbox: decode(&anchors.boxes[idx], &d.map(f64::from)),
            score,
        })
        .collect();
    let mut kept = nms(&decoded, cfg.nms_iou);
    kept.truncate(cfg.post_nms_topk);
    Ok(kept
        .into_iter()
        .filter_map(|d| {
            d.bbox.clip(width, height).map(|bbox| Detection {
                bbox,
                score: d.score,
            })
        })
        .collect())
}

/// Runs the detector and post-processing on each scene.
pub fn detect_all(
    detector: &Detector,
    scenes: &[SyntheticScene],
    cfg: &InferenceConfig,
    exec: Execution,
) -> Result<Vec<Vec<Detection>>> {
    exec.map(scenes, |scene| {
        let (_, h, w) = scene.image.chw()?;
        let out = detector.infer(&scene.image)?;
        postprocess(&out, detector.anchors(), cfg, w as f64, h as f64)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub pr_points: Vec<PrPoint>,
    pub num_gt: usize,
    /// True when the evaluated model produced nothing at all; `ap` is then 0.
    pub no_detections: bool,
}

impl EvalResult {
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("score,precision,recall\n");
        for p in &self.pr_points {
            let _ = writeln!(s, "{},{},{}", p.score, p.precision, p.recall);
        }
        s
    }
}

/// AP over a set of images. Detections are ranked globally by score (ties by
/// image, then position); each is matched to the unmatched ground truth of its
/// image with the highest IoU at or above `iou_thresh`. AP is the area under
/// the precision envelope (max precision at any later rank).
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thresh: f64) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let num_det: usize = dets.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return Err(Error::UndefinedAp(format!(
            "no ground-truth boxes ({num_det} detections)"
        )));
    }
    if num_det == 0 {
        return Ok(EvalResult {
            ap: 0.0,
            pr_points: Vec::new(),
            num_gt,
            no_detections: true,
        });
    }
    let mut ranked: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, d)| (0..d.len()).map(move |k| (img, k)))
        .collect();
    ranked.sort_by(|&(ia, ka), &(ib, kb)| dets[ib][kb].score.total_cmp(&dets[ia][ka].score));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut pr_points = Vec::with_capacity(ranked.len());
    for (rank, &(img, k)) in ranked.iter().enumerate() {
        let det = &dets[img][k];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[img].iter().enumerate() {
            if matched[img][g] {
                continue;
            }
            let o = det.bbox.iou(gt);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            matched[img][g] = true;
            tp += 1;
        }
        pr_points.push(PrPoint {
            score: det.score,
            precision: tp as f64 / (rank + 1) as f64,
            recall: tp as f64 / num_gt as f64,
        });
    }

    let mut envelope = vec![0.0; pr_points.len()];
    let mut running = 0.0f64;
    for i in (0..pr_points.len()).rev() {
        running = running.max(pr_points[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &env) in pr_points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Ok(EvalResult {
        ap,
        pr_points,
        num_gt,
        no_detections: false,
    })
}

/// Runs detection on `scenes` and scores it against their boxes. A model that
/// emits nothing reports AP 0 with the `no_detections` flag.
pub fn evaluate(
    detector: &Detector,
    scenes: &[SyntheticScene],
    cfg: &InferenceConfig,
    exec: Execution,
) -> Result<EvalResult> {
    let dets = detect_all(detector, scenes, cfg, exec)?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gt_boxes.clone()).collect();
    average_precision(&dets, &gts, 0.5)
}

/// Ellipse parameters in the FDDB convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    pub major_semiaxis: f64,
    pub minor_semiaxis: f64,
    pub angle: f64,
}

/// Inscribed ellipse with its major axis vertical.
pub fn box_to_ellipse(b: &BBox) -> Ellipse {
    let (center_x, center_y) = b.center();
    Ellipse {
        center_x,
        center_y,
        major_semiaxis: b.height() / 2.0,
        minor_semiaxis: b.width() / 2.0,
        angle: std::f64::consts::FRAC_PI_2,
    }
}

/// One line of the detections export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseRecord {
    pub image: String,
    pub ellipse: [f64; 5],
    pub score: f64,
}

pub fn detection_lines(image: &str, dets: &[Detection], ellipses: bool) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        let line = if ellipses {
            let e = box_to_ellipse(&d.bbox);
            serde_json::to_string(&EllipseRecord {
                image: image.to_string(),
                ellipse: [e.center_x, e.center_y, e.major_semiaxis, e.minor_semiaxis, e.angle],
                score: d.score,
            })?
        } else {
            serde_json::to_string(&DetectionRecord {
                image: image.to_string(),
                bbox: d.bbox.to_array(),
                score: d.score,
            })?
        };
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}
