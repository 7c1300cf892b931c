//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msfd::anchors::{
    assign, decode, encode, generate_anchors, match_histogram, match_rows_to_csv, AnchorLabel, AnchorSet,
    AssignmentConfig, BBox,
};
use msfd::context::{fuse_pyramid, init_context, ContextTextureConfig};
use msfd::data::augment::{apply_plan, crop_boxes, sample_crop, AugmentPlan, CropWindow};
use msfd::data::{generate_scene, mix_seed, AugmentConfig, GeneratorConfig, SyntheticScene};
use msfd::eval::{average_precision, evaluate, nms, postprocess, Detection, InferenceConfig};
use msfd::heads::{box_offset, cls_offset, HeadConfig, LevelOutputs};
use msfd::loss::{focal_loss, focal_loss_grad, multitask_loss, multitask_loss_on_graph, smooth_l1, smooth_l1_grad, LossConfig, Target};
use msfd::model::{forward, init_params, preprocess, Detector, ModelConfig};
use msfd::par::Execution;
use msfd::params::{BoundParams, ParamSet};
use msfd::pyramid::{BackboneConfig, FeaturePyramid, PyramidLevel};
use msfd::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};
use msfd::train::{smoothed_loss, TrainConfig, Trainer, SMOOTHING_WINDOW};

/// AP@0.5 bar for the end-to-end run; see CALIBRATION.md.
const AP_BAR: f64 = 0.6753;

type Outcome = Result<String, String>;

type Criterion = (usize, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "context-texture structure", context_structure),
        (3, "assignment oracle", assignment_oracle),
        (4, "loss identities", loss_identities),
        (5, "nms/ap oracles", nms_ap_oracles),
        (6, "initialization contract", init_contract),
        (7, "anchor coverage", anchor_coverage),
        (8, "end-to-end desk run", end_to_end),
        (9, "augmentation contract", augmentation_contract),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Gradients

/// Fixed pseudo-random weights so every output element matters.
fn probe_weights(dims: &[usize], salt: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn random_tensor(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

fn op_check(
    name: &str,
    tol: f64,
    params: Vec<Tensor<f64>>,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> msfd::Result<Var>,
    lines: &mut Vec<String>,
) -> Result<(), String> {
    // Output dims from one forward pass decide the probe weights.
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let y = op(&mut g, &vars).map_err(|e| format!("{name}: {e}"))?;
    let w = probe_weights(g.value(y).dims(), name.len() as u64);
    let report = grad_check(
        |g, v| {
            let y = op(g, v)?;
            g.weighted_sum(y, &w)
        },
        &params,
        tol,
        None,
    )
    .map_err(|e| format!("{name}: {e}"))?;
    record(name, &report, lines)
}

fn record(name: &str, r: &GradCheckReport, lines: &mut Vec<String>) -> Result<(), String> {
    lines.push(format!("{name} {:.1e}", r.max_rel_error));
    ensure(r.passed(), || format!("{name}: max rel error {:.3e} > {:.0e} ({r:?})", r.max_rel_error, r.tol))
}

fn micro_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: 32,
            levels: 2,
            channels_per_level: vec![4, 8],
            ..Default::default()
        },
        context: ContextTextureConfig { reduced_channels: 8 },
        head: HeadConfig {
            hidden_channels: 6,
            ..Default::default()
        },
        assignment: AssignmentConfig::default(),
    }
}

fn gradient_suite() -> Outcome {
    let mut lines = Vec::new();
    op_check(
        "conv2d",
        1e-3,
        vec![
            random_tensor(&[3, 7, 7], 1, -1.0, 1.0),
            random_tensor(&[4, 3, 3, 3], 2, -0.5, 0.5),
            random_tensor(&[4], 3, -0.5, 0.5),
        ],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        &mut lines,
    )?;
    op_check(
        "conv2d-1x1",
        1e-3,
        vec![random_tensor(&[5, 4, 4], 4, -1.0, 1.0), random_tensor(&[3, 5, 1, 1], 5, -0.5, 0.5)],
        |g, v| g.conv2d(v[0], v[1], None, 1, 0),
        &mut lines,
    )?;
    // Distinct values spaced well beyond the difference step so no window ties.
    let mut order: Vec<usize> = (0..72).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let pool_in = Tensor::new(vec![2, 6, 6], order.iter().map(|&k| k as f64 * 0.01 - 0.3).collect()).unwrap();
    op_check("maxpool2x2", 1e-3, vec![pool_in], |g, v| g.maxpool2x2(v[0]), &mut lines)?;
    op_check(
        "upsample2x",
        1e-3,
        vec![random_tensor(&[2, 3, 3], 7, -1.0, 1.0)],
        |g, v| g.upsample2x(v[0]),
        &mut lines,
    )?;
    op_check(
        "concat",
        1e-3,
        vec![random_tensor(&[2, 4, 4], 8, -1.0, 1.0), random_tensor(&[3, 4, 4], 9, -1.0, 1.0)],
        |g, v| g.concat_channels(&[v[0], v[1]]),
        &mut lines,
    )?;
    op_check(
        "slice",
        1e-3,
        vec![random_tensor(&[5, 4, 4], 10, -1.0, 1.0)],
        |g, v| g.slice_channels(v[0], 1, 3),
        &mut lines,
    )?;
    op_check(
        "l2norm",
        1e-3,
        vec![random_tensor(&[4, 3, 3], 11, -1.0, 1.0), random_tensor(&[4], 12, 0.5, 2.0)],
        |g, v| g.l2norm_channels(v[0], v[1]),
        &mut lines,
    )?;
    // Pointwise: keep every input well away from the kink.
    let relu_in = random_tensor(&[3, 5, 5], 13, -1.0, 1.0).map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    op_check("relu", 1e-5, vec![relu_in], |g, v| Ok(g.relu(v[0])), &mut lines)?;

    let loss_cfg = LossConfig::default();
    let mut worst_focal: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..200 {
        let z: f64 = rng.random_range(-8.0..8.0);
        let t = if i % 2 == 0 { Target::Positive } else { Target::Negative };
        let r = grad_check(
            |g, v| {
                let z = g.value(v[0]).data()[0];
                let d = Tensor::scalar(focal_loss_grad(z, t, &loss_cfg));
                g.scalar_fn(&[v[0]], focal_loss(z, t, &loss_cfg), vec![d])
            },
            &[Tensor::scalar(z)],
            1e-5,
            None,
        )
        .map_err(|e| e.to_string())?;
        ensure(r.passed(), || format!("focal at z={z}: {r:?}"))?;
        worst_focal = worst_focal.max(r.max_rel_error);
    }
    lines.push(format!("focal {worst_focal:.1e}"));
    let mut worst_l1: f64 = 0.0;
    for _ in 0..200 {
        let mut x: f64 = rng.random_range(-3.0..3.0);
        if (x.abs() - 1.0).abs() < 0.01 {
            x += 0.05;
        }
        let r = grad_check(
            |g, v| {
                let x = g.value(v[0]).data()[0];
                g.scalar_fn(&[v[0]], smooth_l1(x), vec![Tensor::scalar(smooth_l1_grad(x))])
            },
            &[Tensor::scalar(x)],
            1e-5,
            None,
        )
        .map_err(|e| e.to_string())?;
        ensure(r.passed(), || format!("smooth-l1 at x={x}: {r:?}"))?;
        worst_l1 = worst_l1.max(r.max_rel_error);
    }
    lines.push(format!("smooth-l1 {worst_l1:.1e}"));

    // Full objective through a two-level network. Perturbations that flip a
    // ReLU or max-pool branch are retried at smaller steps by the checker.
    let model = micro_model();
    let params: ParamSet<f64> = init_params(&model, 21).map_err(|e| e.to_string())?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let image = Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(-0.5..0.5));
    let anchors = model.anchors();
    let gts = [BBox::new(4.0, 5.0, 19.0, 21.0).unwrap(), BBox::new(14.0, 10.0, 30.0, 31.0).unwrap()];
    let assignment = assign(&anchors, &gts, &model.assignment);
    ensure(assignment.num_positive() > 0, || "micro scene has no positives".into())?;
    let report = grad_check(
        |g, v| {
            let bound = BoundParams::from_vars(&params, v)?;
            let x = g.constant(image.clone());
            let heads = forward(&model, g, &bound, x)?;
            Ok(multitask_loss_on_graph(g, &heads, &assignment, &LossConfig::default())?.0)
        },
        params.tensors(),
        1e-3,
        None,
    )
    .map_err(|e| e.to_string())?;
    record("network+loss", &report, &mut lines)?;
    let probed = report.checked + report.kinked;
    lines.push(format!("({} network elements, {} on a kink)", probed, report.kinked));
    ensure(report.kinked * 100 <= probed, || {
        format!("{} of {probed} network elements straddle a kink at every step", report.kinked)
    })?;
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------------------
// 2. Context-Texture structure

fn leaf_pyramid(channels: &[usize], base: usize, seed: u64, bump: Option<usize>) -> (Graph<f32>, FeaturePyramid) {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = base >> i;
            let shift = if bump == Some(i) { 0.75 } else { 0.0 };
            let t = Tensor::from_fn(&[c, s, s], |_| rng.random::<f32>() - 0.5 + shift);
            PyramidLevel {
                feature: g.constant(t),
                stride: 4 << i,
            }
        })
        .collect();
    (g, FeaturePyramid { levels })
}

fn fused_values(params: &ParamSet, channels: &[usize], base: usize, bump: Option<usize>) -> Vec<Tensor<f32>> {
    let (mut g, pyr) = leaf_pyramid(channels, base, 5, bump);
    let bound = params.bind(&mut g);
    let fused = fuse_pyramid(&mut g, &bound, &pyr).expect("fusion");
    fused.levels.iter().map(|l| g.value(l.feature).clone()).collect()
}

fn context_structure() -> Outcome {
    let mut cases = 0;
    let mut locality = 0;
    for levels in 1..=4usize {
        for n_ch in [16usize, 64, 256] {
            let cfg = ContextTextureConfig { reduced_channels: n_ch };
            let channels: Vec<usize> = (0..levels).map(|i| 3 + i).collect();
            let base = 2usize << levels;
            let mut params = ParamSet::new();
            init_context(&cfg, &channels, &mut params, &mut ChaCha8Rng::seed_from_u64(levels as u64));
            let plain = fused_values(&params, &channels, base, None);
            for (i, t) in plain.iter().enumerate() {
                let neighbors = usize::from(i > 0) + usize::from(i + 1 < levels);
                let want = n_ch + n_ch / 8 * neighbors;
                ensure(t.dims() == [want, base >> i, base >> i], || {
                    format!("L={levels} N={n_ch} level {}: dims {:?}, want {want} channels", i + 1, t.dims())
                })?;
                ensure(cfg.fused_channels(levels, i + 1) == want, || "fused_channels disagrees".into())?;
                cases += 1;
            }
            for m in 0..levels {
                let bumped = fused_values(&params, &channels, base, Some(m));
                for (n, (a, b)) in plain.iter().zip(&bumped).enumerate() {
                    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    let same = bits(a) == bits(b);
                    if n.abs_diff(m) >= 2 {
                        ensure(same, || format!("L={levels} N={n_ch}: level {} moved when level {} changed", n + 1, m + 1))?;
                        locality += 1;
                    } else {
                        ensure(!same, || format!("L={levels} N={n_ch}: level {} ignores level {}", n + 1, m + 1))?;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} level/width cases, {locality} far-level perturbations bit-identical"))
}

// ---------------------------------------------------------------------------
// 3. Assignment

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Brute force: full IoU matrix, per-anchor best ground truth (first wins ties).
fn oracle_labels(anchors: &AnchorSet, gts: &[BBox], cfg: &AssignmentConfig) -> Vec<(AnchorLabel, f64)> {
    anchors
        .boxes
        .iter()
        .map(|a| {
            let mut best = (None, 0.0);
            for (j, g) in gts.iter().enumerate() {
                let o = oracle_iou(a, g);
                if best.0.is_none() || o > best.1 {
                    best = (Some(j), o);
                }
            }
            let label = match best {
                (Some(j), o) if o >= cfg.pos_iou => AnchorLabel::Positive(j),
                (_, o) if o < cfg.neg_iou => AnchorLabel::Negative,
                _ => AnchorLabel::Ignored,
            };
            (label, best.1)
        })
        .collect()
}

fn random_boxes(rng: &mut ChaCha8Rng, anchors: &AnchorSet, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                // Jittered copy of an anchor so high-IoU cases are common.
                let a = anchors.boxes[rng.random_range(0..anchors.len())];
                let (cx, cy) = a.center();
                BBox::from_center(
                    cx + rng.random_range(-4.0..4.0),
                    cy + rng.random_range(-4.0..4.0),
                    a.width() * rng.random_range(0.6..1.5),
                    a.height() * rng.random_range(0.6..1.5),
                )
            } else {
                let x = rng.random_range(0.0..120.0);
                let y = rng.random_range(0.0..120.0);
                BBox::new(x, y, x + rng.random_range(4.0..70.0), y + rng.random_range(4.0..70.0)).unwrap()
            }
        })
        .collect()
}

fn check_scene(anchors: &AnchorSet, gts: &[BBox], cfg: &AssignmentConfig, band: &mut usize) -> Result<usize, String> {
    let got = assign(anchors, gts, cfg);
    let want = oracle_labels(anchors, gts, cfg);
    for (i, (label, best)) in want.iter().enumerate() {
        ensure(got.labels[i] == *label, || {
            format!("anchor {i}: got {:?}, oracle {label:?} (iou {best})", got.labels[i])
        })?;
        if (cfg.neg_iou..cfg.pos_iou).contains(best) {
            *band += 1;
        }
        if let AnchorLabel::Positive(j) = label {
            let g = &gts[*j];
            let a = &anchors.boxes[i];
            let t = [
                ((g.x1 + g.x2) / 2.0 - (a.x1 + a.x2) / 2.0) / (a.x2 - a.x1),
                ((g.y1 + g.y2) / 2.0 - (a.y1 + a.y2) / 2.0) / (a.y2 - a.y1),
                ((g.x2 - g.x1) / (a.x2 - a.x1)).ln(),
                ((g.y2 - g.y1) / (a.y2 - a.y1)).ln(),
            ];
            for (k, want) in t.iter().enumerate() {
                ensure((got.targets[i][k] - want).abs() < 1e-12, || format!("anchor {i} target {k}"))?;
            }
        } else {
            ensure(got.targets[i] == [0.0; 4], || format!("anchor {i} has a target but is not positive"))?;
        }
    }
    Ok(got.num_positive())
}

fn assignment_oracle() -> Outcome {
    let cfg = AssignmentConfig::default();
    let anchors = generate_anchors(&BackboneConfig::default().level_shapes(), &cfg);
    let gen = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut band, mut positives) = (0usize, 0usize);
    for s in 0..1000u64 {
        let gts = if s % 2 == 0 {
            generate_scene(mix_seed(77, s), &gen).gt_boxes
        } else {
            let n = rng.random_range(0..=6);
            random_boxes(&mut rng, &anchors, n)
        };
        positives += check_scene(&anchors, &gts, &cfg, &mut band)?;
    }
    ensure(band > 0, || "no anchor landed in the ignore band".into())?;

    // Sweep one anchor's IoU finely across both thresholds.
    let a = anchors.boxes[anchors.len() / 2];
    let (cx, cy) = a.center();
    let mut swept = 0;
    for k in 0..=1400 {
        let r = 0.38 + k as f64 * 1e-4;
        let gt = BBox::from_center(cx, cy, a.width(), a.height() * r);
        check_scene(&anchors, &[gt], &cfg, &mut band)?;
        swept += 1;
    }
    // Exact thresholds: a half-height box has IoU exactly 0.5.
    let half = BBox::from_center(cx, cy, a.width(), a.height() * 0.5);
    ensure(oracle_iou(&a, &half) == 0.5, || "constructed IoU is not exactly 0.5".into())?;
    let idx = anchors.len() / 2;
    ensure(matches!(assign(&anchors, &[half], &cfg).labels[idx], AnchorLabel::Positive(0)), || {
        "IoU 0.5 is not positive".into()
    })?;

    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let an = anchors.boxes[rng.random_range(0..anchors.len())];
        let b = random_boxes(&mut rng, &anchors, 1)[0];
        let back = decode(&an, &encode(&an, &b));
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("decode(encode(b)) off by {worst}"))?;
    Ok(format!(
        "1000 scenes exact ({positives} positives, {band} ignore-band anchors), {swept}-step threshold sweep, round-trip err {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. Loss identities

fn loss_identities() -> Outcome {
    let cfg = LossConfig {
        gamma: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let z: f64 = rng.random_range(-12.0..12.0);
        let p = 1.0 / (1.0 + (-z).exp());
        let (t, ce) = if i % 2 == 0 {
            (Target::Positive, -cfg.alpha * p.ln())
        } else {
            (Target::Negative, -(1.0 - cfg.alpha) * (1.0 - p).ln())
        };
        worst = worst.max((focal_loss(z, t, &cfg) - ce).abs());
    }
    ensure(worst <= 1e-7, || format!("gamma=0 differs from weighted CE by {worst:.2e}"))?;

    let half = focal_loss(0.0, Target::Positive, &LossConfig::default());
    ensure((half - 0.0433217).abs() <= 1e-6, || format!("p=0.5 positive gives {half}"))?;

    // Ignored anchors: exactly zero gradient on both heads, end to end.
    let model = micro_model();
    let anchors = model.anchors();
    let gts = [BBox::new(4.0, 5.0, 19.0, 21.0).unwrap(), BBox::new(10.0, 8.0, 28.0, 22.0).unwrap()];
    let asg = assign(&anchors, &gts, &model.assignment);
    let ignored: Vec<usize> = (0..anchors.len()).filter(|&i| asg.labels[i] == AnchorLabel::Ignored).collect();
    ensure(!ignored.is_empty(), || "fixture has no ignored anchors".into())?;
    let params = init_params(&model, 3).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(preprocess(&Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f32 / 7.0)));
    let heads = forward(&model, &mut g, &bound, x).map_err(|e| e.to_string())?;
    let outputs: Vec<LevelOutputs<f32>> = heads
        .iter()
        .map(|h| LevelOutputs {
            cls: g.value(h.cls).clone(),
            boxes: g.value(h.boxes).clone(),
        })
        .collect();
    let (_, grads) = multitask_loss(&outputs, &asg, &LossConfig::default()).map_err(|e| e.to_string())?;
    for &i in &ignored {
        let level = (0..anchors.levels.len()).rev().find(|&l| anchors.level_offset(l) <= i).unwrap();
        let local = i - anchors.level_offset(level);
        let s = anchors.levels[level].size;
        let a = anchors.per_location;
        ensure(grads[level].cls.data()[cls_offset(local, s, a)] == 0.0, || format!("anchor {i} cls grad"))?;
        for j in 0..4 {
            ensure(grads[level].boxes.data()[box_offset(local, j, s, a)] == 0.0, || format!("anchor {i} box grad"))?;
        }
    }
    Ok(format!(
        "gamma=0 max diff {worst:.1e} over 1e4 logits, p=0.5 -> {half:.7}, {} ignored anchors with zero gradient",
        ignored.len()
    ))
}

// ---------------------------------------------------------------------------
// 5. NMS and AP

fn rand_det(rng: &mut ChaCha8Rng) -> Detection {
    let x = rng.random_range(0.0..50.0);
    let y = rng.random_range(0.0..50.0);
    Detection {
        bbox: BBox::new(x, y, x + rng.random_range(3.0..25.0), y + rng.random_range(3.0..25.0)).unwrap(),
        score: rng.random_range(1..=12) as f64 / 12.0,
    }
}

/// Re-scans the remaining set for the top box every round.
fn nms_oracle(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while let Some(&first) = alive.first() {
        let mut top = first;
        for &i in &alive {
            if dets[i].score > dets[top].score || (dets[i].score == dets[top].score && i < top) {
                top = i;
            }
        }
        out.push(dets[top]);
        alive.retain(|&i| i != top && oracle_iou(&dets[top].bbox, &dets[i].bbox) <= thresh);
    }
    out
}

/// Exact staircase area by explicit enumeration of recall levels.
fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (k, x) in d.iter().enumerate() {
            flat.push((x.score, i, k));
        }
    }
    // Insertion sort: descending score, then image, then position.
    for i in 1..flat.len() {
        let mut j = i;
        while j > 0 && {
            let (a, b) = (flat[j - 1], flat[j]);
            b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2))
        } {
            flat.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut curve = Vec::new();
    let mut hits = 0usize;
    for (rank, &(_, img, k)) in flat.iter().enumerate() {
        let mut pick: Option<(usize, f64)> = None;
        for (j, gt) in gts[img].iter().enumerate() {
            let o = oracle_iou(&dets[img][k].bbox, gt);
            if !taken[img][j] && o >= 0.5 && pick.is_none_or(|(_, p)| o > p) {
                pick = Some((j, o));
            }
        }
        if let Some((j, _)) = pick {
            taken[img][j] = true;
            hits += 1;
        }
        curve.push((hits as f64 / total as f64, hits as f64 / (rank + 1) as f64));
    }
    let mut area = 0.0;
    let mut last = 0.0;
    for hit in 1..=hits {
        let r = hit as f64 / total as f64;
        let best = curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
        area += (r - last) * best;
        last = r;
    }
    area
}

fn nms_ap_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut kept_total = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=60);
        let dets: Vec<Detection> = (0..n).map(|_| rand_det(&mut rng)).collect();
        let fast = nms(&dets, 0.3);
        ensure(fast == nms_oracle(&dets, 0.3), || format!("nms differs from oracle on {n} boxes"))?;
        ensure(nms(&fast, 0.3) == fast, || "nms is not idempotent".into())?;
        kept_total += fast.len();
    }
    let mut instances = 0;
    let mut nonzero = 0;
    for _ in 0..5000 {
        let images = rng.random_range(1..=5);
        let mut gts: Vec<Vec<BBox>> = (0..images)
            .map(|_| (0..rng.random_range(0..=3)).map(|_| rand_det(&mut rng).bbox).collect())
            .collect();
        if gts.iter().all(Vec::is_empty) {
            gts[0].push(rand_det(&mut rng).bbox);
        }
        let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images];
        for _ in 0..rng.random_range(0..=8) {
            let img = rng.random_range(0..images);
            let d = match gts[img].get(rng.random_range(0..4)) {
                Some(g) => Detection {
                    bbox: BBox::new(g.x1, g.y1, g.x2 + rng.random_range(0.0..6.0), g.y2).unwrap(),
                    score: rng.random_range(1..=12) as f64 / 12.0,
                },
                None => rand_det(&mut rng),
            };
            dets[img].push(d);
        }
        let got = average_precision(&dets, &gts, 0.5).map_err(|e| e.to_string())?;
        let want = ap_oracle(&dets, &gts);
        ensure((got.ap - want).abs() < 1e-12, || format!("ap {} vs oracle {want}", got.ap))?;
        instances += 1;
        nonzero += usize::from(want > 0.0);
    }
    Ok(format!(
        "1000 nms instances match and are idempotent ({kept_total} kept), {instances} ap instances match ({nonzero} with ap > 0)"
    ))
}

// ---------------------------------------------------------------------------
// 6. Initialization

fn init_contract() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut anchors_seen = 0;
    for seed in 0..3u64 {
        let det = Detector::new(ModelConfig::default(), seed).map_err(|e| e.to_string())?;
        let scene = generate_scene(seed + 100, &GeneratorConfig::default());
        let out = det.infer(&scene.image).map_err(|e| e.to_string())?;
        for level in &out {
            for &z in level.cls.data() {
                let p = 1.0 / (1.0 + (-(z as f64)).exp());
                worst = worst.max((p - 0.01).abs());
                anchors_seen += 1;
            }
        }
        let dets = postprocess(&out, det.anchors(), &InferenceConfig::default(), 128.0, 128.0)
            .map_err(|e| e.to_string())?;
        ensure(dets.is_empty(), || format!("untrained model produced {} detections", dets.len()))?;
    }
    ensure(worst <= 1e-3, || format!("face probability deviates from 0.01 by {worst:.2e}"))?;
    Ok(format!("{anchors_seen} anchor probabilities within {worst:.1e} of 0.01; no detections"))
}

// ---------------------------------------------------------------------------
// 7. Anchor coverage

fn anchor_coverage() -> Outcome {
    let cfg = AssignmentConfig::default();
    let backbone = BackboneConfig::default();
    let anchors = generate_anchors(&backbone.level_shapes(), &cfg);
    let mid = backbone.input_size as f64 / 2.0;
    let scales = anchors.scales.clone();
    let interstitial: Vec<f64> = scales.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    let count = |size: f64, x: f64, y: f64| match_histogram(&anchors, &[size], &[(x, y)], &cfg)[0].matched_count;

    let mut rows = Vec::new();
    let mut centered = Vec::new();
    for (l, &s) in scales.iter().enumerate() {
        let stride = anchors.levels[l].stride as f64;
        // Cell center nearest the image center, and the first cell center.
        let c = ((mid / stride).floor() + 0.5) * stride;
        let edge = 0.5 * stride;
        let (n_center, n_edge) = (count(s, c, c), count(s, edge, c));
        rows.extend(match_histogram(&anchors, &[s], &[(c, c), (edge, c)], &cfg));
        ensure(n_edge < n_center, || format!("size {s}: outer face matches {n_edge}, centered {n_center}"))?;
        centered.push(n_center);
    }
    // Interstitial sizes never reach the centered count of either adjacent scale,
    // wherever they sit on a fine grid around the center.
    let grid: Vec<(f64, f64)> = (0..16)
        .flat_map(|i| (0..16).map(move |j| (mid - 8.0 + i as f64, mid - 8.0 + j as f64)))
        .collect();
    let mut best_inter = Vec::new();
    for (k, &g) in interstitial.iter().enumerate() {
        let hist = match_histogram(&anchors, &[g], &grid, &cfg);
        let best = hist.iter().map(|r| r.matched_count).max().unwrap_or(0);
        let bound = centered[k].min(centered[k + 1]);
        ensure(best < bound, || format!("interstitial {g:.2} matches up to {best}, anchor scales give {bound}"))?;
        rows.extend(hist.into_iter().filter(|r| r.matched_count == best).take(1));
        best_inter.push(best);
    }
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join("anchor_coverage.csv");
    std::fs::write(&path, match_rows_to_csv(&rows)).map_err(|e| e.to_string())?;
    Ok(format!(
        "centered matches {centered:?} at scales {scales:?}; interstitial best {best_inter:?}; csv {}",
        path.display()
    ))
}

// ---------------------------------------------------------------------------
// 8. End-to-end

fn scenes(seed: u64, n: usize) -> Vec<SyntheticScene> {
    let cfg = GeneratorConfig::default();
    Execution::default().map_range(n, |i| {
        let mut s = generate_scene(mix_seed(seed, i as u64), &cfg);
        s.seed = i as u64;
        s
    })
}

fn end_to_end() -> Outcome {
    let train_set = scenes(1, 800);
    let val = scenes(2, 200);
    let trainer = Trainer {
        model: ModelConfig::default(),
        loss: LossConfig::default(),
        augment: AugmentConfig::default(),
        train: TrainConfig::default(),
        exec: Execution::default(),
    };
    let start = Instant::now();
    let state = trainer.train(&train_set).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let early = smoothed_loss(&state.history, 50, SMOOTHING_WINDOW).ok_or("no loss at 50")?;
    let late = smoothed_loss(&state.history, 500, SMOOTHING_WINDOW).ok_or("no loss at 500")?;
    let detector = Detector::from_params(trainer.model.clone(), &state.params).map_err(|e| e.to_string())?;
    let result = evaluate(&detector, &val, &InferenceConfig::default(), Execution::default()).map_err(|e| e.to_string())?;
    let summary = format!(
        "smoothed loss {early:.4} @50 -> {late:.4} @500, final {:.4}; val AP@0.5 {:.4} (bar {AP_BAR}); {:.1} min training",
        state.history.last().map(|r| r.loss).unwrap_or(f64::NAN),
        result.ap,
        minutes
    );
    ensure(late < early, || format!("loss did not decrease: {summary}"))?;
    ensure(result.ap >= AP_BAR, || format!("AP below bar: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 9. Augmentation

fn augmentation_contract() -> Outcome {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let scene_cfg = GeneratorConfig {
        min_faces: 2,
        ..Default::default()
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut kept, mut dropped) = (0usize, 0usize);
    for t in 0..10_000u64 {
        let (w, h) = if t % 3 == 0 { (128, 96) } else { (128, 128) };
        let crop = sample_crop(w, h, &cfg, &mut rng);
        let u = crop.side / w.min(h) as f64;
        lo = lo.min(u);
        hi = hi.max(u);
        ensure((0.3..=1.0).contains(&u), || format!("crop scale {u}"))?;
        ensure(crop.x0 >= 0.0 && crop.y0 >= 0.0 && crop.x0 + crop.side <= w as f64 + 1e-9 && crop.y0 + crop.side <= h as f64 + 1e-9, || {
            format!("crop {crop:?} leaves the {w}x{h} image")
        })?;
        let boxes = if t % 2 == 0 {
            generate_scene(t, &scene_cfg).gt_boxes
        } else {
            (0..8)
                .map(|_| {
                    let x = rng.random_range(-10.0..120.0);
                    let y = rng.random_range(-10.0..90.0);
                    BBox::new(x, y, x + rng.random_range(1.0..40.0), y + rng.random_range(1.0..40.0)).unwrap()
                })
                .collect()
        };
        let out = crop_boxes(&boxes, &crop);
        let inside: Vec<&BBox> = boxes
            .iter()
            .filter(|b| {
                let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
                cx >= crop.x0 && cx < crop.x0 + crop.side && cy >= crop.y0 && cy < crop.y0 + crop.side
            })
            .collect();
        ensure(out.len() == inside.len(), || {
            format!("crop {crop:?}: kept {} boxes, center rule keeps {}", out.len(), inside.len())
        })?;
        for (o, b) in out.iter().zip(&inside) {
            let want = [
                (b.x1 - crop.x0).max(0.0),
                (b.y1 - crop.y0).max(0.0),
                (b.x2 - crop.x0).min(crop.side),
                (b.y2 - crop.y0).min(crop.side),
            ];
            ensure(o.to_array() == want, || format!("clipped {o:?}, expected {want:?}"))?;
        }
        kept += out.len();
        dropped += boxes.len() - out.len();
    }
    ensure(lo < 0.31 && hi > 0.99, || format!("crop scales only span [{lo:.3}, {hi:.3}]"))?;

    let mut flips = 0;
    for seed in 0..50u64 {
        let scene = generate_scene(seed, &scene_cfg);
        let mut plan = AugmentPlan::identity(128, 128);
        plan.crop = CropWindow { x0: 0.0, y0: 0.0, side: 128.0 };
        plan.flip = true;
        let once = apply_plan(&scene, &plan, 128);
        let twice = apply_plan(&once, &plan, 128);
        ensure(twice.image == scene.image, || format!("scene {seed}: double flip changed pixels"))?;
        ensure(twice.gt_boxes.len() == scene.gt_boxes.len(), || "double flip changed box count".into())?;
        for (a, b) in twice.gt_boxes.iter().zip(&scene.gt_boxes) {
            // Pixels round-trip bit-exactly; coordinates up to the rounding of W - (W - x).
            let err = a.to_array().iter().zip(b.to_array()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            ensure(err <= 1e-12, || format!("scene {seed}: box moved by {err}"))?;
        }
        flips += 1;
    }
    Ok(format!(
        "1e4 crops, 0 center-rule violations ({kept} kept, {dropped} dropped), scale span [{lo:.3}, {hi:.3}], {flips} double flips exact"
    ))
}
