//! Procedural face-proxy scenes with exact ground-truth boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    /// Smallest short side of a face box, pixels.
    pub min_face_size: f64,
    /// Largest short side of a face box as a fraction of `image_size`.
    pub max_face_fraction: f64,
    /// Median of the log-normal face-size distribution, pixels.
    pub median_face_size: f64,
    /// Spread (sigma of the underlying normal) of the face-size distribution.
    pub face_size_sigma: f64,
    pub max_rotation_deg: f64,
    pub occlusion_prob: f64,
    /// Featureless blobs drawn into the background.
    pub max_distractors: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_faces: 0,
            max_faces: 6,
            min_face_size: 8.0,
            max_face_fraction: 0.7,
            median_face_size: 24.0,
            face_size_sigma: 0.5,
            max_rotation_deg: 25.0,
            occlusion_prob: 0.2,
            max_distractors: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("generator.{m}")));
        if self.image_size < 16 {
            return fail("image_size must be at least 16");
        }
        if self.min_faces > self.max_faces || self.max_faces > 6 {
            return fail("faces per scene must satisfy min_faces <= max_faces <= 6");
        }
        if !(self.min_face_size >= 8.0) {
            return fail("min_face_size must be >= 8");
        }
        if !(self.max_face_fraction > 0.0 && self.max_face_fraction <= 0.7) {
            return fail("max_face_fraction must lie in (0, 0.7]");
        }
        if self.min_face_size > self.max_face_size() {
            return fail("min_face_size exceeds the largest allowed face");
        }
        if !(self.median_face_size > 0.0 && self.face_size_sigma > 0.0) {
            return fail("face size distribution parameters must be positive");
        }
        if !(0.0..=90.0).contains(&self.max_rotation_deg) {
            return fail("max_rotation_deg must lie in [0, 90]");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("occlusion_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn max_face_size(&self) -> f64 {
        self.image_size as f64 * self.max_face_fraction
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gt_boxes: Vec<BBox>,
    pub seed: u64,
}

/// SplitMix64 finalizer over two words; used to derive per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Canvas {
    size: usize,
    rgb: Vec<[f32; 3]>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.rgb[y * self.size + x] = c;
    }

    /// Visits pixels whose centers fall in the box, clamped to the canvas.
    fn for_pixels_in(&mut self, b: &BBox, mut f: impl FnMut(&mut Self, usize, usize, f64, f64)) {
        let lim = self.size as f64;
        let x0 = b.x1.max(0.0).floor() as usize;
        let y0 = b.y1.max(0.0).floor() as usize;
        let x1 = (b.x2.min(lim).ceil() as usize).min(self.size);
        let y1 = (b.y2.min(lim).ceil() as usize).min(self.size);
        for y in y0..y1 {
            for x in x0..x1 {
                f(self, x, y, x as f64 + 0.5, y as f64 + 0.5);
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    hsv(rng.random(), rng.random_range(0.1..0.9), rng.random_range(0.15..0.95))
}

fn paint_background<R: Rng>(canvas: &mut Canvas, rng: &mut R) {
    // Low-frequency colour field: a coarse random grid, bilinearly sampled.
    const GRID: usize = 5;
    let knots: Vec<[f32; 3]> = (0..GRID * GRID).map(|_| random_color(rng)).collect();
    let n = canvas.size;
    let noise = rng.random_range(0.01..0.06f32);
    for y in 0..n {
        for x in 0..n {
            let gx = (x as f32 + 0.5) / n as f32 * (GRID - 1) as f32;
            let gy = (y as f32 + 0.5) / n as f32 * (GRID - 1) as f32;
            let (ix, iy) = ((gx as usize).min(GRID - 2), (gy as usize).min(GRID - 2));
            let (fx, fy) = (gx - ix as f32, gy - iy as f32);
            let mut c = [0.0; 3];
            for (k, ck) in c.iter_mut().enumerate() {
                let a = knots[iy * GRID + ix][k] * (1.0 - fx) + knots[iy * GRID + ix + 1][k] * fx;
                let b = knots[(iy + 1) * GRID + ix][k] * (1.0 - fx)
                    + knots[(iy + 1) * GRID + ix + 1][k] * fx;
                *ck = a * (1.0 - fy) + b * fy + rng.random_range(-noise..=noise);
            }
            canvas.put(x, y, c);
        }
    }
}

fn paint_distractor<R: Rng>(canvas: &mut Canvas, rng: &mut R) {
    let n = canvas.size as f64;
    let (w, h) = (rng.random_range(6.0..n * 0.35), rng.random_range(6.0..n * 0.35));
    let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
    let color = random_color(rng);
    let b = BBox::from_center(cx, cy, w, h);
    if rng.random_bool(0.5) {
        canvas.for_pixels_in(&b, |c, x, y, _, _| c.put(x, y, color));
    } else {
        canvas.for_pixels_in(&b, |c, x, y, px, py| {
            let (u, v) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
            if u * u + v * v <= 1.0 {
                c.put(x, y, color);
            }
        });
    }
}

struct FaceProxy {
    cx: f64,
    cy: f64,
    /// Horizontal and vertical semi-axes before rotation.
    a: f64,
    b: f64,
    theta: f64,
}

impl FaceProxy {
    fn half_extents(a: f64, b: f64, theta: f64) -> (f64, f64) {
        let (s, c) = theta.sin_cos();
        (
            (a * a * c * c + b * b * s * s).sqrt(),
            (a * a * s * s + b * b * c * c).sqrt(),
        )
    }

    fn bbox(&self) -> BBox {
        let (ex, ey) = Self::half_extents(self.a, self.b, self.theta);
        BBox {
            x1: self.cx - ex,
            y1: self.cy - ey,
            x2: self.cx + ex,
            y2: self.cy + ey,
        }
    }

    /// Face-local coordinates normalized by the semi-axes.
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        ((dx * c + dy * s) / self.a, (-dx * s + dy * c) / self.b)
    }
}

fn paint_face<R: Rng>(canvas: &mut Canvas, face: &FaceProxy, occlude: bool, rng: &mut R) {
    let skin = hsv(
        rng.random_range(0.0..1.0),
        rng.random_range(0.25..0.7),
        rng.random_range(0.55..0.95),
    );
    let dark = hsv(rng.random(), rng.random_range(0.0..0.5), rng.random_range(0.0..0.2));
    let eye_r = rng.random_range(0.13..0.19);
    let eye_dx = rng.random_range(0.32..0.44);
    let eye_y = rng.random_range(-0.35..-0.15);
    let mouth_y = rng.random_range(0.3..0.5);
    let mouth_w = rng.random_range(0.3..0.5);
    // Pixel-scaled stroke width so even the smallest faces keep a visible mouth.
    let stroke = (1.0 / face.b).max(0.08);
    let bar = occlude.then(|| {
        let vertical = rng.random_bool(0.5);
        let start = rng.random_range(-1.0..0.3);
        let width = rng.random_range(0.35..0.7);
        (vertical, start, start + width, random_color(rng))
    });
    let bbox = face.bbox();
    canvas.for_pixels_in(&bbox, |c, x, y, px, py| {
        let (u, v) = face.local(px, py);
        let r2 = u * u + v * v;
        if r2 > 1.0 {
            return;
        }
        let shade = (1.0 - 0.25 * r2) as f32;
        let mut col = [skin[0] * shade, skin[1] * shade, skin[2] * shade];
        let eye = |ex: f64| {
            let (du, dv) = ((u - ex) / eye_r, (v - eye_y) / eye_r);
            du * du + dv * dv <= 1.0
        };
        let mouth = {
            let (mu, mv) = (u / mouth_w, (v - mouth_y + 0.15) / 0.15);
            (mu * mu + mv * mv - 1.0).abs() < stroke / 0.15 && v > mouth_y - 0.15
        };
        if eye(-eye_dx) || eye(eye_dx) || mouth {
            col = dark;
        }
        if let Some((vertical, lo, hi, bar_col)) = bar {
            let t = if vertical { u } else { v };
            if t >= lo && t <= hi {
                col = bar_col;
            }
        }
        c.put(x, y, col);
    });
}

/// Renders a deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let mut canvas = Canvas {
        size: n,
        rgb: vec![[0.0; 3]; n * n],
    };
    paint_background(&mut canvas, &mut rng);
    let distractors = rng.random_range(0..=cfg.max_distractors);
    for _ in 0..distractors {
        paint_distractor(&mut canvas, &mut rng);
    }

    let size_dist = LogNormal::new(cfg.median_face_size.ln(), cfg.face_size_sigma)
        .expect("validated distribution parameters");
    let faces = rng.random_range(cfg.min_faces..=cfg.max_faces);
    let mut gt_boxes: Vec<BBox> = Vec::with_capacity(faces);
    let max_rot = cfg.max_rotation_deg.to_radians();
    for _ in 0..faces {
        let short = size_dist
            .sample(&mut rng)
            .clamp(cfg.min_face_size, cfg.max_face_size());
        let aspect = rng.random_range(1.15..1.35);
        let theta = if max_rot > 0.0 {
            rng.random_range(-max_rot..=max_rot)
        } else {
            0.0
        };
        let (ux, uy) = FaceProxy::half_extents(1.0, aspect, theta);
        let a = short / (2.0 * ux.min(uy));
        let (ex, ey) = (ux * a, uy * a);
        let occlude = rng.random_bool(cfg.occlusion_prob);
        let lim = n as f64;
        if 2.0 * ex > lim || 2.0 * ey > lim {
            continue;
        }
        let mut placed = None;
        for _ in 0..50 {
            let cx = rng.random_range(ex..=lim - ex);
            let cy = rng.random_range(ey..=lim - ey);
            let face = FaceProxy {
                cx,
                cy,
                a,
                b: a * aspect,
                theta,
            };
            let b = face.bbox();
            if gt_boxes.iter().all(|g| g.intersection(&b) == 0.0) {
                placed = Some(face);
                break;
            }
        }
        if let Some(face) = placed {
            paint_face(&mut canvas, &face, occlude, &mut rng);
            gt_boxes.push(face.bbox());
        }
    }

    let mut data = vec![0.0f32; 3 * n * n];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for k in 0..3 {
            // Quantize to 8 bits so PNG storage is lossless.
            data[k * n * n + i] = (px[k].clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    SyntheticScene {
        image: Tensor::new(vec![3, n, n], data).expect("consistent dims"),
        gt_boxes,
        seed,
    }
}
