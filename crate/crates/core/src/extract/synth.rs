//! Moving-shapes clips with exact masks, edges and stick-figure keypoints.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::canny::canny_video;
use crate::codec::VideoTensor;
use crate::error::Result;
use crate::math;
use crate::tensor::BinaryVideo;

pub const NUM_KEYPOINTS: usize = 17;

/// Shape kind × colour × motion kind.
pub const NUM_CLASSES: usize = 3 * PALETTE.len() * 2;

const PALETTE: [[f64; 3]; 4] = [
    [0.95, 0.35, 0.30],
    [0.35, 0.90, 0.40],
    [0.40, 0.55, 1.00],
    [0.95, 0.90, 0.30],
];

/// COCO-ordered keypoint offsets in units of the figure scale (y down):
/// nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
const FIGURE: [[f64; 2]; NUM_KEYPOINTS] = [
    [0.0, -0.75],
    [0.125, -0.875],
    [-0.125, -0.875],
    [0.25, -0.75],
    [-0.25, -0.75],
    [0.375, -0.375],
    [-0.375, -0.375],
    [0.625, -0.125],
    [-0.625, -0.125],
    [0.75, 0.125],
    [-0.75, 0.125],
    [0.25, 0.25],
    [-0.25, 0.25],
    [0.25, 0.625],
    [-0.25, 0.625],
    [0.25, 1.0],
    [-0.25, 1.0],
];

/// Limb segments drawn for skeletons, as keypoint index pairs.
pub const SKELETON: [(usize, usize); 12] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShapeKind {
    Square,
    Disc,
    Figure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Motion {
    Linear {
        start: [f64; 2],
        velocity: [f64; 2],
    },
    Circular {
        center: [f64; 2],
        radius: f64,
        omega: f64,
        phase: f64,
    },
}

impl Motion {
    /// Shape centre `(x, y)` at frame `t`.
    pub fn position(&self, t: usize) -> [f64; 2] {
        match *self {
            Motion::Linear { start, velocity } => [
                start[0] + velocity[0] * t as f64,
                start[1] + velocity[1] * t as f64,
            ],
            Motion::Circular {
                center,
                radius,
                omega,
                phase,
            } => {
                let a = omega * t as f64 + phase;
                [
                    center[0] + radius * math::cos(a),
                    center[1] + radius * math::sin(a),
                ]
            }
        }
    }

    fn index(&self) -> usize {
        match self {
            Motion::Linear { .. } => 0,
            Motion::Circular { .. } => 1,
        }
    }
}

/// Keypoints of one frame.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeypointFrame {
    /// `(x, y)` in pixels
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub bbox_area: f64,
}

impl KeypointFrame {
    /// Marks points inside the frame visible and sets the area of their
    /// bounding box (each side at least one pixel).
    pub fn from_points(points: Vec<[f64; 2]>, height: usize, width: usize) -> Self {
        let visible: Vec<bool> = points
            .iter()
            .map(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < width as f64 && p[1] < height as f64)
            .collect();
        let vis = points
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| v)
            .map(|(p, _)| p);
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in vis {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let bbox_area = if x0 > x1 {
            1.0
        } else {
            (x1 - x0).max(1.0) * (y1 - y0).max(1.0)
        };
        Self {
            points,
            visible,
            bbox_area,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClipMeta {
    pub clip_index: usize,
    pub seed: u64,
    pub shape: ShapeKind,
    pub color: usize,
    /// disc radius, square half-side or figure scale, in pixels
    pub size: f64,
    pub motion: Motion,
    pub distractor: bool,
}

/// A clip plus its ground-truth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub video: VideoTensor,
    pub caption_class: usize,
    pub edges: BinaryVideo,
    pub masks: BinaryVideo,
    /// present for stick-figure clips
    pub keypoints: Option<Vec<KeypointFrame>>,
    pub meta: ClipMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_sigma: f64,
    pub distractor_prob: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            canny_low: 0.05,
            canny_high: 0.1,
            canny_sigma: 1.0,
            distractor_prob: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    size: f64,
    motion: Motion,
    color: [f64; 3],
}

impl Shape {
    /// Half extent `(x, y)` around the centre.
    fn extent(&self) -> [f64; 2] {
        match self.kind {
            ShapeKind::Square | ShapeKind::Disc => [self.size, self.size],
            ShapeKind::Figure => [0.8 * self.size, 1.0 * self.size],
        }
    }

    fn keypoints(&self, t: usize) -> Vec<[f64; 2]> {
        let c = self.motion.position(t);
        FIGURE
            .iter()
            .map(|o| [c[0] + o[0] * self.size, c[1] + o[1] * self.size])
            .collect()
    }

    fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let c = self.motion.position(t);
        let (dx, dy) = (px - c[0], py - c[1]);
        match self.kind {
            ShapeKind::Square => math::abs(dx) < self.size && math::abs(dy) < self.size,
            ShapeKind::Disc => dx * dx + dy * dy < self.size * self.size,
            ShapeKind::Figure => {
                let kp = self.keypoints(t);
                let head = 0.25 * self.size;
                let (hx, hy) = (px - kp[0][0], py - kp[0][1] + 0.05 * self.size);
                if hx * hx + hy * hy < head * head {
                    return true;
                }
                let neck = [(kp[5][0] + kp[6][0]) / 2.0, (kp[5][1] + kp[6][1]) / 2.0];
                segment_distance([px, py], kp[0], neck) <= 0.6
                    || SKELETON
                        .iter()
                        .any(|&(a, b)| segment_distance([px, py], kp[a], kp[b]) <= 0.6)
            }
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p[0] - a[0] - s * vx, p[1] - a[1] - s * vy);
    math::sqrt(dx * dx + dy * dy)
}

/// Renders a skeleton (limbs plus neck) as white lines on black, `H×W` luma.
pub fn render_skeleton(frame: &KeypointFrame, height: usize, width: usize) -> Vec<f64> {
    let p = &frame.points;
    let v = &frame.visible;
    let mut segments: Vec<([f64; 2], [f64; 2])> = SKELETON
        .iter()
        .filter(|&&(a, b)| v[a] && v[b])
        .map(|&(a, b)| (p[a], p[b]))
        .collect();
    if v[0] && v[5] && v[6] {
        segments.push((p[0], [(p[5][0] + p[6][0]) / 2.0, (p[5][1] + p[6][1]) / 2.0]));
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let c = [x as f64 + 0.5, y as f64 + 0.5];
            if segments
                .iter()
                .any(|&(a, b)| segment_distance(c, a, b) <= 0.6)
            {
                out[y * width + x] = 1.0;
            }
        }
    }
    out
}

/// Half-pixel grid value in `[lo, hi]`.
fn half_step<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let a = math::ceil(lo * 2.0) as i64;
    let b = math::floor(hi * 2.0) as i64;
    if b < a {
        return math::round(lo + hi) / 2.0;
    }
    rng.random_range(a..=b) as f64 / 2.0
}

fn linear_motion<R: Rng>(
    rng: &mut R,
    extent: [f64; 2],
    frames: usize,
    height: usize,
    width: usize,
) -> Motion {
    let span = (frames.max(1) - 1) as f64;
    let mut start = [0.0; 2];
    let mut velocity = [0.0; 2];
    for (axis, limit) in [(0, width as f64), (1, height as f64)] {
        let lo = extent[axis];
        let hi = limit - extent[axis];
        let room = (hi - lo).max(0.0);
        let speeds: Vec<f64> = [-1.0, -0.5, 0.5, 1.0]
            .into_iter()
            .filter(|v: &f64| math::abs(*v) * span <= room)
            .collect();
        let v = if speeds.is_empty() {
            0.0
        } else {
            speeds[rng.random_range(0..speeds.len())]
        };
        let travel = v * span;
        let (s_lo, s_hi) = if v >= 0.0 {
            (lo, hi - travel)
        } else {
            (lo - travel, hi)
        };
        start[axis] = half_step(rng, s_lo, s_hi);
        velocity[axis] = v;
    }
    Motion::Linear { start, velocity }
}

fn circular_motion<R: Rng>(
    rng: &mut R,
    extent: [f64; 2],
    frames: usize,
    height: usize,
    width: usize,
) -> Motion {
    let max_r =
        ((width as f64 - 2.0 * extent[0]).min(height as f64 - 2.0 * extent[1]) / 2.0).max(0.0);
    let radius = rng.random_range(0.0..=1.0) * max_r.min(3.0);
    let center = [
        half_step(rng, extent[0] + radius, width as f64 - extent[0] - radius),
        half_step(rng, extent[1] + radius, height as f64 - extent[1] - radius),
    ];
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    Motion::Circular {
        center,
        radius,
        omega: dir * 2.0 * core::f64::consts::PI / frames.max(1) as f64,
        phase: rng.random_range(0.0..2.0 * core::f64::consts::PI),
    }
}

fn make_clip(
    index: usize,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<ClipRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let min_side = height.min(width) as f64;

    let kind = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Figure][rng.random_range(0..3)];
    let color = rng.random_range(0..PALETTE.len());
    let size = match kind {
        ShapeKind::Figure => math::round(min_side * rng.random_range(0.28..0.36) * 2.0) / 2.0,
        _ => math::round(min_side * rng.random_range(0.15..0.25) * 2.0) / 2.0,
    }
    .max(1.5);
    let circular = rng.random_bool(0.5);
    let mut primary = Shape {
        kind,
        size,
        motion: Motion::Linear {
            start: [0.0; 2],
            velocity: [0.0; 2],
        },
        color: PALETTE[color],
    };
    primary.motion = if circular {
        circular_motion(&mut rng, primary.extent(), frames, height, width)
    } else {
        linear_motion(&mut rng, primary.extent(), frames, height, width)
    };

    let distractor = rng.random_bool(params.distractor_prob);
    let mut shapes = Vec::with_capacity(2);
    if distractor {
        let other = (color + 1 + rng.random_range(0..PALETTE.len() - 1)) % PALETTE.len();
        let dkind = if rng.random_bool(0.5) {
            ShapeKind::Square
        } else {
            ShapeKind::Disc
        };
        let dsize = (math::round(min_side * 0.1 * 2.0) / 2.0).max(1.0);
        let mut d = Shape {
            kind: dkind,
            size: dsize,
            motion: primary.motion,
            color: PALETTE[other],
        };
        d.motion = linear_motion(&mut rng, d.extent(), frames, height, width);
        shapes.push(d);
    }
    shapes.push(primary);

    let base_level = rng.random_range(0.12..0.22);
    let (fx, fy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let phase = rng.random_range(0.0..2.0 * core::f64::consts::PI);
    let tint = [
        1.0,
        rng.random_range(0.9..1.1),
        rng.random_range(0.85..1.15),
    ];

    let mut data = Vec::with_capacity(frames * height * width * 3);
    let mut masks = BinaryVideo::zeros(frames, height, width);
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let tex = 0.03
                    * math::sin(2.0 * core::f64::consts::PI * (fx * px + fy * py) / 8.0 + phase);
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    rgb[c] = ((base_level + tex) * tint[c]).clamp(0.0, 1.0);
                }
                for s in &shapes {
                    if s.covers(t, px, py) {
                        rgb = s.color;
                        masks.data[(t * height + y) * width + x] = 1;
                    }
                }
                data.extend_from_slice(&rgb);
            }
        }
    }
    let video = VideoTensor::new(frames, height, width, data)?;
    let edges = canny_video(
        &video,
        params.canny_low,
        params.canny_high,
        params.canny_sigma,
    )?;
    let keypoints = (kind == ShapeKind::Figure).then(|| {
        (0..frames)
            .map(|t| KeypointFrame::from_points(primary.keypoints(t), height, width))
            .collect()
    });
    let kind_idx = kind as usize;
    Ok(ClipRecord {
        video,
        caption_class: (kind_idx * PALETTE.len() + color) * 2 + primary.motion.index(),
        edges,
        masks,
        keypoints,
        meta: ClipMeta {
            clip_index: index,
            seed,
            shape: kind,
            color,
            size,
            motion: primary.motion,
            distractor,
        },
    })
}

/// `n_clips` deterministic clips of `F×H×W` pixels with default settings.
pub fn synth_dataset(
    n_clips: usize,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<ClipRecord>> {
    synth_dataset_with(
        n_clips,
        frames,
        height,
        width,
        seed,
        &SynthParams::default(),
    )
}

pub fn synth_dataset_with(
    n_clips: usize,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Vec<ClipRecord>> {
    (0..n_clips)
        .map(|i| make_clip(i, frames, height, width, seed, params))
        .collect()
}
