//! Deterministic synthetic clips of walking stick figures with track ids.
//!
//! Geometry lives in pixel space (pixel `i` covers `[i, i+1)`); annotations are
//! those positions divided by the image side.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::skeleton::*;

/// Half-width of a person (incl. swing, jitter and stroke) in units of height.
const HALF_WIDTH: f64 = 0.34;
/// Vertical extent above and below the body centre, in units of height.
const TOP: f64 = 0.53;
const BOTTOM: f64 = 0.51;
const LIMB_RADIUS: f64 = 0.028;
const HEAD_RADIUS: f64 = 0.085;
const MARKER_RADIUS: f64 = 0.03;
const MIN_MARKER_PX: f64 = 1.2;
/// A joint is hidden when a nearer person's coverage at it exceeds this.
const HIDDEN_COVERAGE: f64 = 0.5;

/// Marker colour per joint, shared by every person.
pub const JOINT_PALETTE: [[f64; 3]; NUM_JOINTS] = [
    [1.0, 1.0, 1.0],
    [0.9, 0.9, 0.1],
    [0.1, 0.9, 0.9],
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [1.0, 0.6, 0.1],
    [0.1, 0.6, 1.0],
    [1.0, 0.1, 0.8],
    [0.6, 0.1, 1.0],
    [0.9, 0.5, 0.5],
    [0.5, 0.9, 0.5],
    [0.6, 0.4, 0.1],
    [0.1, 0.4, 0.6],
    [0.95, 0.95, 0.6],
    [0.6, 0.95, 0.95],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Person {
    pub track_id: u32,
    pub colour: [f64; 3],
    /// Larger is nearer; nearer people are painted later.
    pub depth: f64,
    pub height_px: f64,
    /// Joint pixel positions per frame.
    pub poses: Vec<[[f64; 2]; NUM_JOINTS]>,
}

/// Everything needed to re-render a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub background: [[f64; 3]; 2],
    pub noise: Vec<f64>,
    pub persons: Vec<Person>,
    pub blur: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// RGB bytes, row-major `[H×W×3]`, one buffer per frame.
    pub frames: Vec<Vec<u8>>,
    /// Per frame, sorted by track id.
    pub annotations: Vec<Vec<PersonAnnotation>>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

/// Reflects `x` into `[lo, hi]`.
fn reflect(mut x: f64, v: &mut f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    for _ in 0..4 {
        if x < lo {
            x = 2.0 * lo - x;
            *v = -*v;
        } else if x > hi {
            x = 2.0 * hi - x;
            *v = -*v;
        } else {
            break;
        }
    }
    x.clamp(lo, hi)
}

/// Builds the scene for `(config, seed)`.
///
/// Without occlusion every person walks in a lane of their own; under the
/// occlusion setting a person may share the previous person's lane instead.
pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let s = size as f64;
    let count = rng.random_range(cfg.persons_min..=cfg.persons_max);
    let mut lane_of = Vec::with_capacity(count);
    let mut lanes = 0usize;
    for i in 0..count {
        if i > 0 && rng.random_bool(cfg.occlusion_prob) {
            lane_of.push(lanes - 1);
        } else {
            lane_of.push(lanes);
            lanes += 1;
        }
    }
    let lane_w = 1.0 / lanes.max(1) as f64;
    let height_cap = 0.95 * lane_w / (2.0 * HALF_WIDTH);

    let dark = |rng: &mut ChaCha8Rng| [uniform(rng, 0.05, 0.35), uniform(rng, 0.05, 0.35), uniform(rng, 0.05, 0.35)];
    let background = [dark(&mut rng), dark(&mut rng)];
    let noise = (0..size * size).map(|_| uniform(&mut rng, -0.03, 0.03)).collect();

    let mut persons = Vec::with_capacity(count);
    for (i, &lane) in lane_of.iter().enumerate() {
        let h = uniform(&mut rng, cfg.height_min, cfg.height_max).min(height_cap);
        let (lo, hi) = (lane as f64 * lane_w + HALF_WIDTH * h, (lane + 1) as f64 * lane_w - HALF_WIDTH * h);
        let (ylo, yhi) = (TOP * h, 1.0 - BOTTOM * h);
        let mut cx = uniform(&mut rng, lo, hi);
        let mut cy = uniform(&mut rng, ylo, yhi);
        let speed = uniform(&mut rng, cfg.speed_min, cfg.speed_max);
        let mut heading = uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let phase0 = uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let cadence = uniform(&mut rng, 0.3, 0.8);
        let swing = uniform(&mut rng, 0.03, 0.08);
        let raised = if rng.random_bool(0.3) { Some(rng.random_bool(0.5)) } else { None };
        let mut rest = REST_POSE;
        for j in rest.iter_mut() {
            j[0] += uniform(&mut rng, -0.02, 0.02);
            j[1] += uniform(&mut rng, -0.02, 0.02);
        }
        if let Some(left) = raised {
            let side = if left { 1.0 } else { -1.0 };
            let (elbow, wrist) = if left { (L_ELBOW, L_WRIST) } else { (R_ELBOW, R_WRIST) };
            rest[elbow][1] -= 0.15;
            rest[wrist][1] -= 0.32;
            rest[wrist][0] += 0.04 * side;
        }
        let colour = [uniform(&mut rng, 0.4, 1.0), uniform(&mut rng, 0.4, 1.0), uniform(&mut rng, 0.4, 1.0)];
        let depth = uniform(&mut rng, 0.0, 1.0);

        let mut poses = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            if t > 0 {
                heading += uniform(&mut rng, -0.2, 0.2);
                let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
                cx = reflect(cx + vx, &mut vx, lo, hi);
                cy = reflect(cy + vy, &mut vy, ylo, yhi);
                heading = vy.atan2(vx);
            }
            let a = (phase0 + cadence * t as f64).sin();
            let mut pose = rest;
            let mut shift = |j: usize, dx: f64| pose[j][0] += dx;
            shift(L_ELBOW, 0.5 * swing * a);
            shift(L_WRIST, swing * a);
            shift(R_ELBOW, -0.5 * swing * a);
            shift(R_WRIST, -swing * a);
            shift(L_KNEE, -0.5 * swing * a);
            shift(L_ANKLE, -swing * a);
            shift(R_KNEE, 0.5 * swing * a);
            shift(R_ANKLE, swing * a);
            let mut px = [[0.0; 2]; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                px[j] = [(cx + pose[j][0] * h) * s, (cy + pose[j][1] * h) * s];
            }
            poses.push(px);
        }
        persons.push(Person { track_id: i as u32 + 1, colour, depth, height_px: h * s, poses });
    }
    persons.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let blur = (0..cfg.frames).map(|_| rng.random_range(cfg.blur_min..=cfg.blur_max)).collect();
    Scene { size, background, noise, persons, blur }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Anti-aliased coverage of a shape at distance `dist` from its core with radius `r`.
fn coverage(dist: f64, r: f64) -> f64 {
    (r + 0.5 - dist).clamp(0.0, 1.0)
}

/// One painted primitive of a person, in painting order.
enum Shape {
    Capsule { a: [f64; 2], b: [f64; 2], r: f64, colour: [f64; 3] },
    Disc { c: [f64; 2], r: f64, colour: [f64; 3] },
}

impl Shape {
    fn alpha(&self, p: [f64; 2]) -> f64 {
        match *self {
            Shape::Capsule { a, b, r, .. } => coverage(segment_distance(p, a, b), r),
            Shape::Disc { c, r, .. } => coverage((p[0] - c[0]).hypot(p[1] - c[1]), r),
        }
    }

    fn colour(&self) -> [f64; 3] {
        match *self {
            Shape::Capsule { colour, .. } | Shape::Disc { colour, .. } => colour,
        }
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Shape::Capsule { a, b, r, .. } => ([a[0].min(b[0]) - r - 1.0, a[1].min(b[1]) - r - 1.0], [a[0].max(b[0]) + r + 1.0, a[1].max(b[1]) + r + 1.0]),
            Shape::Disc { c, r, .. } => ([c[0] - r - 1.0, c[1] - r - 1.0], [c[0] + r + 1.0, c[1] + r + 1.0]),
        }
    }
}

fn shapes(person: &Person, t: usize, omit_marker: Option<usize>) -> Vec<Shape> {
    let pose = &person.poses[t];
    let h = person.height_px;
    let darker = person.colour.map(|c| c * 0.6);
    let mut out = Vec::with_capacity(32);
    for (a, b, left) in LIMBS {
        out.push(Shape::Capsule { a: pose[a], b: pose[b], r: (LIMB_RADIUS * h).max(0.6), colour: if left { darker } else { person.colour } });
    }
    out.push(Shape::Disc { c: pose[NOSE], r: HEAD_RADIUS * h, colour: person.colour });
    let mr = (MARKER_RADIUS * h).max(MIN_MARKER_PX);
    for j in 0..NUM_JOINTS {
        if omit_marker != Some(j) {
            out.push(Shape::Disc { c: pose[j], r: mr, colour: JOINT_PALETTE[j] });
        }
    }
    out
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.blur.len()
    }

    /// Coverage by `person` at pixel-space point `p` in frame `t`.
    pub fn coverage_at(&self, person: usize, t: usize, p: [f64; 2]) -> f64 {
        shapes(&self.persons[person], t, None).iter().map(|s| s.alpha(p)).fold(0.0, f64::max)
    }

    /// Joint visibility: not covered by any nearer person.
    pub fn visible(&self, person: usize, t: usize, joint: usize) -> bool {
        let p = self.persons[person].poses[t][joint];
        (person + 1..self.persons.len()).all(|other| self.coverage_at(other, t, p) <= HIDDEN_COVERAGE)
    }

    /// Linear RGB in `[0,1]`, `[H×W×3]`; `omit` skips one `(person, joint)` marker.
    pub fn render(&self, t: usize, omit: Option<(usize, usize)>) -> Vec<f64> {
        let n = self.size;
        let mut img = vec![0.0; n * n * 3];
        for y in 0..n {
            let f = (y as f64 + 0.5) / n as f64;
            for x in 0..n {
                let idx = y * n + x;
                for c in 0..3 {
                    img[idx * 3 + c] = (self.background[0][c] * (1.0 - f) + self.background[1][c] * f + self.noise[idx]).clamp(0.0, 1.0);
                }
            }
        }
        for (pi, person) in self.persons.iter().enumerate() {
            let skip = omit.filter(|(p, _)| *p == pi).map(|(_, j)| j);
            for shape in shapes(person, t, skip) {
                let (lo, hi) = shape.bounds();
                let x0 = lo[0].floor().max(0.0) as usize;
                let y0 = lo[1].floor().max(0.0) as usize;
                let x1 = (hi[0].ceil().max(0.0) as usize).min(n);
                let y1 = (hi[1].ceil().max(0.0) as usize).min(n);
                let colour = shape.colour();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let a = shape.alpha([x as f64 + 0.5, y as f64 + 0.5]);
                        if a > 0.0 {
                            let px = &mut img[(y * n + x) * 3..(y * n + x) * 3 + 3];
                            for c in 0..3 {
                                px[c] = px[c] * (1.0 - a) + colour[c] * a;
                            }
                        }
                    }
                }
            }
        }
        box_blur(&mut img, n, n, self.blur[t]);
        img
    }

    pub fn annotations(&self, t: usize) -> Vec<PersonAnnotation> {
        let s = self.size as f64;
        let mut out: Vec<PersonAnnotation> = (0..self.persons.len())
            .map(|pi| {
                let p = &self.persons[pi];
                let mut keypoints = [[0.0; 2]; NUM_JOINTS];
                let mut visible = [false; NUM_JOINTS];
                for j in 0..NUM_JOINTS {
                    keypoints[j] = [p.poses[t][j][0] / s, p.poses[t][j][1] / s];
                    visible[j] = self.visible(pi, t, j);
                }
                PersonAnnotation { track_id: p.track_id, keypoints, visible }
            })
            .collect();
        out.sort_by_key(|a| a.track_id);
        out
    }
}

/// Separable box blur with edge clamping, applied `radius` pixels each way.
pub fn box_blur(img: &mut [f64], height: usize, width: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in -r..=r {
                    let xx = (x as isize + k).clamp(0, width as isize - 1) as usize;
                    acc += img[(y * width + xx) * 3 + c];
                }
                tmp[(y * width + x) * 3 + c] = acc * norm;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in -r..=r {
                    let yy = (y as isize + k).clamp(0, height as isize - 1) as usize;
                    acc += tmp[(yy * width + x) * 3 + c];
                }
                img[(y * width + x) * 3 + c] = acc * norm;
            }
        }
    }
}

pub fn quantize(img: &[f64]) -> Vec<u8> {
    img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn generate_clip(cfg: &SynthConfig, seed: u64) -> VideoClip {
    let scene = generate_scene(cfg, seed);
    clip_from_scene(&scene, seed)
}

pub fn clip_from_scene(scene: &Scene, seed: u64) -> VideoClip {
    let frames = (0..scene.frames()).map(|t| quantize(&scene.render(t, None))).collect();
    let annotations = (0..scene.frames()).map(|t| scene.annotations(t)).collect();
    VideoClip { clip_id: format!("clip-{seed:016x}"), seed, width: scene.size, height: scene.size, frames, annotations }
}

/// Hip-midpoint displacement of every person between consecutive frames, in
/// fractions of the image width.
pub fn displacements(clip: &VideoClip) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 1..clip.len() {
        for a in &clip.annotations[t] {
            if let Some(b) = clip.annotations[t - 1].iter().find(|b| b.track_id == a.track_id) {
                let mid = |p: &PersonAnnotation| [(p.keypoints[L_HIP][0] + p.keypoints[R_HIP][0]) / 2.0, (p.keypoints[L_HIP][1] + p.keypoints[R_HIP][1]) / 2.0];
                let (ma, mb) = (mid(a), mid(b));
                out.push((ma[0] - mb[0]).hypot(ma[1] - mb[1]));
            }
        }
    }
    out
}
