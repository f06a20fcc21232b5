//! 15-joint body topology shared by the generator, the model heads and the evaluator.

pub const NUM_JOINTS: usize = 15;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "head_bottom",
    "head_top",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const NOSE: usize = 0;
pub const HEAD_BOTTOM: usize = 1;
pub const HEAD_TOP: usize = 2;
pub const L_SHOULDER: usize = 3;
pub const R_SHOULDER: usize = 4;
pub const L_ELBOW: usize = 5;
pub const R_ELBOW: usize = 6;
pub const L_WRIST: usize = 7;
pub const R_WRIST: usize = 8;
pub const L_HIP: usize = 9;
pub const R_HIP: usize = 10;
pub const L_KNEE: usize = 11;
pub const R_KNEE: usize = 12;
pub const L_ANKLE: usize = 13;
pub const R_ANKLE: usize = 14;

/// Drawn segments; the flag marks left-side limbs.
pub const LIMBS: [(usize, usize, bool); 14] = [
    (HEAD_TOP, NOSE, false),
    (NOSE, HEAD_BOTTOM, false),
    (HEAD_BOTTOM, L_SHOULDER, true),
    (HEAD_BOTTOM, R_SHOULDER, false),
    (L_SHOULDER, L_ELBOW, true),
    (L_ELBOW, L_WRIST, true),
    (R_SHOULDER, R_ELBOW, false),
    (R_ELBOW, R_WRIST, false),
    (L_SHOULDER, L_HIP, true),
    (R_SHOULDER, R_HIP, false),
    (L_HIP, L_KNEE, true),
    (L_KNEE, L_ANKLE, true),
    (R_HIP, R_KNEE, false),
    (R_KNEE, R_ANKLE, false),
];

/// Report columns in the order of the published result tables, with their joints.
pub const TABLE_GROUPS: [(&str, &[usize]); 7] = [
    ("Shoulder", &[L_SHOULDER, R_SHOULDER]),
    ("Head", &[NOSE, HEAD_BOTTOM, HEAD_TOP]),
    ("Elbow", &[L_ELBOW, R_ELBOW]),
    ("Wrist", &[L_WRIST, R_WRIST]),
    ("Hip", &[L_HIP, R_HIP]),
    ("Ankle", &[L_ANKLE, R_ANKLE]),
    ("Knee", &[L_KNEE, R_KNEE]),
];

/// Standing pose relative to the body centre (hip midpoint level), in units of
/// person height; +x is the person's left, +y is down.
pub const REST_POSE: [[f64; 2]; NUM_JOINTS] = [
    [0.0, -0.40],
    [0.0, -0.30],
    [0.0, -0.50],
    [0.12, -0.26],
    [-0.12, -0.26],
    [0.17, -0.08],
    [-0.17, -0.08],
    [0.19, 0.08],
    [-0.19, 0.08],
    [0.08, 0.0],
    [-0.08, 0.0],
    [0.09, 0.24],
    [-0.09, 0.24],
    [0.10, 0.48],
    [-0.10, 0.48],
];

pub fn joint_index(name: &str) -> Option<usize> {
    JOINT_NAMES.iter().position(|n| *n == name)
}

/// Ground truth for one person in one frame; coordinates normalized to `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonAnnotation {
    pub track_id: u32,
    pub keypoints: [[f64; 2]; NUM_JOINTS],
    pub visible: [bool; NUM_JOINTS],
}

impl PersonAnnotation {
    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Diagonal of the bounding box of visible joints, in the same units as the
    /// coordinates; `None` when nothing is visible.
    pub fn visible_diagonal(&self) -> Option<f64> {
        let mut pts = (0..NUM_JOINTS).filter(|&j| self.visible[j]).map(|j| self.keypoints[j]);
        let first = pts.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in pts {
            lo = [lo[0].min(p[0]), lo[1].min(p[1])];
            hi = [hi[0].max(p[0]), hi[1].max(p[1])];
        }
        Some((hi[0] - lo[0]).hypot(hi[1] - lo[1]))
    }
}
