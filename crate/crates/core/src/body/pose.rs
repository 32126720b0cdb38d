use rand::Rng as _;

use super::{KinematicTree, Vec3};
use crate::rng;

/// Local joint rotations (axis-angle, radians) and a root translation (m).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub joint_rotation: Vec<Vec3>,
    pub root_translation: Vec3,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Self {
        Self {
            joint_rotation: vec![Vec3::zeros(); joint_count],
            root_translation: Vec3::zeros(),
        }
    }
}

/// Per-axis bounds on the axis-angle vector plus a cap on its magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimit {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub max_angle: f64,
}

impl JointLimit {
    pub const FIXED: JointLimit = JointLimit {
        lo: [0.0; 3],
        hi: [0.0; 3],
        max_angle: 0.0,
    };

    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        let max_angle = (0..3).map(|a| lo[a].abs().max(hi[a].abs()).powi(2)).sum::<f64>().sqrt();
        Self { lo, hi, max_angle }
    }

    fn clamp(&self, v: Vec3) -> Vec3 {
        let mut out = Vec3::new(
            v.x.clamp(self.lo[0], self.hi[0]),
            v.y.clamp(self.lo[1], self.hi[1]),
            v.z.clamp(self.lo[2], self.hi[2]),
        );
        let n = out.norm();
        if n > self.max_angle {
            out *= if n > 0.0 { self.max_angle / n } else { 0.0 };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseLimits {
    pub joints: Vec<JointLimit>,
}

impl PoseLimits {
    pub fn zero(joint_count: usize) -> Self {
        Self {
            joints: vec![JointLimit::FIXED; joint_count],
        }
    }

    /// Plausible ranges for the COCO-17 body. Rotation `j` moves the bone
    /// ending at `j`, so e.g. knee flexion sits on the ankle entries.
    /// Axes are local: x pitches (forward/back), y twists, z rolls sideways.
    pub fn anatomical(tree: &KinematicTree) -> Self {
        if tree.joint_count() != 17 {
            return Self::zero(tree.joint_count());
        }
        let deg = std::f64::consts::PI / 180.0;
        let l = |lo: [f64; 3], hi: [f64; 3]| JointLimit::new(lo.map(|v| v * deg), hi.map(|v| v * deg));
        let joints = vec![
            l([-25.0, -45.0, -20.0], [35.0, 45.0, 20.0]), // neck/head
            JointLimit::FIXED,
            JointLimit::FIXED,
            JointLimit::FIXED,
            JointLimit::FIXED,
            l([-15.0, -25.0, -15.0], [45.0, 25.0, 15.0]), // torso lean
            l([-5.0, -5.0, -5.0], [5.0, 5.0, 5.0]),       // shoulder bar
            l([-140.0, -30.0, -10.0], [60.0, 30.0, 120.0]), // left upper arm
            l([-140.0, -30.0, -120.0], [60.0, 30.0, 10.0]), // right upper arm
            l([-145.0, 0.0, 0.0], [0.0, 0.0, 0.0]),       // left elbow flexion
            l([-145.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
            l([-30.0, -45.0, -15.0], [30.0, 45.0, 15.0]), // global orientation
            l([-5.0, -5.0, -5.0], [5.0, 5.0, 5.0]),       // pelvis bar
            l([-100.0, -20.0, -10.0], [30.0, 20.0, 40.0]), // left thigh
            l([-100.0, -20.0, -40.0], [30.0, 20.0, 10.0]), // right thigh
            l([0.0, 0.0, 0.0], [150.0, 0.0, 0.0]),        // left knee flexion
            l([0.0, 0.0, 0.0], [150.0, 0.0, 0.0]),
        ];
        Self { joints }
    }
}

/// Draw one pose uniformly inside the per-axis box of every joint.
pub fn sample_pose(tree: &KinematicTree, seed: u64, limits: &PoseLimits) -> Pose {
    let mut rng = rng::rng(seed);
    let k = tree.joint_count();
    let joint_rotation = (0..k)
        .map(|j| {
            let lim = limits.joints.get(j).copied().unwrap_or(JointLimit::FIXED);
            let raw = Vec3::from_fn(|a, _| {
                let (lo, hi) = (lim.lo[a], lim.hi[a]);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            });
            lim.clamp(raw)
        })
        .collect();
    Pose {
        joint_rotation,
        root_translation: Vec3::zeros(),
    }
}

/// Temporally smooth pose sequence: key poses every `key_every` frames,
/// smoothstep-blended in between. The blend is convex, so every frame stays
/// inside the limits.
pub fn sample_pose_sequence(
    tree: &KinematicTree,
    seed: u64,
    limits: &PoseLimits,
    frames: usize,
    key_every: usize,
) -> Vec<Pose> {
    let key_every = key_every.max(1);
    let keys = frames.div_ceil(key_every) + 1;
    let key_poses: Vec<Pose> = (0..keys)
        .map(|i| sample_pose(tree, rng::derive(seed, &[i as u64]), limits))
        .collect();
    (0..frames)
        .map(|f| {
            let a = &key_poses[f / key_every];
            let b = &key_poses[f / key_every + 1];
            let t = (f % key_every) as f64 / key_every as f64;
            let w = t * t * (3.0 - 2.0 * t);
            Pose {
                joint_rotation: a
                    .joint_rotation
                    .iter()
                    .zip(&b.joint_rotation)
                    .map(|(x, y)| x * (1.0 - w) + y * w)
                    .collect(),
                root_translation: a.root_translation * (1.0 - w) + b.root_translation * w,
            }
        })
        .collect()
}
