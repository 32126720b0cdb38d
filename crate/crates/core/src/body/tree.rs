use crate::body::Vec3;
use crate::{Error, Result};

/// COCO-17 joint labels, in COCO order.
pub const COCO17_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
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

/// Joint hierarchy with rest-pose offsets.
///
/// Each non-root joint `j` closes the bone `parent(j) -> j`; the bone is
/// identified by its child joint. Offsets are in meters, in a y-up frame with
/// the body facing +z and its left side towards +x.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vec3>,
    names: Vec<String>,
    order: Vec<usize>,
    root: usize,
}

impl KinematicTree {
    pub fn new(parents: Vec<Option<usize>>, rest_offsets: Vec<Vec3>, names: Vec<String>) -> Result<Self> {
        let k = parents.len();
        if rest_offsets.len() != k || names.len() != k {
            return Err(Error::dim(
                "kinematic tree",
                format!("{k} offsets and names"),
                format!("{} offsets, {} names", rest_offsets.len(), names.len()),
            ));
        }
        let roots: Vec<usize> = (0..k).filter(|&j| parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::config(format!("tree must have exactly one root, found {}", roots.len())));
        }
        if let Some(j) = (0..k).find(|&j| parents[j].is_some_and(|p| p >= k || p == j)) {
            return Err(Error::config(format!("joint {j} has an invalid parent")));
        }
        // Breadth-first from the root; joints never reached sit on a cycle.
        let root = roots[0];
        let mut order = vec![root];
        let mut head = 0;
        while head < order.len() {
            let p = order[head];
            head += 1;
            order.extend((0..k).filter(|&c| parents[c] == Some(p)));
        }
        if order.len() != k {
            return Err(Error::config("parent graph contains a cycle"));
        }
        Ok(Self {
            parents,
            rest_offsets,
            names,
            order,
            root,
        })
    }

    /// The default 17-joint body, about 1.7 m from ankle to the top of the head.
    pub fn coco17() -> Self {
        let spec: [(Option<usize>, [f64; 3]); 17] = [
            (Some(5), [-0.17, 0.24, 0.09]),  // nose, from left shoulder
            (Some(0), [0.035, 0.035, -0.02]), // left eye
            (Some(0), [-0.035, 0.035, -0.02]),
            (Some(1), [0.04, -0.015, -0.07]), // left ear
            (Some(2), [-0.04, -0.015, -0.07]),
            (Some(11), [0.07, 0.52, 0.0]), // left shoulder, from left hip
            (Some(5), [-0.34, 0.0, 0.0]),
            (Some(5), [0.14, -0.25, 0.0]), // left elbow
            (Some(6), [-0.14, -0.25, 0.0]),
            (Some(7), [0.08, -0.23, 0.02]), // left wrist
            (Some(8), [-0.08, -0.23, 0.02]),
            (None, [0.0, 0.0, 0.0]),
            (Some(11), [-0.2, 0.0, 0.0]),
            (Some(11), [0.0, -0.42, 0.01]), // left knee
            (Some(12), [0.0, -0.42, 0.01]),
            (Some(13), [0.0, -0.41, -0.02]), // left ankle
            (Some(14), [0.0, -0.41, -0.02]),
        ];
        Self::new(
            spec.iter().map(|s| s.0).collect(),
            spec.iter().map(|s| Vec3::from(s.1)).collect(),
            COCO17_NAMES.iter().map(|s| s.to_string()).collect(),
        )
        .expect("COCO-17 tree is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Joints in an order where every parent precedes its children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn rest_offset(&self, joint: usize) -> Vec3 {
        self.rest_offsets[joint]
    }

    pub fn rest_offsets(&self) -> &[Vec3] {
        &self.rest_offsets
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.joint_count()).filter(move |&c| self.parents[c] == Some(joint))
    }

    pub fn is_leaf(&self, joint: usize) -> bool {
        self.children(joint).next().is_none()
    }

    /// Rest-pose joint positions: scaled offsets accumulated from the root.
    pub fn rest_joints(&self, shape: &BodyShape) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.joint_count()];
        for &j in &self.order {
            let local = self.rest_offsets[j] * shape.bone_length_scale[j];
            out[j] = match self.parents[j] {
                Some(p) => out[p] + local,
                None => local,
            };
        }
        out
    }
}

/// Per-bone proportions. Entry `j` describes the bone ending at joint `j`;
/// the root entry scales the root offset and is otherwise unused.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyShape {
    pub bone_length_scale: Vec<f64>,
    pub bone_radius: Vec<f64>,
}

impl BodyShape {
    pub fn new(bone_length_scale: Vec<f64>, bone_radius: Vec<f64>) -> Result<Self> {
        if bone_length_scale.len() != bone_radius.len() {
            return Err(Error::dim("body shape", bone_length_scale.len(), bone_radius.len()));
        }
        if let Some(v) = bone_length_scale.iter().chain(&bone_radius).find(|v| !(**v > 0.0)) {
            return Err(Error::config(format!("body shape entries must be positive, got {v}")));
        }
        Ok(Self {
            bone_length_scale,
            bone_radius,
        })
    }

    /// Unit lengths and capsule radii for the COCO-17 tree. Radii are all
    /// distinct around shared joints so the nearest ring to every joint is
    /// unique.
    pub fn standard(tree: &KinematicTree) -> Self {
        let radius = if tree.joint_count() == 17 {
            vec![
                0.080, // neck and head (left shoulder -> nose)
                0.030, 0.031, 0.025, 0.026, // face
                0.095, // torso side
                0.100, // shoulder bar
                0.055, 0.056, // upper arms
                0.045, 0.046, // forearms
                0.050, // root, unused
                0.110, // pelvis bar
                0.085, 0.086, // thighs
                0.060, 0.061, // shins
            ]
        } else {
            vec![0.05; tree.joint_count()]
        };
        Self::new(vec![1.0; tree.joint_count()], radius).expect("positive defaults")
    }

    pub fn len(&self) -> usize {
        self.bone_radius.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bone_radius.is_empty()
    }
}
