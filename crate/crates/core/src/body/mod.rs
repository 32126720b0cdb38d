//! Synthetic articulated body.
//!
//! A COCO-17 kinematic tree drives a capsule template through linear blend
//! skinning. The template also provides the joint regressor that maps mesh
//! vertices back to joints, and a fixed subset of its vertices forms the coarse
//! mesh predicted by the transformer.

mod kinematics;
mod normalize;
mod pose;
mod regressor;
mod template;
mod tree;

pub use kinematics::{forward_kinematics, forward_kinematics_with_frames, JointFrames};
pub use normalize::{normalize_mesh, NormalizeOptions};
pub use pose::{sample_pose, sample_pose_sequence, JointLimit, Pose, PoseLimits};
pub use regressor::{build_joint_regressor, JointRegressor, DEFAULT_REGRESSOR_SUPPORT};
pub use template::{skin_mesh, SkinnedTemplate, TemplateConfig};
pub use tree::{BodyShape, KinematicTree, COCO17_NAMES};

use nalgebra::Vector3;

use crate::rng;
use crate::Result;

pub type Vec3 = Vector3<f64>;

/// Index of the joint used as the tree root.
pub const ROOT_JOINT: usize = 11;
/// Left and right hip; their midpoint is the pelvis used for root alignment.
pub const HIP_JOINTS: [usize; 2] = [11, 12];

/// One ground-truth body instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSample {
    pub joints3d: Vec<Vec3>,
    pub vertices3d: Vec<Vec3>,
    pub pose: Pose,
    pub source_id: u64,
}

impl MeshSample {
    pub fn vertex_centroid(&self) -> Vec3 {
        centroid(&self.vertices3d)
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Midpoint of the two hips.
pub fn pelvis(joints: &[Vec3]) -> Vec3 {
    (joints[HIP_JOINTS[0]] + joints[HIP_JOINTS[1]]) * 0.5
}

/// Tree, shape, skinned template, joint regressor and pose limits bundled
/// together.
#[derive(Debug, Clone)]
pub struct BodyModel {
    pub tree: KinematicTree,
    pub shape: BodyShape,
    pub template: SkinnedTemplate,
    pub regressor: JointRegressor,
    pub limits: PoseLimits,
}

impl BodyModel {
    pub fn new(tree: KinematicTree, shape: BodyShape, config: &TemplateConfig) -> Result<Self> {
        let template = SkinnedTemplate::build(&tree, &shape, config)?;
        let regressor = build_joint_regressor(
            &template.rest_vertices,
            &template.rest_joints,
            config.regressor_support,
        )?;
        let limits = PoseLimits::anatomical(&tree);
        Ok(Self {
            tree,
            shape,
            template,
            regressor,
            limits,
        })
    }

    /// COCO-17 body with 1723 template vertices and a 431-vertex coarse mesh.
    pub fn standard() -> Self {
        let tree = KinematicTree::coco17();
        let shape = BodyShape::standard(&tree);
        Self::new(tree, shape, &TemplateConfig::default()).expect("standard body is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.tree.joint_count()
    }

    pub fn full_vertex_count(&self) -> usize {
        self.template.rest_vertices.len()
    }

    pub fn coarse_vertex_count(&self) -> usize {
        self.template.coarse_indices.len()
    }

    pub fn coarse(&self, full: &[Vec3]) -> Vec<Vec3> {
        self.template.coarse_indices.iter().map(|&i| full[i]).collect()
    }

    /// Pose the body and return the raw (unnormalized) sample.
    pub fn pose_mesh(&self, pose: &Pose, source_id: u64) -> Result<MeshSample> {
        let joints3d = forward_kinematics(&self.tree, &self.shape, pose)?;
        let vertices3d = skin_mesh(&self.tree, &self.shape, &self.template, pose)?;
        Ok(MeshSample {
            joints3d,
            vertices3d,
            pose: pose.clone(),
            source_id,
        })
    }

    /// Sample a pose from `seed`, pose the body and normalize it.
    pub fn sample_mesh(&self, seed: u64, options: &NormalizeOptions) -> Result<MeshSample> {
        let pose = sample_pose(&self.tree, rng::derive(seed, &[rng::stream::POSE]), &self.limits);
        let raw = self.pose_mesh(&pose, seed)?;
        Ok(normalize_mesh(&raw, options))
    }
}
