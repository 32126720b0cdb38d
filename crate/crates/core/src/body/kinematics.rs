use nalgebra::{Matrix3, Rotation3};

use super::{BodyShape, KinematicTree, Pose, Vec3};
use crate::{Error, Result};

/// Global joint positions and orientations.
///
/// `rotations[j]` is the world orientation of the bone ending at joint `j`
/// (the root's entry is the global body orientation).
#[derive(Debug, Clone)]
pub struct JointFrames {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Matrix3<f64>>,
}

pub fn forward_kinematics(tree: &KinematicTree, shape: &BodyShape, pose: &Pose) -> Result<Vec<Vec3>> {
    Ok(forward_kinematics_with_frames(tree, shape, pose)?.positions)
}

/// Forward kinematics. The local rotation of joint `j` turns the bone
/// `parent(j) -> j` and everything below it:
///
/// ```text
/// F_j = F_parent * R_j
/// x_j = x_parent + F_j * (scale_j * offset_j)
/// ```
pub fn forward_kinematics_with_frames(tree: &KinematicTree, shape: &BodyShape, pose: &Pose) -> Result<JointFrames> {
    let k = tree.joint_count();
    if pose.joint_rotation.len() != k {
        return Err(Error::dim("forward kinematics pose", k, pose.joint_rotation.len()));
    }
    if shape.len() != k {
        return Err(Error::dim("forward kinematics shape", k, shape.len()));
    }
    let mut positions = vec![Vec3::zeros(); k];
    let mut rotations = vec![Matrix3::identity(); k];
    for &j in tree.order() {
        let local = Rotation3::new(pose.joint_rotation[j]).into_inner();
        let offset = tree.rest_offset(j) * shape.bone_length_scale[j];
        match tree.parent(j) {
            Some(p) => {
                rotations[j] = rotations[p] * local;
                positions[j] = positions[p] + rotations[j] * offset;
            }
            None => {
                rotations[j] = local;
                positions[j] = pose.root_translation + local * offset;
            }
        }
    }
    Ok(JointFrames { positions, rotations })
}
