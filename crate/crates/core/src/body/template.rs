use nalgebra::Matrix3;

use super::kinematics::forward_kinematics_with_frames;
use super::{BodyShape, KinematicTree, Pose, Vec3, DEFAULT_REGRESSOR_SUPPORT};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateConfig {
    pub full_vertices: usize,
    pub coarse_vertices: usize,
    /// Vertices per cross-section ring.
    pub ring_size: usize,
    pub regressor_support: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            full_vertices: 1723,
            coarse_vertices: 431,
            ring_size: 8,
            regressor_support: DEFAULT_REGRESSOR_SUPPORT,
        }
    }
}

/// Rest-pose capsule mesh with two-bone skinning weights.
///
/// Every bone carries rings of `ring_size` vertices. Each bone has a ring
/// centered on its parent joint, bones ending at a leaf also get one on the
/// leaf joint, and the remaining rings are spread along the bones by surface
/// area. Vertices left over after whole rings are placed as tips beyond the
/// leaf joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedTemplate {
    pub rest_vertices: Vec<Vec3>,
    pub rest_joints: Vec<Vec3>,
    /// Two `(bone, weight)` pairs per vertex; bones are named by child joint.
    pub weights: Vec<[(usize, f64); 2]>,
    /// Indices into `rest_vertices` forming the coarse mesh.
    pub coarse_indices: Vec<usize>,
}

struct Bone {
    joint: usize,
    parent: usize,
}

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

fn perpendicular_basis(dir: &Vec3) -> (Vec3, Vec3) {
    let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = dir.cross(&helper).normalize();
    let w = dir.cross(&u);
    (u, w)
}

impl SkinnedTemplate {
    pub fn build(tree: &KinematicTree, shape: &BodyShape, config: &TemplateConfig) -> Result<Self> {
        if shape.len() != tree.joint_count() {
            return Err(Error::dim("template shape", tree.joint_count(), shape.len()));
        }
        let ring = config.ring_size;
        if ring < 3 {
            return Err(Error::config("ring_size must be at least 3"));
        }
        let rest_joints = tree.rest_joints(shape);
        let bones: Vec<Bone> = tree
            .order()
            .iter()
            .filter_map(|&j| tree.parent(j).map(|parent| Bone { joint: j, parent }))
            .collect();
        if bones.is_empty() {
            return Err(Error::config("tree has no bones"));
        }

        // Mandatory rings: one at every bone start, one at every leaf end.
        let mut rings: Vec<usize> = bones.iter().map(|b| 1 + tree.is_leaf(b.joint) as usize).collect();
        let mandatory: usize = rings.iter().sum::<usize>() * ring;
        if config.full_vertices < mandatory {
            return Err(Error::config(format!(
                "template needs at least {mandatory} vertices, got {}",
                config.full_vertices
            )));
        }
        let extra_rings = (config.full_vertices - mandatory) / ring;
        let tips = config.full_vertices - mandatory - extra_rings * ring;

        // Largest-remainder allocation of the extra rings by lateral area.
        let area: Vec<f64> = bones
            .iter()
            .map(|b| (rest_joints[b.joint] - rest_joints[b.parent]).norm() * shape.bone_radius[b.joint])
            .collect();
        let total: f64 = area.iter().sum();
        let quotas: Vec<f64> = area.iter().map(|a| a / total * extra_rings as f64).collect();
        let mut given: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = extra_rings - given.iter().sum::<usize>();
        let mut by_fraction: Vec<usize> = (0..bones.len()).collect();
        by_fraction.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &b in by_fraction.iter().cycle() {
            if left == 0 {
                break;
            }
            given[b] += 1;
            left -= 1;
        }
        for (r, g) in rings.iter_mut().zip(&given) {
            *r += g;
        }

        let mut rest_vertices = Vec::with_capacity(config.full_vertices);
        for (bi, bone) in bones.iter().enumerate() {
            let a = rest_joints[bone.parent];
            let b = rest_joints[bone.joint];
            let axis = b - a;
            let len = axis.norm();
            if len == 0.0 {
                return Err(Error::Degenerate(format!("bone ending at joint {} has zero length", bone.joint)));
            }
            let dir = axis / len;
            let (u, w) = perpendicular_basis(&dir);
            let radius = shape.bone_radius[bone.joint];
            let leaf = tree.is_leaf(bone.joint);
            let interior = rings[bi] - 1 - leaf as usize;
            // t = 0, interior rings evenly spaced, then t = 1 for leaves.
            let mut ts = vec![0.0];
            ts.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
            if leaf {
                ts.push(1.0);
            }
            for (ri, t) in ts.iter().enumerate() {
                let center = a + axis * *t;
                let phase = if ri % 2 == 1 { std::f64::consts::PI / ring as f64 } else { 0.0 };
                for k in 0..ring {
                    let theta = phase + 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
                    rest_vertices.push(center + (u * theta.cos() + w * theta.sin()) * radius);
                }
            }
        }
        let leaves: Vec<&Bone> = bones.iter().filter(|b| tree.is_leaf(b.joint)).collect();
        for i in 0..tips {
            let bone = leaves[i % leaves.len()];
            let a = rest_joints[bone.parent];
            let b = rest_joints[bone.joint];
            let dir = (b - a).normalize();
            let reach = shape.bone_radius[bone.joint] * (1.25 + (i / leaves.len()) as f64 * 0.5);
            rest_vertices.push(b + dir * reach);
        }
        debug_assert_eq!(rest_vertices.len(), config.full_vertices);

        let weights = rest_vertices
            .iter()
            .map(|v| {
                let mut d: Vec<(usize, f64)> = bones
                    .iter()
                    .map(|b| (b.joint, point_segment_distance(v, &rest_joints[b.parent], &rest_joints[b.joint])))
                    .collect();
                d.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
                if d.len() == 1 {
                    return [(d[0].0, 1.0), (d[0].0, 0.0)];
                }
                let ia = 1.0 / (d[0].1 + 1e-9);
                let ib = 1.0 / (d[1].1 + 1e-9);
                [(d[0].0, ia / (ia + ib)), (d[1].0, ib / (ia + ib))]
            })
            .collect();

        let coarse_indices = coarse_subset(config.full_vertices, config.coarse_vertices)?;
        let template = Self {
            rest_vertices,
            rest_joints,
            weights,
            coarse_indices,
        };
        template.validate_weights()?;
        Ok(template)
    }

    fn validate_weights(&self) -> Result<()> {
        for (i, w) in self.weights.iter().enumerate() {
            let s = w[0].1 + w[1].1;
            if (s - 1.0).abs() > 1e-6 || w.iter().any(|(_, x)| *x < 0.0) {
                return Err(Error::config(format!("skinning weights of vertex {i} sum to {s}")));
            }
        }
        Ok(())
    }

    /// Replace the skinning weights, validating that every row sums to one.
    pub fn with_weights(mut self, weights: Vec<[(usize, f64); 2]>) -> Result<Self> {
        if weights.len() != self.rest_vertices.len() {
            return Err(Error::dim("skinning weights", self.rest_vertices.len(), weights.len()));
        }
        self.weights = weights;
        self.validate_weights()?;
        Ok(self)
    }
}

/// `count` evenly strided indices out of `full` (every 4th for 1723 -> 431).
fn coarse_subset(full: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > full {
        return Err(Error::config(format!("coarse vertex count {count} must be in 1..={full}")));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    Ok((0..count).map(|i| i * (full - 1) / (count - 1)).collect())
}

/// Linear blend skinning: `v' = sum_b w_b (x_parent(b) + F_b (v - x_parent(b)^rest))`.
pub fn skin_mesh(tree: &KinematicTree, shape: &BodyShape, template: &SkinnedTemplate, pose: &Pose) -> Result<Vec<Vec3>> {
    let frames = forward_kinematics_with_frames(tree, shape, pose)?;
    let k = tree.joint_count();
    // Bone transform as (rotation, translation): v -> R v + c.
    let transforms: Vec<(Matrix3<f64>, Vec3)> = (0..k)
        .map(|j| match tree.parent(j) {
            Some(p) => {
                let r = frames.rotations[j];
                (r, frames.positions[p] - r * template.rest_joints[p])
            }
            None => {
                let r = frames.rotations[j];
                (r, frames.positions[j] - r * template.rest_joints[j])
            }
        })
        .collect();
    Ok(template
        .rest_vertices
        .iter()
        .zip(&template.weights)
        .map(|(v, w)| {
            w.iter()
                .fold(Vec3::zeros(), |acc, &(b, wt)| acc + (transforms[b].0 * v + transforms[b].1) * wt)
        })
        .collect())
}
