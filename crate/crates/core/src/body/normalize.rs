use super::{centroid, MeshSample};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizeOptions {
    /// Rescale so the vertical extent from the lowest ankle to the highest
    /// head joint equals this many meters.
    pub stature: Option<f64>,
}

impl NormalizeOptions {
    pub const DEFAULT_STATURE: f64 = 1.7;
}

const HEAD_JOINTS: [usize; 5] = [0, 1, 2, 3, 4];
const ANKLE_JOINTS: [usize; 2] = [15, 16];

/// Center the mesh at its vertex centroid, moving the joints by the same
/// offset, and optionally rescale to a fixed stature.
pub fn normalize_mesh(sample: &MeshSample, options: &NormalizeOptions) -> MeshSample {
    let mut out = sample.clone();
    if let Some(target) = options.stature {
        if out.joints3d.len() == 17 {
            let top = HEAD_JOINTS.iter().map(|&j| out.joints3d[j].y).fold(f64::MIN, f64::max);
            let bottom = ANKLE_JOINTS.iter().map(|&j| out.joints3d[j].y).fold(f64::MAX, f64::min);
            let extent = top - bottom;
            if extent > 0.0 {
                let s = target / extent;
                out.vertices3d.iter_mut().for_each(|v| *v *= s);
                out.joints3d.iter_mut().for_each(|j| *j *= s);
            }
        }
    }
    let c = centroid(&out.vertices3d);
    out.vertices3d.iter_mut().for_each(|v| *v -= c);
    out.joints3d.iter_mut().for_each(|j| *j -= c);
    out
}
