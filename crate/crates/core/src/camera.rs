//! Virtual cameras.
//!
//! World frame: y up, subject centered at the origin. Camera frame follows the
//! usual vision convention (x right, y down, z forward), so pixel coordinates
//! are `f * (x / z) + c`.

use nalgebra::{Matrix3, Vector2};

use crate::body::Vec3;
use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const RING_RADIUS: f64 = 4.0;
pub const RING_HEIGHT: f64 = 1.5;
/// Focal length giving a ~1.7 m subject about 80% of a 224 px frame from the
/// ring distance.
pub const DEFAULT_FOCAL: f64 = 450.0;

pub type Vec2 = Vector2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation: `x_cam = R x_world + t`.
    pub translation: Vec3,
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub image_size: (usize, usize),
}

impl PinholeCamera {
    /// Camera at `eye` looking at `target`, world up = +y.
    pub fn look_at(eye: Vec3, target: Vec3, focal: f64, image_size: (usize, usize)) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::Degenerate("camera eye coincides with target".into()));
        }
        let z = forward.normalize();
        let right = z.cross(&Vec3::y());
        if right.norm() < 1e-12 {
            return Err(Error::Degenerate("camera looks straight up or down".into()));
        }
        let x = right.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            translation: -(rotation * eye),
            rotation,
            focal: [focal, focal],
            principal_point: [image_size.0 as f64 / 2.0, image_size.1 as f64 / 2.0],
            image_size,
        })
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn azimuth(&self) -> f64 {
        let c = self.center();
        c.x.atan2(c.z)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.image_size.0 as f64 && p.y < self.image_size.1 as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<PinholeCamera>,
    pub rig_seed: u64,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

fn ring_camera(azimuth: f64) -> PinholeCamera {
    let eye = Vec3::new(RING_RADIUS * azimuth.sin(), RING_HEIGHT, RING_RADIUS * azimuth.cos());
    PinholeCamera::look_at(eye, Vec3::zeros(), DEFAULT_FOCAL, (IMAGE_SIZE, IMAGE_SIZE)).expect("ring camera is valid")
}

/// Ring of `n_views` cameras at radius 4 m, height 1.5 m, equally spaced in
/// azimuth starting in front of the subject (+z), all looking at the origin.
pub fn default_rig(n_views: usize) -> Result<CameraRig> {
    if ![1, 2, 4, 8].contains(&n_views) {
        return Err(Error::config(format!("n_views must be one of 1, 2, 4, 8; got {n_views}")));
    }
    let step = 2.0 * std::f64::consts::PI / n_views as f64;
    Ok(CameraRig {
        cameras: (0..n_views).map(|i| ring_camera(i as f64 * step)).collect(),
        rig_seed: 0,
    })
}

/// Insert a camera at the mid azimuth between each pair of neighbours of a
/// 4-camera ring. Originals keep their positions in the output at even
/// indices.
pub fn interpolate_views(rig: &CameraRig) -> Result<CameraRig> {
    if rig.len() != 4 {
        return Err(Error::config(format!("view interpolation expects 4 cameras, got {}", rig.len())));
    }
    let mut cameras = Vec::with_capacity(8);
    for i in 0..4 {
        let a = &rig.cameras[i];
        let b = &rig.cameras[(i + 1) % 4];
        let ca = a.center();
        let cb = b.center();
        let ra = (ca.x * ca.x + ca.z * ca.z).sqrt();
        let rb = (cb.x * cb.x + cb.z * cb.z).sqrt();
        let mut delta = b.azimuth() - a.azimuth();
        while delta <= 0.0 {
            delta += 2.0 * std::f64::consts::PI;
        }
        let mid = a.azimuth() + delta / 2.0;
        let radius = (ra + rb) / 2.0;
        let height = (ca.y + cb.y) / 2.0;
        let eye = Vec3::new(radius * mid.sin(), height, radius * mid.cos());
        let focal = (a.focal[0] + b.focal[0]) / 2.0;
        cameras.push(a.clone());
        cameras.push(PinholeCamera::look_at(eye, Vec3::zeros(), focal, a.image_size)?);
    }
    Ok(CameraRig {
        cameras,
        rig_seed: rig.rig_seed,
    })
}

/// Rig for a supported view count; 8 views come from interpolating the
/// 4-view ring.
pub fn rig_for_views(n_views: usize) -> Result<CameraRig> {
    match n_views {
        8 => interpolate_views(&default_rig(4)?),
        n => default_rig(n),
    }
}

/// Pinhole projection. Each point gets `Some(pixel)` or `None` when it is not
/// in front of the camera.
pub fn project_perspective(camera: &PinholeCamera, points: &[Vec3]) -> Vec<Option<Vec2>> {
    points
        .iter()
        .map(|p| {
            let c = camera.to_camera(p);
            (c.z > 0.0).then(|| {
                Vec2::new(
                    camera.focal[0] * c.x / c.z + camera.principal_point[0],
                    camera.focal[1] * c.y / c.z + camera.principal_point[1],
                )
            })
        })
        .collect()
}

/// Weak-perspective camera: scale in pixels per meter and a pixel offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspective {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl WeakPerspective {
    /// Scale and offset that best mimic `camera` for a subject at the origin.
    pub fn nominal(camera: &PinholeCamera) -> Self {
        let depth = camera.to_camera(&Vec3::zeros()).z;
        Self {
            scale: camera.focal[0] / depth,
            translation: camera.principal_point,
        }
    }
}

/// `s * (x, y) + t`; depth is dropped.
pub fn project_weak_perspective(wp: &WeakPerspective, points: &[Vec3]) -> Vec<Vec2> {
    points
        .iter()
        .map(|p| Vec2::new(wp.scale * p.x + wp.translation[0], wp.scale * p.y + wp.translation[1]))
        .collect()
}

/// Jacobian of one projected point `(u, v)` with respect to
/// `(s, t_x, t_y, x, y, z)`.
pub fn weak_perspective_jacobian(wp: &WeakPerspective, point: &Vec3) -> [[f64; 6]; 2] {
    [
        [point.x, 1.0, 0.0, wp.scale, 0.0, 0.0],
        [point.y, 0.0, 1.0, 0.0, wp.scale, 0.0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::Rotation3;
    use rand::Rng as _;

    fn deg(a: f64) -> f64 {
        a.to_degrees().rem_euclid(360.0)
    }

    #[test]
    fn four_view_azimuths() {
        let rig = default_rig(4).unwrap();
        let az: Vec<f64> = rig.cameras.iter().map(|c| deg(c.azimuth())).collect();
        for (a, e) in az.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            assert!((a - e).abs() < 1e-9 || (a - e).abs() > 360.0 - 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn cameras_look_at_origin() {
        for n in [1, 2, 4, 8] {
            for cam in rig_for_views(n).unwrap().cameras {
                let c = cam.to_camera(&Vec3::zeros());
                assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9 && c.z > 0.0);
                let to_origin = (-cam.center()).normalize();
                assert!((to_origin - cam.optical_axis()).norm() < 1e-9);
                let r = cam.rotation;
                assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-9);
                assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_view_is_frontal() {
        let rig = default_rig(1).unwrap();
        assert_eq!(rig.len(), 1);
        assert!(rig.cameras[0].azimuth().abs() < 1e-12);
        assert!(default_rig(3).is_err());
    }

    #[test]
    fn interpolation_gives_45_degree_ring() {
        let base = default_rig(4).unwrap();
        let rig = interpolate_views(&base).unwrap();
        assert_eq!(rig.len(), 8);
        for i in 0..4 {
            assert_eq!(rig.cameras[2 * i], base.cameras[i]);
        }
        for i in 0..8 {
            let a = deg(rig.cameras[i].azimuth());
            let expected = 45.0 * i as f64;
            let d = (a - expected).abs();
            assert!(d < 1e-9 || (360.0 - d) < 1e-9, "{a} vs {expected}");
            let c = rig.cameras[i].center();
            assert!((c.y - RING_HEIGHT).abs() < 1e-12);
            assert!(((c.x * c.x + c.z * c.z).sqrt() - RING_RADIUS).abs() < 1e-12);
        }
        assert!(interpolate_views(&rig).is_err());
    }

    #[test]
    fn axis_point_hits_principal_point() {
        let cam = default_rig(4).unwrap().cameras[1].clone();
        let p = cam.center() + cam.optical_axis() * 2.5;
        let px = project_perspective(&cam, &[p])[0].unwrap();
        assert!((px.x - 112.0).abs() < 1e-9 && (px.y - 112.0).abs() < 1e-9);
    }

    #[test]
    fn focal_scales_offsets() {
        let cam = default_rig(4).unwrap().cameras[0].clone();
        let mut cam2 = cam.clone();
        cam2.focal = [cam.focal[0] * 2.0, cam.focal[1] * 2.0];
        let p = Vec3::new(0.3, -0.2, 0.1);
        let a = project_perspective(&cam, &[p])[0].unwrap();
        let b = project_perspective(&cam2, &[p])[0].unwrap();
        let c = Vec2::new(112.0, 112.0);
        assert!(((b - c) - (a - c) * 2.0).norm() < 1e-9);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cam = default_rig(1).unwrap().cameras[0].clone();
        let behind = cam.center() - cam.optical_axis();
        assert!(project_perspective(&cam, &[behind])[0].is_none());
    }

    #[test]
    fn matches_matrix_then_divide_seed_3() {
        let cam = default_rig(4).unwrap().cameras[2].clone();
        let mut r = rng::rng(3);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
            .collect();
        let k = Matrix3::new(cam.focal[0], 0.0, cam.principal_point[0], 0.0, cam.focal[1], cam.principal_point[1], 0.0, 0.0, 1.0);
        let mut rt = nalgebra::Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.translation);
        let pmat = k * rt;
        let proj = project_perspective(&cam, &pts);
        for (p, q) in pts.iter().zip(proj) {
            let h = pmat * p.push(1.0);
            let oracle = Vec2::new(h.x / h.z, h.y / h.z);
            assert!((q.unwrap() - oracle).norm() < 1e-10);
        }
    }

    #[test]
    fn rigid_world_and_camera_motion_cancels() {
        let cam = default_rig(4).unwrap().cameras[3].clone();
        let r = Rotation3::new(Vec3::new(0.3, 0.9, -0.2)).into_inner();
        let t = Vec3::new(1.0, -2.0, 0.5);
        // x' = r x + t; camera with R' = R r^T, t' = t_c - R' t sees the same.
        let mut moved = cam.clone();
        moved.rotation = cam.rotation * r.transpose();
        moved.translation = cam.translation - moved.rotation * t;
        let pts = [Vec3::new(0.2, 0.4, -0.1), Vec3::new(-0.5, 0.1, 0.3)];
        let moved_pts: Vec<Vec3> = pts.iter().map(|p| r * p + t).collect();
        let a = project_perspective(&cam, &pts);
        let b = project_perspective(&moved, &moved_pts);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.unwrap() - y.unwrap()).norm() < 1e-9);
        }
    }

    #[test]
    fn weak_perspective_values() {
        let id = WeakPerspective {
            scale: 1.0,
            translation: [0.0, 0.0],
        };
        let p = Vec3::new(0.3, -0.7, 9.0);
        assert_eq!(project_weak_perspective(&id, &[p])[0], Vec2::new(0.3, -0.7));
        let wp = WeakPerspective {
            scale: 2.0,
            translation: [10.0, 10.0],
        };
        assert_eq!(project_weak_perspective(&wp, &[Vec3::new(1.0, 1.0, 5.0)])[0], Vec2::new(12.0, 12.0));
    }

    #[test]
    fn weak_perspective_jacobian_matches_finite_differences() {
        let wp = WeakPerspective {
            scale: 1.7,
            translation: [3.0, -2.0],
        };
        let p = Vec3::new(0.4, -0.3, 1.2);
        let f = |x: &[f64; 6]| {
            let w = WeakPerspective {
                scale: x[0],
                translation: [x[1], x[2]],
            };
            project_weak_perspective(&w, &[Vec3::new(x[3], x[4], x[5])])[0]
        };
        let x0 = [wp.scale, wp.translation[0], wp.translation[1], p.x, p.y, p.z];
        let jac = weak_perspective_jacobian(&wp, &p);
        for i in 0..6 {
            let h = 1e-6 * x0[i].abs().max(1.0);
            let mut xp = x0;
            let mut xm = x0;
            xp[i] += h;
            xm[i] -= h;
            let d = (f(&xp) - f(&xm)) / (2.0 * h);
            for r in 0..2 {
                let denom = jac[r][i].abs().max(1e-8);
                if jac[r][i] == 0.0 {
                    assert!(d[r].abs() < 1e-9);
                } else {
                    assert!((d[r] - jac[r][i]).abs() / denom < 1e-6);
                }
            }
        }
    }

    #[test]
    fn nominal_weak_perspective_tracks_pinhole() {
        let cam = default_rig(4).unwrap().cameras[0].clone();
        let wp = WeakPerspective::nominal(&cam);
        let p = Vec3::new(0.05, 0.05, 0.0);
        let pin = project_perspective(&cam, &[p])[0].unwrap();
        let pc = cam.to_camera(&p);
        let weak = project_weak_perspective(&wp, &[Vec3::new(pc.x, pc.y, pc.z)])[0];
        assert!((pin - weak).norm() < 0.5);
    }
}
