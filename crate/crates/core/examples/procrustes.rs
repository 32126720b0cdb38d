//! MPJPE and PA-MPJPE under a random similarity transform.

use mpt::body::{BodyModel, NormalizeOptions};
use mpt::metrics::{mpjpe, pa_mpjpe, procrustes_align};
use nalgebra::{Rotation3, Vector3};

fn main() -> anyhow::Result<()> {
    let body = BodyModel::standard();
    let gt = body.sample_mesh(3, &NormalizeOptions::default())?.joints3d;
    let rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.7) * Rotation3::from_axis_angle(&Vector3::x_axis(), -0.3);
    let pred: Vec<_> = gt.iter().map(|p| 1.3 * (rotation * p) + Vector3::new(0.2, -0.1, 0.5)).collect();

    println!("MPJPE    {:10.4} mm", mpjpe(&pred, &gt)?);
    println!("PA-MPJPE {:10.4} mm", pa_mpjpe(&pred, &gt)?);

    let s = procrustes_align(&pred, &gt)?;
    println!("recovered scale {:.6} (expected {:.6}), det R = {:+.6}", s.scale, 1.0 / 1.3, s.rotation.determinant());
    Ok(())
}
