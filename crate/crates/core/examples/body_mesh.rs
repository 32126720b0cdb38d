//! Sample a posed synthetic body and compare regressed joints with the
//! skeleton.

use mpt::body::{BodyModel, NormalizeOptions, COCO17_NAMES};
use mpt::metrics::mean_joint_error;

fn main() -> anyhow::Result<()> {
    let body = BodyModel::standard();
    println!(
        "{} joints, {} full vertices, {} coarse vertices",
        body.joint_count(),
        body.full_vertex_count(),
        body.coarse_vertex_count()
    );

    let mesh = body.sample_mesh(42, &NormalizeOptions::default())?;
    for (name, j) in COCO17_NAMES.iter().zip(&mesh.joints3d) {
        println!("{name:>15}  {:+.3} {:+.3} {:+.3}", j.x, j.y, j.z);
    }

    let regressed = body.regressor.apply(&mesh.vertices3d)?;
    println!("regressor vs skeleton: {:.2} mm mean", mean_joint_error(&regressed, &mesh.joints3d)?);
    println!("vertex centroid after normalization: {:.2e}", mesh.vertex_centroid().norm());
    Ok(())
}
