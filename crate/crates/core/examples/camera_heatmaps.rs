//! Project a body into the camera ring and render joint heatmaps.

use mpt::body::{BodyModel, NormalizeOptions};
use mpt::camera::{project_perspective, rig_for_views};
use mpt::heatmap::{mask_joints, synthesize};

fn main() -> anyhow::Result<()> {
    let body = BodyModel::standard();
    let mesh = body.sample_mesh(7, &NormalizeOptions::default())?;
    let rig = rig_for_views(4)?;

    for (id, camera) in rig.cameras.iter().enumerate() {
        let projected = project_perspective(camera, &mesh.joints3d);
        let joints: Vec<_> = projected.iter().map(|p| p.unwrap_or_default()).collect();
        let visible: Vec<bool> = projected.iter().map(|p| p.is_some_and(|p| camera.contains(&p))).collect();
        let (w, h) = camera.image_size;
        let stack = synthesize(&joints, &visible, 3.0, w, h)?;
        let (x, y, peak) = stack.argmax(0);
        println!(
            "camera {id}: azimuth {:6.1} deg, {}/{} joints visible, nose peak {peak:.3} at ({x}, {y})",
            camera.azimuth().to_degrees(),
            visible.iter().filter(|v| **v).count(),
            visible.len()
        );
        if id == 0 {
            let masked = mask_joints(&stack, 1, 0.3);
            let empty = (0..masked.joints).filter(|&j| masked.channel(j).iter().all(|v| *v == 0.0)).count();
            println!("  masking 30% of joints leaves {empty} empty channels");
        }
    }
    Ok(())
}
