//! Write a mesh-seq file from a synthetic motion and import every fifth frame.

use mpt::body::BodyModel;
use mpt::dataset::{import_meshes, synthetic_sequence, ImportOptions, MeshSequence, PairSource, ShardSet};

fn main() -> anyhow::Result<()> {
    let body = BodyModel::standard();
    let dir = tempfile::tempdir()?;
    let seq_path = dir.path().join("walk.mseq");
    MeshSequence::from_samples(&synthetic_sequence(&body, 9, 40, 10)?)?.write(&seq_path)?;

    let opts = ImportOptions {
        stride: 5,
        views: 2,
        seed: 9,
        store_full: false,
        normalize: Default::default(),
    };
    let out = dir.path().join("shards");
    let summary = import_meshes(&seq_path, &body.template.coarse_indices, &opts, &out)?;
    let set = ShardSet::open_dir(&out)?;
    println!("{} records from 8 frames x 2 views, {} frames skipped", set.len(), summary.skipped_meshes);
    Ok(())
}
