//! Generate a few shards, reopen them and stream shuffled batches.

use mpt::body::BodyModel;
use mpt::dataset::{generate, read_iter, GenerateOptions, PairSource, ShardSet};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let opts = GenerateOptions {
        records_per_shard: 16,
        ..GenerateOptions::new(12, 4, 11)
    };
    let summary = generate(&BodyModel::standard(), &opts, dir.path())?;
    println!("{} records in {} shards, {} meshes skipped", summary.records, summary.shards.len(), summary.skipped_meshes);

    let set = ShardSet::open_dir(dir.path())?;
    println!("rig of {} cameras, {} records", set.rig().len(), set.len());
    for (n, batch) in read_iter(&set, 10, Some(1))?.enumerate() {
        let batch = batch?;
        let meshes: Vec<u64> = batch.iter().map(|r| r.mesh_index).collect();
        println!("batch {n}: meshes {meshes:?}");
    }
    Ok(())
}
