//! A two-cell MHM ablation on a tiny model and budget.

use mpt::body::BodyModel;
use mpt::trainer::{ablate, AblationGrid};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let grid = AblationGrid::from_text(&format!(
        "mhm = on, off\nseeds = 1\nviews = 2\neval_views = 2\ntrain_meshes = 16\neval_meshes = 4\n\
         block_hidden_sizes = 16,8\nheads_per_block = 2\nmlp_ratio = 2\nupsampler_hidden = 8\n\
         desk_scale = off\nbatch_size = 4\nmax_steps = 8\nwork_dir = {}\n",
        dir.path().display()
    ))?;
    let table = ablate(&grid, &BodyModel::standard())?;
    print!("{}", table.render());
    Ok(())
}
