//! Pre-train a tiny model for a few steps, save, reload and evaluate.

use mpt::body::BodyModel;
use mpt::config::RunConfig;
use mpt::dataset::{generate, GenerateOptions, ShardSet, Split};
use mpt::trainer::{evaluate, pretrain, Checkpoint, PretrainOptions};

fn main() -> anyhow::Result<()> {
    let body = BodyModel::standard();
    let dir = tempfile::tempdir()?;
    generate(&body, &GenerateOptions::new(16, 2, 1), dir.path().join("train"))?;
    let held_out = GenerateOptions {
        split: Split::HeldOut,
        store_full: true,
        ..GenerateOptions::new(4, 2, 1)
    };
    generate(&body, &held_out, dir.path().join("eval"))?;

    let config = RunConfig::from_text(
        "block_hidden_sizes = 16,8\nheads_per_block = 2\nmlp_ratio = 2\nupsampler_hidden = 8\n\
         desk_scale = off\nbatch_size = 4\nmax_steps = 12\npeak_lr = 1e-3\n",
    )?;
    let ckpt = dir.path().join("tiny.ckpt");
    let outcome = pretrain(
        &config,
        &body,
        &ShardSet::open_dir(dir.path().join("train"))?,
        &PretrainOptions {
            checkpoint: Some(ckpt.clone()),
            ..Default::default()
        },
    )?;
    for s in &outcome.history {
        println!("step {:>2} lr {:.2e} loss {:.4}", s.step, s.lr, s.report.total);
    }

    let loaded = Checkpoint::load(&ckpt)?;
    let (report, _) = evaluate(&loaded.config, &loaded.params, &ShardSet::open_dir(dir.path().join("eval"))?)?;
    println!(
        "held-out MPJPE {:.1} mm, PA-MPJPE {:.1} mm, MPVE {:.1} mm over {} samples",
        report.mpjpe, report.pa_mpjpe, report.mpve, report.sample_count
    );
    Ok(())
}
