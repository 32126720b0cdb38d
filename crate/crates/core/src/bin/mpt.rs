use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mpt::body::BodyModel;
use mpt::config::RunConfig;
use mpt::container::{scan, tag, ContainerReader, FileKind};
use mpt::dataset::{
    decode_rig, generate, import_meshes, shard_paths, subset, GenerateMode, GenerateOptions, ImportOptions, PairRecord, PairSource, ShardSet,
    Split,
};
use mpt::model::ModelConfig;
use mpt::tensor::GradCheckOptions;
use mpt::trainer::{ablate, end_to_end_gradcheck, evaluate, pretrain, worker_pool, write_sample_metrics, AblationGrid, Checkpoint, PretrainOptions};

#[derive(Parser)]
#[command(name = "mpt", version, about = "Mesh pre-training from synthetic motion-capture heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate heatmap-mesh pair shards from the synthetic body.
    Generate {
        #[arg(long)]
        meshes: usize,
        #[arg(long, value_parser = ["1", "2", "4", "8"], default_value = "4")]
        views: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// `enumerate`: every camera per mesh; `sample`: one random camera.
        #[arg(long, default_value = "enumerate")]
        mode: String,
        /// Draw meshes from the held-out seed partition.
        #[arg(long)]
        held_out: bool,
        /// Store full-resolution vertices in every record.
        #[arg(long)]
        full_vertices: bool,
        #[arg(long, default_value_t = mpt::dataset::RECORDS_PER_SHARD)]
        records_per_shard: usize,
    },
    /// Import a mesh-seq file as pair shards.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stride: usize,
        #[arg(long, value_parser = ["1", "2", "4", "8"], default_value = "4")]
        views: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        full_vertices: bool,
    },
    /// Pre-train the mesh transformer.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mhm: Option<Switch>,
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` overrides, applied after the file and flags.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// CSV loss log (default: next to the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out shards with clean heatmaps.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write per-sample metrics as CSV.
        #[arg(long)]
        per_sample: Option<PathBuf>,
    },
    /// Run an ablation grid and print the table.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// End-to-end gradient check of the total loss in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        directions: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Describe a shard, checkpoint or mesh-seq file.
    Inspect { file: PathBuf },
}

fn views(v: &str) -> usize {
    v.parse().expect("validated by clap")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let pool = worker_pool()?;
    pool.install(|| run(cli.command))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            meshes,
            views: v,
            seed,
            out,
            mode,
            held_out,
            full_vertices,
            records_per_shard,
        } => {
            let opts = GenerateOptions {
                mode: mode.parse::<GenerateMode>()?,
                split: if held_out { Split::HeldOut } else { Split::Train },
                store_full: full_vertices,
                records_per_shard,
                ..GenerateOptions::new(meshes, views(&v), seed)
            };
            let summary = generate(&BodyModel::standard(), &opts, &out).with_context(|| format!("generating into {}", out.display()))?;
            println!(
                "wrote {} records in {} shard(s) to {}; {} mesh(es) skipped",
                summary.records,
                summary.shards.len(),
                out.display(),
                summary.skipped_meshes
            );
        }
        Command::Import {
            input,
            stride,
            views: v,
            seed,
            out,
            full_vertices,
        } => {
            let body = BodyModel::standard();
            let opts = ImportOptions {
                stride,
                views: views(&v),
                seed,
                store_full: full_vertices,
                normalize: Default::default(),
            };
            let summary = import_meshes(&input, &body.template.coarse_indices, &opts, &out)?;
            println!("imported {} records ({} frames skipped) into {}", summary.records, summary.skipped_meshes, out.display());
        }
        Command::Pretrain {
            data,
            config,
            mhm,
            out,
            overrides,
            log,
            resume,
        } => {
            let mut run = match &config {
                Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
                None => RunConfig::default(),
            };
            if let Some(m) = mhm {
                run.train.mhm = matches!(m, Switch::On);
            }
            for o in &overrides {
                let Some((k, v)) = o.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got {o:?}");
                };
                run.set(k.trim(), v.trim())?;
            }
            run.validate()?;
            let set = ShardSet::open_dir(&data)?;
            let train = subset(&set, run.train.data_fraction, run.train.seed)?;
            let resume = resume.map(Checkpoint::load).transpose()?;
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            println!("training on {} of {} records; log {}", train.len(), set.len(), log.display());
            let outcome = pretrain(
                &run,
                &BodyModel::standard(),
                &train,
                &PretrainOptions {
                    checkpoint: Some(out.clone()),
                    log: Some(log),
                    resume,
                    stop_at: None,
                },
            )?;
            let last = outcome.history.last();
            println!(
                "finished step {}/{}; final loss {}; {} rejected step(s); checkpoint {}",
                outcome.checkpoint.step,
                outcome.checkpoint.total_steps,
                last.map_or("n/a".into(), |s| format!("{:.5}", s.report.total)),
                outcome.checkpoint.rejected_steps,
                out.display()
            );
        }
        Command::Eval { ckpt, data, per_sample } => {
            let c = Checkpoint::load(&ckpt)?;
            let set = ShardSet::open_dir(&data)?;
            let (report, samples) = evaluate(&c.config, &c.params, &set)?;
            println!("{}", mpt::metrics::EvalReport::CSV_HEADER);
            println!("{}", report.csv_row());
            if let Some(path) = per_sample {
                write_sample_metrics(&path, &samples)?;
            }
        }
        Command::Ablate { grid, out } => {
            let grid = AblationGrid::load(&grid)?;
            let table = ablate(&grid, &BodyModel::standard())?;
            let text = table.render();
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gradcheck { seed, directions, tolerance } => {
            let opts = GradCheckOptions {
                tolerance,
                ..Default::default()
            };
            let r = end_to_end_gradcheck(&ModelConfig::desk(), &BodyModel::standard(), seed, directions, &opts)?;
            println!("{} parameters, loss {:.6}", r.parameter_count, r.loss.total);
            print!("{}", r.report);
            if !r.report.passed() {
                bail!("gradient check failed: max relative error {:.3e}", r.report.max_rel_error());
            }
        }
        Command::Inspect { file } => inspect(&file)?,
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        for p in shard_paths(path)? {
            inspect(&p)?;
        }
        return Ok(());
    }
    if path.extension().is_some_and(|e| e == "mseq") {
        let seq = mpt::dataset::MeshSequence::read(path)?;
        println!("{}: mesh-seq, {} joints, {} vertices, {} frames", path.display(), seq.joints, seq.vertices, seq.frames.len());
        return Ok(());
    }
    let (header, locations) = scan(path)?;
    println!("{}: {:?}", path.display(), header.kind);
    println!(
        "  K {}  M_coarse {}  M_full {}  records {}  seed {}  rig crc {:08x}",
        header.joints, header.coarse_vertices, header.full_vertices, header.record_count, header.global_seed, header.rig_crc
    );
    let mut tags: BTreeMap<String, usize> = BTreeMap::new();
    for l in &locations {
        *tags.entry(String::from_utf8_lossy(&l.tag).into_owned()).or_default() += 1;
    }
    println!("  tags {tags:?}");
    match header.kind {
        FileKind::Shard => {
            let mut bad = 0;
            let dims = mpt::dataset::Dims {
                joints: header.joints as usize,
                coarse_vertices: header.coarse_vertices as usize,
                full_vertices: header.full_vertices as usize,
            };
            let mut first: Option<PairRecord> = None;
            for (i, r) in ContainerReader::open(path)? {
                match r {
                    Ok(r) if r.tag == tag::RIG => {
                        let rig = decode_rig(&r.payload)?;
                        println!("  rig: {} camera(s)", rig.len());
                    }
                    Ok(r) if r.tag == tag::PAIR && first.is_none() => first = Some(PairRecord::decode(&r.payload, dims)?),
                    Ok(_) => {}
                    Err(e) => {
                        bad += 1;
                        println!("  record {i}: {e}");
                    }
                }
            }
            if let Some(r) = first {
                let visible = r.visibility.iter().filter(|v| **v).count();
                println!(
                    "  first pair: mesh {} camera {} visible joints {}/{} full vertices {}",
                    r.mesh_index,
                    r.camera_id,
                    visible,
                    r.visibility.len(),
                    r.full_vertices.is_some()
                );
            }
            println!("  {bad} corrupt record(s)");
        }
        FileKind::Checkpoint => {
            let c = Checkpoint::load(path)?;
            println!("  step {}/{}  optimizer step {}  rejected {}", c.step, c.total_steps, c.optimizer.step, c.rejected_steps);
            println!("  {} tensors, {} parameters", c.params.len(), c.params.count());
            for (name, t) in c.params.iter() {
                let norm = t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                println!("    {name:<32} {:?} |w| {norm:.4}", t.shape());
            }
            print!("{}", c.config.to_text());
        }
    }
    Ok(())
}
