use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::objective::{sample_gradients, Objective};
use super::optim::{adam_step, lr_at, AdamState};
use crate::body::BodyModel;
use crate::config::RunConfig;
use crate::dataset::{prepare_sample, shuffled_order, PairSource};
use crate::losses::LossReport;
use crate::model::{init_params_for_body, Params};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Worker count: `MPT_THREADS` when set, otherwise the available cores.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MPT_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

pub fn worker_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Where checkpoints are written; `None` keeps everything in memory.
    pub checkpoint: Option<PathBuf>,
    /// CSV loss log, appended to when resuming.
    pub log: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed steps without changing the schedule.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
    pub applied: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
    pub skipped_records: usize,
}

/// Steps for a run over `records` records.
pub fn total_steps(config: &RunConfig, records: usize) -> u64 {
    let per_epoch = records.div_ceil(config.train.batch_size.max(1)) as u64;
    config.train.max_steps.unwrap_or(config.train.total_epochs as u64 * per_epoch)
}

/// Record indices of the batch trained at `step`. Depends only on the seed
/// and the step, so a resumed run sees the same batches.
pub fn batch_indices(records: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = records.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let b = (step % per_epoch) as usize;
    let order = shuffled_order(records, rng::derive(seed, &[stream::EPOCH, epoch]));
    order[b * batch_size..((b + 1) * batch_size).min(records)].to_vec()
}

pub(crate) fn check_data_dims(config: &RunConfig, data: &dyn PairSource) -> Result<()> {
    let d = data.dims();
    let m = &config.model;
    if (d.joints, d.coarse_vertices, d.full_vertices) != (m.joint_query_count, m.coarse_vertex_count, m.full_vertex_count) {
        return Err(Error::dim(
            "data vs model config",
            format!("{} joints, {} coarse, {} full", m.joint_query_count, m.coarse_vertex_count, m.full_vertex_count),
            format!("{} joints, {} coarse, {} full", d.joints, d.coarse_vertices, d.full_vertices),
        ));
    }
    if let Some(c) = data.rig().cameras.first() {
        if c.image_size != (m.image_size, m.image_size) {
            return Err(Error::dim("data image size", m.image_size, format!("{:?}", c.image_size)));
        }
    }
    Ok(())
}

/// Pre-train on `data`. Runs on the current rayon pool; per-sample gradients
/// are summed in batch order so the result depends only on the inputs.
///
/// A non-finite loss aborts the run without touching the last written
/// checkpoint. A non-finite gradient skips the update and is counted.
pub fn pretrain(config: &RunConfig, body: &BodyModel, data: &dyn PairSource, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    config.validate()?;
    check_data_dims(config, data)?;
    if data.is_empty() {
        return Err(Error::config("no training records"));
    }
    let train = &config.train;
    let model = &config.model;
    let total = total_steps(config, data.len());
    let mut state = match &opts.resume {
        Some(c) => {
            if c.config != *config {
                return Err(Error::config("resume checkpoint was written with a different configuration"));
            }
            c.params.check_layout(model)?;
            c.clone()
        }
        None => {
            let params: Params<f32> = init_params_for_body(model, train.seed, body)?;
            let optimizer = AdamState::new(&params);
            Checkpoint {
                config: config.clone(),
                params,
                optimizer,
                step: 0,
                total_steps: total,
                rejected_steps: 0,
            }
        }
    };
    if state.total_steps != total {
        return Err(Error::config(format!(
            "checkpoint schedule has {} steps, this data gives {total}",
            state.total_steps
        )));
    }
    let objective = Objective::<f32>::new(body, model, train.loss_weights)?;
    let augmentation = train.effective_augmentation();
    let augment = train.mhm;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let mut log = match &opts.log {
        Some(path) => {
            let fresh = opts.resume.is_none() || !path.exists();
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            if fresh {
                writeln!(f, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(path, e))?;
            }
            Some((path.clone(), f))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut skipped = 0;
    let started = Instant::now();
    while state.step < end {
        let step = state.step;
        let lr = lr_at(step, total, train);
        let indices = batch_indices(data.len(), train.batch_size, train.seed, step);
        let results: Vec<Option<(LossReport, Vec<Tensor<f32>>)>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let record = match data.get(i) {
                    Ok(r) => r,
                    Err(e @ Error::Format { .. }) => {
                        log::warn!("step {step}: skipping record {i}: {e}");
                        return Ok(None);
                    }
                    Err(e) => return Err(e),
                };
                let sample_seed = rng::derive(train.seed, &[stream::STEP, step, slot as u64]);
                let aug = augment.then_some((&augmentation, sample_seed));
                let sample = prepare_sample(&record, data.rig(), train.sigma, model.patch_size, aug)?;
                let mvm = train.mvm.then(|| rng::derive(sample_seed, &[stream::MVM]));
                sample_gradients(model, &state.params, &sample, mvm, &objective).map(Some)
            })
            .collect::<Result<_>>()?;
        skipped += results.iter().filter(|r| r.is_none()).count();
        let results: Vec<_> = results.into_iter().flatten().collect();
        if results.is_empty() {
            return Err(Error::config(format!("step {step}: every record in the batch was unreadable")));
        }
        let n = results.len() as f64;
        let reports: Vec<LossReport> = results.iter().map(|(r, _)| *r).collect();
        let report = LossReport::mean(&reports);
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                location: format!("training loss at step {step} ({report:?})"),
            });
        }
        let mut sums: Vec<Vec<f64>> = state.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        for (_, grads) in &results {
            for (acc, g) in sums.iter_mut().zip(grads) {
                acc.iter_mut().zip(g.data()).for_each(|(a, v)| *a += *v as f64);
            }
        }
        let grads: Vec<Tensor<f32>> = sums
            .into_iter()
            .zip(state.params.tensors())
            .map(|(s, t)| Tensor::new(t.shape().to_vec(), s.into_iter().map(|v| (v / n) as f32).collect()))
            .collect::<Result<_>>()?;
        let applied = adam_step(&mut state.params, &grads, &mut state.optimizer, lr)?;
        if !applied {
            state.rejected_steps += 1;
        }
        state.step += 1;
        if let Some((path, f)) = log.as_mut() {
            if train.log_every > 0 && (step % train.log_every == 0 || state.step == end) {
                writeln!(f, "{}", report.csv_row(step, lr)).map_err(|e| Error::io(&*path, e))?;
            }
        }
        if train.log_every > 0 && step % train.log_every == 0 {
            log::info!(
                "step {}/{total} loss {:.5} (v {:.5} j {:.5} reg {:.5} proj {:.5}) lr {lr:.3e} {:.1}s",
                step + 1,
                report.total,
                report.l_v,
                report.l_j,
                report.l_j_reg,
                report.l_j_proj,
                started.elapsed().as_secs_f64()
            );
        }
        history.push(StepLog { step, lr, report, applied });
        if let Some(path) = &opts.checkpoint {
            if train.checkpoint_every > 0 && state.step % train.checkpoint_every == 0 && state.step < end {
                state.save(path)?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint {
        state.save(path)?;
    }
    Ok(PretrainOutcome {
        checkpoint: state,
        history,
        skipped_records: skipped,
    })
}
