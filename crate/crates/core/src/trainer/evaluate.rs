use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::pretrain::check_data_dims;
use crate::config::RunConfig;
use crate::dataset::{prepare_sample, to_vec3, PairSource};
use crate::metrics::{sample_metrics, EvalAccumulator, EvalReport};
use crate::model::{forward, Params};
use crate::{Error, Result};

/// Metrics of one evaluated record, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub index: usize,
    pub mesh_index: u64,
    pub camera_id: u32,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpve: Option<f64>,
}

impl SampleMetrics {
    pub const CSV_HEADER: &'static str = "index,mesh_index,camera_id,mpjpe_mm,pa_mpjpe_mm,mpve_mm";

    pub fn csv_row(&self) -> String {
        let mpve = self.mpve.map_or(String::new(), |v| format!("{v:.4}"));
        format!("{},{},{},{:.4},{:.4},{mpve}", self.index, self.mesh_index, self.camera_id, self.mpjpe, self.pa_mpjpe)
    }
}

/// Evaluate on clean heatmaps with no masking of any kind. Predictions and
/// ground truth are compared in the camera-rotated frame; MPVE uses full
/// vertices when the records carry them.
pub fn evaluate(config: &RunConfig, params: &Params<f32>, data: &dyn PairSource) -> Result<(EvalReport, Vec<SampleMetrics>)> {
    config.model.validate()?;
    params.check_layout(&config.model)?;
    check_data_dims(config, data)?;
    if data.is_empty() {
        return Err(Error::config("no evaluation records"));
    }
    let per_sample: Vec<SampleMetrics> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let record = data.get(i)?;
            let sample = prepare_sample(&record, data.rig(), config.train.sigma, config.model.patch_size, None)?;
            let out = forward(&sample.tokens, &config.model, params, None)?;
            let points = |flat: &[f64]| flat.chunks(3).map(|c| [c[0] as f32, c[1] as f32, c[2] as f32]).collect::<Vec<_>>();
            let gt_joints = to_vec3(&points(&sample.joints3d));
            let gt_full = sample.full.as_ref().map(|f| to_vec3(&points(f)));
            let vertices = gt_full.as_ref().map(|g| (out.full_vertices.as_slice(), g.as_slice()));
            let (mpjpe, pa_mpjpe, mpve) = sample_metrics(&out.joints3d, &gt_joints, vertices)?;
            Ok(SampleMetrics {
                index: i,
                mesh_index: record.mesh_index,
                camera_id: record.camera_id,
                mpjpe,
                pa_mpjpe,
                mpve,
            })
        })
        .collect::<Result<_>>()?;
    let mut acc = EvalAccumulator::default();
    for m in &per_sample {
        acc.push(m.mpjpe, m.pa_mpjpe, m.mpve);
    }
    Ok((acc.finish(), per_sample))
}

pub fn write_sample_metrics(path: &Path, metrics: &[SampleMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(SampleMetrics::CSV_HEADER);
    text.push('\n');
    for m in metrics {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
