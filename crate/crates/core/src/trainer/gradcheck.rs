use super::objective::{sample_loss, Objective};
use crate::body::BodyModel;
use crate::camera::rig_for_views;
use crate::dataset::{generate_records, prepare_sample, GenerateOptions, TrainingSample};
use crate::heatmap::Augmentation;
use crate::losses::{LossReport, LossWeights};
use crate::model::{init_params_for_body, mvm_mask, ModelConfig, ParamVars, Params};
use crate::tensor::{directional_check, GradCheckOptions, GradReport, Tape, Tensor, Var};
use crate::{Error, Result};

/// Outcome of the end-to-end gradient check.
#[derive(Debug, Clone)]
pub struct EndToEndReport {
    pub report: GradReport,
    pub loss: LossReport,
    pub parameter_count: usize,
}

/// Parameter tensors grouped by their top-level name component
/// (`embed`, `block0`, ..., `head`, `camera`, `upsample`), in layout order.
pub fn parameter_groups(params: &Params<f64>) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, name) in params.names().iter().enumerate() {
        let key = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups
}

/// One augmented, MHM-masked training sample with full vertices.
fn check_sample(body: &BodyModel, config: &ModelConfig, seed: u64) -> Result<TrainingSample> {
    let rig = rig_for_views(4)?;
    let opts = GenerateOptions {
        store_full: true,
        ..GenerateOptions::new(1, 4, seed)
    };
    let (records, _) = generate_records(body, &rig, &opts, 0..1)?;
    let record = records.get(1).ok_or_else(|| Error::Degenerate("gradient check mesh left the frame".into()))?;
    prepare_sample(record, &rig, 3.0, config.patch_size, Some((&Augmentation::default(), seed)))
}

/// Total loss through the transformer, upsampler, camera head and all four
/// loss terms, in `f64`, against central differences along `directions`
/// random directions per parameter group.
pub fn end_to_end_gradcheck(config: &ModelConfig, body: &BodyModel, seed: u64, directions: usize, opts: &GradCheckOptions) -> Result<EndToEndReport> {
    config.validate()?;
    let params: Params<f64> = init_params_for_body(config, seed, body)?;
    let sample = check_sample(body, config, seed)?;
    let objective = Objective::<f64>::new(body, config, LossWeights::default())?;
    let mask = mvm_mask(config.coarse_vertex_count, seed, config.mvm_ratio);
    let groups = parameter_groups(&params);
    let inputs: Vec<Tensor<f64>> = groups
        .iter()
        .map(|(_, members)| {
            let flat: Vec<f64> = members.iter().flat_map(|&i| params.tensors()[i].data().iter().copied()).collect();
            Tensor::matrix(flat.len(), 1, flat)
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = groups.iter().map(|(k, _)| k.clone()).collect();
    let objective_fn = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut per_param: Vec<Option<Var>> = vec![None; params.len()];
        for ((_, members), &flat) in groups.iter().zip(vars) {
            let mut start = 0;
            for &i in members {
                let t = &params.tensors()[i];
                let slice = tape.slice_rows(flat, start, start + t.len())?;
                per_param[i] = Some(tape.reshape(slice, t.shape())?);
                start += t.len();
            }
        }
        let p = ParamVars::from_vars(&params, per_param.into_iter().map(|v| v.expect("every tensor grouped")).collect());
        Ok(sample_loss(tape, config, &p, &sample, Some(&mask), &objective)?.0)
    };
    let loss = {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, &params, false);
        sample_loss(&mut tape, config, &p, &sample, Some(&mask), &objective)?.1
    };
    let report = directional_check(objective_fn, &inputs, &names, directions, seed, opts)?;
    Ok(EndToEndReport {
        report,
        loss,
        parameter_count: params.count(),
    })
}
