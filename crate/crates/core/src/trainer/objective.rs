use crate::body::BodyModel;
use crate::dataset::TrainingSample;
use crate::losses::{joint_loss, regressed_joint_loss, reprojection_loss, total_loss, vertex_loss, LossReport, LossTerms, LossWeights};
use crate::model::{forward_graph, mvm_mask, tokens_tensor, ModelConfig, ParamVars, Params};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Constants shared by every sample's loss.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    /// Dense `K x M_full` joint regressor.
    pub regressor: Tensor<T>,
    pub image_size: (usize, usize),
    pub weights: LossWeights,
}

impl<T: Real> Objective<T> {
    pub fn new(body: &BodyModel, config: &ModelConfig, weights: LossWeights) -> Result<Self> {
        let k = body.joint_count();
        let m = body.full_vertex_count();
        if k != config.joint_query_count || m != config.full_vertex_count || body.coarse_vertex_count() != config.coarse_vertex_count {
            return Err(Error::dim(
                "body model vs model config",
                format!("{} joints, {} coarse, {} full", config.joint_query_count, config.coarse_vertex_count, config.full_vertex_count),
                format!("{k} joints, {} coarse, {m} full", body.coarse_vertex_count()),
            ));
        }
        Ok(Self {
            regressor: Tensor::from_f64(&[k, m], &body.regressor.to_dense())?,
            image_size: (config.image_size, config.image_size),
            weights,
        })
    }
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|x| T::of(*x)).collect()
}

/// Forward one sample and build the weighted total loss.
///
/// The vertex term averages the coarse and full mesh errors when the sample
/// carries full vertices and is the coarse error otherwise. Regressed joints
/// come from the predicted full mesh.
pub fn sample_loss<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ParamVars<'_, T>,
    sample: &TrainingSample,
    vertex_mask: Option<&[bool]>,
    objective: &Objective<T>,
) -> Result<(Var, LossReport)> {
    let tokens = tape.constant(tokens_tensor(&sample.tokens)?);
    let out = forward_graph(tape, config, p, tokens, vertex_mask)?;
    let coarse = vertex_loss(tape, out.coarse, &cast(&sample.coarse))?;
    let l_v = match &sample.full {
        Some(full) => {
            let f = vertex_loss(tape, out.full, &cast(full))?;
            let s = tape.add(coarse, f)?;
            tape.scale(s, T::of(0.5))?
        }
        None => coarse,
    };
    let joints: Vec<T> = cast(&sample.joints3d);
    let l_j = joint_loss(tape, out.joints, &joints)?;
    let g = tape.constant(objective.regressor.clone());
    let l_j_reg = regressed_joint_loss(tape, out.full, g, &joints)?;
    let l_j_proj = reprojection_loss(
        tape,
        out.joints,
        out.scale,
        out.translation,
        &cast(&sample.joints2d),
        &sample.visibility,
        objective.image_size,
    )?;
    total_loss(tape, LossTerms { l_v, l_j, l_j_reg, l_j_proj }, &objective.weights)
}

/// Loss report and parameter gradients for one sample.
pub fn sample_gradients<T: Real>(
    config: &ModelConfig,
    params: &Params<T>,
    sample: &TrainingSample,
    mvm_seed: Option<u64>,
    objective: &Objective<T>,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, params, true);
    let mask = mvm_seed.map(|s| mvm_mask(config.coarse_vertex_count, s, config.mvm_ratio));
    let (total, report) = sample_loss(&mut tape, config, &p, sample, mask.as_deref(), objective)?;
    let mut grads = tape.backward(total)?;
    let out = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| match grads.take(*v) {
            Some(g) => Tensor::new(t.shape().to_vec(), g),
            None => Ok(Tensor::zeros(t.shape())),
        })
        .collect::<Result<_>>()?;
    Ok((report, out))
}
