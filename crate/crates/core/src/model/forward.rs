use rand::Rng;

use super::{ModelConfig, Params};
use crate::body::Vec3;
use crate::camera::WeakPerspective;
use crate::heatmap::TokenGrid;
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Parameters placed on a tape, addressable by name.
pub struct ParamVars<'a, T> {
    params: &'a Params<T>,
    vars: Vec<Var>,
}

impl<'a, T: Real> ParamVars<'a, T> {
    /// Record every parameter; `trainable` leaves receive gradients.
    pub fn bind(tape: &mut Tape<T>, params: &'a Params<T>, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self { params, vars }
    }

    /// Reuse variables already recorded for `params`, in layout order.
    pub fn from_vars(params: &'a Params<T>, vars: Vec<Var>) -> Self {
        assert_eq!(params.len(), vars.len(), "one variable per parameter tensor");
        Self { params, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.get(&format!("{prefix}.w"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        tape.linear(x, w, b)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let g = self.get(&format!("{prefix}.g"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, eps)
    }
}

/// Output variables of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelVars {
    /// `K x 3` joints from the joint-query rows.
    pub joints: Var,
    /// `M_coarse x 3` vertices from the vertex-query rows.
    pub coarse: Var,
    /// `M_full x 3` upsampled mesh.
    pub full: Var,
    /// `1 x 1` weak-perspective scale (positive).
    pub scale: Var,
    /// `1 x 2` weak-perspective offset in pixels.
    pub translation: Var,
    /// Attention nodes, one per layer, in execution order.
    pub attention: Vec<Var>,
}

/// Independent Bernoulli(`ratio`) draw per vertex query.
pub fn mvm_mask(count: usize, seed: u64, ratio: f64) -> Vec<bool> {
    if ratio <= 0.0 {
        return vec![false; count];
    }
    if ratio >= 1.0 {
        return vec![true; count];
    }
    let mut r = rng::rng(rng::derive(seed, &[rng::stream::MVM]));
    (0..count).map(|_| r.random_bool(ratio)).collect()
}

/// Replace the flagged vertex-query rows of `queries` (joint queries first)
/// by the mask embedding. Joint queries are never masked.
pub fn apply_mvm<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    mask_embedding: Var,
    joint_count: usize,
    vertex_mask: &[bool],
) -> Result<Var> {
    let mut rows = vec![false; joint_count];
    rows.extend_from_slice(vertex_mask);
    tape.mask_rows(queries, mask_embedding, &rows)
}

fn check_finite<T: Real>(tape: &Tape<T>, v: Var, location: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { location: location() })
    }
}

/// Coarse-to-full upsampling: a learned linear map across the vertex axis,
/// then a per-vertex coordinate perceptron added as a residual.
pub fn upsample_graph<T: Real>(tape: &mut Tape<T>, p: &ParamVars<'_, T>, coarse: Var) -> Result<Var> {
    let w = p.get("upsample.w")?;
    let b = p.get("upsample.b")?;
    let lin = tape.matmul(w, coarse)?;
    let base = tape.add(lin, b)?;
    let h = p.linear(tape, base, "upsample.fc1")?;
    let h = tape.gelu(h)?;
    let delta = p.linear(tape, h, "upsample.fc2")?;
    tape.add(base, delta)
}

/// Build the full forward graph on `tape`.
///
/// `tokens` is a `token_count x feature_len` variable. `vertex_mask` enables
/// masked vertex modeling.
pub fn forward_graph<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ParamVars<'_, T>,
    tokens: Var,
    vertex_mask: Option<&[bool]>,
) -> Result<ModelVars> {
    let hidden = config.hidden_sizes();
    let expected = (config.token_count(), config.token_feature_len());
    let got = (tape.value(tokens).rows(), tape.value(tokens).cols());
    if got != expected {
        return Err(Error::dim("model tokens", format!("{expected:?}"), format!("{got:?}")));
    }
    let k = config.joint_query_count;
    let mc = config.coarse_vertex_count;
    let eps = config.layer_norm_eps;

    let grid = p.linear(tape, tokens, "embed.token")?;
    let grid = tape.add(grid, p.get("embed.position")?)?;
    let queries = tape.concat_rows(&[p.get("embed.joint_queries")?, p.get("embed.vertex_queries")?])?;
    let queries = match vertex_mask {
        Some(mask) => {
            if mask.len() != mc {
                return Err(Error::dim("vertex mask", mc, mask.len()));
            }
            apply_mvm(tape, queries, p.get("embed.mask")?, k, mask)?
        }
        None => queries,
    };
    let mut x = tape.concat_rows(&[queries, grid])?;
    check_finite(tape, x, || "input embedding".into())?;

    let mut attention = Vec::new();
    for (b, _) in hidden.iter().enumerate() {
        for l in 0..config.layers_per_block {
            let pre = format!("block{b}.layer{l}");
            let h = p.layer_norm(tape, x, &format!("{pre}.ln1"), eps)?;
            let q = p.linear(tape, h, &format!("{pre}.attn.q"))?;
            let kk = p.linear(tape, h, &format!("{pre}.attn.k"))?;
            let v = p.linear(tape, h, &format!("{pre}.attn.v"))?;
            let a = tape.attention(q, kk, v, config.heads_per_block)?;
            attention.push(a);
            let o = p.linear(tape, a, &format!("{pre}.attn.o"))?;
            x = tape.add(x, o)?;
            let h = p.layer_norm(tape, x, &format!("{pre}.ln2"), eps)?;
            let h = p.linear(tape, h, &format!("{pre}.mlp.fc1"))?;
            let h = tape.gelu(h)?;
            let h = p.linear(tape, h, &format!("{pre}.mlp.fc2"))?;
            x = tape.add(x, h)?;
            check_finite(tape, x, || format!("block {b} layer {l}"))?;
        }
        if b + 1 < hidden.len() {
            x = p.linear(tape, x, &format!("block{b}.reduce"))?;
        }
    }

    let pooled = tape.mean_rows(x)?;
    let c = p.linear(tape, pooled, "camera.fc1")?;
    let c = tape.gelu(c)?;
    let c = p.linear(tape, c, "camera.fc2")?;
    let s_raw = tape.slice_cols(c, 0, 1)?;
    let scale = tape.softplus(s_raw)?;
    let translation = tape.slice_cols(c, 1, 3)?;

    let h = p.layer_norm(tape, x, "head.ln", eps)?;
    let q = tape.slice_rows(h, 0, k + mc)?;
    let coords = p.linear(tape, q, "head.coord")?;
    let joints = tape.slice_rows(coords, 0, k)?;
    let coarse = tape.slice_rows(coords, k, k + mc)?;
    let full = upsample_graph(tape, p, coarse)?;
    check_finite(tape, full, || "output heads".into())?;
    check_finite(tape, c, || "camera head".into())?;

    Ok(ModelVars {
        joints,
        coarse,
        full,
        scale,
        translation,
        attention,
    })
}

/// Predicted joints, meshes and camera for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub joints3d: Vec<Vec3>,
    pub coarse_vertices: Vec<Vec3>,
    pub full_vertices: Vec<Vec3>,
    pub camera: WeakPerspective,
}

pub(crate) fn to_points<T: Real>(t: &Tensor<T>) -> Vec<Vec3> {
    t.data()
        .chunks(3)
        .map(|c| Vec3::new(c[0].f64(), c[1].f64(), c[2].f64()))
        .collect()
}

pub fn tokens_tensor<T: Real>(grid: &TokenGrid) -> Result<Tensor<T>> {
    Tensor::matrix(
        grid.token_count(),
        grid.feature_len(),
        grid.tokens.iter().map(|v| T::of(*v as f64)).collect(),
    )
}

/// Read the outputs of a finished forward graph.
pub fn read_output<T: Real>(tape: &Tape<T>, vars: &ModelVars) -> ModelOutput {
    let t = tape.value(vars.translation).data();
    ModelOutput {
        joints3d: to_points(tape.value(vars.joints)),
        coarse_vertices: to_points(tape.value(vars.coarse)),
        full_vertices: to_points(tape.value(vars.full)),
        camera: WeakPerspective {
            scale: tape.value(vars.scale).item().f64(),
            translation: [t[0].f64(), t[1].f64()],
        },
    }
}

/// Run the model on one token grid. With `mvm_seed` set, vertex queries are
/// masked at the configured ratio (training mode); `None` is evaluation mode.
pub fn forward<T: Real>(tokens: &TokenGrid, config: &ModelConfig, params: &Params<T>, mvm_seed: Option<u64>) -> Result<ModelOutput> {
    config.validate()?;
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, params, false);
    let tv = tape.constant(tokens_tensor(tokens)?);
    let mask = mvm_seed.map(|s| mvm_mask(config.coarse_vertex_count, s, config.mvm_ratio));
    let vars = forward_graph(&mut tape, config, &p, tv, mask.as_deref())?;
    Ok(read_output(&tape, &vars))
}

/// Upsample a coarse mesh with the model's upsampler.
pub fn upsample_mesh<T: Real>(coarse: &[Vec3], params: &Params<T>) -> Result<Vec<Vec3>> {
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, params, false);
    let data = coarse.iter().flat_map(|v| [T::of(v.x), T::of(v.y), T::of(v.z)]).collect();
    let c = tape.constant(Tensor::matrix(coarse.len(), 3, data)?);
    let full = upsample_graph(&mut tape, &p, c)?;
    Ok(to_points(tape.value(full)))
}
