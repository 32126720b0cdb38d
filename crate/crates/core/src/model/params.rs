use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::body::{BodyModel, Vec3};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// How a parameter tensor starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, i: usize, o: usize) {
    spec(out, format!("{prefix}.w"), &[i, o], Init::Normal);
    spec(out, format!("{prefix}.b"), &[1, o], Init::Zeros);
}

fn layer_norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    spec(out, format!("{prefix}.g"), &[1, d], Init::Ones);
    spec(out, format!("{prefix}.b"), &[1, d], Init::Zeros);
}

/// Names, shapes and initializers of every parameter, in storage order.
pub fn param_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let hidden = config.hidden_sizes();
    let d0 = hidden[0];
    let dl = *hidden.last().expect("validated config has blocks");
    let mut out = Vec::new();
    spec(&mut out, "embed.joint_queries".into(), &[config.joint_query_count, d0], Init::Normal);
    spec(&mut out, "embed.vertex_queries".into(), &[config.coarse_vertex_count, d0], Init::Normal);
    linear(&mut out, "embed.token", config.token_feature_len(), d0);
    spec(&mut out, "embed.position".into(), &[config.token_count(), d0], Init::Normal);
    spec(&mut out, "embed.mask".into(), &[1, d0], Init::Normal);
    for (b, &d) in hidden.iter().enumerate() {
        for l in 0..config.layers_per_block {
            let p = format!("block{b}.layer{l}");
            layer_norm(&mut out, &format!("{p}.ln1"), d);
            for m in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("{p}.attn.{m}"), d, d);
            }
            layer_norm(&mut out, &format!("{p}.ln2"), d);
            linear(&mut out, &format!("{p}.mlp.fc1"), d, config.mlp_ratio * d);
            linear(&mut out, &format!("{p}.mlp.fc2"), config.mlp_ratio * d, d);
        }
        if let Some(&next) = hidden.get(b + 1) {
            linear(&mut out, &format!("block{b}.reduce"), d, next);
        }
    }
    layer_norm(&mut out, "head.ln", dl);
    linear(&mut out, "head.coord", dl, 3);
    linear(&mut out, "camera.fc1", dl, dl);
    linear(&mut out, "camera.fc2", dl, 3);
    spec(
        &mut out,
        "upsample.w".into(),
        &[config.full_vertex_count, config.coarse_vertex_count],
        Init::Normal,
    );
    spec(&mut out, "upsample.b".into(), &[config.full_vertex_count, 3], Init::Zeros);
    linear(&mut out, "upsample.fc1", 3, config.upsampler_hidden);
    linear(&mut out, "upsample.fc2", config.upsampler_hidden, 3);
    out
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Params<T> {
    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Every value in layout order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Check names and shapes against the layout of `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = param_layout(config);
        if layout.len() != self.len() {
            return Err(Error::dim("parameter count", layout.len(), self.len()));
        }
        for (s, (name, t)) in layout.iter().zip(self.iter()) {
            if s.name != name || s.shape != t.shape() {
                return Err(Error::dim(
                    "parameter layout",
                    format!("{} {:?}", s.name, s.shape),
                    format!("{name} {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn truncated_normal(r: &mut rng::Rng, std: f64) -> f64 {
    let n = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = n.sample(r);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Truncated-normal weights (std 0.02, cut at two standard deviations), zero
/// biases and unit layer-norm gains. Deterministic per seed; every tensor
/// draws from its own stream so the layout order does not couple tensors.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Params<T> {
    let layout = param_layout(config);
    let entries = layout
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); s.len()],
                Init::Ones => vec![T::one(); s.len()],
                Init::Normal => {
                    let mut r = rng::rng(rng::derive(seed, &[rng::stream::INIT, i as u64]));
                    (0..s.len()).map(|_| T::of(truncated_normal(&mut r, INIT_STD))).collect()
                }
            };
            let t = Tensor::new(s.shape.clone(), data).expect("layout shape matches data");
            (s.name.clone(), t)
        })
        .collect();
    let mut p = Params::from_named(entries).expect("layout names are unique");
    set_camera_prior(&mut p, config);
    p
}

fn set_camera_prior<T: Real>(p: &mut Params<T>, config: &ModelConfig) {
    let s = config.camera_prior_scale;
    // softplus^-1(s) = ln(exp(s) - 1) = s + ln(1 - exp(-s))
    let raw = s + (-(-s).exp()).ln_1p();
    if let Some(b) = p.get_mut("camera.fc2.b") {
        let d = b.data_mut();
        d[0] = T::of(raw);
        d[1] = T::of(config.camera_prior_center[0]);
        d[2] = T::of(config.camera_prior_center[1]);
    }
}

/// [`init_params`] with the upsampler weight set to inverse-distance
/// interpolation from the body's coarse template vertices.
pub fn init_params_for_body<T: Real>(config: &ModelConfig, seed: u64, body: &BodyModel) -> Result<Params<T>> {
    let mut p = init_params(config, seed);
    if body.full_vertex_count() != config.full_vertex_count || body.coarse_vertex_count() != config.coarse_vertex_count {
        return Err(Error::dim(
            "template upsampler",
            format!("{} full / {} coarse", config.full_vertex_count, config.coarse_vertex_count),
            format!("{} full / {} coarse", body.full_vertex_count(), body.coarse_vertex_count()),
        ));
    }
    let full = &body.template.rest_vertices;
    let coarse = body.coarse(full);
    let w = template_upsampler(full, &coarse, 4);
    let t = p.get_mut("upsample.w").expect("layout has upsampler");
    t.data_mut().iter_mut().zip(w).for_each(|(d, v)| *d = T::of(v));
    Ok(p)
}

/// Row-stochastic `full x coarse` matrix: each full vertex is the
/// inverse-distance blend of its `support` nearest coarse vertices, or a copy
/// when it coincides with one.
pub fn template_upsampler(full: &[Vec3], coarse: &[Vec3], support: usize) -> Vec<f64> {
    let mc = coarse.len();
    let mut w = vec![0.0; full.len() * mc];
    for (f, v) in full.iter().enumerate() {
        let mut d: Vec<(usize, f64)> = coarse.iter().map(|c| (c - v).norm()).enumerate().collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let row = &mut w[f * mc..(f + 1) * mc];
        if d[0].1 < 1e-12 {
            row[d[0].0] = 1.0;
            continue;
        }
        let near = &d[..support.min(mc)];
        let total: f64 = near.iter().map(|x| 1.0 / x.1).sum();
        for (i, dist) in near {
            row[*i] = 1.0 / dist / total;
        }
    }
    w
}

/// Uniform in `[-1, 1)` perturbation helper for tests and examples.
pub fn random_tensor<T: Real>(shape: &[usize], seed: u64, amplitude: f64) -> Tensor<T> {
    let mut r = rng::rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(amplitude * r.random_range(-1.0..1.0))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}
