//! Gaussian joint heatmaps, masking, augmentation and patch tokenization.
//!
//! Stacks are stored row-major as `[y][x][joint]`: the value of joint `k` at
//! pixel `(x, y)` lives at `(y * width + x) * K + k`. Pixel `(x, y)` is sampled
//! at its center `(x + 0.5, y + 0.5)`, in the same frame as the 2D joints.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::camera::Vec2;
use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 3.0;
pub const PATCH_SIZE: usize = 8;
/// Values below this are stored as exact zeros.
pub const TRUNCATION: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub width: usize,
    pub height: usize,
    pub joints: usize,
    pub sigma: f64,
    pub data: Vec<f32>,
    pub joint_visibility: Vec<bool>,
    pub masked_joints: Vec<usize>,
}

impl HeatmapStack {
    pub fn zeros(width: usize, height: usize, joints: usize, sigma: f64) -> Self {
        Self {
            width,
            height,
            joints,
            sigma,
            data: vec![0.0; width * height * joints],
            joint_visibility: vec![false; joints],
            masked_joints: Vec::new(),
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, joint: usize) -> usize {
        (y * self.width + x) * self.joints + joint
    }

    pub fn get(&self, x: usize, y: usize, joint: usize) -> f32 {
        self.data[self.index(x, y, joint)]
    }

    /// Copy of one joint's map, row-major `[y][x]`.
    pub fn channel(&self, joint: usize) -> Vec<f32> {
        (0..self.width * self.height).map(|p| self.data[p * self.joints + joint]).collect()
    }

    pub fn zero_channel(&mut self, joint: usize) {
        for p in 0..self.width * self.height {
            self.data[p * self.joints + joint] = 0.0;
        }
    }

    /// Pixel holding the largest value of a channel (first in row-major order
    /// on ties).
    pub fn argmax(&self, joint: usize) -> (usize, usize, f32) {
        let mut best = (0, 0, f32::MIN);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y, joint);
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        best
    }
}

/// Render `exp(-|p - x_j|^2 / sigma^2)` for every visible joint.
pub fn synthesize(joints2d: &[Vec2], visibility: &[bool], sigma: f64, width: usize, height: usize) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    if joints2d.len() != visibility.len() {
        return Err(Error::dim("heatmap visibility", joints2d.len(), visibility.len()));
    }
    let k = joints2d.len();
    let mut stack = HeatmapStack::zeros(width, height, k, sigma);
    let inv = 1.0 / (sigma * sigma);
    // exp(-d^2/sigma^2) >= TRUNCATION inside this radius.
    let radius = sigma * (-(TRUNCATION as f64).ln()).sqrt();
    for (j, (p, &vis)) in joints2d.iter().zip(visibility).enumerate() {
        if !vis || !p.x.is_finite() || !p.y.is_finite() {
            continue;
        }
        stack.joint_visibility[j] = true;
        let x0 = ((p.x - radius - 0.5).floor().max(0.0)) as usize;
        let y0 = ((p.y - radius - 0.5).floor().max(0.0)) as usize;
        let x1 = ((p.x + radius - 0.5).ceil().min(width as f64 - 1.0)).max(-1.0);
        let y1 = ((p.y + radius - 0.5).ceil().min(height as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            let dy = y as f64 + 0.5 - p.y;
            for x in x0..=x1 as usize {
                let dx = x as f64 + 0.5 - p.x;
                let v = (-(dx * dx + dy * dy) * inv).exp() as f32;
                if v >= TRUNCATION {
                    let i = stack.index(x, y, j);
                    stack.data[i] = v;
                }
            }
        }
    }
    Ok(stack)
}

/// Zero each joint's map independently with probability `mask_ratio`.
pub fn mask_joints(stack: &HeatmapStack, seed: u64, mask_ratio: f64) -> HeatmapStack {
    let ratio = mask_ratio.clamp(0.0, 1.0);
    let mut out = stack.clone();
    if ratio == 0.0 {
        return out;
    }
    let mut rng = rng::rng(seed);
    for j in 0..stack.joints {
        if rng.random::<f64>() < ratio {
            out.zero_channel(j);
            if !out.masked_joints.contains(&j) {
                out.masked_joints.push(j);
            }
        }
    }
    out.masked_joints.sort_unstable();
    out
}

/// Gaussian jitter of the 2D joint coordinates (pixels).
pub fn jitter_joints(joints2d: &[Vec2], seed: u64, jitter_std: f64) -> Vec<Vec2> {
    if jitter_std <= 0.0 {
        return joints2d.to_vec();
    }
    let mut rng = rng::rng(seed);
    let normal = Normal::new(0.0, jitter_std).expect("finite std");
    joints2d
        .iter()
        .map(|p| Vec2::new(p.x + normal.sample(&mut rng), p.y + normal.sample(&mut rng)))
        .collect()
}

/// Pixelwise Gaussian noise on the maps of visible, unmasked joints, clamped
/// to `[0, 1]`. Other maps stay exactly zero.
pub fn add_pixel_noise(stack: &mut HeatmapStack, seed: u64, noise_std: f64) {
    if noise_std <= 0.0 {
        return;
    }
    let mut rng = rng::rng(seed);
    let active: Vec<usize> = (0..stack.joints)
        .filter(|j| stack.joint_visibility[*j] && !stack.masked_joints.contains(j))
        .collect();
    let std = noise_std as f32;
    for p in 0..stack.width * stack.height {
        for &j in &active {
            let z: f32 = StandardNormal.sample(&mut rng);
            let v = &mut stack.data[p * stack.joints + j];
            *v = (*v + std * z).clamp(0.0, 1.0);
        }
    }
}

/// Heatmap augmentation and masking settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub jitter_std: f64,
    pub noise_std: f64,
    pub mask_ratio: f64,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        jitter_std: 0.0,
        noise_std: 0.0,
        mask_ratio: 0.0,
    };
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            jitter_std: 2.0,
            noise_std: 0.05,
            mask_ratio: 0.3,
        }
    }
}

/// Full input pipeline for one sample: jitter, render, mask, noise.
pub fn augment(
    joints2d: &[Vec2],
    visibility: &[bool],
    seed: u64,
    aug: &Augmentation,
    sigma: f64,
    width: usize,
    height: usize,
) -> Result<HeatmapStack> {
    let jittered = jitter_joints(joints2d, rng::derive(seed, &[rng::stream::JITTER]), aug.jitter_std);
    let stack = synthesize(&jittered, visibility, sigma, width, height)?;
    let mut stack = mask_joints(&stack, rng::derive(seed, &[rng::stream::MASK]), aug.mask_ratio);
    add_pixel_noise(&mut stack, rng::derive(seed, &[rng::stream::NOISE]), aug.noise_std);
    Ok(stack)
}

/// Non-overlapping `patch x patch` tokens in row-major patch order; each token
/// is the patch flattened as `[py][px][joint]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Vec<f32>,
    pub patch_size: usize,
    pub grid_shape: (usize, usize),
    pub joints: usize,
}

impl TokenGrid {
    pub fn token_count(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    pub fn feature_len(&self) -> usize {
        self.patch_size * self.patch_size * self.joints
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let f = self.feature_len();
        &self.tokens[i * f..(i + 1) * f]
    }
}

pub fn tokenize(stack: &HeatmapStack, patch: usize) -> Result<TokenGrid> {
    if patch == 0 || stack.width % patch != 0 || stack.height % patch != 0 {
        return Err(Error::config(format!(
            "{}x{} stack is not divisible into {patch}x{patch} patches",
            stack.width, stack.height
        )));
    }
    let (gw, gh) = (stack.width / patch, stack.height / patch);
    let k = stack.joints;
    let row = patch * k;
    let mut tokens = Vec::with_capacity(stack.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let start = stack.index(gx * patch, gy * patch + py, 0);
                tokens.extend_from_slice(&stack.data[start..start + row]);
            }
        }
    }
    Ok(TokenGrid {
        tokens,
        patch_size: patch,
        grid_shape: (gh, gw),
        joints: k,
    })
}

/// Exact inverse of [`tokenize`] for the pixel data.
pub fn detokenize(grid: &TokenGrid, sigma: f64) -> HeatmapStack {
    let patch = grid.patch_size;
    let (gh, gw) = grid.grid_shape;
    let k = grid.joints;
    let mut stack = HeatmapStack::zeros(gw * patch, gh * patch, k, sigma);
    let row = patch * k;
    let mut src = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let start = stack.index(gx * patch, gy * patch + py, 0);
                stack.data[start..start + row].copy_from_slice(&grid.tokens[src..src + row]);
                src += row;
            }
        }
    }
    stack
}
