use crate::camera::{DEFAULT_FOCAL, IMAGE_SIZE, RING_HEIGHT, RING_RADIUS};
use crate::heatmap::PATCH_SIZE;
use crate::{Error, Result};

/// Hidden sizes of the three blocks at full scale.
pub const FULL_HIDDEN: [usize; 3] = [1024, 256, 64];
/// Hidden sizes used when `desk_scale` is set.
pub const DESK_HIDDEN: [usize; 3] = [64, 32, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub block_hidden_sizes: Vec<usize>,
    pub layers_per_block: usize,
    pub heads_per_block: usize,
    pub mlp_ratio: usize,
    pub joint_query_count: usize,
    pub coarse_vertex_count: usize,
    pub full_vertex_count: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub mvm_ratio: f64,
    pub upsampler_hidden: usize,
    pub layer_norm_eps: f64,
    /// Initial weak-perspective scale (pixels per meter) and principal point
    /// encoded in the camera-head output bias.
    pub camera_prior_scale: f64,
    pub camera_prior_center: [f64; 2],
    pub desk_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            block_hidden_sizes: FULL_HIDDEN.to_vec(),
            layers_per_block: 4,
            heads_per_block: 4,
            mlp_ratio: 4,
            joint_query_count: 17,
            coarse_vertex_count: 431,
            full_vertex_count: 1723,
            image_size: IMAGE_SIZE,
            patch_size: PATCH_SIZE,
            mvm_ratio: 0.3,
            upsampler_hidden: 16,
            layer_norm_eps: 1e-5,
            camera_prior_scale: DEFAULT_FOCAL / RING_RADIUS.hypot(RING_HEIGHT),
            camera_prior_center: [IMAGE_SIZE as f64 / 2.0; 2],
            desk_scale: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            desk_scale: true,
            ..Self::full()
        }
    }

    /// Hidden sizes in effect: the desk sizes when `desk_scale` is set.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        if self.desk_scale {
            DESK_HIDDEN.to_vec()
        } else {
            self.block_hidden_sizes.clone()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn token_feature_len(&self) -> usize {
        self.patch_size * self.patch_size * self.joint_query_count
    }

    pub fn query_count(&self) -> usize {
        self.joint_query_count + self.coarse_vertex_count
    }

    pub fn sequence_len(&self) -> usize {
        self.query_count() + self.token_count()
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.hidden_sizes();
        if hidden.is_empty() {
            return Err(Error::config("at least one transformer block is required"));
        }
        if self.heads_per_block == 0 || self.layers_per_block == 0 {
            return Err(Error::config("heads_per_block and layers_per_block must be positive"));
        }
        if let Some(h) = hidden.iter().find(|h| **h == 0 || **h % self.heads_per_block != 0) {
            return Err(Error::config(format!(
                "hidden size {h} is not a positive multiple of {} heads",
                self.heads_per_block
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mvm_ratio) {
            return Err(Error::config(format!("mvm_ratio {} outside [0, 1]", self.mvm_ratio)));
        }
        if self.joint_query_count == 0 || self.coarse_vertex_count == 0 || self.full_vertex_count == 0 {
            return Err(Error::config("joint and vertex counts must be positive"));
        }
        if self.mlp_ratio == 0 || self.upsampler_hidden == 0 {
            return Err(Error::config("mlp_ratio and upsampler_hidden must be positive"));
        }
        if self.camera_prior_scale <= 0.0 {
            return Err(Error::config("camera_prior_scale must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_sizes() {
        let c = ModelConfig::desk();
        assert_eq!(c.token_count(), 784);
        assert_eq!(c.token_feature_len(), 1088);
        assert_eq!(c.sequence_len(), 17 + 431 + 784);
        assert_eq!(c.hidden_sizes(), vec![64, 32, 16]);
        assert_eq!(ModelConfig::full().hidden_sizes(), vec![1024, 256, 64]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_heads() {
        let mut c = ModelConfig::full();
        c.block_hidden_sizes = vec![30];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.mvm_ratio = 1.5;
        assert!(c.validate().is_err());
    }
}
