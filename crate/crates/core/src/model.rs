//! Network sizes and the bundle of all learnable parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::generator::GeneratorParams;
use crate::geometry::NUM_KEYPOINTS;
use crate::motion::{DenseMotionParams, KeypointDetectorParams};
use crate::nn::ParamStore;
use crate::scale_transform::LocalizationParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_keypoints: usize,
    pub latent_dim: usize,
    pub mlp_width: usize,
    pub detector_widths: [usize; 3],
    pub motion_channels: usize,
    pub generator_widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 configuration.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            num_keypoints: NUM_KEYPOINTS,
            latent_dim: 64,
            mlp_width: 128,
            detector_widths: [32, 64, 128],
            motion_channels: 64,
            generator_widths: [32, 64, 128, 256],
        }
    }

    /// 16×16 model with a handful of channels per layer, small enough for
    /// exhaustive finite differences.
    pub fn miniature() -> Self {
        Self {
            image_size: 16,
            num_keypoints: NUM_KEYPOINTS,
            latent_dim: 6,
            mlp_width: 8,
            detector_widths: [3, 4, 4],
            motion_channels: 4,
            generator_widths: [3, 4, 4, 5],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(format!(
                "image size must be a positive multiple of 16, got {}",
                self.image_size
            ));
        }
        if self.num_keypoints != NUM_KEYPOINTS {
            return Err(format!(
                "the model uses {NUM_KEYPOINTS} keypoints, got {}",
                self.num_keypoints
            ));
        }
        let widths = self
            .detector_widths
            .iter()
            .chain(&self.generator_widths)
            .chain([&self.latent_dim, &self.mlp_width, &self.motion_channels]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err("layer widths must be positive".into());
        }
        Ok(())
    }
}

/// Which scale modules take part in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Rectify the driving frame (ST).
    pub scale_transform: bool,
    /// Inject the latent scale code into the generator (SE).
    pub scale_embedding: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        scale_transform: true,
        scale_embedding: true,
    };
    pub const BASELINE: Ablation = Ablation {
        scale_transform: false,
        scale_embedding: false,
    };
    pub const ST_ONLY: Ablation = Ablation {
        scale_transform: true,
        scale_embedding: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.scale_transform, self.scale_embedding) {
            (false, false) => "baseline",
            (true, false) => "baseline+st",
            (true, true) => "baseline+st+se",
            (false, true) => "baseline+se",
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub localizer: LocalizationParams,
    pub detector: KeypointDetectorParams,
    pub motion: DenseMotionParams,
    pub generator: GeneratorParams,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.num_keypoints;
        let localizer =
            LocalizationParams::new(&mut store, &mut rng, k, config.mlp_width, config.latent_dim);
        let detector = KeypointDetectorParams::new(&mut store, &mut rng, k, config.detector_widths);
        let motion = DenseMotionParams::new(&mut store, &mut rng, k, config.motion_channels);
        let generator = GeneratorParams::new(
            &mut store,
            &mut rng,
            config.generator_widths,
            config.latent_dim,
        );
        Self {
            config,
            store,
            localizer,
            detector,
            motion,
            generator,
        }
    }
}
