use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Segmentation,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub base_channels: usize,
    /// Channel multiplier from one stage to the next.
    pub channel_growth: usize,
    pub max_channels: usize,
    /// `(depth, height, width)` of one input patch.
    pub patch_size: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
    pub bottleneck_state_dim: usize,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::test_default()
    }
}

impl ModelConfig {
    /// Desk-scale preset: 4 stages, 8 base channels, 32^3 patches.
    pub fn test_default() -> Self {
        Self {
            num_stages: 4,
            base_channels: 8,
            channel_growth: 2,
            max_channels: 320,
            patch_size: [32, 32, 32],
            in_channels: 1,
            num_classes: 3,
            bottleneck_state_dim: 8,
            head: Head::Segmentation,
        }
    }

    /// Full-size preset: 7 stages on 128x256x256 patches.
    pub fn full_preset() -> Self {
        Self {
            num_stages: 7,
            base_channels: 32,
            channel_growth: 2,
            max_channels: 320,
            patch_size: [128, 256, 256],
            in_channels: 1,
            num_classes: 5,
            bottleneck_state_dim: 64,
            head: Head::Segmentation,
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return config_err(format!("num_stages must be >= 2, got {}", self.num_stages));
        }
        if self.base_channels == 0 || self.channel_growth == 0 || self.in_channels == 0 {
            return config_err("channel counts must be positive");
        }
        if self.bottleneck_state_dim == 0 {
            return config_err("bottleneck_state_dim must be positive");
        }
        if self.head == Head::Segmentation && self.num_classes < 2 {
            return config_err("segmentation head needs num_classes >= 2");
        }
        let factor = self.downsampling_factor();
        for (axis, &e) in self.patch_size.iter().enumerate() {
            if e == 0 || e % factor != 0 {
                return config_err(format!(
                    "patch extent {e} on axis {axis} is not divisible by 2^(num_stages-1) = {factor}"
                ));
            }
        }
        Ok(())
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        let mut c = self.base_channels;
        for _ in 0..stage {
            c = (c * self.channel_growth).min(self.max_channels);
        }
        c
    }

    pub fn stage_extent(&self, stage: usize) -> [usize; 3] {
        self.patch_size.map(|e| e >> stage)
    }

    pub fn output_channels(&self) -> usize {
        match self.head {
            Head::Segmentation => self.num_classes,
            Head::Reconstruction => 1,
        }
    }

    /// Whether two configs share the encoder-decoder trunk (everything but the head).
    pub fn same_trunk(&self, other: &ModelConfig) -> bool {
        self.num_stages == other.num_stages
            && self.base_channels == other.base_channels
            && self.channel_growth == other.channel_growth
            && self.max_channels == other.max_channels
            && self.patch_size == other.patch_size
            && self.in_channels == other.in_channels
            && self.bottleneck_state_dim == other.bottleneck_state_dim
    }
}
