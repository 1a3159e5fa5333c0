use super::ModelError;

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EptConfig {
    pub classes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Sampling points per head per scale.
    pub points: usize,
    /// Pyramid scales, taken from the strides 8, 16, 32 in that order.
    pub levels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub direction_bins: usize,
    /// Channels of the backbone outputs at strides 8, 16 and 32.
    pub backbone_widths: [usize; 3],
    /// Channels of the three spatial-branch conv blocks.
    pub branch_widths: [usize; 3],
    /// Hidden channels of the boundary and direction heads.
    pub head_width: usize,
}

impl EptConfig {
    /// Full-size network.
    pub fn standard(classes: usize) -> Self {
        Self {
            classes,
            d_model: 256,
            heads: 8,
            head_dim: 32,
            points: 16,
            levels: 3,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 2048,
            dropout: 0.1,
            direction_bins: 8,
            backbone_widths: [64, 128, 256],
            branch_widths: [64, 128, 256],
            head_width: 256,
        }
    }

    /// Desk-scale network for the synthetic scenes.
    pub fn toy(classes: usize) -> Self {
        Self {
            d_model: 32,
            heads: 4,
            head_dim: 8,
            ff_dim: 64,
            backbone_widths: [16, 32, 64],
            branch_widths: [16, 32, 32],
            head_width: 32,
            ..Self::standard(classes)
        }
    }

    /// Smallest configuration that still exercises every component; used by
    /// the finite-difference checks.
    pub fn tiny(classes: usize) -> Self {
        Self {
            points: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 32,
            dropout: 0.0,
            backbone_widths: [8, 16, 16],
            branch_widths: [8, 8, 16],
            head_width: 8,
            ..Self::toy(classes)
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|l| 8 << l).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.classes < 2 || self.classes > 255 {
            return bad(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if self.heads == 0 || self.head_dim == 0 || self.heads * self.head_dim != self.d_model {
            return bad(format!("d_model {} ≠ {} heads × {}", self.d_model, self.heads, self.head_dim));
        }
        if !self.d_model.is_multiple_of(4) {
            return bad(format!("d_model {} must be divisible by 4", self.d_model));
        }
        if !(1..=3).contains(&self.levels) {
            return bad(format!("levels must be 1, 2 or 3, got {}", self.levels));
        }
        if self.points == 0 || self.ff_dim == 0 || self.head_width == 0 {
            return bad("points, ff_dim and head_width must be positive".into());
        }
        if self.backbone_widths.contains(&0) || self.branch_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.direction_bins != 8 {
            return bad(format!("direction_bins must be 8, got {}", self.direction_bins));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}
