use crate::error::{Error, Result};
use crate::geometry::NUM_JOINTS;
use serde::{Deserialize, Serialize};

/// Architecture of one set-prediction stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub num_queries: usize,
    /// Input raster size `(height, width)`.
    pub input_size: (usize, usize),
    /// Token grid `(rows, cols)`; must divide `input_size`.
    pub token_grid: (usize, usize),
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Foreground classes plus background (last).
    pub num_classes: usize,
    /// 4 for boxes, 2 for keypoints.
    pub geometry_dim: usize,
}

impl StageConfig {
    pub fn detector() -> Self {
        Self {
            num_queries: 8,
            input_size: (64, 64),
            token_grid: (8, 8),
            embed_dim: 64,
            heads: 2,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            num_classes: 2,
            geometry_dim: 4,
        }
    }

    pub fn keypointer() -> Self {
        Self {
            num_queries: 24,
            input_size: (64, 48),
            token_grid: (8, 6),
            num_classes: NUM_JOINTS + 1,
            geometry_dim: 2,
            ..Self::detector()
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.token_grid.0,
            self.input_size.1 / self.token_grid.1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (h, w) = self.input_size;
        let (gh, gw) = self.token_grid;
        if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 || h == 0 || w == 0 {
            return bad(format!("token grid {gh}x{gw} must divide input {h}x{w}"));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of 4",
                self.embed_dim
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "{} heads do not divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if self.num_queries == 0 || self.ffn_dim == 0 || self.num_classes < 2 {
            return bad(format!("degenerate stage config {self:?}"));
        }
        if !matches!(self.geometry_dim, 2 | 4) {
            return bad(format!(
                "geometry_dim must be 2 or 4, got {}",
                self.geometry_dim
            ));
        }
        if self.geometry_dim == 2 && self.num_queries < NUM_JOINTS {
            return bad(format!(
                "keypoint stage needs at least {NUM_JOINTS} queries, got {}",
                self.num_queries
            ));
        }
        Ok(())
    }
}
