use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FrameGrid;
use crate::posenc::{check_dim, DEFAULT_BASE};

/// How coarse positional encodings are derived from the fine grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseEncoding {
    /// Average of the fine encodings in each window.
    AvgPool,
    /// Encoding of the window's mean coordinate.
    CenterSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub heatmap: f64,
    pub offset: f64,
    pub size: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            heatmap: 1.0,
            offset: 1.0,
            size: 0.1,
            score: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub input_size: usize,
    /// Input pixels per feature cell; a power of two.
    pub stride: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Coarse-to-fine scales, strictly decreasing, ending at 1.
    pub scales: Vec<usize>,
    /// Percentage of tokens kept at each selection.
    pub mu: f64,
    /// Output channels of every stem block but the last, which emits `d`.
    pub stem_channels: Vec<usize>,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub rope_base: f64,
    pub coarse_encoding: CoarseEncoding,
    /// Train the scoring network against cells holding ground-truth centers.
    pub score_supervision: bool,
    /// Scale duplicated parents by their sigmoid score so the main losses
    /// reach the scoring network through the selection.
    pub score_gate: bool,
    pub loss: LossWeights,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Minimum peak probability for decoded boxes.
    pub min_score: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            input_size: 48,
            stride: 8,
            d: 64,
            heads: 2,
            ffn: 128,
            scales: vec![2, 1],
            mu: 25.0,
            stem_channels: vec![16, 32],
            encoder_layers: 2,
            decoder_layers: 2,
            rope_base: DEFAULT_BASE,
            coarse_encoding: CoarseEncoding::AvgPool,
            score_supervision: true,
            score_gate: false,
            loss: LossWeights::default(),
            focal_alpha: 2.0,
            focal_beta: 4.0,
            min_score: 0.01,
        }
    }
}

pub const CLASSES: usize = 2;
/// Head outputs per class: heatmap logit, two offsets, two log sizes.
pub const HEAD_FIELDS: usize = 5;

impl ModelConfig {
    /// The full-scale geometry used for cost accounting.
    pub fn full_geometry() -> Self {
        ModelConfig {
            input_size: 320,
            stride: 16,
            stem_channels: vec![16, 32, 64],
            ..ModelConfig::default()
        }
    }

    /// A single unit scale at full retention: the plain dense decoder.
    pub fn is_dense(&self) -> bool {
        self.scales == [1] && self.mu == 100.0
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn stem_blocks(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    pub fn n_in(&self) -> usize {
        self.input_size / self.stride
    }

    pub fn grid(&self) -> Result<FrameGrid> {
        FrameGrid::new(self.n_in(), self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d % (4 * self.heads) != 0 {
            return bad(format!("d = {} must be a multiple of 4·heads = {}", self.d, 4 * self.heads));
        }
        check_dim(self.head_dim())?;
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return bad(format!("stride {} must be a power of two >= 2", self.stride));
        }
        if self.input_size % self.stride != 0 {
            return bad(format!("input size {} is not a multiple of stride {}", self.input_size, self.stride));
        }
        if self.stem_channels.len() + 1 != self.stem_blocks() {
            return bad(format!(
                "stride {} needs {} stem blocks, so {} intermediate widths (got {})",
                self.stride,
                self.stem_blocks(),
                self.stem_blocks() - 1,
                self.stem_channels.len()
            ));
        }
        if !(self.mu > 0.0 && self.mu <= 100.0) {
            return bad(format!("mu = {} must lie in (0, 100]", self.mu));
        }
        if self.scales.last() != Some(&1) {
            return bad("scales must end at 1".into());
        }
        for w in self.scales.windows(2) {
            if w[1] >= w[0] || w[0] % w[1] != 0 {
                return bad(format!("scale {} does not refine {}", w[1], w[0]));
            }
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn == 0 {
            return bad("layer counts and ffn width must be positive".into());
        }
        let grid = self.grid()?;
        for &s in &self.scales {
            grid.check_scale(s)?;
        }
        Ok(())
    }
}
