//! Plain ViT encoder with merge hooks, a linear stand-in decoder, and weight IO.

mod config;
mod decode;
mod encoder;
mod weights;

pub use config::{DecoderKind, EncoderConfig, Placement, Threshold, Window};
pub use decode::{decode, ClassScores};
pub use encoder::{
    encoder_forward, encoder_forward_batch, encoder_forward_observed, mhsa_block, mlp_block, patchify,
    BatchPolicy, ForwardOutput, LayerTokens, Mode, SiteCount, TokenSchedule,
};
pub(crate) use encoder::observe_baseline;
pub use weights::{read_tmw, tensor_schema, LayerWeights, Tensor, WeightBundle, TMW_MAGIC, TMW_VERSION};

use crate::error::{AlgmError, Result};
use crate::merge::MergeRecord;
use crate::numkernel::Matrix;

/// RGB image, row-major `H×W×3` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(AlgmError::Shape(format!(
                "{} values do not form a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Live tokens at one point in the encoder.
///
/// `cluster_sizes[i]` counts the original positions token `i` stands for and
/// `record` maps every original position to its current token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Matrix,
    pub grid_h: usize,
    pub grid_w: usize,
    pub cluster_sizes: Vec<u32>,
    pub record: MergeRecord,
}

impl TokenSet {
    /// Unmerged token set covering a `grid_h × grid_w` grid.
    pub fn from_grid(tokens: Matrix, grid_h: usize, grid_w: usize) -> Result<Self> {
        let n = grid_h * grid_w;
        if tokens.rows() != n {
            return Err(AlgmError::Shape(format!(
                "{} tokens for a {grid_h}x{grid_w} grid",
                tokens.rows()
            )));
        }
        Ok(TokenSet { tokens, grid_h, grid_w, cluster_sizes: vec![1; n], record: MergeRecord::identity(n) })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn original_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Checks the size, record, and cluster-size invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.original_len();
        if self.len() > n {
            return Err(AlgmError::Integrity(format!("{} tokens exceed the {n} grid positions", self.len())));
        }
        if self.cluster_sizes.len() != self.len() {
            return Err(AlgmError::Integrity(format!(
                "{} cluster sizes for {} tokens",
                self.cluster_sizes.len(),
                self.len()
            )));
        }
        let total: u64 = self.cluster_sizes.iter().map(|&s| s as u64).sum();
        if total != n as u64 {
            return Err(AlgmError::Integrity(format!("cluster sizes sum to {total}, expected {n}")));
        }
        self.record.validate(n, self.len())
    }
}
