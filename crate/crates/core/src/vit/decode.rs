use serde::Serialize;

use crate::error::{AlgmError, Result};
use crate::merge::unmerge;
use crate::numkernel::{linear, Matrix};

use super::{DecoderKind, EncoderConfig, TokenSet, WeightBundle};

/// Per-pixel class scores, stored class-major (`C×H×W`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ClassScores {
    pub fn get(&self, class: usize, y: usize, x: usize) -> f32 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// Highest-scoring class per pixel, row-major; ties go to the lower id.
    pub fn argmax(&self) -> Vec<u32> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|px| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * plane + px] > self.data[best * plane + px] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Per-pixel class scores from the final tokens.
///
/// `token_head` scores the surviving tokens and unmerges the scores;
/// `spatial_head` unmerges the tokens first. Each grid cell's scores fill its
/// p×p pixel block.
pub fn decode(ts: &TokenSet, cfg: &EncoderConfig, w: &WeightBundle) -> Result<ClassScores> {
    if ts.grid_h != cfg.grid_h() || ts.grid_w != cfg.grid_w() {
        return Err(AlgmError::Shape(format!(
            "token grid is {}x{}, configuration expects {}x{}",
            ts.grid_h,
            ts.grid_w,
            cfg.grid_h(),
            cfg.grid_w()
        )));
    }
    let grid_scores: Matrix = match cfg.decoder_kind {
        DecoderKind::TokenHead => {
            ts.validate()?;
            let scores = linear(&ts.tokens, &w.head_w, &w.head_b)?;
            scores.select_rows(&ts.record.assignment)
        }
        DecoderKind::SpatialHead => linear(&unmerge(ts)?, &w.head_w, &w.head_b)?,
    };
    let (h, wd, p, c) = (cfg.image_h, cfg.image_w, cfg.patch_size, cfg.num_classes);
    let gw = cfg.grid_w();
    let mut data = vec![0.0f32; c * h * wd];
    for y in 0..h {
        for x in 0..wd {
            let row = grid_scores.row((y / p) * gw + x / p);
            for (class, &s) in row.iter().enumerate() {
                data[(class * h + y) * wd + x] = s;
            }
        }
    }
    Ok(ClassScores { classes: c, height: h, width: wd, data })
}
