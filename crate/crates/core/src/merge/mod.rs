//! Token merging: windowed local merging (CLAP), threshold-gated bipartite
//! global merging (GBM), and index-tracked unmerging.

mod clap;
mod gbm;
mod record;

pub use clap::{clap_candidates, clap_merge, window_members, window_scores, ClapParams};
pub use gbm::{gbm_best_edges, gbm_candidates, gbm_merge, gbm_select, BestEdge, GbmParams};
pub use record::{compose, MergeEvent, MergeRecord, MergeSite};

use serde::{Deserialize, Serialize};

use crate::error::{AlgmError, Result};
use crate::numkernel::Matrix;
use crate::vit::TokenSet;

/// How a group of mergeable tokens is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOp {
    /// Replace the group by its mean.
    #[default]
    Average,
    /// Replace the group by one seeded-random member.
    RandomPick,
    /// Write the mean back to every member; the token count does not change.
    Replicate,
}

impl std::str::FromStr for MergeOp {
    type Err = AlgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(MergeOp::Average),
            "random_pick" => Ok(MergeOp::RandomPick),
            "replicate" => Ok(MergeOp::Replicate),
            other => Err(AlgmError::Argument(format!(
                "unknown merge op `{other}` (expected average, random_pick or replicate)"
            ))),
        }
    }
}

/// Result of one merge step.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub tokens: Matrix,
    pub cluster_sizes: Vec<u32>,
    /// Original position → token index after this step.
    pub record: MergeRecord,
    /// Token index before the step → token index after it.
    pub step: Vec<usize>,
    /// Windows (local) or A-tokens (global) merged in this step.
    pub merged: usize,
    /// Groups merged in this step, also appended to `record.history`.
    pub events: Vec<MergeEvent>,
}

impl MergeOutcome {
    pub fn into_token_set(self, grid_h: usize, grid_w: usize) -> TokenSet {
        TokenSet {
            tokens: self.tokens,
            grid_h,
            grid_w,
            cluster_sizes: self.cluster_sizes,
            record: self.record,
        }
    }

    pub(crate) fn unchanged(ts: &TokenSet) -> Self {
        MergeOutcome {
            tokens: ts.tokens.clone(),
            cluster_sizes: ts.cluster_sizes.clone(),
            record: ts.record.clone(),
            step: (0..ts.len()).collect(),
            merged: 0,
            events: Vec::new(),
        }
    }

    /// Assembles an outcome from the pre-step set and the step mapping.
    pub(crate) fn assemble(
        ts: &TokenSet,
        tokens: Matrix,
        cluster_sizes: Vec<u32>,
        step: Vec<usize>,
        merged: usize,
        events: Vec<MergeEvent>,
    ) -> Self {
        let mut record = MergeRecord {
            assignment: ts.record.assignment.iter().map(|&a| step[a]).collect(),
            history: ts.record.history.clone(),
        };
        record.history.extend(events.iter().cloned());
        MergeOutcome { tokens, cluster_sizes, record, step, merged, events }
    }
}

/// Restores one row per original token position.
pub fn unmerge(ts: &TokenSet) -> Result<Matrix> {
    ts.record.validate(ts.grid_h * ts.grid_w, ts.tokens.rows())?;
    Ok(ts.tokens.select_rows(&ts.record.assignment))
}

/// Token count a batch keeps at a merge site: the largest per-image count.
pub fn batch_merge_count(per_image_counts: &[usize]) -> Result<usize> {
    per_image_counts
        .iter()
        .copied()
        .max()
        .ok_or_else(|| AlgmError::Argument("batch_merge_count needs at least one image".into()))
}
