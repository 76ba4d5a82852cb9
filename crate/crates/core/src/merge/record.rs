use serde::{Deserialize, Serialize};

use crate::error::{AlgmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeSite {
    Clap,
    Gbm,
}

/// One group of tokens collapsing into a single survivor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub site: MergeSite,
    pub layer: usize,
    /// Index of the surviving token after the step.
    pub survivor: usize,
    /// Indices before the step of every token in the group, ascending.
    pub members: Vec<usize>,
}

/// Original token position → current token index.
///
/// `history` is informational; unmerging reads only `assignment`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergeRecord {
    pub assignment: Vec<usize>,
    #[serde(default)]
    pub history: Vec<MergeEvent>,
}

impl MergeRecord {
    pub fn identity(n: usize) -> Self {
        MergeRecord { assignment: (0..n).collect(), history: Vec::new() }
    }

    pub fn original_len(&self) -> usize {
        self.assignment.len()
    }

    /// Number of distinct current tokens, assuming the record is valid.
    pub fn current_len(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    pub fn is_identity(&self) -> bool {
        self.assignment.iter().enumerate().all(|(i, &a)| i == a)
    }

    /// Checks that every entry is below `current` and every current index is used.
    pub fn validate(&self, original: usize, current: usize) -> Result<()> {
        if self.assignment.len() != original {
            return Err(AlgmError::Integrity(format!(
                "record covers {} original positions, expected {original}",
                self.assignment.len()
            )));
        }
        let mut seen = vec![false; current];
        for (i, &a) in self.assignment.iter().enumerate() {
            if a >= current {
                return Err(AlgmError::Integrity(format!(
                    "original position {i} maps to token {a}, but only {current} tokens exist"
                )));
            }
            seen[a] = true;
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(AlgmError::Integrity(format!("token {orphan} owns no original position")));
        }
        Ok(())
    }

    /// Cluster size of each current token.
    pub fn cluster_sizes(&self, current: usize) -> Vec<u32> {
        let mut sizes = vec![0u32; current];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Record of applying `a` and then `b`: `assignment[i] = b[a[i]]`.
pub fn compose(a: &MergeRecord, b: &MergeRecord) -> Result<MergeRecord> {
    let assignment = a
        .assignment
        .iter()
        .enumerate()
        .map(|(i, &mid)| {
            b.assignment.get(mid).copied().ok_or_else(|| {
                AlgmError::Integrity(format!(
                    "position {i} maps to token {mid}, outside the {} tokens of the second record",
                    b.assignment.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut history = a.history.clone();
    history.extend(b.history.iter().cloned());
    Ok(MergeRecord { assignment, history })
}
