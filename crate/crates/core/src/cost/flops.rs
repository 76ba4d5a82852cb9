use serde::{Deserialize, Serialize};

use crate::error::{AlgmError, Result};
use crate::merge::MergeSite;
use crate::vit::{EncoderConfig, TokenSchedule};

pub const MAC_CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; softmax, layer norm and GELU excluded";

/// Decoder cost profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecoderCost {
    /// Per-token linear class head over all N unmerged positions: `N·d·C`.
    #[default]
    LinearHead,
    /// Analytic mask-transformer decoder (width d) over the N patch tokens
    /// plus C class embeddings: input projection `N·d²`, `layers` blocks on
    /// `T = N + C` tokens (`12·T·d² + 2·T²·d` each), patch and class output
    /// projections `N·d² + C·d²`, and the mask product `N·C·d`.
    MaskTransformer { layers: usize },
}

impl DecoderCost {
    pub fn macs(self, n: u64, d: u64, classes: u64) -> u64 {
        match self {
            DecoderCost::LinearHead => n * d * classes,
            DecoderCost::MaskTransformer { layers } => {
                let t = n + classes;
                let blocks = layers as u64 * (12 * t * d * d + 2 * t * t * d);
                n * d * d + blocks + n * d * d + classes * d * d + n * classes * d
            }
        }
    }
}

/// MACs of one layer's attention and MLP blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: usize,
    pub tokens_mhsa: usize,
    pub tokens_mlp: usize,
    pub mhsa: u64,
    pub mlp: u64,
}

/// Similarity MACs spent by one merge module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteMacs {
    pub site: MergeSite,
    pub layer: usize,
    pub tokens_in: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub convention: String,
    /// Attention plus MLP MACs per layer.
    pub per_layer: Vec<u64>,
    pub layers: Vec<LayerMacs>,
    pub patch_embed: u64,
    pub decoder: u64,
    pub decoder_cost: DecoderCost,
    pub merge_overhead: u64,
    pub merge_sites: Vec<SiteMacs>,
    pub total_macs: u64,
    pub total_gflops: f64,
}

/// `(attention, mlp)` MACs for `n` tokens of width `d`.
///
/// Attention: `4·n·d²` for the q/k/v/output projections plus `2·n²·d` for
/// the score and value products. MLP: `2·n·d·hidden`.
pub fn layer_macs(n: u64, d: u64, hidden: u64) -> (u64, u64) {
    (4 * n * d * d + 2 * n * n * d, 2 * n * d * hidden)
}

/// MAC count of a forward pass with the given realized schedule.
pub fn flops_encoder(cfg: &EncoderConfig, schedule: &TokenSchedule, decoder: DecoderCost) -> Result<FlopsReport> {
    let n = cfg.num_tokens();
    if schedule.layers.len() != cfg.depth {
        return Err(AlgmError::Shape(format!(
            "schedule has {} layers, configuration has {}",
            schedule.layers.len(),
            cfg.depth
        )));
    }
    if schedule.original != n {
        return Err(AlgmError::Shape(format!("schedule starts at {} tokens, configuration has {n}", schedule.original)));
    }
    let d = cfg.dim as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let mut layers = Vec::with_capacity(cfg.depth);
    for (i, l) in schedule.layers.iter().enumerate() {
        if l.mhsa > n || l.mlp > n || l.out > l.mlp || l.mlp > l.mhsa {
            return Err(AlgmError::Shape(format!("layer {} has inconsistent token counts {l:?}", i + 1)));
        }
        let (mhsa, _) = layer_macs(l.mhsa as u64, d, hidden);
        let (_, mlp) = layer_macs(l.mlp as u64, d, hidden);
        layers.push(LayerMacs { layer: i + 1, tokens_mhsa: l.mhsa, tokens_mlp: l.mlp, mhsa, mlp });
    }
    let merge_sites: Vec<SiteMacs> = schedule
        .sites
        .iter()
        .map(|s| {
            let t = s.tokens_in as u64;
            let macs = match s.site {
                MergeSite::Clap => {
                    let area = cfg.clap_window.area() as u64;
                    (t / area) * (area * (area - 1) / 2) * d
                }
                // Both sides hold floor(t/2) tokens; an odd trailing token is left out.
                MergeSite::Gbm => (t / 2) * (t / 2) * d,
            };
            SiteMacs { site: s.site, layer: s.layer, tokens_in: s.tokens_in, macs }
        })
        .collect();
    let per_layer: Vec<u64> = layers.iter().map(|l| l.mhsa + l.mlp).collect();
    let patch_embed = n as u64 * d * cfg.patch_len() as u64;
    let decoder_macs = decoder.macs(n as u64, d, cfg.num_classes as u64);
    let merge_overhead: u64 = merge_sites.iter().map(|s| s.macs).sum();
    let total = per_layer.iter().sum::<u64>() + patch_embed + decoder_macs + merge_overhead;
    Ok(FlopsReport {
        convention: MAC_CONVENTION.to_string(),
        per_layer,
        layers,
        patch_embed,
        decoder: decoder_macs,
        decoder_cost: decoder,
        merge_overhead,
        merge_sites,
        total_macs: total,
        total_gflops: total as f64 / 1e9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::MergeSite;
    use crate::vit::{LayerTokens, SiteCount};

    #[test]
    fn hand_example() {
        assert_eq!(layer_macs(2, 2, 8), (48, 64));
    }

    #[test]
    fn single_layer_report_adds_up() {
        let cfg = EncoderConfig::new(8, 4, 4, 1, 2, 1, vec![], 3);
        let r = flops_encoder(&cfg, &TokenSchedule::uniform(2, 1), DecoderCost::LinearHead).unwrap();
        assert_eq!(r.per_layer, vec![112]);
        assert_eq!(r.patch_embed, 2 * 2 * 48);
        assert_eq!(r.decoder, 2 * 2 * 3);
        assert_eq!(r.total_macs, 112 + 192 + 12);
    }

    #[test]
    fn merge_overhead_counts() {
        let cfg = EncoderConfig::new(32, 32, 4, 3, 4, 1, vec![2], 2);
        let schedule = TokenSchedule {
            original: 64,
            layers: vec![
                LayerTokens { mhsa: 64, mlp: 16, out: 16 },
                LayerTokens { mhsa: 16, mlp: 9, out: 9 },
                LayerTokens { mhsa: 9, mlp: 9, out: 9 },
            ],
            sites: vec![
                SiteCount { site: MergeSite::Clap, layer: 1, tokens_in: 64, tokens_out: 16 },
                SiteCount { site: MergeSite::Gbm, layer: 2, tokens_in: 16, tokens_out: 9 },
            ],
        };
        let r = flops_encoder(&cfg, &schedule, DecoderCost::LinearHead).unwrap();
        assert_eq!(r.merge_sites[0].macs, 16 * 6 * 4);
        assert_eq!(r.merge_sites[1].macs, 8 * 8 * 4);
        assert_eq!(r.layers[1].tokens_mlp, 9);
        let parts: u64 = r.per_layer.iter().sum::<u64>() + r.patch_embed + r.decoder + r.merge_overhead;
        assert_eq!(parts, r.total_macs);
        assert!(flops_encoder(&cfg, &TokenSchedule::uniform(64, 2), DecoderCost::LinearHead).is_err());
    }
}
