//! Similarity-threshold calibration.
//!
//! Baseline passes over a calibration set collect cosine similarities of the
//! post-attention tokens at every merge site: pairs inside each local window
//! for the local site, all token pairs for the global sites. The threshold is
//! `mean + std` (population convention), clamped to `[-1, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AlgmError, Result};
use crate::exec;
use crate::merge::{window_members, MergeSite};
use crate::numkernel::{cosine_rows_f64, row_norms, Matrix, Rng};
use crate::vit::{observe_baseline, EncoderConfig, Image, Threshold, WeightBundle, Window};

pub const HISTOGRAM_BINS: usize = 64;
/// Token count above which all-pairs statistics are subsampled.
pub const SUBSAMPLE_ABOVE_TOKENS: usize = 4096;
/// Pairs drawn per image when subsampling.
pub const SUBSAMPLE_PAIRS: u64 = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PerSite,
    Global,
}

impl std::str::FromStr for Scope {
    type Err = AlgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_site" => Ok(Scope::PerSite),
            "global" => Ok(Scope::Global),
            other => Err(AlgmError::Argument(format!("unknown scope `{other}` (expected per_site or global)"))),
        }
    }
}

/// Single-pass mean/variance (Welford) with a fixed histogram over `[-1, 1]`.
///
/// Partial accumulators combine with [`StreamingStats::merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingStats {
    count: u64,
    mean: f64,
    m2: f64,
    histogram: [u64; HISTOGRAM_BINS],
}

impl Default for StreamingStats {
    fn default() -> Self {
        StreamingStats { count: 0, mean: 0.0, m2: 0.0, histogram: [0; HISTOGRAM_BINS] }
    }
}

/// Histogram bin of a similarity; values outside `[-1, 1]` land in the edge bins.
pub fn histogram_bin(x: f64) -> usize {
    let b = ((x + 1.0) * 0.5 * HISTOGRAM_BINS as f64).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else {
        (b as usize).min(HISTOGRAM_BINS - 1)
    }
}

impl StreamingStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        self.histogram[histogram_bin(x)] += 1;
    }

    /// Combines two partial accumulators (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &StreamingStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }

    pub fn histogram(&self) -> &[u64; HISTOGRAM_BINS] {
        &self.histogram
    }

    /// `clamp(mean + std, -1, 1)`.
    pub fn threshold(&self) -> f64 {
        (self.mean + self.std()).clamp(-1.0, 1.0)
    }
}

/// Similarities of every unordered pair inside each window of the grid.
pub fn window_pair_stats(tokens: &Matrix, grid_h: usize, grid_w: usize, window: Window) -> Result<StreamingStats> {
    if tokens.rows() != grid_h * grid_w {
        return Err(AlgmError::Shape(format!("{} tokens for a {grid_h}x{grid_w} grid", tokens.rows())));
    }
    let windows = window_members(grid_h, grid_w, window)?;
    let norms = row_norms(tokens);
    let mut acc = StreamingStats::new();
    for m in &windows {
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                acc.push(cosine_rows_f64(tokens, &norms, i, j));
            }
        }
    }
    Ok(acc)
}

/// Similarities of all unordered token pairs, or of `max_pairs` uniformly
/// drawn pairs when the set has more than [`SUBSAMPLE_ABOVE_TOKENS`] rows.
pub fn all_pair_stats(tokens: &Matrix, max_pairs: u64, rng: &mut Rng) -> StreamingStats {
    let n = tokens.rows();
    let norms = row_norms(tokens);
    if n > SUBSAMPLE_ABOVE_TOKENS {
        let mut acc = StreamingStats::new();
        for _ in 0..max_pairs {
            let i = rng.below(n);
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            acc.push(cosine_rows_f64(tokens, &norms, i, j));
        }
        return acc;
    }
    let rows: Vec<StreamingStats> = exec::map_range(n, |i| {
        let mut acc = StreamingStats::new();
        for j in i + 1..n {
            acc.push(cosine_rows_f64(tokens, &norms, i, j));
        }
        acc
    });
    let mut acc = StreamingStats::new();
    for r in &rows {
        acc.merge(r);
    }
    acc
}

/// Statistics and threshold of one merge site (or of all sites pooled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCalibration {
    pub site: MergeSite,
    pub layer: usize,
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
    pub count: u64,
    pub histogram: Vec<u64>,
}

impl SiteCalibration {
    fn from_stats(site: MergeSite, layer: usize, s: &StreamingStats) -> Self {
        SiteCalibration {
            site,
            layer,
            mu: s.mean(),
            sigma: s.std(),
            tau: s.threshold(),
            count: s.count(),
            histogram: s.histogram().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub subsample_above_tokens: usize,
    pub max_pairs_per_image: u64,
    pub seed: u64,
    pub subsampled: bool,
}

/// Result of a calibration run, serialized as the calibration JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub scope: Scope,
    pub images: usize,
    pub sites: Vec<SiteCalibration>,
    /// Pooled statistics over every site; present for the global scope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<SiteCalibration>,
    /// Threshold for the local site.
    pub tau_clap: Option<f64>,
    /// Threshold for the global sites. With several global sites under the
    /// per-site scope, their pooled statistics give this value.
    pub tau_gbm: Option<f64>,
    pub sampling: Sampling,
}

impl Calibration {
    /// Replaces `Auto` thresholds (or all thresholds, with `overwrite`) in `cfg`.
    pub fn apply(&self, cfg: &EncoderConfig, overwrite: bool) -> EncoderConfig {
        let mut out = cfg.clone();
        if let Some(t) = self.tau_clap {
            if overwrite || out.tau_clap == Threshold::Auto {
                out.tau_clap = Threshold::Value(t as f32);
            }
        }
        if let Some(t) = self.tau_gbm {
            if overwrite || out.tau_gbm == Threshold::Auto {
                out.tau_gbm = Threshold::Value(t as f32);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AlgmError::config(&format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AlgmError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Per-site statistics gathered from one or more images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteStats {
    pub clap: Option<(usize, StreamingStats)>,
    pub gbm: Vec<(usize, StreamingStats)>,
    pub subsampled: bool,
}

impl SiteStats {
    fn merge(&mut self, other: &SiteStats) {
        match (&mut self.clap, &other.clap) {
            (Some((_, a)), Some((_, b))) => a.merge(b),
            (None, Some(b)) => self.clap = Some(b.clone()),
            _ => {}
        }
        for (layer, s) in &other.gbm {
            match self.gbm.iter_mut().find(|(l, _)| l == layer) {
                Some((_, a)) => a.merge(s),
                None => self.gbm.push((*layer, s.clone())),
            }
        }
        self.subsampled |= other.subsampled;
    }

    /// Turns pooled statistics into a calibration.
    pub fn finish(&self, scope: Scope, images: usize, seed: u64) -> Calibration {
        let mut sites = Vec::new();
        if let Some((layer, s)) = &self.clap {
            sites.push(SiteCalibration::from_stats(MergeSite::Clap, *layer, s));
        }
        let mut gbm_pool = StreamingStats::new();
        for (layer, s) in &self.gbm {
            sites.push(SiteCalibration::from_stats(MergeSite::Gbm, *layer, s));
            gbm_pool.merge(s);
        }
        let sampling = Sampling {
            subsample_above_tokens: SUBSAMPLE_ABOVE_TOKENS,
            max_pairs_per_image: SUBSAMPLE_PAIRS,
            seed,
            subsampled: self.subsampled,
        };
        let has_gbm = !self.gbm.is_empty();
        match scope {
            Scope::PerSite => Calibration {
                scope,
                images,
                tau_clap: self.clap.as_ref().map(|(_, s)| s.threshold()),
                tau_gbm: has_gbm.then(|| gbm_pool.threshold()),
                sites,
                global: None,
                sampling,
            },
            Scope::Global => {
                let mut all = gbm_pool.clone();
                if let Some((_, s)) = &self.clap {
                    all.merge(s);
                }
                let global = SiteCalibration::from_stats(MergeSite::Gbm, 0, &all);
                let tau = global.tau;
                Calibration {
                    scope,
                    images,
                    tau_clap: self.clap.is_some().then_some(tau),
                    tau_gbm: has_gbm.then_some(tau),
                    sites,
                    global: Some(global),
                    sampling,
                }
            }
        }
    }
}

/// Collects site statistics from one baseline pass.
pub fn image_site_stats(
    image: &Image,
    cfg: &EncoderConfig,
    w: &WeightBundle,
    seed: u64,
    image_index: usize,
) -> Result<SiteStats> {
    let mut stats = SiteStats::default();
    let mut failure = None;
    let mut rng = Rng::stream(seed, image_index as u64);
    let last = cfg.gbm_layers.iter().copied().chain(cfg.clap_layer).max().unwrap_or(0);
    observe_baseline(image, cfg, w, last, &mut |layer, ts| {
        if cfg.clap_layer == Some(layer) {
            match window_pair_stats(&ts.tokens, ts.grid_h, ts.grid_w, cfg.clap_window) {
                Ok(s) => stats.clap = Some((layer, s)),
                Err(e) => failure = Some(e),
            }
        } else if cfg.is_gbm_layer(layer) {
            stats.subsampled |= ts.len() > SUBSAMPLE_ABOVE_TOKENS;
            stats.gbm.push((layer, all_pair_stats(&ts.tokens, SUBSAMPLE_PAIRS, &mut rng)));
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

/// Thresholds from baseline passes over `images`.
pub fn calibrate_threshold(
    cfg: &EncoderConfig,
    w: &WeightBundle,
    images: &[Image],
    scope: Scope,
    seed: u64,
) -> Result<Calibration> {
    if images.is_empty() {
        return Err(AlgmError::Argument("calibration needs at least one image".into()));
    }
    let per_image: Vec<SiteStats> = exec::map_range(images.len(), |i| image_site_stats(&images[i], cfg, w, seed, i))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut pooled = SiteStats::default();
    for s in &per_image {
        pooled.merge(s);
    }
    Ok(pooled.finish(scope, images.len(), seed))
}
