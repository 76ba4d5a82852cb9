//! Intra-class versus inter-class token similarity, locally in k×k windows
//! of the first layer and globally across every layer.

mod synth;

pub use synth::{class_aligned_bundle, synth_dataset, class_prototypes, Structure, SynthParams};

use serde::Serialize;

use crate::error::{AlgmError, Result};
use crate::exec;
use crate::numkernel::{cosine_rows, row_norms, Matrix};
use crate::vit::{observe_baseline, EncoderConfig, Image, WeightBundle};

/// Image with one class id per pixel (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub labels: Vec<u32>,
}

impl LabeledImage {
    pub fn new(image: Image, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != image.height * image.width {
            return Err(AlgmError::Shape(format!(
                "{} labels for a {}x{} image",
                labels.len(),
                image.height,
                image.width
            )));
        }
        Ok(LabeledImage { image, labels })
    }
}

/// Modal label of each p×p patch in raster order; ties go to the lowest id.
pub fn token_label(labels: &[u32], height: usize, width: usize, p: usize) -> Result<Vec<u32>> {
    if p == 0 || height % p != 0 || width % p != 0 || labels.len() != height * width {
        return Err(AlgmError::Shape(format!(
            "{} labels, {height}x{width} map, patch {p}: map must tile into whole patches",
            labels.len()
        )));
    }
    let (gh, gw) = (height / p, width / p);
    let mut out = Vec::with_capacity(gh * gw);
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for ty in 0..gh {
        for tx in 0..gw {
            counts.clear();
            for y in ty * p..(ty + 1) * p {
                for &l in &labels[y * width + tx * p..y * width + (tx + 1) * p] {
                    match counts.iter_mut().find(|(c, _)| *c == l) {
                        Some((_, n)) => *n += 1,
                        None => counts.push((l, 1)),
                    }
                }
            }
            let best = counts.iter().fold((u32::MAX, 0usize), |best, &(c, n)| {
                if n > best.1 || (n == best.1 && c < best.0) {
                    (c, n)
                } else {
                    best
                }
            });
            out.push(best.0);
        }
    }
    Ok(out)
}

/// Similarity curve: one point per window size or per layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimCurve {
    pub x: Vec<usize>,
    /// `None` where no pair of that kind exists.
    pub intra_mean: Vec<Option<f64>>,
    pub inter_mean: Vec<Option<f64>>,
    pub intra_count: Vec<u64>,
    pub inter_count: Vec<u64>,
    /// Points that were skipped, with the reason.
    pub warnings: Vec<String>,
}

impl SimCurve {
    /// `intra_mean - inter_mean` where both exist.
    pub fn gap(&self, i: usize) -> Option<f64> {
        Some(self.intra_mean[i]? - self.inter_mean[i]?)
    }

    /// Index of the point with the given x value.
    pub fn index_of(&self, x: usize) -> Option<usize> {
        self.x.iter().position(|&v| v == x)
    }

    /// CSV with header `window_size_or_layer,intra_mean,inter_mean,intra_count,inter_count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window_size_or_layer,intra_mean,inter_mean,intra_count,inter_count\n");
        let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        for i in 0..self.x.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.x[i],
                opt(self.intra_mean[i]),
                opt(self.inter_mean[i]),
                self.intra_count[i],
                self.inter_count[i]
            ));
        }
        s
    }
}

/// Float with 9 significant digits in scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

const FIXED_SCALE: f64 = (1u64 << 60) as f64;

/// Order-independent similarity sums: each value is rounded once to a
/// multiple of 2^-60 and summed as an integer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct PairSums {
    intra_sum: i128,
    intra_count: u64,
    inter_sum: i128,
    inter_count: u64,
}

impl PairSums {
    fn add(&mut self, same: bool, sim: f32) {
        let q = (sim as f64 * FIXED_SCALE).round() as i128;
        if same {
            self.intra_sum += q;
            self.intra_count += 1;
        } else {
            self.inter_sum += q;
            self.inter_count += 1;
        }
    }

    fn merge(&mut self, o: &PairSums) {
        self.intra_sum += o.intra_sum;
        self.intra_count += o.intra_count;
        self.inter_sum += o.inter_sum;
        self.inter_count += o.inter_count;
    }

    fn mean(sum: i128, count: u64) -> Option<f64> {
        (count > 0).then(|| (sum as f64 / FIXED_SCALE / count as f64).clamp(-1.0, 1.0))
    }
}

fn pair_sums_in(tokens: &Matrix, labels: &[u32], groups: &[Vec<usize>]) -> PairSums {
    let norms = row_norms(tokens);
    let mut s = PairSums::default();
    for g in groups {
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                s.add(labels[i] == labels[j], cosine_rows(tokens, &norms, i, j));
            }
        }
    }
    s
}

fn all_pair_sums(tokens: &Matrix, labels: &[u32]) -> PairSums {
    let n = tokens.rows();
    let norms = row_norms(tokens);
    let rows = exec::map_range(n, |i| {
        let mut s = PairSums::default();
        for j in i + 1..n {
            s.add(labels[i] == labels[j], cosine_rows(tokens, &norms, i, j));
        }
        s
    });
    rows.iter().fold(PairSums::default(), |mut acc, r| {
        acc.merge(r);
        acc
    })
}

/// Non-overlapping k×k windows anchored at the origin; windows that would
/// cross the grid edge are dropped.
fn square_windows(gh: usize, gw: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for wy in 0..gh / k {
        for wx in 0..gw / k {
            out.push((0..k * k).map(|m| (wy * k + m / k) * gw + wx * k + m % k).collect());
        }
    }
    out
}

fn check_data(cfg: &EncoderConfig, data: &[LabeledImage]) -> Result<()> {
    if data.is_empty() {
        return Err(AlgmError::Argument("analysis needs at least one labeled image".into()));
    }
    for (i, d) in data.iter().enumerate() {
        if d.labels.len() != d.image.height * d.image.width {
            return Err(AlgmError::Shape(format!("image {i}: label map does not match the image")));
        }
    }
    cfg.validate()
}

/// Post-attention tokens of layers `1..=upto` from a baseline pass.
fn observed_tokens(img: &Image, cfg: &EncoderConfig, w: &WeightBundle, upto: usize) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(upto);
    observe_baseline(img, cfg, w, upto, &mut |_, ts| out.push(ts.tokens.clone()))?;
    Ok(out)
}

fn finish(x: Vec<usize>, sums: Vec<PairSums>, warnings: Vec<String>) -> SimCurve {
    SimCurve {
        intra_mean: sums.iter().map(|s| PairSums::mean(s.intra_sum, s.intra_count)).collect(),
        inter_mean: sums.iter().map(|s| PairSums::mean(s.inter_sum, s.inter_count)).collect(),
        intra_count: sums.iter().map(|s| s.intra_count).collect(),
        inter_count: sums.iter().map(|s| s.inter_count).collect(),
        x,
        warnings,
    }
}

/// Window-local similarity of first-layer post-attention tokens, one point
/// per window size.
pub fn local_similarity_stats(
    cfg: &EncoderConfig,
    w: &WeightBundle,
    data: &[LabeledImage],
    window_sizes: &[usize],
) -> Result<SimCurve> {
    check_data(cfg, data)?;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut x = Vec::new();
    let mut warnings = Vec::new();
    for &k in window_sizes {
        if k < 2 || k > gh || k > gw {
            warnings.push(format!("window {k} skipped: needs 2 <= k <= {}", gh.min(gw)));
        } else {
            x.push(k);
        }
    }
    let per_image: Vec<Vec<PairSums>> = exec::map_slice(data, |d| -> Result<Vec<PairSums>> {
        let labels = token_label(&d.labels, d.image.height, d.image.width, cfg.patch_size)?;
        let tokens = observed_tokens(&d.image, cfg, w, 1)?.pop().expect("one layer observed");
        Ok(x.iter().map(|&k| pair_sums_in(&tokens, &labels, &square_windows(gh, gw, k))).collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut sums = vec![PairSums::default(); x.len()];
    for img in &per_image {
        for (s, o) in sums.iter_mut().zip(img) {
            s.merge(o);
        }
    }
    Ok(finish(x, sums, warnings))
}

/// All-pairs similarity of post-attention tokens, one point per layer.
pub fn global_similarity_stats(cfg: &EncoderConfig, w: &WeightBundle, data: &[LabeledImage]) -> Result<SimCurve> {
    check_data(cfg, data)?;
    let per_image: Vec<Vec<PairSums>> = exec::map_slice(data, |d| -> Result<Vec<PairSums>> {
        let labels = token_label(&d.labels, d.image.height, d.image.width, cfg.patch_size)?;
        Ok(observed_tokens(&d.image, cfg, w, cfg.depth)?.iter().map(|t| all_pair_sums(t, &labels)).collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut sums = vec![PairSums::default(); cfg.depth];
    for img in &per_image {
        for (s, o) in sums.iter_mut().zip(img) {
            s.merge(o);
        }
    }
    Ok(finish((1..=cfg.depth).collect(), sums, Vec::new()))
}
