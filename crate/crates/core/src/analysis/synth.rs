use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{AlgmError, Result};
use crate::numkernel::{layer_norm, linear, Matrix, Rng};
use crate::vit::{EncoderConfig, Image, WeightBundle};

use super::LabeledImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// A few axis-aligned rectangles per image.
    #[default]
    Blocky,
    /// Parallel stripes of varying width.
    Striped,
}

impl std::str::FromStr for Structure {
    type Err = AlgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blocky" => Ok(Structure::Blocky),
            "striped" => Ok(Structure::Striped),
            other => Err(AlgmError::Argument(format!("unknown structure `{other}` (expected blocky or striped)"))),
        }
    }
}

/// Synthetic labeled-image generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub n_images: usize,
    pub classes: usize,
    #[serde(default)]
    pub structure: Structure,
    /// Standard deviation of per-pixel Gaussian noise.
    #[serde(default)]
    pub noise: f64,
    /// Amplitude of a smooth per-class color field, so that same-class
    /// pixels far apart differ more than neighbours do.
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Region boundaries fall on multiples of this many pixels.
    #[serde(default = "default_align")]
    pub align: usize,
}

fn default_side() -> usize {
    64
}

fn default_align() -> usize {
    1
}

impl SynthParams {
    pub fn new(seed: u64, n_images: usize, classes: usize, structure: Structure, noise: f64) -> Self {
        SynthParams {
            seed,
            n_images,
            classes,
            structure,
            noise,
            drift: 0.0,
            height: default_side(),
            width: default_side(),
            align: default_align(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |p: &str, m: &str| Err(AlgmError::config(p, m));
        if self.classes == 0 {
            return bad("classes", "must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be finite and non-negative");
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return bad("drift", "must be finite and non-negative");
        }
        if self.height == 0 || self.width == 0 {
            return bad("height", "image sides must be positive");
        }
        if self.align == 0 || self.height % self.align != 0 || self.width % self.align != 0 {
            return bad("align", "must divide both image sides");
        }
        Ok(())
    }
}

/// Distinct class colors in `[0.1, 0.9]^3`, fixed by `seed`.
pub fn class_prototypes(seed: u64, classes: usize) -> Vec<[f32; 3]> {
    let mut rng = Rng::stream(seed, 0);
    let mut out: Vec<[f32; 3]> = Vec::with_capacity(classes);
    while out.len() < classes {
        let mut best = [0.0f32; 3];
        let mut best_gap = -1.0f64;
        // Keep the candidate farthest from the colors chosen so far.
        for _ in 0..16 {
            let c = [0, 1, 2].map(|_| rng.uniform(0.1, 0.9));
            let gap = out
                .iter()
                .map(|o| o.iter().zip(&c).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if gap > best_gap {
                best_gap = gap;
                best = c;
            }
        }
        out.push(best);
    }
    out
}

/// Sorted cut positions on multiples of `align`, strictly inside `(0, len)`.
fn cuts(rng: &mut Rng, len: usize, align: usize, count: usize) -> Vec<usize> {
    let slots = len / align;
    let mut out: Vec<usize> = Vec::new();
    if slots < 2 {
        return out;
    }
    for _ in 0..count {
        let c = (1 + rng.below(slots - 1)) * align;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.sort_unstable();
    out
}

fn segment(cuts: &[usize], v: usize) -> usize {
    cuts.iter().take_while(|&&c| c <= v).count()
}

fn layout(p: &SynthParams, rng: &mut Rng) -> Vec<u32> {
    let (h, w, c) = (p.height, p.width, p.classes);
    let mut labels = vec![0u32; h * w];
    match p.structure {
        Structure::Blocky => {
            let ny = 1 + rng.below(3);
            let ys = cuts(rng, h, p.align, ny);
            let nx = 1 + rng.below(3);
            let xs = cuts(rng, w, p.align, nx);
            let cells = (ys.len() + 1) * (xs.len() + 1);
            let mut cls: Vec<u32> = (0..cells).map(|_| rng.below(c) as u32).collect();
            if c > 1 && cells > 1 && cls.iter().all(|&v| v == cls[0]) {
                let last = cells - 1;
                cls[last] = ((cls[0] as usize + 1) % c) as u32;
            }
            for y in 0..h {
                let sy = segment(&ys, y);
                for x in 0..w {
                    labels[y * w + x] = cls[sy * (xs.len() + 1) + segment(&xs, x)];
                }
            }
        }
        Structure::Striped => {
            let vertical = rng.below(2) == 1;
            let len = if vertical { w } else { h };
            let max_units = (len / p.align / 4).max(1);
            let start = rng.below(c);
            let mut bounds = Vec::new();
            let mut pos = 0;
            while pos < len {
                pos += (1 + rng.below(max_units)) * p.align;
                bounds.push(pos.min(len));
            }
            for y in 0..h {
                for x in 0..w {
                    let v = if vertical { x } else { y };
                    let stripe = bounds.iter().take_while(|&&b| b <= v).count();
                    labels[y * w + x] = ((start + stripe) % p.classes) as u32;
                }
            }
        }
    }
    labels
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

/// One low-frequency wave per class and channel.
struct Field {
    fy: f64,
    fx: f64,
    phase: f64,
}

/// Deterministic labeled images: each pixel is its class color plus a smooth
/// per-class drift and Gaussian noise.
pub fn synth_dataset(p: &SynthParams) -> Result<Vec<LabeledImage>> {
    p.validate()?;
    let protos = class_prototypes(p.seed, p.classes);
    (0..p.n_images)
        .map(|i| {
            let mut rng = Rng::stream(p.seed, 1 + i as u64);
            let labels = layout(p, &mut rng);
            let fields: Vec<[Field; 3]> = (0..p.classes)
                .map(|_| {
                    [0, 1, 2].map(|_| Field {
                        fy: uniform(&mut rng, 0.25, 1.0) * if rng.below(2) == 0 { 1.0 } else { -1.0 },
                        fx: uniform(&mut rng, 0.25, 1.0) * if rng.below(2) == 0 { 1.0 } else { -1.0 },
                        phase: uniform(&mut rng, 0.0, TAU),
                    })
                })
                .collect();
            let mut image = Image::zeros(p.height, p.width);
            for y in 0..p.height {
                for x in 0..p.width {
                    let c = labels[y * p.width + x] as usize;
                    let mut rgb = protos[c];
                    for (ch, v) in rgb.iter_mut().enumerate() {
                        let f = &fields[c][ch];
                        let wave = if p.drift > 0.0 {
                            p.drift
                                * (TAU * (f.fy * y as f64 / p.height as f64 + f.fx * x as f64 / p.width as f64)
                                    + f.phase)
                                    .sin()
                        } else {
                            0.0
                        };
                        let noise = if p.noise > 0.0 { p.noise * rng.normal() } else { 0.0 };
                        *v = (*v as f64 + wave + noise) as f32;
                    }
                    image.set_pixel(y, x, rgb);
                }
            }
            LabeledImage::new(image, labels)
        })
        .collect()
}

/// Weights whose MLPs push every token towards its class direction, so class
/// separation grows with depth. Attention is disabled (zero weights), so each
/// layer's post-attention tokens equal its input.
///
/// `prototypes` are the class colors the class directions are derived from.
pub fn class_aligned_bundle(cfg: &EncoderConfig, prototypes: &[[f32; 3]], seed: u64) -> Result<WeightBundle> {
    cfg.validate()?;
    let c = prototypes.len();
    if c == 0 || c > cfg.mlp_hidden() {
        return Err(AlgmError::Argument(format!(
            "{c} classes need 1..={} hidden units",
            cfg.mlp_hidden()
        )));
    }
    let mut w = WeightBundle::init_random(cfg, seed)?;
    let d = cfg.dim;
    let area = cfg.patch_size * cfg.patch_size;
    let flat = Matrix::from_fn(c, cfg.patch_len(), |k, j| prototypes[k][j % 3]);
    debug_assert_eq!(cfg.patch_len(), area * 3);
    let v = linear(&flat, &w.patch_w, &w.patch_b)?;
    let ln = layer_norm(&v, &vec![1.0; d], &vec![0.0; d], cfg.ln_eps)?;
    let token_norm = v.row_iter().map(|r| r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()).sum::<f64>()
        / c as f64;

    let mean: Vec<f64> = (0..d).map(|j| (0..c).map(|k| ln.get(k, j) as f64).sum::<f64>() / c as f64).collect();
    let u: Vec<Vec<f64>> = (0..c).map(|k| (0..d).map(|j| ln.get(k, j) as f64 - mean[j]).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut fc1 = Matrix::zeros(d, cfg.mlp_hidden());
    let mut fc1_b = vec![0.0f32; cfg.mlp_hidden()];
    let mut fc2 = Matrix::zeros(cfg.mlp_hidden(), d);
    if c > 1 {
        for k in 0..c {
            let uu = dot(&u[k], &u[k]);
            if uu <= 1e-12 {
                continue;
            }
            let ln_row = |m: usize| (0..d).map(|j| ln.get(m, j) as f64).collect::<Vec<_>>();
            let own = dot(&u[k], &ln_row(k)) / uu;
            let other = (0..c).filter(|&m| m != k).map(|m| dot(&u[k], &ln_row(m)) / uu).fold(f64::MIN, f64::max);
            if own - other <= 1e-9 {
                continue;
            }
            // Own class lands at +4 before the activation, the nearest other class at -4.
            let beta = 8.0 / (own - other);
            for j in 0..d {
                fc1.set(j, k, (beta * u[k][j] / uu) as f32);
            }
            fc1_b[k] = (-beta * (own + other) / 2.0) as f32;
            let scale = 0.5 * token_norm / 4.0 / uu.sqrt();
            for j in 0..d {
                fc2.set(k, j, (scale * u[k][j]) as f32);
            }
        }
    }
    for l in &mut w.layers {
        l.qkv_w.data_mut().fill(0.0);
        l.qkv_b.fill(0.0);
        l.proj_w.data_mut().fill(0.0);
        l.proj_b.fill(0.0);
        l.fc1_w = fc1.clone();
        l.fc1_b = fc1_b.clone();
        l.fc2_w = fc2.clone();
        l.fc2_b.fill(0.0);
    }
    Ok(w)
}
