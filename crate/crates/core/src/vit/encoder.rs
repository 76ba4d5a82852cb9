use serde::{Deserialize, Serialize};

use crate::error::{AlgmError, Result};
use crate::exec;
use crate::merge::{
    batch_merge_count, clap_candidates, clap_merge, gbm_candidates, gbm_merge, ClapParams, GbmParams, MergeOutcome,
    MergeSite,
};
use crate::numkernel::{gelu_in_place, gemm_f64, layer_norm, linear, Matrix, Rng};

use super::{EncoderConfig, Image, LayerWeights, Placement, TokenSet, WeightBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Baseline,
    Algm,
}

impl std::str::FromStr for Mode {
    type Err = AlgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "algm" => Ok(Mode::Algm),
            other => Err(AlgmError::Argument(format!("unknown mode `{other}` (expected baseline or algm)"))),
        }
    }
}

/// How images in one batch agree on token counts at each merge site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchPolicy {
    /// Every image merges everything above threshold.
    #[default]
    PerImage,
    /// The batch keeps the largest remaining count any image needs; every
    /// image merges only its most similar candidates down to that count.
    BatchMax,
}

/// Token counts entering the MHSA and MLP blocks of one layer, and leaving it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTokens {
    pub mhsa: usize,
    pub mlp: usize,
    pub out: usize,
}

/// Token counts around one merge module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCount {
    pub site: MergeSite,
    pub layer: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
}

/// Realized token counts of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSchedule {
    pub original: usize,
    pub layers: Vec<LayerTokens>,
    pub sites: Vec<SiteCount>,
}

impl TokenSchedule {
    /// Schedule of an unmerged pass.
    pub fn uniform(tokens: usize, depth: usize) -> Self {
        TokenSchedule {
            original: tokens,
            layers: vec![LayerTokens { mhsa: tokens, mlp: tokens, out: tokens }; depth],
            sites: Vec::new(),
        }
    }

    /// Tokens leaving each layer.
    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out).collect()
    }

    pub fn final_count(&self) -> usize {
        self.layers.last().map_or(self.original, |l| l.out)
    }

    /// Count after local merging (N'), or N when no local merge ran.
    pub fn n_prime(&self) -> usize {
        self.sites.iter().find(|s| s.site == MergeSite::Clap).map_or(self.original, |s| s.tokens_out)
    }

    /// Count after the last global merge (N''), or N' when none ran.
    pub fn n_dprime(&self) -> usize {
        self.sites.iter().rev().find(|s| s.site == MergeSite::Gbm).map_or(self.n_prime(), |s| s.tokens_out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub tokens: TokenSet,
    pub schedule: TokenSchedule,
}

fn check_bundle(cfg: &EncoderConfig, w: &WeightBundle) -> Result<()> {
    let have = w.tensors();
    let want = super::tensor_schema(cfg);
    if have.len() != want.len() {
        return Err(AlgmError::Shape(format!(
            "weight bundle has {} tensors, configuration needs {}",
            have.len(),
            want.len()
        )));
    }
    for ((name, dims, _), (wname, wdims)) in have.iter().zip(&want) {
        if dims != wdims {
            return Err(AlgmError::Shape(format!("tensor `{wname}` is {dims:?} ({name}), expected {wdims:?}")));
        }
    }
    Ok(())
}

fn layer_weights<'a>(cfg: &EncoderConfig, w: &'a WeightBundle, layer: usize) -> Result<&'a LayerWeights> {
    if layer == 0 || layer > cfg.depth || layer > w.layers.len() {
        return Err(AlgmError::Precondition(format!("layer {layer} outside 1..={}", cfg.depth)));
    }
    Ok(&w.layers[layer - 1])
}

/// Splits the image into p×p patches, projects them and adds positions.
///
/// Patch vectors are flattened in `(row, column, channel)` order.
pub fn patchify(image: &Image, cfg: &EncoderConfig, w: &WeightBundle) -> Result<TokenSet> {
    if image.height != cfg.image_h || image.width != cfg.image_w || image.data.len() != image.height * image.width * 3 {
        return Err(AlgmError::Shape(format!(
            "image is {}x{}, configuration expects {}x{}",
            image.height, image.width, cfg.image_h, cfg.image_w
        )));
    }
    let p = cfg.patch_size;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut patches = Matrix::zeros(gh * gw, cfg.patch_len());
    for ty in 0..gh {
        for tx in 0..gw {
            let row = patches.row_mut(ty * gw + tx);
            for py in 0..p {
                let src = ((ty * p + py) * image.width + tx * p) * 3;
                row[py * p * 3..(py + 1) * p * 3].copy_from_slice(&image.data[src..src + p * 3]);
            }
        }
    }
    let mut tokens = linear(&patches, &w.patch_w, &w.patch_b)?;
    tokens.add_assign(&w.pos)?;
    TokenSet::from_grid(tokens, gh, gw)
}

/// `x + proj(attention(LN(x)))` over all heads.
pub(crate) fn attention_residual(
    x: &Matrix,
    cluster_sizes: &[u32],
    lw: &LayerWeights,
    cfg: &EncoderConfig,
) -> Result<Matrix> {
    let n = x.rows();
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let h = layer_norm(x, &lw.ln1_g, &lw.ln1_b, cfg.ln_eps)?;
    let qkv = linear(&h, &lw.qkv_w, &lw.qkv_b)?.to_f64();
    let scale = 1.0 / (dh as f64).sqrt();
    let key_bias: Option<Vec<f64>> =
        cfg.size_weighted_attention.then(|| cluster_sizes.iter().map(|&s| (s as f64).ln()).collect());

    let heads: Vec<Vec<f64>> = exec::map_range(cfg.heads, |head| {
        let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
        let mut scores = gemm_f64(n, dh, n, &qkv[qo..], 3 * d, 1, &qkv[ko..], 1, 3 * d);
        for row in scores.chunks_exact_mut(n) {
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if let Some(b) = &key_bias {
                    *s += b[j];
                }
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            row.iter_mut().for_each(|s| *s /= sum);
        }
        gemm_f64(n, n, dh, &scores, n, 1, &qkv[vo..], 3 * d, 1)
    });

    let mut concat = Matrix::zeros(n, d);
    for (head, out) in heads.iter().enumerate() {
        for i in 0..n {
            let dst = &mut concat.row_mut(i)[head * dh..(head + 1) * dh];
            for (o, &v) in dst.iter_mut().zip(&out[i * dh..(i + 1) * dh]) {
                *o = v as f32;
            }
        }
    }
    let y = linear(&concat, &lw.proj_w, &lw.proj_b)?;
    x.add(&y)
}

/// `x + fc2(gelu(fc1(LN(x))))`, applied to each token independently.
pub(crate) fn mlp_residual(x: &Matrix, lw: &LayerWeights, cfg: &EncoderConfig) -> Result<Matrix> {
    let h = layer_norm(x, &lw.ln2_g, &lw.ln2_b, cfg.ln_eps)?;
    let mut hidden = linear(&h, &lw.fc1_w, &lw.fc1_b)?;
    gelu_in_place(&mut hidden);
    let y = linear(&hidden, &lw.fc2_w, &lw.fc2_b)?;
    x.add(&y)
}

/// Pre-norm multi-head self-attention with residual. Count and record are unchanged.
pub fn mhsa_block(ts: &TokenSet, layer: usize, cfg: &EncoderConfig, w: &WeightBundle) -> Result<TokenSet> {
    let lw = layer_weights(cfg, w, layer)?;
    let tokens = attention_residual(&ts.tokens, &ts.cluster_sizes, lw, cfg)?;
    Ok(TokenSet { tokens, ..ts.clone() })
}

/// Pre-norm two-layer GELU MLP with residual.
pub fn mlp_block(ts: &TokenSet, layer: usize, cfg: &EncoderConfig, w: &WeightBundle) -> Result<TokenSet> {
    let lw = layer_weights(cfg, w, layer)?;
    let tokens = mlp_residual(&ts.tokens, lw, cfg)?;
    Ok(TokenSet { tokens, ..ts.clone() })
}

struct Thresholds {
    clap: f32,
    gbm: f32,
}

fn resolve_thresholds(cfg: &EncoderConfig, mode: Mode) -> Result<Thresholds> {
    if mode == Mode::Baseline {
        return Ok(Thresholds { clap: f32::INFINITY, gbm: f32::INFINITY });
    }
    let clap = match (cfg.clap_layer, cfg.tau_clap.value()) {
        (None, _) => f32::INFINITY,
        (Some(_), Some(v)) => v,
        (Some(_), None) => {
            return Err(AlgmError::config("tau_clap", "threshold is `auto`; run calibration or set a value"))
        }
    };
    let gbm = match (cfg.gbm_layers.is_empty(), cfg.tau_gbm.value()) {
        (true, _) => f32::INFINITY,
        (false, Some(v)) => v,
        (false, None) => {
            return Err(AlgmError::config("tau_gbm", "threshold is `auto`; run calibration or set a value"))
        }
    };
    Ok(Thresholds { clap, gbm })
}

/// Encoder pass over one image.
pub fn encoder_forward(image: &Image, cfg: &EncoderConfig, w: &WeightBundle, mode: Mode) -> Result<ForwardOutput> {
    let mut out = forward_impl(std::slice::from_ref(image), cfg, w, mode, BatchPolicy::PerImage, None)?;
    Ok(out.pop().expect("one image in, one output out"))
}

/// Encoder pass that hands the post-MHSA tokens of every layer to `observer`
/// before any merging at that layer.
pub fn encoder_forward_observed(
    image: &Image,
    cfg: &EncoderConfig,
    w: &WeightBundle,
    mode: Mode,
    observer: &mut dyn FnMut(usize, &TokenSet),
) -> Result<ForwardOutput> {
    let mut obs = |_img: usize, layer: usize, ts: &TokenSet| observer(layer, ts);
    let mut out = forward_impl(std::slice::from_ref(image), cfg, w, mode, BatchPolicy::PerImage, Some(&mut obs))?;
    Ok(out.pop().expect("one image in, one output out"))
}

/// Encoder pass over a batch, images processed data-parallel.
pub fn encoder_forward_batch(
    images: &[Image],
    cfg: &EncoderConfig,
    w: &WeightBundle,
    mode: Mode,
    policy: BatchPolicy,
) -> Result<Vec<ForwardOutput>> {
    forward_impl(images, cfg, w, mode, policy, None)
}

/// Baseline pass over layers `1..=upto`, handing each post-attention token
/// set to `observer`. Layers after `upto` are not computed.
pub(crate) fn observe_baseline(
    image: &Image,
    cfg: &EncoderConfig,
    w: &WeightBundle,
    upto: usize,
    observer: &mut dyn FnMut(usize, &TokenSet),
) -> Result<()> {
    cfg.validate()?;
    check_bundle(cfg, w)?;
    let mut ts = patchify(image, cfg, w)?;
    for layer in 1..=upto.min(cfg.depth) {
        let lw = &w.layers[layer - 1];
        ts.tokens = attention_residual(&ts.tokens, &ts.cluster_sizes, lw, cfg)?;
        observer(layer, &ts);
        if layer < upto {
            ts.tokens = mlp_residual(&ts.tokens, lw, cfg)?;
        }
    }
    Ok(())
}

type Observer<'a> = &'a mut dyn FnMut(usize, usize, &TokenSet);

fn forward_impl(
    images: &[Image],
    cfg: &EncoderConfig,
    w: &WeightBundle,
    mode: Mode,
    policy: BatchPolicy,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<ForwardOutput>> {
    cfg.validate()?;
    check_bundle(cfg, w)?;
    let taus = resolve_thresholds(cfg, mode)?;
    let mut sets = exec::map_slice(images, |img| patchify(img, cfg, w)).into_iter().collect::<Result<Vec<_>>>()?;
    let n = cfg.num_tokens();
    let mut schedules: Vec<TokenSchedule> =
        (0..images.len()).map(|_| TokenSchedule { original: n, layers: Vec::new(), sites: Vec::new() }).collect();

    for layer in 1..=cfg.depth {
        let lw = &w.layers[layer - 1];
        let mhsa_counts: Vec<usize> = sets.iter().map(TokenSet::len).collect();
        exec::map_slice_mut(&mut sets, |ts| -> Result<()> {
            ts.tokens = attention_residual(&ts.tokens, &ts.cluster_sizes, lw, cfg)?;
            Ok(())
        })
        .into_iter()
        .collect::<Result<()>>()?;
        if let Some(obs) = observer.as_mut() {
            for (i, ts) in sets.iter().enumerate() {
                obs(i, layer, ts);
            }
        }
        if mode == Mode::Algm && cfg.placement == Placement::BetweenMhsaMlp {
            merge_sites(&mut sets, &mut schedules, layer, cfg, &taus, policy)?;
        }
        let mlp_counts: Vec<usize> = sets.iter().map(TokenSet::len).collect();
        exec::map_slice_mut(&mut sets, |ts| -> Result<()> {
            ts.tokens = mlp_residual(&ts.tokens, lw, cfg)?;
            Ok(())
        })
        .into_iter()
        .collect::<Result<()>>()?;
        if mode == Mode::Algm && cfg.placement == Placement::AfterMlp {
            merge_sites(&mut sets, &mut schedules, layer, cfg, &taus, policy)?;
        }
        for (i, s) in schedules.iter_mut().enumerate() {
            s.layers.push(LayerTokens { mhsa: mhsa_counts[i], mlp: mlp_counts[i], out: sets[i].len() });
        }
    }
    Ok(sets.into_iter().zip(schedules).map(|(tokens, schedule)| ForwardOutput { tokens, schedule }).collect())
}

/// Per-image merge limits for a site; `None` when each image merges freely.
fn batch_limits(
    sets: &[TokenSet],
    policy: BatchPolicy,
    reduction_per_merge: usize,
    candidates: impl Fn(&TokenSet) -> Result<usize>,
) -> Result<Vec<Option<usize>>> {
    if policy == BatchPolicy::PerImage || sets.len() < 2 {
        return Ok(vec![None; sets.len()]);
    }
    let cands = sets.iter().map(&candidates).collect::<Result<Vec<_>>>()?;
    let remaining: Vec<usize> =
        sets.iter().zip(&cands).map(|(ts, &c)| ts.len().saturating_sub(c * reduction_per_merge)).collect();
    let keep = batch_merge_count(&remaining)?;
    Ok(sets.iter().map(|ts| Some(ts.len().saturating_sub(keep) / reduction_per_merge.max(1))).collect())
}

fn merge_sites(
    sets: &mut [TokenSet],
    schedules: &mut [TokenSchedule],
    layer: usize,
    cfg: &EncoderConfig,
    taus: &Thresholds,
    policy: BatchPolicy,
) -> Result<()> {
    let site = if cfg.clap_layer == Some(layer) {
        MergeSite::Clap
    } else if cfg.is_gbm_layer(layer) {
        MergeSite::Gbm
    } else {
        return Ok(());
    };
    // Cosine similarity never exceeds 1 and merging needs a strict excess,
    // so a threshold of 1 or more cannot merge anything: skip the module.
    let tau = if site == MergeSite::Clap { taus.clap } else { taus.gbm };
    if tau >= 1.0 {
        return Ok(());
    }
    let before: Vec<usize> = sets.iter().map(TokenSet::len).collect();
    let outcomes: Vec<Result<MergeOutcome>> = match site {
        MergeSite::Clap => {
            let base = ClapParams { layer, ..ClapParams::new(cfg.clap_window, taus.clap, cfg.merge_op) };
            let limits =
                batch_limits(sets, policy, cfg.clap_window.area().saturating_sub(1), |ts| clap_candidates(ts, &base))?;
            let sets_ref: &[TokenSet] = sets;
            exec::map_range(sets_ref.len(), |i| {
                let params = ClapParams { max_windows: limits[i], ..base.clone() };
                clap_merge(&sets_ref[i], &params, &mut Rng::stream(cfg.merge_seed, layer as u64))
            })
        }
        MergeSite::Gbm => {
            let base = GbmParams {
                layer,
                size_weighted: cfg.gbm_size_weighted,
                ..GbmParams::new(taus.gbm, cfg.merge_op)
            };
            let limits = batch_limits(sets, policy, 1, |ts| Ok(gbm_candidates(ts, base.tau)))?;
            let sets_ref: &[TokenSet] = sets;
            exec::map_range(sets_ref.len(), |i| {
                let params = GbmParams { max_merges: limits[i], ..base.clone() };
                gbm_merge(&sets_ref[i], &params, &mut Rng::stream(cfg.merge_seed, layer as u64))
            })
        }
    };
    for (i, out) in outcomes.into_iter().enumerate() {
        let (gh, gw) = (sets[i].grid_h, sets[i].grid_w);
        sets[i] = out?.into_token_set(gh, gw);
        schedules[i].sites.push(SiteCount { site, layer, tokens_in: before[i], tokens_out: sets[i].len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::unmerge;
    use crate::vit::{Threshold, Window};

    fn small_cfg() -> EncoderConfig {
        // 8x8 grid of 4x4 patches, N = 64.
        EncoderConfig::new(32, 32, 4, 4, 16, 2, vec![3], 3)
    }

    fn random_image(cfg: &EncoderConfig, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let n = cfg.image_h * cfg.image_w * 3;
        Image::new(cfg.image_h, cfg.image_w, (0..n).map(|_| rng.next_f32()).collect()).unwrap()
    }

    /// Scalar-loop reference for one attention block.
    fn naive_attention(x: &Matrix, lw: &LayerWeights, cfg: &EncoderConfig) -> Matrix {
        let n = x.rows();
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let mut ln = vec![vec![0.0f64; d]; n];
        for i in 0..n {
            let r = x.row(i);
            let mean: f64 = r.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                ln[i][j] = (r[j] as f64 - mean) / (var + cfg.ln_eps).sqrt() * lw.ln1_g[j] as f64 + lw.ln1_b[j] as f64;
            }
        }
        let mut qkv = vec![vec![0.0f64; 3 * d]; n];
        for i in 0..n {
            for o in 0..3 * d {
                let mut s = lw.qkv_b[o] as f64;
                for j in 0..d {
                    s += ln[i][j] * lw.qkv_w.get(j, o) as f64;
                }
                qkv[i][o] = s;
            }
        }
        let mut concat = vec![vec![0.0f64; d]; n];
        for h in 0..cfg.heads {
            for i in 0..n {
                let mut logits = vec![0.0f64; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
                    }
                    *l = s / (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..n {
                    let p = (logits[j] - m).exp() / z;
                    for c in 0..dh {
                        concat[i][h * dh + c] += p * qkv[j][2 * d + h * dh + c];
                    }
                }
            }
        }
        Matrix::from_fn(n, d, |i, o| {
            let mut s = lw.proj_b[o] as f64;
            for j in 0..d {
                s += concat[i][j] * lw.proj_w.get(j, o) as f64;
            }
            (x.get(i, o) as f64 + s) as f32
        })
    }

    fn naive_mlp(x: &Matrix, lw: &LayerWeights, cfg: &EncoderConfig) -> Matrix {
        let d = cfg.dim;
        let hdim = cfg.mlp_hidden();
        Matrix::from_fn(x.rows(), d, |i, o| {
            let r = x.row(i);
            let mean: f64 = r.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let ln: Vec<f64> = (0..d)
                .map(|j| (r[j] as f64 - mean) / (var + cfg.ln_eps).sqrt() * lw.ln2_g[j] as f64 + lw.ln2_b[j] as f64)
                .collect();
            let mut s = lw.fc2_b[o] as f64;
            for k in 0..hdim {
                let mut a = lw.fc1_b[k] as f64;
                for j in 0..d {
                    a += ln[j] * lw.fc1_w.get(j, k) as f64;
                }
                let g = 0.5 * a * (1.0 + (0.797_884_560_802_865_4 * (a + 0.044_715 * a * a * a)).tanh());
                s += g * lw.fc2_w.get(k, o) as f64;
            }
            (r[o] as f64 + s) as f32
        })
    }

    #[test]
    fn patch_counts() {
        let cfg = EncoderConfig::new(32, 32, 16, 1, 8, 2, vec![], 2);
        let w = WeightBundle::init_random(&cfg, 0).unwrap();
        assert_eq!(patchify(&Image::zeros(32, 32), &cfg, &w).unwrap().len(), 4);
        let big = EncoderConfig::vit_small_512();
        assert_eq!(big.num_tokens(), 1024);
    }

    #[test]
    fn zero_image_gives_bias_rows() {
        let cfg = small_cfg();
        let mut w = WeightBundle::init_random(&cfg, 1).unwrap();
        w.pos = Matrix::zeros(cfg.num_tokens(), cfg.dim);
        let ts = patchify(&Image::zeros(32, 32), &cfg, &w).unwrap();
        assert!(ts.tokens.row_iter().all(|r| r == w.patch_b.as_slice()));
        assert!(ts.record.is_identity());
        assert!(patchify(&Image::zeros(16, 32), &cfg, &w).is_err());
    }

    #[test]
    fn patch_projection_matches_manual() {
        let cfg = small_cfg();
        let w = WeightBundle::init_random(&cfg, 2).unwrap();
        let img = random_image(&cfg, 3);
        let ts = patchify(&img, &cfg, &w).unwrap();
        // token (1, 2): rows 4..8, cols 8..12
        let t = 8 + 2;
        let mut flat = Vec::new();
        for py in 0..4 {
            for px in 0..4 {
                flat.extend_from_slice(&img.pixel(4 + py, 8 + px));
            }
        }
        for o in 0..cfg.dim {
            let mut s = w.patch_b[o] as f64 + w.pos.get(t, o) as f64;
            for (k, &v) in flat.iter().enumerate() {
                s += v as f64 * w.patch_w.get(k, o) as f64;
            }
            assert!((ts.tokens.get(t, o) as f64 - s).abs() < 1e-5);
        }
    }

    #[test]
    fn mhsa_single_token_is_own_value() {
        let mut cfg = EncoderConfig::new(4, 4, 4, 1, 8, 2, vec![], 2);
        cfg.clap_layer = None;
        let w = WeightBundle::init_random(&cfg, 4).unwrap();
        let ts = patchify(&random_image(&cfg, 5), &cfg, &w).unwrap();
        let out = mhsa_block(&ts, 1, &cfg, &w).unwrap();
        let lw = &w.layers[0];
        let h = layer_norm(&ts.tokens, &lw.ln1_g, &lw.ln1_b, cfg.ln_eps).unwrap();
        let qkv = linear(&h, &lw.qkv_w, &lw.qkv_b).unwrap();
        let v = Matrix::new(1, 8, qkv.row(0)[16..24].to_vec()).unwrap();
        let expect = ts.tokens.add(&linear(&v, &lw.proj_w, &lw.proj_b).unwrap()).unwrap();
        assert!(out.tokens.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn mhsa_identical_tokens_stay_identical() {
        let cfg = small_cfg();
        let w = WeightBundle::init_random(&cfg, 6).unwrap();
        let mut ts = patchify(&Image::zeros(32, 32), &cfg, &w).unwrap();
        let row = ts.tokens.row(0).to_vec();
        for i in 0..ts.len() {
            ts.tokens.row_mut(i).copy_from_slice(&row);
        }
        let out = mhsa_block(&ts, 2, &cfg, &w).unwrap();
        let first = out.tokens.row(0).to_vec();
        assert!(out.tokens.row_iter().all(|r| r == first.as_slice()));
    }

    #[test]
    fn mhsa_and_mlp_match_scalar_oracles() {
        let cfg = EncoderConfig::new(8, 16, 4, 2, 16, 4, vec![], 2);
        let w = WeightBundle::init_random(&cfg, 7).unwrap();
        let ts = patchify(&random_image(&cfg, 8), &cfg, &w).unwrap();
        assert_eq!(ts.len(), 8);
        let out = mhsa_block(&ts, 1, &cfg, &w).unwrap();
        assert!(out.tokens.max_abs_diff(&naive_attention(&ts.tokens, &w.layers[0], &cfg)) <= 1e-5);
        let out = mlp_block(&ts, 2, &cfg, &w).unwrap();
        assert!(out.tokens.max_abs_diff(&naive_mlp(&ts.tokens, &w.layers[1], &cfg)) <= 1e-5);
        assert!(mhsa_block(&ts, 3, &cfg, &w).is_err());
    }

    #[test]
    fn mlp_zero_weights_is_residual_and_pointwise() {
        let cfg = small_cfg();
        let mut w = WeightBundle::init_random(&cfg, 9).unwrap();
        let ts = patchify(&random_image(&cfg, 10), &cfg, &w).unwrap();
        let perm: Vec<usize> = (0..ts.len()).rev().collect();
        let permuted = TokenSet { tokens: ts.tokens.select_rows(&perm), ..ts.clone() };
        let a = mlp_block(&ts, 1, &cfg, &w).unwrap();
        let b = mlp_block(&permuted, 1, &cfg, &w).unwrap();
        assert!(b.tokens.max_abs_diff(&a.tokens.select_rows(&perm)) < 1e-6);

        let l = &mut w.layers[0];
        for m in [&mut l.fc1_w, &mut l.fc2_w] {
            m.data_mut().fill(0.0);
        }
        l.fc1_b.fill(0.0);
        l.fc2_b.fill(0.0);
        assert_eq!(mlp_block(&ts, 1, &cfg, &w).unwrap().tokens, ts.tokens);
    }

    #[test]
    fn thresholds_above_one_match_baseline() {
        let cfg = small_cfg().with_thresholds(1.01, 1.01);
        let w = WeightBundle::init_random(&cfg, 11).unwrap();
        let img = random_image(&cfg, 12);
        let base = encoder_forward(&img, &cfg, &w, Mode::Baseline).unwrap();
        let algm = encoder_forward(&img, &cfg, &w, Mode::Algm).unwrap();
        assert_eq!(base.schedule.counts(), algm.schedule.counts());
        assert_eq!(base.tokens.tokens, algm.tokens.tokens);
    }

    #[test]
    fn full_merge_schedule() {
        let cfg = small_cfg().with_thresholds(-1.0, -1.0);
        let w = WeightBundle::init_random(&cfg, 13).unwrap();
        let out = encoder_forward(&random_image(&cfg, 14), &cfg, &w, Mode::Algm).unwrap();
        assert_eq!(out.schedule.counts(), vec![16, 16, 8, 8]);
        assert_eq!(out.schedule.layers[0], LayerTokens { mhsa: 64, mlp: 16, out: 16 });
        assert_eq!(out.schedule.n_prime(), 16);
        assert_eq!(out.schedule.n_dprime(), 8);
        out.tokens.validate().unwrap();
    }

    #[test]
    fn after_mlp_placement_merges_later_in_layer() {
        let mut cfg = small_cfg().with_thresholds(-1.0, -1.0);
        cfg.placement = Placement::AfterMlp;
        let w = WeightBundle::init_random(&cfg, 13).unwrap();
        let out = encoder_forward(&random_image(&cfg, 14), &cfg, &w, Mode::Algm).unwrap();
        assert_eq!(out.schedule.layers[0], LayerTokens { mhsa: 64, mlp: 64, out: 16 });
        assert_eq!(out.schedule.counts(), vec![16, 16, 8, 8]);
    }

    #[test]
    fn auto_threshold_requires_calibration() {
        let cfg = small_cfg();
        assert_eq!(cfg.tau_clap, Threshold::Auto);
        let w = WeightBundle::init_random(&cfg, 1).unwrap();
        let img = random_image(&cfg, 1);
        assert!(matches!(encoder_forward(&img, &cfg, &w, Mode::Algm), Err(AlgmError::Config { .. })));
        assert!(encoder_forward(&img, &cfg, &w, Mode::Baseline).is_ok());
    }

    #[test]
    fn vit_s_shape_drops_at_layers_one_and_five() {
        // Narrow stand-in for ViT-S with the same depth and merge sites.
        let mut cfg = EncoderConfig::new(64, 64, 8, 12, 24, 2, vec![5], 4).with_thresholds(-1.0, -1.0);
        cfg.clap_window = Window::square(2);
        let w = WeightBundle::init_random(&cfg, 3).unwrap();
        let out = encoder_forward(&random_image(&cfg, 3), &cfg, &w, Mode::Algm).unwrap();
        let c = out.schedule.counts();
        let drops: Vec<usize> = (0..12).filter(|&l| c[l] < if l == 0 { 64 } else { c[l - 1] }).map(|l| l + 1).collect();
        assert_eq!(drops, vec![1, 5]);
    }

    #[test]
    fn batch_max_policy_aligns_counts() {
        let cfg = small_cfg().with_thresholds(0.2, 0.3);
        let w = WeightBundle::init_random(&cfg, 15).unwrap();
        let mut flat = Image::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                flat.set_pixel(y, x, [0.5, 0.2, (y / 16) as f32]);
            }
        }
        let images = vec![random_image(&cfg, 16), flat];
        let free = encoder_forward_batch(&images, &cfg, &w, Mode::Algm, BatchPolicy::PerImage).unwrap();
        let tied = encoder_forward_batch(&images, &cfg, &w, Mode::Algm, BatchPolicy::BatchMax).unwrap();
        let max_final = free.iter().map(|o| o.schedule.n_prime()).max().unwrap();
        assert_eq!(tied[0].schedule.n_prime(), tied[1].schedule.n_prime());
        assert_eq!(tied[0].schedule.n_prime(), max_final);
        assert_eq!(tied[0].schedule.counts(), tied[1].schedule.counts());
    }

    #[test]
    fn deterministic() {
        let cfg = small_cfg().with_thresholds(0.1, 0.1);
        let w = WeightBundle::init_random(&cfg, 17).unwrap();
        let img = random_image(&cfg, 18);
        let a = encoder_forward(&img, &cfg, &w, Mode::Algm).unwrap();
        let b = encoder_forward(&img, &cfg, &w, Mode::Algm).unwrap();
        assert_eq!(a, b);
        let u = unmerge(&a.tokens).unwrap();
        assert_eq!(u.rows(), 64);
    }
}
