use serde::Serialize;

use crate::error::{AlgmError, Result};
use crate::exec;
use crate::merge::unmerge;
use crate::numkernel::{row_norms, Matrix, COSINE_EPS};
use crate::vit::{encoder_forward, EncoderConfig, Image, Mode, Threshold, WeightBundle};

use super::{flops_encoder, DecoderCost};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOptions {
    /// Thresholds to try, strictly descending.
    pub taus: Vec<f32>,
    /// Fixed local threshold instead of the swept one.
    pub tau_clap: Option<f32>,
    /// Fixed global threshold instead of the swept one.
    pub tau_gbm: Option<f32>,
    /// Fidelity the reported best threshold must reach.
    pub fidelity_floor: Option<f64>,
    pub decoder: DecoderCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f32,
    /// Mean per-token cosine similarity to the unmerged baseline output.
    pub fidelity: f64,
    /// Mean squared difference to the baseline output.
    pub mse: f64,
    pub gflops: f64,
    /// Mean final token count over images.
    pub tokens_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub baseline_gflops: f64,
    pub fidelity_floor: Option<f64>,
    /// Smallest threshold whose fidelity reaches the floor.
    pub best_tau: Option<f32>,
}

impl SweepReport {
    /// CSV with header `tau,fidelity,mse,gflops,tokens_final`.
    pub fn to_csv(&self) -> String {
        use crate::analysis::fmt_float;
        let mut s = String::from("tau,fidelity,mse,gflops,tokens_final\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_float(decimal_f64(r.tau)),
                fmt_float(r.fidelity),
                fmt_float(r.mse),
                fmt_float(r.gflops),
                fmt_float(r.tokens_final)
            ));
        }
        s
    }
}

/// The `f64` nearest the shortest decimal that round-trips `v`, so 1.01 prints as 1.01.
fn decimal_f64(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

/// `(sum of per-token cosine, sum of squared differences)`.
fn compare(a: &Matrix, b: &Matrix) -> (f64, f64) {
    let (na, nb) = (row_norms(a), row_norms(b));
    let mut cos = 0.0;
    let mut sq = 0.0;
    for i in 0..a.rows() {
        let dot: f64 = a.row(i).iter().zip(b.row(i)).map(|(&x, &y)| x as f64 * y as f64).sum();
        let c = (dot / (na[i] * nb[i]).max(COSINE_EPS)).clamp(-1.0, 1.0);
        cos += c;
        sq += a.row(i).iter().zip(b.row(i)).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
    }
    (cos, sq)
}

/// Runs the merged encoder at each threshold and compares its unmerged
/// output with the baseline output.
pub fn fidelity_sweep(
    cfg: &EncoderConfig,
    w: &WeightBundle,
    images: &[Image],
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if images.is_empty() {
        return Err(AlgmError::Argument("sweep needs at least one image".into()));
    }
    if opts.taus.is_empty() {
        return Err(AlgmError::Argument("sweep needs at least one threshold".into()));
    }
    if opts.taus.iter().any(|t| !t.is_finite()) || opts.taus.windows(2).any(|p| p[1] >= p[0]) {
        return Err(AlgmError::Argument(format!("thresholds must be finite and strictly descending, got {:?}", opts.taus)));
    }
    let baseline = exec::map_slice(images, |img| encoder_forward(img, cfg, w, Mode::Baseline))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let baseline_gflops = flops_encoder(cfg, &baseline[0].schedule, opts.decoder)?.total_gflops;
    let n = cfg.num_tokens() as f64;
    let count = images.len() as f64;

    let mut rows = Vec::with_capacity(opts.taus.len());
    for &tau in &opts.taus {
        let mut run = cfg.clone();
        run.tau_clap = Threshold::Value(opts.tau_clap.unwrap_or(tau));
        run.tau_gbm = Threshold::Value(opts.tau_gbm.unwrap_or(tau));
        let per_image = exec::map_range(images.len(), |i| -> Result<(f64, f64, f64, usize)> {
            let out = encoder_forward(&images[i], &run, w, Mode::Algm)?;
            let full = unmerge(&out.tokens)?;
            let (cos, sq) = compare(&full, &baseline[i].tokens.tokens);
            let gflops = flops_encoder(&run, &out.schedule, opts.decoder)?.total_gflops;
            Ok((cos, sq, gflops, out.schedule.final_count()))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (mut cos, mut sq, mut gf, mut tokens) = (0.0, 0.0, 0.0, 0.0);
        for (c, s, g, t) in per_image {
            cos += c;
            sq += s;
            gf += g;
            tokens += t as f64;
        }
        rows.push(SweepRow {
            tau,
            fidelity: cos / (n * count),
            mse: sq / (n * cfg.dim as f64 * count),
            gflops: gf / count,
            tokens_final: tokens / count,
        });
    }
    let best_tau = opts
        .fidelity_floor
        .and_then(|floor| rows.iter().filter(|r| r.fidelity >= floor).map(|r| r.tau).reduce(f32::min));
    Ok(SweepReport { rows, baseline_gflops, fidelity_floor: opts.fidelity_floor, best_tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    fn setup() -> (EncoderConfig, WeightBundle, Vec<Image>) {
        let cfg = EncoderConfig::new(32, 32, 4, 3, 16, 2, vec![2], 2);
        let w = WeightBundle::init_random(&cfg, 1).unwrap();
        let mut rng = Rng::new(9);
        let images = (0..2).map(|_| Image::new(32, 32, (0..3072).map(|_| rng.next_f32()).collect()).unwrap()).collect();
        (cfg, w, images)
    }

    #[test]
    fn no_merge_threshold_is_exact() {
        let (cfg, w, images) = setup();
        let opts = SweepOptions { taus: vec![1.01, 0.5, -1.0], fidelity_floor: Some(0.99), ..Default::default() };
        let r = fidelity_sweep(&cfg, &w, &images, &opts).unwrap();
        assert_eq!(r.rows[0].fidelity, 1.0);
        assert_eq!(r.rows[0].mse, 0.0);
        assert_eq!(r.rows[0].gflops, r.baseline_gflops);
        assert_eq!(r.rows[0].tokens_final, 64.0);
        assert_eq!(r.rows[2].tokens_final, 8.0);
        assert!(r.rows.windows(2).all(|p| p[1].gflops <= p[0].gflops));
        assert!(r.best_tau.unwrap() <= 1.01);
        assert!(r.to_csv().starts_with("tau,fidelity,mse,gflops,tokens_final\n1.01000000e0,"));
    }

    #[test]
    fn unsorted_thresholds_rejected() {
        let (cfg, w, images) = setup();
        let opts = SweepOptions { taus: vec![0.5, 0.9], ..Default::default() };
        assert!(matches!(fidelity_sweep(&cfg, &w, &images, &opts), Err(AlgmError::Argument(_))));
    }
}
