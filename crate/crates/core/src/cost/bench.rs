use std::time::Instant;

use serde::Serialize;

use crate::error::{AlgmError, Result};
use crate::exec;
use crate::vit::{encoder_forward_batch, BatchPolicy, EncoderConfig, Image, Mode, WeightBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub batch: usize,
    pub warmup: usize,
    /// Timed iterations per image.
    pub iters: usize,
    pub mode: Mode,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { batch: 32, warmup: 50, iters: 10, mode: Mode::Baseline }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageBench {
    pub image_id: usize,
    pub images_per_sec: f64,
    pub n_prime: usize,
    pub n_dprime: usize,
    /// Tokens leaving each layer.
    pub schedule: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub available_parallelism: usize,
    pub threads: usize,
    pub parallel_feature: bool,
}

impl HardwareInfo {
    pub fn current() -> Self {
        HardwareInfo {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: exec::current_threads(),
            parallel_feature: cfg!(feature = "parallel"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: Mode,
    /// Mean over images of each image's throughput.
    pub images_per_sec: f64,
    pub batch: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Timed seconds summed over all images; warmup excluded.
    pub wall_seconds: f64,
    pub per_image_token_schedule: Vec<ImageBench>,
    pub hardware: HardwareInfo,
}

/// Times forward passes over batches of duplicates of each image.
pub fn throughput_bench(
    cfg: &EncoderConfig,
    w: &WeightBundle,
    images: &[Image],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(AlgmError::Argument("benchmark needs at least one image".into()));
    }
    if opts.batch == 0 || opts.iters == 0 {
        return Err(AlgmError::Argument("batch and iters must be positive".into()));
    }
    let mut per_image = Vec::with_capacity(images.len());
    let mut wall = 0.0f64;
    for (id, img) in images.iter().enumerate() {
        let batch = vec![img.clone(); opts.batch];
        for _ in 0..opts.warmup {
            encoder_forward_batch(&batch, cfg, w, opts.mode, BatchPolicy::PerImage)?;
        }
        let start = Instant::now();
        let mut last = None;
        for _ in 0..opts.iters {
            last = Some(encoder_forward_batch(&batch, cfg, w, opts.mode, BatchPolicy::PerImage)?);
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        wall += secs;
        let out = last.expect("iters > 0").swap_remove(0);
        per_image.push(ImageBench {
            image_id: id,
            images_per_sec: (opts.batch * opts.iters) as f64 / secs,
            n_prime: out.schedule.n_prime(),
            n_dprime: out.schedule.n_dprime(),
            schedule: out.schedule.counts(),
        });
    }
    let images_per_sec = per_image.iter().map(|b| b.images_per_sec).sum::<f64>() / per_image.len() as f64;
    Ok(BenchReport {
        mode: opts.mode,
        images_per_sec,
        batch: opts.batch,
        warmup_iters: opts.warmup,
        timed_iters: opts.iters,
        wall_seconds: wall,
        per_image_token_schedule: per_image,
        hardware: HardwareInfo::current(),
    })
}
