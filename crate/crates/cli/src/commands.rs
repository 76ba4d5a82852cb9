//! Command implementations: load inputs, call into the core, write outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use algm_core::analysis::{global_similarity_stats, local_similarity_stats, synth_dataset, LabeledImage, SimCurve};
use algm_core::calibrate::{calibrate_threshold, Calibration};
use algm_core::cost::{
    fidelity_sweep, flops_encoder, throughput_bench, BenchOptions, DecoderCost, FlopsReport, SweepOptions,
};
use algm_core::vit::{
    decode, encoder_forward, tensor_schema, EncoderConfig, Image, Mode, Threshold, TokenSchedule, WeightBundle,
};
use algm_core::AlgmError;
use serde::Serialize;

use crate::args::{Cli, Command, DecoderCostArg};
use crate::config::{check_taus, DataSpec, RunConfig, WeightsSpec};
use crate::io;

/// Everything a command needs after the configuration is resolved.
struct Context {
    cfg: RunConfig,
    model: EncoderConfig,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, AlgmError> {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| AlgmError::Argument("--config <json> is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(w) = &cli.weights {
            cfg.weights = WeightsSpec::File(w.clone());
        }
        let mut model = cfg.model.clone();
        if let Some(s) = cli.seed {
            model.merge_seed = s;
        }
        if let Some(c) = &cli.calibration {
            model = Calibration::load(c)?.apply(&model, true);
        }
        if !cli.out.is_dir() {
            return Err(AlgmError::Io {
                path: cli.out.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            });
        }
        Ok(Context { cfg, model, seed: cli.seed.unwrap_or(0), out: cli.out.clone() })
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn random_seed(&self) -> u64 {
        match self.cfg.weights {
            WeightsSpec::Random { seed } => seed.unwrap_or(self.seed),
            WeightsSpec::File(_) => self.seed,
        }
    }

    fn weights(&self) -> Result<WeightBundle, AlgmError> {
        match &self.cfg.weights {
            WeightsSpec::File(p) => WeightBundle::load(p, &self.model),
            WeightsSpec::Random { .. } => WeightBundle::init_random(&self.model, self.random_seed()),
        }
    }

    /// Images with their class maps, where available.
    fn data(&self) -> Result<Vec<(Image, Option<Vec<u32>>)>, AlgmError> {
        match &self.cfg.data {
            DataSpec::Synthetic(s) => Ok(synth_dataset(&self.cfg.synth_params(s, self.seed))?
                .into_iter()
                .map(|d| (d.image, Some(d.labels)))
                .collect()),
            DataSpec::Ppm { dir } => read_ppm_dir(dir),
        }
    }

    fn images(&self) -> Result<Vec<Image>, AlgmError> {
        Ok(self.data()?.into_iter().map(|(i, _)| i).collect())
    }
}

fn read_ppm_dir(dir: &Path) -> Result<Vec<(Image, Option<Vec<u32>>)>, AlgmError> {
    let entries = std::fs::read_dir(dir).map_err(|e| AlgmError::Io { path: dir.to_path_buf(), source: e })?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| AlgmError::Io { path: dir.to_path_buf(), source: e })?.path();
        if p.extension().is_some_and(|x| x == "ppm") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(AlgmError::Argument(format!("no .ppm images in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let img = io::read_ppm(f)?;
            let label_path = f.with_extension("pgm");
            let labels = if label_path.is_file() {
                let (h, w, v) = io::read_pgm(&label_path)?;
                if (h, w) != (img.height, img.width) {
                    return Err(AlgmError::Shape(format!(
                        "{} is {h}x{w}, image is {}x{}",
                        label_path.display(),
                        img.height,
                        img.width
                    )));
                }
                Some(v)
            } else {
                None
            };
            Ok((img, labels))
        })
        .collect()
}

/// Prefixes core configuration errors with the section they came from.
fn in_model(e: AlgmError) -> AlgmError {
    match e {
        AlgmError::Config { path, message } => AlgmError::Config { path: format!("model.{path}"), message },
        other => other,
    }
}

pub fn execute(cli: &Cli) -> Result<(), AlgmError> {
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::Init => init(&ctx),
        Command::Calibrate { scope } => calibrate(&ctx, scope.unwrap_or(ctx.cfg.calibrate.scope)),
        Command::Analyze { windows } => {
            let windows = if windows.is_empty() { ctx.cfg.analyze.window_sizes.clone() } else { windows.clone() };
            analyze(&ctx, &windows)
        }
        Command::Run { mode, tau, tau_clap, tau_gbm, merge_op, decoder_cost } => {
            let mut model = ctx.model.clone();
            for (slot, v) in [(&mut model.tau_clap, tau_clap.or(*tau)), (&mut model.tau_gbm, tau_gbm.or(*tau))] {
                if let Some(v) = v {
                    *slot = Threshold::Value(v);
                }
            }
            if let Some(op) = merge_op {
                model.merge_op = *op;
            }
            model.validate().map_err(in_model)?;
            let decoder = match decoder_cost {
                None => ctx.cfg.run.decoder_cost,
                Some(DecoderCostArg::LinearHead) => DecoderCost::LinearHead,
                Some(DecoderCostArg::MaskTransformer) => match ctx.cfg.run.decoder_cost {
                    d @ DecoderCost::MaskTransformer { .. } => d,
                    DecoderCost::LinearHead => DecoderCost::MaskTransformer { layers: 2 },
                },
            };
            run(&ctx, &model, mode.unwrap_or(ctx.cfg.run.mode), decoder)
        }
        Command::Sweep { taus, floor, tau_clap, tau_gbm } => {
            let taus = if taus.is_empty() { ctx.cfg.sweep.taus.clone() } else { taus.clone() };
            check_taus(&taus).map_err(AlgmError::Argument)?;
            let opts = SweepOptions {
                taus,
                tau_clap: tau_clap.or(ctx.cfg.sweep.tau_clap),
                tau_gbm: tau_gbm.or(ctx.cfg.sweep.tau_gbm),
                fidelity_floor: floor.or(ctx.cfg.sweep.fidelity_floor),
                decoder: ctx.cfg.run.decoder_cost,
            };
            sweep(&ctx, &opts)
        }
        Command::Bench { mode, batch, warmup, iters } => {
            let b = &ctx.cfg.bench;
            let opts = BenchOptions {
                batch: batch.unwrap_or(b.batch),
                warmup: warmup.unwrap_or(b.warmup),
                iters: iters.unwrap_or(b.iters),
                mode: mode.unwrap_or(b.mode),
            };
            bench(&ctx, &opts)
        }
    }
}

fn init(ctx: &Context) -> Result<(), AlgmError> {
    let w = WeightBundle::init_random(&ctx.model, ctx.random_seed()).map_err(in_model)?;
    let path = ctx.out_file("weights.tmw");
    w.save(&path)?;
    let mut total = 0usize;
    for (name, dims) in tensor_schema(&ctx.model) {
        let n: usize = dims.iter().product();
        total += n;
        println!("{name:<20} {dims:?}");
    }
    println!("{} layers, {total} parameters -> {}", ctx.model.depth, path.display());
    Ok(())
}

fn calibrate(ctx: &Context, scope: algm_core::calibrate::Scope) -> Result<(), AlgmError> {
    let w = ctx.weights()?;
    let cal = calibrate_threshold(&ctx.model, &w, &ctx.images()?, scope, ctx.seed)?;
    io::write(&ctx.out_file("calibration.json"), format!("{}\n", cal.to_json()).as_bytes())?;
    for s in cal.sites.iter().chain(&cal.global) {
        println!("{:?} layer {}: mu {:.6} sigma {:.6} tau {:.6} ({} pairs)", s.site, s.layer, s.mu, s.sigma, s.tau, s.count);
    }
    if let Some(t) = cal.tau_clap {
        println!("tau_clap = {t:.6}");
    }
    if let Some(t) = cal.tau_gbm {
        println!("tau_gbm = {t:.6}");
    }
    Ok(())
}

fn analyze(ctx: &Context, windows: &[usize]) -> Result<(), AlgmError> {
    let w = ctx.weights()?;
    let data = ctx
        .data()?
        .into_iter()
        .enumerate()
        .map(|(i, (img, labels))| {
            let labels = labels.ok_or_else(|| AlgmError::Argument(format!("image {i} has no class map")))?;
            LabeledImage::new(img, labels)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let local = local_similarity_stats(&ctx.model, &w, &data, windows)?;
    let global = global_similarity_stats(&ctx.model, &w, &data)?;
    for warning in local.warnings.iter().chain(&global.warnings) {
        eprintln!("warning: {warning}");
    }
    io::write(&ctx.out_file("local_similarity.csv"), local.to_csv().as_bytes())?;
    io::write(&ctx.out_file("global_similarity.csv"), global.to_csv().as_bytes())?;
    print_curve("window", &local);
    print_curve("layer", &global);
    Ok(())
}

fn print_curve(label: &str, c: &SimCurve) {
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for i in 0..c.x.len() {
        println!(
            "{label} {:>3}: intra {} inter {} gap {}",
            c.x[i],
            show(c.intra_mean[i]),
            show(c.inter_mean[i]),
            show(c.gap(i))
        );
    }
}

#[derive(Serialize)]
struct FlopsFile {
    convention: String,
    baseline: FlopsReport,
    per_image: Vec<FlopsReport>,
}

fn run(ctx: &Context, model: &EncoderConfig, mode: Mode, decoder: DecoderCost) -> Result<(), AlgmError> {
    let w = ctx.weights()?;
    let images = ctx.images()?;
    let baseline = flops_encoder(model, &TokenSchedule::uniform(model.num_tokens(), model.depth), decoder)?;
    let mut schedule_csv = String::from("image_id,layer,tokens_mhsa,tokens_mlp,tokens_out\n");
    let mut per_image = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let out = encoder_forward(img, model, &w, mode).map_err(in_model)?;
        let pred = decode(&out.tokens, model, &w)?.argmax();
        io::write(&ctx.out_file(&format!("pred_{i:03}.pgm")), &io::encode_pgm(img.height, img.width, &pred))?;
        for (l, t) in out.schedule.layers.iter().enumerate() {
            writeln!(schedule_csv, "{i},{},{},{},{}", l + 1, t.mhsa, t.mlp, t.out).expect("string write");
        }
        let f = flops_encoder(model, &out.schedule, decoder)?;
        let s = &out.schedule;
        println!(
            "image {i}: N {} -> N' {} -> N'' {} | {:.3} GFLOPs ({:+.1}% vs baseline)",
            s.original,
            s.n_prime(),
            s.n_dprime(),
            f.total_gflops,
            100.0 * (f.total_gflops / baseline.total_gflops - 1.0)
        );
        per_image.push(f);
    }
    io::write(&ctx.out_file("schedule.csv"), schedule_csv.as_bytes())?;
    let file = FlopsFile { convention: baseline.convention.clone(), baseline, per_image };
    let json = serde_json::to_string_pretty(&file).expect("flops report serializes");
    io::write(&ctx.out_file("flops.json"), format!("{json}\n").as_bytes())
}

fn sweep(ctx: &Context, opts: &SweepOptions) -> Result<(), AlgmError> {
    let w = ctx.weights()?;
    let report = fidelity_sweep(&ctx.model, &w, &ctx.images()?, opts).map_err(in_model)?;
    io::write(&ctx.out_file("sweep.csv"), report.to_csv().as_bytes())?;
    println!("baseline {:.4} GFLOPs", report.baseline_gflops);
    for r in &report.rows {
        println!(
            "tau {:>6}: fidelity {:.6} mse {:.3e} {:.4} GFLOPs {:.1} tokens",
            r.tau, r.fidelity, r.mse, r.gflops, r.tokens_final
        );
    }
    match (report.fidelity_floor, report.best_tau) {
        (Some(f), Some(t)) => println!("smallest tau with fidelity >= {f}: {t}"),
        (Some(f), None) => println!("no tau reaches fidelity {f}"),
        _ => {}
    }
    Ok(())
}

fn bench(ctx: &Context, opts: &BenchOptions) -> Result<(), AlgmError> {
    let w = ctx.weights()?;
    let report = throughput_bench(&ctx.model, &w, &ctx.images()?, opts).map_err(in_model)?;
    let mut csv = String::from("image_id,im_per_sec,n_prime,n_dprime\n");
    for b in &report.per_image_token_schedule {
        writeln!(
            csv,
            "{},{},{},{}",
            b.image_id,
            algm_core::analysis::fmt_float(b.images_per_sec),
            b.n_prime,
            b.n_dprime
        )
        .expect("string write");
    }
    io::write(&ctx.out_file("bench.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("bench report serializes");
    io::write(&ctx.out_file("bench.json"), format!("{json}\n").as_bytes())?;
    let hw = &report.hardware;
    println!(
        "{:?}: {:.2} im/s (batch {}, {} timed iters) on {}/{} with {} thread(s)",
        report.mode, report.images_per_sec, report.batch, report.timed_iters, hw.os, hw.arch, hw.threads
    );
    Ok(())
}
