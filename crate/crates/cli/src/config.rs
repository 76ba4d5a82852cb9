//! Run configuration: model, weights, data and per-command options.

use std::path::{Path, PathBuf};

use algm_core::analysis::Structure;
use algm_core::calibrate::Scope;
use algm_core::cost::DecoderCost;
use algm_core::vit::{EncoderConfig, Mode};
use algm_core::AlgmError;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: EncoderConfig,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub calibrate: CalibrateOptions,
    #[serde(default)]
    pub analyze: AnalyzeOptions,
    #[serde(default)]
    pub run: RunOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

/// A weight file path, or `{"random": true, "seed": n}`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightsSpec {
    File(PathBuf),
    Random { seed: Option<u64> },
}

impl Default for WeightsSpec {
    fn default() -> Self {
        WeightsSpec::Random { seed: None }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomWeights {
    random: bool,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WeightsRepr {
    File(PathBuf),
    Random(RandomWeights),
}

impl<'de> Deserialize<'de> for WeightsSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match WeightsRepr::deserialize(d).map_err(|_| {
            serde::de::Error::custom("expected a weight file path or {\"random\": true, \"seed\": <u64>}")
        })? {
            WeightsRepr::File(p) => Ok(WeightsSpec::File(p)),
            WeightsRepr::Random(RandomWeights { random: true, seed }) => Ok(WeightsSpec::Random { seed }),
            WeightsRepr::Random(_) => Err(serde::de::Error::custom("`random` must be true")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SyntheticData),
    /// Every `*.ppm` in `dir`, sorted by name. A same-named `*.pgm` next to
    /// an image holds its per-pixel class ids.
    Ppm { dir: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic(SyntheticData::default())
    }
}

/// Generator settings; image size comes from the model.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_images")]
    pub n_images: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub structure: Structure,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub drift: f64,
    /// Region boundary alignment in pixels; defaults to the patch size.
    #[serde(default)]
    pub align: Option<usize>,
}

fn default_images() -> usize {
    4
}

fn default_classes() -> usize {
    2
}

fn default_noise() -> f64 {
    0.1
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            seed: None,
            n_images: default_images(),
            classes: default_classes(),
            structure: Structure::Blocky,
            noise: default_noise(),
            drift: 0.0,
            align: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateOptions {
    #[serde(default)]
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeOptions {
    #[serde(default = "default_windows")]
    pub window_sizes: Vec<usize>,
}

fn default_windows() -> Vec<usize> {
    vec![2, 4, 8]
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { window_sizes: default_windows() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub decoder_cost: DecoderCost,
}

fn default_mode() -> Mode {
    Mode::Algm
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { mode: default_mode(), decoder_cost: DecoderCost::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_taus")]
    pub taus: Vec<f32>,
    #[serde(default)]
    pub fidelity_floor: Option<f64>,
    #[serde(default)]
    pub tau_clap: Option<f32>,
    #[serde(default)]
    pub tau_gbm: Option<f32>,
}

fn default_taus() -> Vec<f32> {
    vec![1.01, 0.95, 0.9, 0.8, 0.6, 0.0, -1.0]
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { taus: default_taus(), fidelity_floor: None, tau_clap: None, tau_gbm: None }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

fn default_batch() -> usize {
    32
}

fn default_warmup() -> usize {
    50
}

fn default_iters() -> usize {
    10
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { mode: default_mode(), batch: default_batch(), warmup: default_warmup(), iters: default_iters() }
    }
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> AlgmError {
    AlgmError::Config { path: path.into(), message: message.into() }
}

impl RunConfig {
    /// Parses and fully validates a configuration document.
    pub fn from_json(text: &str) -> Result<Self, AlgmError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path.is_empty() { ".".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file; relative paths inside it resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, AlgmError> {
        let text = std::fs::read_to_string(path).map_err(|e| AlgmError::Io { path: path.to_path_buf(), source: e })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let WeightsSpec::File(p) = &mut cfg.weights {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let DataSpec::Ppm { dir } = &mut cfg.data {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AlgmError> {
        self.model.validate().map_err(|e| match e {
            AlgmError::Config { path, message } => config_error(format!("model.{path}"), message),
            other => other,
        })?;
        if let DataSpec::Synthetic(s) = &self.data {
            let p = self.synth_params(s, 0);
            p.validate().map_err(|e| match e {
                AlgmError::Config { path, message } => config_error(format!("data.synthetic.{path}"), message),
                other => other,
            })?;
            if s.n_images == 0 {
                return Err(config_error("data.synthetic.n_images", "must be positive"));
            }
        }
        if let Some(&k) = self.analyze.window_sizes.iter().find(|&&k| k == 0) {
            return Err(config_error("analyze.window_sizes", format!("window size {k} is not positive")));
        }
        check_taus(&self.sweep.taus).map_err(|m| config_error("sweep.taus", m))?;
        if let Some(f) = self.sweep.fidelity_floor {
            if !f.is_finite() {
                return Err(config_error("sweep.fidelity_floor", "must be finite"));
            }
        }
        if self.bench.batch == 0 {
            return Err(config_error("bench.batch", "must be positive"));
        }
        if self.bench.iters == 0 {
            return Err(config_error("bench.iters", "must be positive"));
        }
        Ok(())
    }

    /// Generator parameters for the model's image size.
    pub fn synth_params(&self, s: &SyntheticData, seed: u64) -> algm_core::analysis::SynthParams {
        algm_core::analysis::SynthParams {
            seed: s.seed.unwrap_or(seed),
            n_images: s.n_images,
            classes: s.classes,
            structure: s.structure,
            noise: s.noise,
            drift: s.drift,
            height: self.model.image_h,
            width: self.model.image_w,
            align: s.align.unwrap_or(self.model.patch_size),
        }
    }
}

/// Thresholds must be finite, non-empty and strictly descending.
pub fn check_taus(taus: &[f32]) -> Result<(), String> {
    if taus.is_empty() {
        return Err("needs at least one threshold".into());
    }
    if let Some(t) = taus.iter().find(|t| !t.is_finite()) {
        return Err(format!("threshold {t} is not finite"));
    }
    if let Some(p) = taus.windows(2).find(|p| p[1] >= p[0]) {
        return Err(format!("thresholds must be strictly descending ({} then {})", p[0], p[1]));
    }
    Ok(())
}
