use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{AlgmError, Result};
use crate::merge::MergeOp;

/// Similarity threshold: a fixed value or one to be filled in by calibration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    Value(f32),
    #[default]
    Auto,
}

impl Threshold {
    pub fn value(self) -> Option<f32> {
        match self {
            Threshold::Value(v) => Some(v),
            Threshold::Auto => None,
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Value(v) => s.serialize_f32(*v),
            Threshold::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Threshold;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or the string \"auto\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Value(v as f32))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Value(v as f32))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Value(v as f32))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Threshold, E> {
                if v.eq_ignore_ascii_case("auto") {
                    Ok(Threshold::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Local merging window, `h` rows by `w` columns of tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub const fn square(k: usize) -> Self {
        Window { h: k, w: k }
    }

    pub fn area(self) -> usize {
        self.h * self.w
    }
}

impl Default for Window {
    fn default() -> Self {
        Window::square(2)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Square(usize),
    Rect([usize; 2]),
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.h == self.w {
            WindowRepr::Square(self.h).serialize(s)
        } else {
            WindowRepr::Rect([self.h, self.w]).serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match WindowRepr::deserialize(d)? {
            WindowRepr::Square(k) => Window::square(k),
            WindowRepr::Rect([h, w]) => Window { h, w },
        })
    }
}

/// Whether the class head runs before or after unmerging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Token-level head; unmerge afterwards.
    #[default]
    TokenHead,
    /// Unmerge to the full grid first, then apply the head.
    SpatialHead,
}

/// Where merge modules sit inside a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    BetweenMhsaMlp,
    AfterMlp,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_clap_layer() -> Option<usize> {
    Some(1)
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-6
}

/// Architecture and merging hyperparameters of the encoder.
///
/// Layers are numbered from 1. `clap_layer: null` disables local merging and
/// an empty `gbm_layers` disables global merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_clap_layer")]
    pub clap_layer: Option<usize>,
    #[serde(default)]
    pub clap_window: Window,
    pub gbm_layers: Vec<usize>,
    #[serde(default)]
    pub tau_clap: Threshold,
    #[serde(default)]
    pub tau_gbm: Threshold,
    #[serde(default)]
    pub merge_op: MergeOp,
    #[serde(default)]
    pub decoder_kind: DecoderKind,
    pub num_classes: usize,
    #[serde(default)]
    pub placement: Placement,
    /// Add `ln(cluster size)` to attention logits of merged keys.
    #[serde(default)]
    pub size_weighted_attention: bool,
    /// Weight the global merge average by cluster size.
    #[serde(default = "default_true")]
    pub gbm_size_weighted: bool,
    /// Seed for `random_pick` merging.
    #[serde(default)]
    pub merge_seed: u64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl EncoderConfig {
    /// Plain ViT with the given shape, CLAP at layer 1 (2×2) and GBM at `gbm_layers`.
    pub fn new(
        image_h: usize,
        image_w: usize,
        patch_size: usize,
        depth: usize,
        dim: usize,
        heads: usize,
        gbm_layers: Vec<usize>,
        num_classes: usize,
    ) -> Self {
        EncoderConfig {
            image_h,
            image_w,
            patch_size,
            depth,
            dim,
            heads,
            mlp_ratio: default_mlp_ratio(),
            clap_layer: default_clap_layer(),
            clap_window: Window::default(),
            gbm_layers,
            tau_clap: Threshold::Auto,
            tau_gbm: Threshold::Auto,
            merge_op: MergeOp::Average,
            decoder_kind: DecoderKind::TokenHead,
            num_classes,
            placement: Placement::BetweenMhsaMlp,
            size_weighted_attention: false,
            gbm_size_weighted: true,
            merge_seed: 0,
            ln_eps: default_ln_eps(),
        }
    }

    /// ViT-S segmentation shape: 512×512 crop, p=16, L=12, d=384, 6 heads,
    /// merge sites at layers 1 and 5, 150 classes.
    pub fn vit_small_512() -> Self {
        EncoderConfig::new(512, 512, 16, 12, 384, 6, vec![5], 150)
    }

    pub fn with_thresholds(mut self, clap: f32, gbm: f32) -> Self {
        self.tau_clap = Threshold::Value(clap);
        self.tau_gbm = Threshold::Value(gbm);
        self
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    /// Token count N = H·W / p².
    pub fn num_tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn is_gbm_layer(&self, layer: usize) -> bool {
        self.gbm_layers.contains(&layer)
    }

    /// Checks every structural invariant; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let err = |p: &str, m: String| Err(AlgmError::config(p, m));
        if self.patch_size == 0 {
            return err("patch_size", "must be positive".into());
        }
        if self.image_h == 0 || self.image_h % self.patch_size != 0 {
            return err(
                "image_h",
                format!("{} is not a positive multiple of patch_size {}", self.image_h, self.patch_size),
            );
        }
        if self.image_w == 0 || self.image_w % self.patch_size != 0 {
            return err(
                "image_w",
                format!("{} is not a positive multiple of patch_size {}", self.image_w, self.patch_size),
            );
        }
        if self.depth == 0 {
            return err("depth", "must be at least 1".into());
        }
        if self.dim == 0 {
            return err("dim", "must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err("heads", format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return err("mlp_ratio", format!("{} gives an empty MLP", self.mlp_ratio));
        }
        if self.num_classes == 0 {
            return err("num_classes", "must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return err("ln_eps", "must be positive".into());
        }
        for (i, &l) in self.gbm_layers.iter().enumerate() {
            if l == 0 || l > self.depth {
                return err(&format!("gbm_layers[{i}]"), format!("layer {l} outside 1..={}", self.depth));
            }
            if i > 0 && l <= self.gbm_layers[i - 1] {
                return err(&format!("gbm_layers[{i}]"), "layers must be strictly increasing".into());
            }
        }
        if let Some(c) = self.clap_layer {
            if c == 0 || c > self.depth {
                return err("clap_layer", format!("layer {c} outside 1..={}", self.depth));
            }
            if let Some(&first) = self.gbm_layers.first() {
                if c >= first {
                    return err("clap_layer", format!("must precede the first GBM layer {first}"));
                }
            }
            let k = self.clap_window;
            if k.h == 0 || k.w == 0 {
                return err("clap_window", "window sides must be positive".into());
            }
            if self.grid_h() % k.h != 0 || self.grid_w() % k.w != 0 {
                return err(
                    "clap_window",
                    format!("window {k} does not tile the {}x{} token grid", self.grid_h(), self.grid_w()),
                );
            }
        }
        for (name, t) in [("tau_clap", self.tau_clap), ("tau_gbm", self.tau_gbm)] {
            if let Threshold::Value(v) = t {
                if !v.is_finite() {
                    return err(name, "threshold must be finite".into());
                }
            }
        }
        Ok(())
    }
}
