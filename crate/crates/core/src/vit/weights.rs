//! Weight bundle, deterministic initialization, and the TMW1 file format.
//!
//! TMW1 layout, all integers little-endian `u32`:
//!
//! ```text
//! "TMW1" | version=1 | tensor count
//! per tensor: name length | UTF-8 name | rank | dims[rank] | f32 LE data
//! ```
//!
//! Tensor names, in file order:
//!
//! ```text
//! patch.w [3p², d]   patch.b [d]   pos [N, d]
//! layer{i}.ln1.g [d]  layer{i}.ln1.b [d]
//! layer{i}.attn.qkv.w [d, 3d]  layer{i}.attn.qkv.b [3d]
//! layer{i}.attn.proj.w [d, d]  layer{i}.attn.proj.b [d]
//! layer{i}.ln2.g [d]  layer{i}.ln2.b [d]
//! layer{i}.mlp.fc1.w [d, h]  layer{i}.mlp.fc1.b [h]
//! layer{i}.mlp.fc2.w [h, d]  layer{i}.mlp.fc2.b [d]
//! head.w [d, C]  head.b [C]
//! ```
//!
//! with `i` running from 1 to L and `h = round(mlp_ratio·d)`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{AlgmError, Result, WeightError};
use crate::numkernel::{Matrix, Rng};
use crate::vit::EncoderConfig;

pub const TMW_MAGIC: [u8; 4] = *b"TMW1";
pub const TMW_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    /// Columns are `[q | k | v]`, each `d` wide and split into heads in order.
    pub qkv_w: Matrix,
    pub qkv_b: Vec<f32>,
    pub proj_w: Matrix,
    pub proj_b: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub fc1_w: Matrix,
    pub fc1_b: Vec<f32>,
    pub fc2_w: Matrix,
    pub fc2_b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub patch_w: Matrix,
    pub patch_b: Vec<f32>,
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
    pub head_w: Matrix,
    pub head_b: Vec<f32>,
}

/// A named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Expected `(name, dims)` for every tensor, in file order.
pub fn tensor_schema(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let h = cfg.mlp_hidden();
    let mut s = vec![
        ("patch.w".to_string(), vec![cfg.patch_len(), d]),
        ("patch.b".to_string(), vec![d]),
        ("pos".to_string(), vec![cfg.num_tokens(), d]),
    ];
    for i in 1..=cfg.depth {
        let p = |n: &str| format!("layer{i}.{n}");
        s.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.qkv.w"), vec![d, 3 * d]),
            (p("attn.qkv.b"), vec![3 * d]),
            (p("attn.proj.w"), vec![d, d]),
            (p("attn.proj.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.fc1.w"), vec![d, h]),
            (p("mlp.fc1.b"), vec![h]),
            (p("mlp.fc2.w"), vec![h, d]),
            (p("mlp.fc2.b"), vec![d]),
        ]);
    }
    s.push(("head.w".to_string(), vec![d, cfg.num_classes]));
    s.push(("head.b".to_string(), vec![cfg.num_classes]));
    s
}

fn mat(dims: &[usize], data: Vec<f32>) -> Matrix {
    Matrix::new(dims[0], dims[1], data).expect("dims checked against schema")
}

impl WeightBundle {
    /// Deterministic uniform(−s, s) initialization with `s = 1/√d`.
    ///
    /// Layer-norm gains start at 1 and layer-norm biases at 0.
    pub fn init_random(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let s = 1.0 / (cfg.dim as f32).sqrt();
        let mut rng = Rng::new(seed);
        let tensors = tensor_schema(cfg)
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let data = if name.ends_with(".ln1.g") || name.ends_with(".ln2.g") {
                    vec![1.0; n]
                } else if name.ends_with(".ln1.b") || name.ends_with(".ln2.b") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.uniform(-s, s)).collect()
                };
                Tensor { name, dims, data }
            })
            .collect();
        Ok(WeightBundle::from_tensors(cfg, tensors)?)
    }

    /// Builds a bundle after checking every tensor against the schema for `cfg`.
    ///
    /// Tensors are checked in schema order, so the error names the first
    /// tensor that is missing or mis-shaped.
    pub fn from_tensors(cfg: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self, WeightError> {
        let order: Vec<String> = tensors.iter().map(|t| t.name.clone()).collect();
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(tensors.len());
        for t in tensors {
            if by_name.contains_key(&t.name) {
                return Err(WeightError::Duplicate(t.name));
            }
            by_name.insert(t.name.clone(), t);
        }
        let schema = tensor_schema(cfg);
        for (name, dims) in &schema {
            let t = by_name.get(name).ok_or_else(|| WeightError::MissingTensor(name.clone()))?;
            if &t.dims != dims {
                return Err(WeightError::ShapeMismatch {
                    tensor: name.clone(),
                    expected: dims.clone(),
                    found: t.dims.clone(),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(WeightError::NonFinite(name.clone()));
            }
        }
        if by_name.len() != schema.len() {
            let known: std::collections::HashSet<&str> = schema.iter().map(|(n, _)| n.as_str()).collect();
            let extra = order.into_iter().find(|n| !known.contains(n.as_str())).expect("extra tensor exists");
            return Err(WeightError::UnexpectedTensor(extra));
        }

        let mut take = |name: &str| by_name.remove(name).expect("validated above");
        let patch_w = take("patch.w");
        let patch_w = mat(&patch_w.dims, patch_w.data);
        let patch_b = take("patch.b").data;
        let pos = take("pos");
        let pos = mat(&pos.dims, pos.data);
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 1..=cfg.depth {
            let mut t = |n: &str| take(&format!("layer{i}.{n}"));
            let mut m = |n: &str| {
                let x = t(n);
                mat(&x.dims, x.data)
            };
            let qkv_w = m("attn.qkv.w");
            let proj_w = m("attn.proj.w");
            let fc1_w = m("mlp.fc1.w");
            let fc2_w = m("mlp.fc2.w");
            let mut v = |n: &str| take(&format!("layer{i}.{n}")).data;
            layers.push(LayerWeights {
                ln1_g: v("ln1.g"),
                ln1_b: v("ln1.b"),
                qkv_w,
                qkv_b: v("attn.qkv.b"),
                proj_w,
                proj_b: v("attn.proj.b"),
                ln2_g: v("ln2.g"),
                ln2_b: v("ln2.b"),
                fc1_w,
                fc1_b: v("mlp.fc1.b"),
                fc2_w,
                fc2_b: v("mlp.fc2.b"),
            });
        }
        let head_w = take("head.w");
        let head_w = mat(&head_w.dims, head_w.data);
        let head_b = take("head.b").data;
        Ok(WeightBundle { patch_w, patch_b, pos, layers, head_w, head_b })
    }

    /// All tensors in schema order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = vec![
            ("patch.w".into(), vec![self.patch_w.rows(), self.patch_w.cols()], self.patch_w.data()),
            ("patch.b".into(), vec![self.patch_b.len()], &self.patch_b),
            ("pos".into(), vec![self.pos.rows(), self.pos.cols()], self.pos.data()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let i = i + 1;
            let p = |n: &str| format!("layer{i}.{n}");
            let dm = |x: &Matrix| vec![x.rows(), x.cols()];
            out.extend([
                (p("ln1.g"), vec![l.ln1_g.len()], l.ln1_g.as_slice()),
                (p("ln1.b"), vec![l.ln1_b.len()], l.ln1_b.as_slice()),
                (p("attn.qkv.w"), dm(&l.qkv_w), l.qkv_w.data()),
                (p("attn.qkv.b"), vec![l.qkv_b.len()], l.qkv_b.as_slice()),
                (p("attn.proj.w"), dm(&l.proj_w), l.proj_w.data()),
                (p("attn.proj.b"), vec![l.proj_b.len()], l.proj_b.as_slice()),
                (p("ln2.g"), vec![l.ln2_g.len()], l.ln2_g.as_slice()),
                (p("ln2.b"), vec![l.ln2_b.len()], l.ln2_b.as_slice()),
                (p("mlp.fc1.w"), dm(&l.fc1_w), l.fc1_w.data()),
                (p("mlp.fc1.b"), vec![l.fc1_b.len()], l.fc1_b.as_slice()),
                (p("mlp.fc2.w"), dm(&l.fc2_w), l.fc2_w.data()),
                (p("mlp.fc2.b"), vec![l.fc2_b.len()], l.fc2_b.as_slice()),
            ]);
        }
        out.push(("head.w".into(), vec![self.head_w.rows(), self.head_w.cols()], self.head_w.data()));
        out.push(("head.b".into(), vec![self.head_b.len()], &self.head_b));
        out
    }

    /// Serializes the bundle as a TMW1 byte stream.
    pub fn to_tmw_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(&TMW_MAGIC);
        buf.extend_from_slice(&TMW_VERSION.to_le_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| AlgmError::io(path, e))?;
        f.write_all(&self.to_tmw_bytes()).map_err(|e| AlgmError::io(path, e))?;
        f.flush().map_err(|e| AlgmError::io(path, e))
    }

    /// Parses TMW1 bytes and validates them against `cfg`.
    pub fn from_tmw_bytes(bytes: &[u8], cfg: &EncoderConfig) -> Result<Self, WeightError> {
        WeightBundle::from_tensors(cfg, read_tmw(bytes)?)
    }

    pub fn load(path: &Path, cfg: &EncoderConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AlgmError::io(path, e))?;
        Ok(WeightBundle::from_tmw_bytes(&bytes, cfg)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<&'a [u8], WeightError> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightError::Truncated { context: context() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<u32, WeightError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads the raw tensor list of a TMW1 stream without schema checks.
pub fn read_tmw(bytes: &[u8]) -> Result<Vec<Tensor>, WeightError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, || "magic".into())?;
    if magic != TMW_MAGIC {
        return Err(WeightError::BadMagic { found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = c.u32(|| "version".into())?;
    if version != TMW_VERSION {
        return Err(WeightError::UnsupportedVersion(version));
    }
    let count = c.u32(|| "tensor count".into())? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for idx in 0..count {
        let name_len = c.u32(|| format!("name length of tensor #{idx}"))? as usize;
        let name = c.take(name_len, || format!("name of tensor #{idx}"))?;
        let name = std::str::from_utf8(name).map_err(|_| WeightError::BadName)?.to_string();
        let rank = c.u32(|| format!("rank of `{name}`"))? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(c.u32(|| format!("dims of `{name}`"))? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightError::Truncated { context: format!("data of `{name}`") })?;
        let raw = c.take(n, || format!("data of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(Tensor { name, dims, data });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize) -> EncoderConfig {
        EncoderConfig::new(16, 16, 4, depth, 8, 2, vec![], 3)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = cfg(2);
        let w = WeightBundle::init_random(&c, 9).unwrap();
        let bytes = w.to_tmw_bytes();
        assert_eq!(&bytes[..4], &[0x54, 0x4D, 0x57, 0x31]);
        let back = WeightBundle::from_tmw_bytes(&bytes, &c).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_tmw_bytes(), bytes);
    }

    #[test]
    fn same_seed_same_bundle() {
        let c = cfg(2);
        assert_eq!(WeightBundle::init_random(&c, 5).unwrap(), WeightBundle::init_random(&c, 5).unwrap());
        assert_ne!(WeightBundle::init_random(&c, 5).unwrap(), WeightBundle::init_random(&c, 6).unwrap());
    }

    #[test]
    fn init_range() {
        let c = cfg(1);
        let w = WeightBundle::init_random(&c, 1).unwrap();
        let s = 1.0 / (8f32).sqrt();
        assert!(w.patch_w.data().iter().all(|v| v.abs() <= s));
        assert!(w.layers[0].ln1_g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_depth_names_first_layer_tensor() {
        let bytes = WeightBundle::init_random(&cfg(2), 1).unwrap().to_tmw_bytes();
        let err = WeightBundle::from_tmw_bytes(&bytes, &cfg(3)).unwrap_err();
        assert!(matches!(&err, WeightError::MissingTensor(n) if n == "layer3.ln1.g"), "{err}");
        let err = WeightBundle::from_tmw_bytes(&bytes, &cfg(1)).unwrap_err();
        assert!(matches!(&err, WeightError::UnexpectedTensor(n) if n == "layer2.ln1.g"), "{err}");
    }

    #[test]
    fn wrong_width_is_shape_mismatch() {
        let bytes = WeightBundle::init_random(&cfg(1), 1).unwrap().to_tmw_bytes();
        let mut other = cfg(1);
        other.num_classes = 4;
        let err = WeightBundle::from_tmw_bytes(&bytes, &other).unwrap_err();
        assert!(matches!(&err, WeightError::ShapeMismatch { tensor, .. } if tensor == "head.w"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = WeightBundle::init_random(&cfg(1), 1).unwrap().to_tmw_bytes();
        let c = cfg(1);
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(WeightBundle::from_tmw_bytes(short, &c), Err(WeightError::Truncated { .. })));
        assert!(matches!(WeightBundle::from_tmw_bytes(&bytes[..2], &c), Err(WeightError::Truncated { .. })));
        bytes[4] = 2;
        assert!(matches!(WeightBundle::from_tmw_bytes(&bytes, &c), Err(WeightError::UnsupportedVersion(2))));
        bytes[0] = b'X';
        assert!(matches!(WeightBundle::from_tmw_bytes(&bytes, &c), Err(WeightError::BadMagic { .. })));
    }
}
