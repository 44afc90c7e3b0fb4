//! Snippet feature maps and the `RAPF` binary format.
//!
//! Layout: magic `RAPF` | version u32 LE | T' u32 LE | D u32 LE | T'·D
//! IEEE-754 f32 LE values, row-major (snippet-major).

use std::path::Path;

use rapnet_tensor::Tensor;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"RAPF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// `T' × D` snippet features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub video_id: String,
    t_prime: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(video_id: impl Into<String>, t_prime: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if t_prime == 0 || dim == 0 || values.len() != t_prime * dim {
            return Err(Error::contract(
                "feature_map",
                format!("{t_prime}x{dim} map needs {} values, got {}", t_prime * dim, values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(
                "feature_map",
                format!("non-finite value at snippet {} dim {}", i / dim, i % dim),
            ));
        }
        Ok(FeatureMap {
            video_id: video_id.into(),
            t_prime,
            dim,
            values,
        })
    }

    pub fn t_prime(&self) -> usize {
        self.t_prime
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Channel-major `[D × T']` f64 tensor, the layout the network consumes.
    pub fn to_channels_first(&self) -> Tensor {
        let mut data = vec![0.0; self.values.len()];
        for t in 0..self.t_prime {
            for d in 0..self.dim {
                data[d * self.t_prime + t] = f64::from(self.values[t * self.dim + d]);
            }
        }
        Tensor::new(vec![self.dim, self.t_prime], data).expect("extents are positive")
    }
}

/// Resamples the time axis to `target_t` snippets by per-dimension linear
/// interpolation. The first and last snippet centers of the input map onto
/// the first and last output centers.
pub fn rescale_features(f: &FeatureMap, target_t: usize) -> Result<FeatureMap> {
    if target_t == 0 {
        return Err(Error::contract("rescale_features", "target length must be at least 1"));
    }
    if f.t_prime == target_t {
        return Ok(f.clone());
    }
    let src_last = (f.t_prime - 1) as f64;
    let mut values = Vec::with_capacity(target_t * f.dim);
    for o in 0..target_t {
        let pos = if target_t == 1 {
            0.5 * src_last
        } else {
            o as f64 * src_last / (target_t - 1) as f64
        };
        let lo = (pos.floor() as usize).min(f.t_prime - 1);
        let hi = (lo + 1).min(f.t_prime - 1);
        let frac = pos - lo as f64;
        let (a, b) = (f.row(lo), f.row(hi));
        for d in 0..f.dim {
            let (va, vb) = (f64::from(a[d]), f64::from(b[d]));
            values.push((va + (vb - va) * frac) as f32);
        }
    }
    FeatureMap::new(f.video_id.clone(), target_t, f.dim, values)
}

pub fn write_feature_file(path: impl AsRef<Path>, f: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * f.values.len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(f.t_prime as u32).to_le_bytes());
    bytes.extend_from_slice(&(f.dim as u32).to_le_bytes());
    for v in &f.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the video id is the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header".into()));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let (t_prime, dim) = (word(8) as usize, word(12) as usize);
    if t_prime == 0 || dim == 0 {
        return Err(format_err(8, format!("empty extent {t_prime}x{dim}")));
    }
    let expected = HEADER_LEN + 4 * t_prime * dim;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("payload should end at byte {expected}, file has {} bytes", bytes.len()),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureMap::new(video_id, t_prime, dim, values).map_err(|e| format_err(HEADER_LEN, e.to_string()))
}
