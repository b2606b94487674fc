//! Patch feature banks.
//!
//! Encoders are pluggable through [`PatchEncoder`]; [`StubEncoder`] is a
//! deterministic stand-in that hashes the patch bytes. Feature matrices are
//! persisted in the WSIF store:
//!
//! ```text
//! "WSIF" | u16 version=1 | u16 reserved=0 | u32 dim | u64 n
//! n x (u16 level, u32 x, u32 y, f32 focus, f32 tissue_fraction)   18 bytes each
//! n x dim f32, row-major
//! u32 crc32 of all preceding bytes
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::hash::{fnv1a64, splitmix64, unit_f64};
use crate::patching::PatchRecord;
use crate::pyramid::{PyramidError, RegionSource, RgbImage};

pub const STORE_MAGIC: &[u8; 4] = b"WSIF";
pub const STORE_VERSION: u16 = 1;
const META_BYTES: usize = 18;
const HEADER_BYTES: usize = 4 + 2 + 2 + 4 + 8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("patch at level {level} ({x},{y}): {source}")]
    Record {
        level: u32,
        x: u32,
        y: u32,
        #[source]
        source: Box<FeatureError>,
    },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("encoder produced {got} values, expected {expected}")]
    EncoderDim { expected: usize, got: usize },
    #[error("invalid feature matrix: {0}")]
    Invalid(String),
}

impl FeatureError {
    pub fn is_io(&self) -> bool {
        match self {
            FeatureError::Io { .. } => true,
            FeatureError::Pyramid(e) => e.is_io(),
            FeatureError::Record { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

/// Maps a patch to a fixed-size feature vector. Implementations must be
/// deterministic: the same patch bytes always give the same vector.
pub trait PatchEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, patch: &RgbImage) -> Result<Vec<f32>, FeatureError>;
}

/// Hash-seeded unit vectors.
#[derive(Debug, Clone, Copy)]
pub struct StubEncoder {
    pub dim: usize,
}

impl StubEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "encoder dimension must be positive");
        Self { dim }
    }
}

impl PatchEncoder for StubEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, patch: &RgbImage) -> Result<Vec<f32>, FeatureError> {
        Ok(stub_encode(patch, self.dim))
    }
}

/// Seeds a counter-based generator with the FNV-1a hash of the pixel bytes,
/// draws `dim` uniforms in `[-1, 1]` and scales them to unit norm.
pub fn stub_encode(patch: &RgbImage, dim: usize) -> Vec<f32> {
    let key = fnv1a64(patch.pixels());
    let raw: Vec<f64> = (0..dim as u64).map(|i| 2.0 * unit_f64(splitmix64(key.wrapping_add(i))) - 1.0).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Only reachable for dim == 1 with a draw of exactly 0.5.
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|v| (v / norm) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMeta {
    pub level: u16,
    pub x: u32,
    pub y: u32,
    pub focus: f32,
    pub tissue_fraction: f32,
}

impl PatchMeta {
    pub fn from_record(r: &PatchRecord) -> Result<Self, FeatureError> {
        let level = u16::try_from(r.level).map_err(|_| FeatureError::Invalid(format!("level {} exceeds u16", r.level)))?;
        Ok(Self { level, x: r.x, y: r.y, focus: r.focus as f32, tissue_fraction: r.tissue_fraction as f32 })
    }
}

/// `n x dim` row-major single-precision features with per-row patch metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<PatchMeta>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>, meta: Vec<PatchMeta>) -> Result<Self, FeatureError> {
        if dim == 0 {
            return Err(FeatureError::Invalid("dim must be positive".into()));
        }
        if data.len() != meta.len() * dim {
            return Err(FeatureError::Invalid(format!(
                "{} values for {} rows of dim {}",
                data.len(),
                meta.len(),
                dim
            )));
        }
        Ok(Self { dim, data, meta })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new(), meta: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.meta.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn meta(&self) -> &[PatchMeta] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STORE_MAGIC);
        w.u16(STORE_VERSION);
        w.u16(0);
        w.u32(self.dim as u32);
        w.u64(self.n() as u64);
        for m in &self.meta {
            w.u16(m.level);
            w.u32(m.x);
            w.u32(m.y);
            w.f32(m.focus);
            w.f32(m.tissue_fraction);
        }
        for &v in &self.data {
            w.f32(v);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FeatureError> {
        let mut r = Reader::new(buf);
        r.expect_magic(STORE_MAGIC)?;
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(CodecError::Version(version).into());
        }
        let reserved = r.u16()?;
        if reserved != 0 {
            return Err(CodecError::Malformed(format!("reserved field is {reserved}")).into());
        }
        let dim = r.u32()? as usize;
        let n = r.u64()?;
        let needed = (n as u128) * (META_BYTES as u128 + 4 * dim as u128) + HEADER_BYTES as u128 + 4;
        if needed > buf.len() as u128 {
            return Err(CodecError::Truncated { needed: needed.min(usize::MAX as u128) as usize, have: buf.len() }.into());
        }
        let n = n as usize;
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            meta.push(PatchMeta {
                level: r.u16()?,
                x: r.u32()?,
                y: r.u32()?,
                focus: r.f32()?,
                tissue_fraction: r.f32()?,
            });
        }
        let data = r.f32_vec(n * dim)?;
        r.finish()?;
        FeatureMatrix::new(dim, data, meta)
    }
}

pub fn write_store(m: &FeatureMatrix, path: &Path) -> Result<(), FeatureError> {
    fs::write(path, m.to_bytes()).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })
}

pub fn read_store(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let buf = fs::read(path).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })?;
    FeatureMatrix::from_bytes(&buf)
}

/// Encodes each record's patch; row `i` belongs to `records[i]`.
pub fn build_feature_matrix(
    records: &[PatchRecord],
    reader: &dyn RegionSource,
    encoder: &dyn PatchEncoder,
    patch_size: u32,
) -> Result<FeatureMatrix, FeatureError> {
    let dim = encoder.dim();
    let rows: Vec<Vec<f32>> = records
        .par_iter()
        .map(|r| {
            let wrap = |e: FeatureError| FeatureError::Record { level: r.level, x: r.x, y: r.y, source: Box::new(e) };
            let patch = reader.read_region(r.level, r.x, r.y, patch_size, patch_size).map_err(|e| wrap(e.into()))?;
            let v = encoder.encode(&patch).map_err(wrap)?;
            if v.len() != dim {
                return Err(wrap(FeatureError::EncoderDim { expected: dim, got: v.len() }));
            }
            Ok(v)
        })
        .collect::<Result<_, FeatureError>>()?;
    let meta = records.iter().map(PatchMeta::from_record).collect::<Result<Vec<_>, _>>()?;
    FeatureMatrix::new(dim, rows.concat(), meta)
}
