//! Per-slide feature container and its on-disk binary format.
//!
//! A feature file is a fixed-length ASCII-JSON header line (padded to
//! [`FEATURE_HEADER_LEN`] bytes) followed by `f_low` then `f_high` as
//! contiguous row-major little-endian 32-bit floats. Features are held in
//! memory as `f64`; every stored `f32` survives the round trip bit-exactly.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{SlideGeometry, CELLS_PER_TILE};

/// Byte length of the feature-file header slot, including the trailing
/// newline. The JSON header is space-padded to this length.
pub const FEATURE_HEADER_LEN: usize = 128;

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct FeatureHeader {
    n_tiles: usize,
    dim_low: usize,
    dim_high: usize,
    dtype: String,
    order: String,
    endian: String,
}

/// All features of one slide: one low-mag vector per tile and sixteen
/// high-mag vectors per tile. High-mag row `t * 16 + (k - 1)` holds cell `k`
/// of tile `t` (both zero-based here).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub geometry: SlideGeometry,
    pub dim_low: usize,
    pub dim_high: usize,
    /// `[n_tiles x dim_low]`
    pub f_low: Array2<f64>,
    /// `[(n_tiles * 16) x dim_high]`
    pub f_high: Array2<f64>,
}

impl FeatureBag {
    pub fn validate(&self) -> Result<()> {
        let n = self.geometry.n_tiles;
        if self.f_low.dim() != (n, self.dim_low) {
            return Err(Error::Shape(format!(
                "f_low is {:?}, geometry expects ({n}, {})",
                self.f_low.dim(),
                self.dim_low
            )));
        }
        if self.f_high.dim() != (n * CELLS_PER_TILE, self.dim_high) {
            return Err(Error::Shape(format!(
                "f_high is {:?}, geometry expects ({}, {})",
                self.f_high.dim(),
                n * CELLS_PER_TILE,
                self.dim_high
            )));
        }
        for ((t, d), &x) in self.f_low.indexed_iter() {
            if !x.is_finite() {
                return Err(Error::Ingestion {
                    slide: self.geometry.slide_id.clone(),
                    detail: format!("non-finite value at f_low[{t}][{d}]"),
                });
            }
        }
        for ((r, d), &x) in self.f_high.indexed_iter() {
            if !x.is_finite() {
                return Err(Error::Ingestion {
                    slide: self.geometry.slide_id.clone(),
                    detail: format!(
                        "non-finite value at f_high[{}][{}][{d}]",
                        r / CELLS_PER_TILE,
                        r % CELLS_PER_TILE
                    ),
                });
            }
        }
        Ok(())
    }

    /// The sixteen high-mag feature rows of tile `t` (zero-based).
    pub fn high_rows(&self, tile: usize) -> ArrayView2<'_, f64> {
        self.f_high
            .slice(ndarray::s![tile * CELLS_PER_TILE..(tile + 1) * CELLS_PER_TILE, ..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = FeatureHeader {
            n_tiles: self.geometry.n_tiles,
            dim_low: self.dim_low,
            dim_high: self.dim_high,
            dtype: "f32".to_string(),
            order: "row-major".to_string(),
            endian: "little".to_string(),
        };
        let json = serde_json::to_string(&header)
            .map_err(|e| Error::Parse(format!("feature header serialization: {e}")))?;
        if json.len() >= FEATURE_HEADER_LEN {
            return Err(Error::Parse(format!(
                "feature header {} bytes exceeds the {FEATURE_HEADER_LEN}-byte slot",
                json.len()
            )));
        }
        let mut bytes =
            Vec::with_capacity(FEATURE_HEADER_LEN + 4 * (self.f_low.len() + self.f_high.len()));
        bytes.extend_from_slice(json.as_bytes());
        bytes.resize(FEATURE_HEADER_LEN - 1, b' ');
        bytes.push(b'\n');
        for &x in self.f_low.iter().chain(self.f_high.iter()) {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Load and cross-validate a feature file against the slide geometry and
    /// the dims declared by the cohort manifest.
    pub fn load(
        path: &Path,
        geometry: &SlideGeometry,
        dim_low: usize,
        dim_high: usize,
    ) -> Result<Self> {
        let slide = geometry.slide_id.clone();
        let ingest = |detail: String| Error::Ingestion {
            slide: slide.clone(),
            detail,
        };
        let bytes = std::fs::read(path)
            .map_err(|e| ingest(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() < FEATURE_HEADER_LEN || bytes[FEATURE_HEADER_LEN - 1] != b'\n' {
            return Err(ingest(format!(
                "missing {FEATURE_HEADER_LEN}-byte header line"
            )));
        }
        let header_text = std::str::from_utf8(&bytes[..FEATURE_HEADER_LEN - 1])
            .map_err(|_| ingest("header is not ASCII".to_string()))?;
        let header: FeatureHeader = serde_json::from_str(header_text.trim_end())
            .map_err(|e| ingest(format!("header parse: {e}")))?;
        if header.dtype != "f32" || header.order != "row-major" || header.endian != "little" {
            return Err(ingest(format!(
                "unsupported encoding ({}, {}, {})",
                header.dtype, header.order, header.endian
            )));
        }
        if header.n_tiles != geometry.n_tiles {
            return Err(ingest(format!(
                "header declares {} tiles, geometry has {}",
                header.n_tiles, geometry.n_tiles
            )));
        }
        if header.dim_low != dim_low || header.dim_high != dim_high {
            return Err(ingest(format!(
                "header dims ({}, {}) differ from manifest dims ({dim_low}, {dim_high})",
                header.dim_low, header.dim_high
            )));
        }
        let n_low = header.n_tiles * header.dim_low;
        let n_high = header.n_tiles * CELLS_PER_TILE * header.dim_high;
        let expected = FEATURE_HEADER_LEN + 4 * (n_low + n_high);
        if bytes.len() != expected {
            return Err(ingest(format!(
                "file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut values = Vec::with_capacity(n_low + n_high);
        for chunk in bytes[FEATURE_HEADER_LEN..].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunks of 4"));
            values.push(v as f64);
        }
        let f_low = Array2::from_shape_vec(
            (header.n_tiles, header.dim_low),
            values[..n_low].to_vec(),
        )
        .expect("length checked");
        let f_high = Array2::from_shape_vec(
            (header.n_tiles * CELLS_PER_TILE, header.dim_high),
            values[n_low..].to_vec(),
        )
        .expect("length checked");
        let bag = FeatureBag {
            geometry: geometry.clone(),
            dim_low,
            dim_high,
            f_low,
            f_high,
        };
        bag.validate().map_err(|e| match e {
            Error::Ingestion { .. } => e,
            other => ingest(other.to_string()),
        })?;
        Ok(bag)
    }
}
