//! Frozen patch-embedding interface. Cohorts normally arrive as precomputed
//! feature files; this module provides the pluggable encoder boundary plus a
//! deterministic stub for pixel inputs, so the rest of the pipeline can be
//! exercised without foundation-model weights.
//!
//! The stub (`stats-proj`) pools each channel to four statistics (mean,
//! standard deviation, min, max), applies a seeded random projection to
//! `dim_out`, and scales to unit norm. It is stateless and frozen: nothing
//! downstream can update it.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::geometry::{self, SlideGeometry, CELLS_PER_TILE};
use crate::hashing::stable_hash64;

pub const STATS_PROJ: &str = "stats-proj";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub name: String,
    pub dim_out: usize,
    pub seed: u64,
    pub frozen: bool,
}

impl EncoderSpec {
    pub fn stats_proj(dim_out: usize, seed: u64) -> Self {
        Self {
            name: STATS_PROJ.to_string(),
            dim_out,
            seed,
            frozen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::Config(format!(
                "encoder '{}' must be frozen",
                self.name
            )));
        }
        if self.dim_out == 0 {
            return Err(Error::Config(format!(
                "encoder '{}' needs dim_out >= 1",
                self.name
            )));
        }
        Ok(())
    }
}

pub trait PatchEncoder {
    fn spec(&self) -> &EncoderSpec;

    /// Embed one `[H x W x C]` patch into a `dim_out` vector.
    fn encode(&self, pixels: &Array3<f64>) -> Result<Array1<f64>>;
}

/// Construct an encoder from its spec. The registry is keyed by name so a
/// real foundation-model wrapper can slot in without touching callers.
pub fn build_encoder(spec: EncoderSpec) -> Result<Box<dyn PatchEncoder>> {
    spec.validate()?;
    match spec.name.as_str() {
        STATS_PROJ => Ok(Box::new(StatsProjEncoder { spec })),
        other => Err(Error::Config(format!("unknown encoder '{other}'"))),
    }
}

pub struct StatsProjEncoder {
    spec: EncoderSpec,
}

impl StatsProjEncoder {
    /// Channel statistics in a fixed order: per channel mean, std, min, max.
    fn channel_stats(pixels: &Array3<f64>) -> Array1<f64> {
        let (h, w, c) = pixels.dim();
        let count = (h * w) as f64;
        let mut stats = Array1::zeros(4 * c);
        for ch in 0..c {
            let mut sum = 0.0;
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for i in 0..h {
                for j in 0..w {
                    let v = pixels[[i, j, ch]];
                    sum += v;
                    min = min.min(v);
                    max = max.max(v);
                }
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let d = pixels[[i, j, ch]] - mean;
                    sq += d * d;
                }
            }
            stats[4 * ch] = mean;
            stats[4 * ch + 1] = (sq / count).sqrt();
            stats[4 * ch + 2] = min;
            stats[4 * ch + 3] = max;
        }
        stats
    }

    /// Seeded projection `[dim_out x 4C]`, regenerated per call; the encoder
    /// holds no mutable state, so frozenness is structural.
    fn projection(&self, n_channels: usize) -> Array2<f64> {
        let key = stable_hash64(self.spec.seed, &format!("{}/{n_channels}", self.spec.name));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        crate::train::init_matrix(&mut rng, self.spec.dim_out, 4 * n_channels)
    }
}

impl PatchEncoder for StatsProjEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, pixels: &Array3<f64>) -> Result<Array1<f64>> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Domain(format!("empty patch of shape {h}x{w}x{c}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite pixel value".to_string()));
        }
        let stats = Self::channel_stats(pixels);
        let mut out = self.projection(c).dot(&stats);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.mapv_inplace(|v| v / norm);
        }
        Ok(out)
    }
}

/// One-shot convenience around the registry.
pub fn encode_patch(pixels: &Array3<f64>, spec: &EncoderSpec) -> Result<Array1<f64>> {
    build_encoder(spec.clone())?.encode(pixels)
}

/// Assemble a full feature bag from index-keyed patches. Low patches are
/// keyed by 1-based tile index, high patches by `(tile, cell)` with cells
/// numbered 1..=16 row-major. Assembly is keyed, so input order is free.
pub fn encode_bag(
    geometry: &SlideGeometry,
    low_patches: &[(usize, Array3<f64>)],
    high_patches: &[(usize, u8, Array3<f64>)],
    low: &dyn PatchEncoder,
    high: &dyn PatchEncoder,
) -> Result<FeatureBag> {
    let n = geometry.n_tiles;
    let dim_low = low.spec().dim_out;
    let dim_high = high.spec().dim_out;
    let mut f_low = Array2::zeros((n, dim_low));
    let mut seen_low = vec![false; n];
    for (tile, pixels) in low_patches {
        if *tile < 1 || *tile > n {
            return Err(Error::Domain(format!(
                "low patch for tile {tile}, geometry has {n}"
            )));
        }
        if seen_low[tile - 1] {
            return Err(Error::Domain(format!("duplicate low patch for tile {tile}")));
        }
        seen_low[tile - 1] = true;
        f_low.row_mut(tile - 1).assign(&low.encode(pixels)?);
    }
    let mut f_high = Array2::zeros((n * CELLS_PER_TILE, dim_high));
    let mut seen_high = vec![false; n * CELLS_PER_TILE];
    for (tile, cell, pixels) in high_patches {
        if *tile < 1 || *tile > n {
            return Err(Error::Domain(format!(
                "high patch for tile {tile}, geometry has {n}"
            )));
        }
        geometry::cell_to_rc(*cell)?;
        let row = (tile - 1) * CELLS_PER_TILE + (*cell as usize - 1);
        if seen_high[row] {
            return Err(Error::Domain(format!(
                "duplicate high patch for tile {tile} cell {cell}"
            )));
        }
        seen_high[row] = true;
        f_high.row_mut(row).assign(&high.encode(pixels)?);
    }
    if let Some(tile) = seen_low.iter().position(|s| !s) {
        return Err(Error::Completeness(format!(
            "slide '{}': missing low patch for tile {}",
            geometry.slide_id,
            tile + 1
        )));
    }
    if let Some(row) = seen_high.iter().position(|s| !s) {
        return Err(Error::Completeness(format!(
            "slide '{}': missing high patch for tile {} cell {}",
            geometry.slide_id,
            row / CELLS_PER_TILE + 1,
            row % CELLS_PER_TILE + 1
        )));
    }
    let bag = FeatureBag {
        geometry: geometry.clone(),
        dim_low,
        dim_high,
        f_low,
        f_high,
    };
    bag.validate()?;
    Ok(bag)
}
