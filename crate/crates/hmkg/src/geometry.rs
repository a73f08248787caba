//! Multi-scale tiling lattice: low-magnification tiles, their aligned
//! high-magnification regions, and the 4x4 cell grid inside each region.
//!
//! Every low-mag tile of side `low_patch_px` corresponds to a high-mag region
//! of side `region_px = 4 * low_patch_px`, subdivided into a 4x4 grid of
//! cells. Cells are numbered `k` in 1..=16 in row-major order.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Cells per region edge; regions are always subdivided 4x4.
pub const GRID_DIM: usize = 4;
/// Cells per region.
pub const CELLS_PER_TILE: usize = GRID_DIM * GRID_DIM;

/// Position of one patch in the slide/tile/cell lattice. `cell` is absent
/// for low-magnification tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridIndex {
    /// Slide number, 1-based.
    pub slide: usize,
    /// Tile number within the slide, 1-based.
    pub tile: usize,
    /// Cell number within the tile, 1..=16; `None` for the low-mag tile itself.
    pub cell: Option<u8>,
}

/// Row-major (row, col) for a 1-based cell index `k`.
pub fn cell_to_rc(k: u8) -> Result<(u8, u8)> {
    if !(1..=CELLS_PER_TILE as u8).contains(&k) {
        return Err(Error::Domain(format!(
            "cell index {k} outside 1..={CELLS_PER_TILE}"
        )));
    }
    let z = k - 1;
    Ok((z / GRID_DIM as u8, z % GRID_DIM as u8))
}

/// Inverse of [`cell_to_rc`]: `k = 4*row + col + 1`.
pub fn rc_to_cell(row: u8, col: u8) -> Result<u8> {
    if row >= GRID_DIM as u8 || col >= GRID_DIM as u8 {
        return Err(Error::Domain(format!(
            "grid position ({row}, {col}) outside 0..{GRID_DIM}"
        )));
    }
    Ok(GRID_DIM as u8 * row + col + 1)
}

/// Tiling description of one slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideGeometry {
    pub slide_id: String,
    pub n_tiles: usize,
    /// Side length of a low-magnification tile, in low-mag pixels.
    pub low_patch_px: u32,
    /// Side length of the aligned high-magnification region; always
    /// `4 * low_patch_px`.
    pub region_px: u32,
    /// Top-left corner of each low-mag tile, in low-mag pixels.
    pub tile_origins: Vec<(u32, u32)>,
}

/// How tile origins are laid out on the low-magnification grid.
#[derive(Debug, Clone)]
pub enum OriginLayout {
    /// Tiles in a single row: tile j at `(j * low_patch_px, 0)`.
    Row,
    /// Row-major grid with the given number of columns.
    Grid { cols: usize },
    /// Caller-provided origins, validated against the grid.
    Explicit(Vec<(u32, u32)>),
}

/// Construct a validated [`SlideGeometry`].
pub fn build_geometry(
    slide_id: &str,
    n_tiles: usize,
    low_patch_px: u32,
    layout: OriginLayout,
) -> Result<SlideGeometry> {
    if n_tiles < 1 {
        return Err(Error::Domain("geometry needs at least one tile".to_string()));
    }
    if low_patch_px < 1 {
        return Err(Error::Domain("low_patch_px must be at least 1".to_string()));
    }
    let origins = match layout {
        OriginLayout::Row => (0..n_tiles)
            .map(|j| (j as u32 * low_patch_px, 0))
            .collect(),
        OriginLayout::Grid { cols } => {
            if cols == 0 {
                return Err(Error::Domain("grid layout needs cols >= 1".to_string()));
            }
            (0..n_tiles)
                .map(|j| {
                    (
                        (j % cols) as u32 * low_patch_px,
                        (j / cols) as u32 * low_patch_px,
                    )
                })
                .collect()
        }
        OriginLayout::Explicit(origins) => origins,
    };
    let geometry = SlideGeometry {
        slide_id: slide_id.to_string(),
        n_tiles,
        low_patch_px,
        region_px: 4 * low_patch_px,
        tile_origins: origins,
    };
    geometry.validate()?;
    Ok(geometry)
}

impl SlideGeometry {
    /// Check every structural invariant of the tiling.
    pub fn validate(&self) -> Result<()> {
        if self.n_tiles < 1 {
            return Err(Error::Domain("geometry needs at least one tile".to_string()));
        }
        if self.low_patch_px < 1 {
            return Err(Error::Domain("low_patch_px must be at least 1".to_string()));
        }
        if self.region_px != 4 * self.low_patch_px {
            return Err(Error::Alignment(format!(
                "region_px {} is not 4 x low_patch_px {}",
                self.region_px, self.low_patch_px
            )));
        }
        if self.tile_origins.len() != self.n_tiles {
            return Err(Error::Alignment(format!(
                "{} origins for {} tiles",
                self.tile_origins.len(),
                self.n_tiles
            )));
        }
        for &(x, y) in &self.tile_origins {
            if x % self.low_patch_px != 0 || y % self.low_patch_px != 0 {
                return Err(Error::Alignment(format!(
                    "origin ({x}, {y}) is off the {}-px grid",
                    self.low_patch_px
                )));
            }
        }
        for (a, &oa) in self.tile_origins.iter().enumerate() {
            for &ob in self.tile_origins.iter().skip(a + 1) {
                if oa == ob {
                    return Err(Error::Alignment(format!(
                        "tiles overlap at origin ({}, {})",
                        oa.0, oa.1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total number of high-magnification cells on the slide.
    pub fn n_high_patches(&self) -> usize {
        self.n_tiles * CELLS_PER_TILE
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("geometry serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let geometry: SlideGeometry = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("geometry file {}: {e}", path.display())))?;
        geometry.validate()?;
        Ok(geometry)
    }
}

/// Pixel offset of cell `k`'s top-left corner inside its high-magnification
/// region. Cells have the same pixel side as a low-mag tile, so the offset is
/// `(col * low_patch_px, row * low_patch_px)`.
pub fn cell_offset(index: &GridIndex, geometry: &SlideGeometry) -> Result<(u32, u32)> {
    let k = index.cell.ok_or_else(|| {
        Error::Domain("cell_offset needs an index with a cell component".to_string())
    })?;
    if index.tile < 1 || index.tile > geometry.n_tiles {
        return Err(Error::Domain(format!(
            "tile {} outside 1..={}",
            index.tile, geometry.n_tiles
        )));
    }
    let (row, col) = cell_to_rc(k)?;
    Ok((
        col as u32 * geometry.low_patch_px,
        row as u32 * geometry.low_patch_px,
    ))
}
