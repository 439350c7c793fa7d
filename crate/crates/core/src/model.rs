//! Problem, tile and machine descriptions, and the tile-index arithmetic
//! shared by the planner, executor and analytics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One GEMM instance: `C = alpha * A(m x k) * B(k x n) + beta * C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Bytes per element; one of 1, 2, 4, 8.
    pub elem_bytes: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl ProblemShape {
    /// Shape with the default element width (2 bytes), `alpha = 1`, `beta = 0`.
    pub fn new(m: usize, n: usize, k: usize) -> Result<Self> {
        let shape = ProblemShape {
            m,
            n,
            k,
            elem_bytes: 2,
            alpha: 1.0,
            beta: 0.0,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn with_elem_bytes(mut self, elem_bytes: usize) -> Result<Self> {
        self.elem_bytes = elem_bytes;
        self.validate()?;
        Ok(self)
    }

    pub fn with_scaling(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [("m", self.m), ("n", self.n), ("k", self.k)] {
            if value == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if ![1, 2, 4, 8].contains(&self.elem_bytes) {
            return Err(Error::invalid("elem_bytes", "must be one of 1, 2, 4, 8"));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::invalid("alpha/beta", "must be finite"));
        }
        Ok(())
    }

    /// Scalar multiply-accumulates in the unpadded problem.
    pub fn volume(&self) -> u128 {
        self.m as u128 * self.n as u128 * self.k as u128
    }
}

/// Tile extents plus per-dimension padding switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
    pub pad_m: bool,
    pub pad_n: bool,
    pub pad_k: bool,
}

impl TileConfig {
    /// Tile extents with padding enabled on every dimension.
    pub fn new(bm: usize, bn: usize, bk: usize) -> Result<Self> {
        let tiles = TileConfig {
            bm,
            bn,
            bk,
            pad_m: true,
            pad_n: true,
            pad_k: true,
        };
        tiles.validate()?;
        Ok(tiles)
    }

    pub fn with_padding(mut self, pad: bool) -> Self {
        self.pad_m = pad;
        self.pad_n = pad;
        self.pad_k = pad;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [("bm", self.bm), ("bn", self.bn), ("bk", self.bk)] {
            if value == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn any_padding(&self) -> bool {
        self.pad_m || self.pad_n || self.pad_k
    }
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            bm: 128,
            bn: 128,
            bk: 32,
            pad_m: true,
            pad_n: true,
            pad_k: true,
        }
    }
}

/// Processor (compute unit) count used by the wave and utilization models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineModel {
    pub p: usize,
}

impl MachineModel {
    pub fn new(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("p", "must be at least 1"));
        }
        Ok(MachineModel { p })
    }
}

/// Output-tile grid and MAC-iteration counts for a shape/tile pair.
///
/// One MAC iteration is one `bk`-deep slice of one output tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileGrid {
    pub tiles_m: usize,
    pub tiles_n: usize,
    pub total_tiles: usize,
    pub k_iters: usize,
    pub total_iters: usize,
}

impl TileGrid {
    pub fn tile_coords(&self, tile_id: usize) -> Result<(usize, usize)> {
        tile_index_to_coords(tile_id, self)
    }

    pub fn tile_id(&self, tile_m: usize, tile_n: usize) -> Result<usize> {
        coords_to_tile_index(tile_m, tile_n, self)
    }
}

/// Rounds each padded dimension up to a multiple of its tile extent.
pub fn padded_shape(shape: &ProblemShape, tiles: &TileConfig) -> ProblemShape {
    let round = |dim: usize, tile: usize, pad: bool| {
        if pad {
            dim.div_ceil(tile) * tile
        } else {
            dim
        }
    };
    ProblemShape {
        m: round(shape.m, tiles.bm, tiles.pad_m),
        n: round(shape.n, tiles.bn, tiles.pad_n),
        k: round(shape.k, tiles.bk, tiles.pad_k),
        ..*shape
    }
}

pub fn tile_grid(shape: &ProblemShape, tiles: &TileConfig) -> TileGrid {
    let shape = padded_shape(shape, tiles);
    let tiles_m = shape.m.div_ceil(tiles.bm);
    let tiles_n = shape.n.div_ceil(tiles.bn);
    let k_iters = shape.k.div_ceil(tiles.bk);
    let total_tiles = tiles_m * tiles_n;
    TileGrid {
        tiles_m,
        tiles_n,
        total_tiles,
        k_iters,
        total_iters: total_tiles * k_iters,
    }
}

/// Row-major tile id to `(tile_m, tile_n)`.
pub fn tile_index_to_coords(tile_id: usize, grid: &TileGrid) -> Result<(usize, usize)> {
    if tile_id >= grid.total_tiles {
        return Err(Error::OutOfRange {
            what: "tile_id",
            index: tile_id,
            bound: grid.total_tiles,
        });
    }
    Ok((tile_id / grid.tiles_n, tile_id % grid.tiles_n))
}

pub fn coords_to_tile_index(tile_m: usize, tile_n: usize, grid: &TileGrid) -> Result<usize> {
    if tile_m >= grid.tiles_m {
        return Err(Error::OutOfRange {
            what: "tile_m",
            index: tile_m,
            bound: grid.tiles_m,
        });
    }
    if tile_n >= grid.tiles_n {
        return Err(Error::OutOfRange {
            what: "tile_n",
            index: tile_n,
            bound: grid.tiles_n,
        });
    }
    Ok(tile_m * grid.tiles_n + tile_n)
}

/// `2mnk` flops and one pass over A, B and C in bytes.
pub fn flops_and_bytes(shape: &ProblemShape) -> (u128, u128) {
    let (m, n, k) = (shape.m as u128, shape.n as u128, shape.k as u128);
    let flops = 2 * m * n * k;
    let bytes = shape.elem_bytes as u128 * (m * k + k * n + m * n);
    (flops, bytes)
}
