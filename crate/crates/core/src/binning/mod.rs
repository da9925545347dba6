//! Tile binning: tight ellipse bounding boxes, exact splat/tile intersection and
//! the depth-sorted per-tile splat index consumed by the rasterizer.
//!
//! Tiles are closed `16 × 16` pixel squares, so a splat whose ellipse only
//! touches a tile edge is still binned into that tile.

mod aabb;
mod balanced;
mod sequential;
mod sort;

pub use aabb::bin_aabb;
pub use balanced::{bin_load_balanced, lane_assignments, min_quadratic_over_rect, DEFAULT_GROUP_SIZE};
pub use sequential::{bin_sequential, column_y_range};
pub use sort::radix_sort_pairs;

use rayon::prelude::*;

use crate::projection::{Conic, SplatBatch};
use crate::scene::TILE_SIZE;

const TILE: f64 = TILE_SIZE as f64;

/// Inclusive rectangle in tile coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TileRect {
    pub x0: u32,
    pub x1: u32,
    pub y0: u32,
    pub y1: u32,
}

impl TileRect {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }

    pub fn count(&self) -> usize {
        self.width() as usize * self.height() as usize
    }

    pub fn contains(&self, tx: u32, ty: u32) -> bool {
        (self.x0..=self.x1).contains(&tx) && (self.y0..=self.y1).contains(&ty)
    }
}

/// Pixel extents of a splat's ellipse and the tiles they cover.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnugBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// `None` when the box lies entirely outside the image.
    pub tile_rect: Option<TileRect>,
}

/// Pixel-space bounds of the closed tile `(tx, ty)`.
pub fn tile_bounds(tx: u32, ty: u32) -> (f64, f64, f64, f64) {
    let x0 = tx as f64 * TILE;
    let y0 = ty as f64 * TILE;
    (x0, x0 + TILE, y0, y0 + TILE)
}

/// Range of closed tiles `[first, last]` touching the pixel interval `[lo, hi]`,
/// clipped to `count` tiles.
pub(crate) fn tile_span(lo: f64, hi: f64, count: u32) -> Option<(u32, u32)> {
    let first = ((lo / TILE).ceil() - 1.0).max(0.0);
    let last = (hi / TILE).floor().min(count as f64 - 1.0);
    (first <= last).then_some((first as u32, last as u32))
}

/// Tangent-point bounding box of the ellipse `q(x − μ) = t`.
pub fn snugbox(conic: &Conic, t: f64, mean: [f64; 2], width: u32, height: u32) -> SnugBox {
    let det = conic.det();
    let hx = (conic.c * t / det).max(0.0).sqrt();
    let hy = (conic.a * t / det).max(0.0).sqrt();
    let (x_min, x_max) = (mean[0] - hx, mean[0] + hx);
    let (y_min, y_max) = (mean[1] - hy, mean[1] + hy);
    let outside = x_max < 0.0 || y_max < 0.0 || x_min > width as f64 || y_min > height as f64;
    let tile_rect = if outside {
        None
    } else {
        let tx = tile_span(x_min, x_max, width.div_ceil(TILE_SIZE));
        let ty = tile_span(y_min, y_max, height.div_ceil(TILE_SIZE));
        match (tx, ty) {
            (Some((x0, x1)), Some((y0, y1))) => Some(TileRect { x0, x1, y0, y1 }),
            _ => None,
        }
    };
    SnugBox {
        x_min,
        x_max,
        y_min,
        y_max,
        tile_rect,
    }
}

/// Sort key: tile id in the high 32 bits, depth bits in the low 32 bits.
#[inline]
pub fn pack_key(tile_id: u32, depth: f64) -> u64 {
    ((tile_id as u64) << 32) | (depth as f32).to_bits() as u64
}

#[inline]
pub fn key_tile(key: u64) -> u32 {
    (key >> 32) as u32
}

/// Depth-sorted (tile, splat) pairs with per-tile ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileIndex {
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub keys: Vec<u64>,
    /// Batch-local splat indices.
    pub values: Vec<u32>,
    /// Per tile `[start, end)` into `keys` / `values`.
    pub tile_ranges: Vec<(u32, u32)>,
}

impl TileIndex {
    /// Sorts emitted pairs and computes tile ranges.
    pub fn from_pairs(tiles_x: u32, tiles_y: u32, mut keys: Vec<u64>, mut values: Vec<u32>) -> Self {
        radix_sort_pairs(&mut keys, &mut values);
        let n_tiles = (tiles_x * tiles_y) as usize;
        let mut tile_ranges = vec![(0u32, 0u32); n_tiles];
        let mut start = 0usize;
        while start < keys.len() {
            let tile = key_tile(keys[start]);
            let mut end = start + 1;
            while end < keys.len() && key_tile(keys[end]) == tile {
                end += 1;
            }
            tile_ranges[tile as usize] = (start as u32, end as u32);
            start = end;
        }
        Self {
            tiles_x,
            tiles_y,
            keys,
            values,
            tile_ranges,
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.tile_ranges.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.keys.len()
    }

    /// Splat indices binned into `tile`, front to back.
    pub fn tile_splats(&self, tile: usize) -> &[u32] {
        let (s, e) = self.tile_ranges[tile];
        &self.values[s as usize..e as usize]
    }

    /// FNV-1a digest of the full sorted index.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (k, v) in self.keys.iter().zip(&self.values) {
            h.write_u64(*k);
            h.write_u64(*v as u64);
        }
        for (s, e) in &self.tile_ranges {
            h.write_u64(((*s as u64) << 32) | *e as u64);
        }
        h.0
    }

    /// Set of `(tile id, splat)` pairs.
    pub fn pair_set(&self) -> std::collections::BTreeSet<(u32, u32)> {
        self.keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| (key_tile(*k), *v))
            .collect()
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Runs `emit` for every splat in parallel chunks and concatenates the results in
/// splat order, so the emission order never depends on scheduling.
pub(crate) fn emit_in_splat_order<F>(batch: &SplatBatch, emit: F) -> TileIndex
where
    F: Fn(usize, &mut Vec<u64>, &mut Vec<u32>) + Sync,
{
    const CHUNK: usize = 512;
    let n = batch.len();
    let chunks: Vec<(Vec<u64>, Vec<u32>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut keys = Vec::new();
            let mut vals = Vec::new();
            for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                emit(k, &mut keys, &mut vals);
            }
            (keys, vals)
        })
        .collect();
    let total: usize = chunks.iter().map(|c| c.0.len()).sum();
    let mut keys = Vec::with_capacity(total);
    let mut vals = Vec::with_capacity(total);
    for (k, v) in chunks {
        keys.extend(k);
        vals.extend(v);
    }
    TileIndex::from_pairs(batch.tiles_x(), batch.tiles_y(), keys, vals)
}

/// Strategy selector used by the trainer and the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningStrategy {
    Aabb,
    SnugSeq,
    SnugLb,
}

impl BinningStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            BinningStrategy::Aabb => "aabb",
            BinningStrategy::SnugSeq => "snug_seq",
            BinningStrategy::SnugLb => "snug_lb",
        }
    }

    pub fn bin(&self, batch: &SplatBatch) -> TileIndex {
        match self {
            BinningStrategy::Aabb => bin_aabb(batch),
            BinningStrategy::SnugSeq => bin_sequential(batch),
            BinningStrategy::SnugLb => bin_load_balanced(batch, DEFAULT_GROUP_SIZE),
        }
    }
}
