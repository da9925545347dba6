//! Load-balanced binning: a worker group of `group_size` lanes shares one splat,
//! each lane testing its round-robin share of the SnugBox tiles directly.

use super::{emit_in_splat_order, pack_key, tile_bounds, TileIndex, TileRect};
use crate::projection::{Conic, SplatBatch};

pub const DEFAULT_GROUP_SIZE: usize = 32;

/// Minimum of `q(x, y) = a x² + 2bxy + c y²` over `[x0, x1] × [y0, y1]`
/// (coordinates relative to the ellipse center).
pub fn min_quadratic_over_rect(conic: &Conic, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    if x0 <= 0.0 && 0.0 <= x1 && y0 <= 0.0 && 0.0 <= y1 {
        return 0.0;
    }
    let Conic { a, b, c } = *conic;
    // The unconstrained minimizer along each edge, clamped onto the edge.
    let on_vertical = |x: f64| {
        let y = (-b * x / c).clamp(y0, y1);
        conic.eval(x, y)
    };
    let on_horizontal = |y: f64| {
        let x = (-b * y / a).clamp(x0, x1);
        conic.eval(x, y)
    };
    on_vertical(x0)
        .min(on_vertical(x1))
        .min(on_horizontal(y0))
        .min(on_horizontal(y1))
}

/// Tiles of `rect` assigned to each lane, row-major round-robin.
pub fn lane_assignments(rect: &TileRect, group_size: usize) -> Vec<Vec<(u32, u32)>> {
    let mut lanes = vec![Vec::new(); group_size];
    let w = rect.width() as usize;
    for i in 0..rect.count() {
        let tx = rect.x0 + (i % w) as u32;
        let ty = rect.y0 + (i / w) as u32;
        lanes[i % group_size].push((tx, ty));
    }
    lanes
}

pub(crate) fn emit_lanes(
    batch: &SplatBatch,
    k: usize,
    group_size: usize,
    keys: &mut Vec<u64>,
    vals: &mut Vec<u32>,
) {
    let Some(rect) = batch.snugboxes[k].tile_rect else {
        return;
    };
    let conic = &batch.conics[k];
    let t = batch.level_t[k];
    let [mx, my] = batch.means2d[k];
    let tiles_x = batch.tiles_x();
    for lane in lane_assignments(&rect, group_size) {
        for (tx, ty) in lane {
            let (x0, x1, y0, y1) = tile_bounds(tx, ty);
            if min_quadratic_over_rect(conic, x0 - mx, x1 - mx, y0 - my, y1 - my) <= t {
                keys.push(pack_key(ty * tiles_x + tx, batch.depths[k]));
                vals.push(k as u32);
            }
        }
    }
}

/// Bins every splat with per-lane analytic tile tests.
pub fn bin_load_balanced(batch: &SplatBatch, group_size: usize) -> TileIndex {
    assert!(group_size > 0);
    emit_in_splat_order(batch, |k, keys, vals| emit_lanes(batch, k, group_size, keys, vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::bin_sequential;
    use std::collections::BTreeSet;

    #[test]
    fn elongated_splat_spreads_evenly_over_lanes() {
        // Axis-aligned ellipse 64 tiles wide and one tile tall.
        let t = 4.0;
        let conic = Conic { a: t / (510.0 * 510.0), b: 0.0, c: t / 4.0 };
        let mut batch = SplatBatch {
            width: 1040,
            height: 32,
            ..Default::default()
        };
        batch.push_raw(0, [520.0, 8.0], conic, t, 0.9, 1.0, [1.0; 3]);
        let rect = batch.snugboxes[0].tile_rect.unwrap();
        assert!(rect.count() >= 64);
        let lanes = lane_assignments(&rect, 32);
        assert!(lanes.iter().all(|l| l.len() <= 3));
        let assigned: usize = lanes.iter().map(Vec::len).sum();
        assert_eq!(assigned, rect.count());
        assert_eq!(bin_load_balanced(&batch, 32), bin_sequential(&batch));
    }

    #[test]
    fn corner_tangent_tile_is_included() {
        let mut batch = SplatBatch {
            width: 64,
            height: 64,
            ..Default::default()
        };
        batch.push_raw(0, [19.0, 20.0], Conic { a: 1.0, b: 0.0, c: 1.0 }, 25.0, 0.9, 1.0, [1.0; 3]);
        let lb = bin_load_balanced(&batch, 32);
        let tiles: BTreeSet<u32> = lb.pair_set().into_iter().map(|p| p.0).collect();
        assert!(tiles.contains(&0));
        assert_eq!(lb, bin_sequential(&batch));
    }

    #[test]
    fn min_quadratic_cases() {
        let circle = Conic { a: 1.0, b: 0.0, c: 1.0 };
        assert_eq!(min_quadratic_over_rect(&circle, -1.0, 1.0, -1.0, 1.0), 0.0);
        assert_eq!(min_quadratic_over_rect(&circle, 3.0, 5.0, -1.0, 1.0), 9.0);
        assert_eq!(min_quadratic_over_rect(&circle, 3.0, 5.0, 4.0, 6.0), 25.0);
        // Tilted: the minimizer on the edge x = 2 sits at y = -b x / c = -1.
        let tilted = Conic { a: 1.0, b: 0.5, c: 1.0 };
        assert_eq!(min_quadratic_over_rect(&tilted, 2.0, 3.0, -5.0, 5.0), 3.0);
    }
}
