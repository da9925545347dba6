//! Sequential column walk: one worker per splat scans the tile columns of its
//! SnugBox and solves the ellipse quadratic at each column's boundaries.

use super::{emit_in_splat_order, pack_key, tile_bounds, tile_span, TileIndex};
use crate::projection::{Conic, SplatBatch};

/// Vertical extent `[y_lo, y_hi]` (relative to the mean) of the ellipse
/// `q(x, y) = t` restricted to `x ∈ [xl, xr]`, also relative to the mean.
///
/// The upper branch `y = (−bx + √((b² − ac)x² + tc)) / c` is concave and the lower
/// branch convex, so each extreme sits at a column boundary or at the tangent
/// abscissa `x_d = ∓b √(t / (a (ac − b²)))` when that lies inside the column.
pub fn column_y_range(conic: &Conic, t: f64, xl: f64, xr: f64) -> (f64, f64) {
    let Conic { a, b, c } = *conic;
    let det = a * c - b * b;
    let branch = |x: f64| {
        let root = ((b * b - a * c) * x * x + t * c).max(0.0).sqrt();
        ((-b * x - root) / c, (-b * x + root) / c)
    };
    let (lo_l, hi_l) = branch(xl);
    let (lo_r, hi_r) = branch(xr);
    let mut lo = lo_l.min(lo_r);
    let mut hi = hi_l.max(hi_r);
    let x_d = (t / (a * det)).max(0.0).sqrt();
    // Top tangent point at x = −b·x_d, bottom at x = +b·x_d.
    let x_top = -b * x_d;
    if xl < x_top && x_top < xr {
        hi = hi.max(branch(x_top).1);
    }
    let x_bot = b * x_d;
    if xl < x_bot && x_bot < xr {
        lo = lo.min(branch(x_bot).0);
    }
    (lo, hi)
}

/// Emits `(key, splat)` for every tile the ellipse of splat `k` touches.
pub(crate) fn emit_column_walk(batch: &SplatBatch, k: usize, keys: &mut Vec<u64>, vals: &mut Vec<u32>) {
    let sb = &batch.snugboxes[k];
    let Some(rect) = sb.tile_rect else {
        return;
    };
    let conic = &batch.conics[k];
    let t = batch.level_t[k];
    let [mx, my] = batch.means2d[k];
    let tiles_x = batch.tiles_x();
    for tx in rect.x0..=rect.x1 {
        let (x_lo, x_hi, _, _) = tile_bounds(tx, 0);
        let xl = x_lo.max(sb.x_min) - mx;
        let xr = x_hi.min(sb.x_max) - mx;
        if xl > xr {
            continue;
        }
        let (y_lo, y_hi) = column_y_range(conic, t, xl, xr);
        let Some((r0, r1)) = tile_span(my + y_lo, my + y_hi, batch.tiles_y()) else {
            continue;
        };
        for ty in r0.max(rect.y0)..=r1.min(rect.y1) {
            keys.push(pack_key(ty * tiles_x + tx, batch.depths[k]));
            vals.push(k as u32);
        }
    }
}

/// Bins every splat with the sequential column walk.
pub fn bin_sequential(batch: &SplatBatch) -> TileIndex {
    emit_in_splat_order(batch, |k, keys, vals| emit_column_walk(batch, k, keys, vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::bin_aabb;
    use crate::projection::level_set;
    use std::collections::BTreeSet;
    use std::f64::consts::FRAC_PI_4;

    fn batch_of(width: u32, height: u32, splats: &[([f64; 2], Conic, f64, f64)]) -> SplatBatch {
        let mut b = SplatBatch {
            width,
            height,
            ..Default::default()
        };
        for (i, (mean, conic, t, depth)) in splats.iter().enumerate() {
            b.push_raw(i as u32, *mean, *conic, *t, 0.9, *depth, [1.0; 3]);
        }
        b
    }

    /// Tiles containing at least one point of the ellipse sampled on a fine grid.
    fn sampled_tiles(b: &SplatBatch, k: usize, step: f64) -> BTreeSet<u32> {
        let sb = b.snugboxes[k];
        let [mx, my] = b.means2d[k];
        let mut out = BTreeSet::new();
        let mut y = (sb.y_min / step).floor() * step;
        while y <= sb.y_max {
            let mut x = (sb.x_min / step).floor() * step;
            while x <= sb.x_max {
                let inside_img = x >= 0.0 && y >= 0.0 && x < b.width as f64 && y < b.height as f64;
                if inside_img && b.conics[k].eval(x - mx, y - my) <= b.level_t[k] {
                    out.insert((y / 16.0).floor() as u32 * b.tiles_x() + (x / 16.0).floor() as u32);
                }
                x += step;
            }
            y += step;
        }
        out
    }

    #[test]
    fn small_circle_in_one_tile() {
        let b = batch_of(64, 64, &[([24.0, 24.0], Conic { a: 1.0, b: 0.0, c: 1.0 }, 4.0, 1.0)]);
        let idx = bin_sequential(&b);
        assert_eq!(idx.num_pairs(), 1);
        assert_eq!(idx.tile_splats(5), &[0]);
    }

    #[test]
    fn elongated_diagonal_ellipse_is_compact() {
        // Axis ratio 10 at 45°, spanning 6×6 tiles.
        let t = level_set(0.9);
        let major = 64.0 / t.sqrt();
        let conic = Conic::from_axes(major, major / 10.0, FRAC_PI_4);
        let b = batch_of(128, 128, &[([48.0, 48.0], conic, t, 1.0)]);
        let rect = b.snugboxes[0].tile_rect.unwrap();
        assert_eq!(rect.count(), 36);
        let idx = bin_sequential(&b);
        let got: BTreeSet<u32> = idx.pair_set().into_iter().map(|(tile, _)| tile).collect();
        let oracle = sampled_tiles(&b, 0, 0.25);
        assert!(got.is_superset(&oracle));
        for tile in got.difference(&oracle) {
            let (x0, x1, y0, y1) = tile_bounds(tile % b.tiles_x(), tile / b.tiles_x());
            let q = crate::binning::min_quadratic_over_rect(&conic, x0 - 48.0, x1 - 48.0, y0 - 48.0, y1 - 48.0);
            assert!(q <= t * (1.0 + 1e-12));
        }
        assert!(got.len() < 36);
        assert!(idx.num_pairs() < bin_aabb(&b).num_pairs());
    }

    #[test]
    fn nearer_splat_sorts_first() {
        let c = Conic { a: 1.0, b: 0.0, c: 1.0 };
        let b = batch_of(32, 32, &[([8.0, 8.0], c, 4.0, 2.0), ([8.0, 8.0], c, 4.0, 1.0)]);
        let idx = bin_sequential(&b);
        assert_eq!(idx.tile_splats(0), &[1, 0]);
    }

    #[test]
    fn corner_tangent_tile_is_included() {
        // Circle of radius 5 centred at (19, 20) touches tile (0, 0) at its corner (16, 16).
        let c = Conic { a: 1.0, b: 0.0, c: 1.0 };
        let b = batch_of(64, 64, &[([19.0, 20.0], c, 25.0, 1.0)]);
        let tiles: BTreeSet<u32> = bin_sequential(&b).pair_set().into_iter().map(|p| p.0).collect();
        assert!(tiles.contains(&0));
    }

    #[test]
    fn column_range_of_circle() {
        let c = Conic { a: 1.0, b: 0.0, c: 1.0 };
        assert_eq!(column_y_range(&c, 25.0, -5.0, -3.0), (-4.0, 4.0));
        assert_eq!(column_y_range(&c, 25.0, -1.0, 2.0), (-5.0, 5.0));
    }
}
