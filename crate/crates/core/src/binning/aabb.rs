//! Radius-based square bounding box baseline: every tile in the square of
//! half-width `√(t · λ_max(Σ2D))` is emitted without an intersection test.

use super::{emit_in_splat_order, pack_key, tile_span, TileIndex};
use crate::projection::SplatBatch;

/// Half-width of the bounding square of the level-set ellipse.
pub fn aabb_radius(conic: &crate::projection::Conic, t: f64) -> f64 {
    // The covariance's largest eigenvalue is the inverse of the conic's smallest.
    let half_trace = 0.5 * (conic.a + conic.c);
    let disc = (0.25 * (conic.a - conic.c).powi(2) + conic.b * conic.b).sqrt();
    let lambda_min = half_trace - disc;
    (t / lambda_min).max(0.0).sqrt()
}

/// Bins every splat into all tiles of its radius-based square.
pub fn bin_aabb(batch: &SplatBatch) -> TileIndex {
    let tiles_x = batch.tiles_x();
    let tiles_y = batch.tiles_y();
    let (w, h) = (batch.width as f64, batch.height as f64);
    emit_in_splat_order(batch, |k, keys, vals| {
        let r = aabb_radius(&batch.conics[k], batch.level_t[k]);
        let [mx, my] = batch.means2d[k];
        if mx + r < 0.0 || my + r < 0.0 || mx - r > w || my - r > h {
            return;
        }
        let (Some((x0, x1)), Some((y0, y1))) = (
            tile_span(mx - r, mx + r, tiles_x),
            tile_span(my - r, my + r, tiles_y),
        ) else {
            return;
        };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                keys.push(pack_key(ty * tiles_x + tx, batch.depths[k]));
                vals.push(k as u32);
            }
        }
    })
}
