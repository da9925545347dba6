//! Backward passes from per-pixel loss gradients to [`Grad2D`].
//!
//! `backward_per_pixel` re-traverses each pixel's list back to front, recovering
//! transmittance by division. `backward_per_gaussian` gives each list entry of a
//! 32-entry group its own accumulator, restarts every pixel from the group's
//! checkpoint and replays forward, then merges each accumulator once.

use rayon::prelude::*;
use thiserror::Error;

use super::{splat_alpha, tile_pixels, Footprint, Grad2D, PixelState, RenderBuffers, GROUP_SIZE};
use crate::binning::TileIndex;
use crate::projection::{SplatBatch, MIN_ALPHA};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BackwardError {
    #[error("render buffers carry no checkpoints; render with checkpointing enabled")]
    MissingCheckpoints,
    #[error("upstream gradient has {got} pixels, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// How per-tile partial gradients are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Merged serially in tile order; bitwise reproducible.
    #[default]
    Deterministic,
    /// Tree reduction in whatever order the thread pool finishes.
    Fast,
}

/// Upstream gradients with respect to the render outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrads {
    /// `∂L/∂color`, final color including background.
    pub color: Vec<[f64; 3]>,
    /// `∂L/∂depth`, unnormalized blended depth.
    pub depth: Vec<f64>,
    /// `∂L/∂final_T` beyond the background term, which is added internally.
    pub final_t: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            final_t: vec![0.0; n],
        }
    }

    fn check(&self, n: usize) -> Result<(), BackwardError> {
        for got in [self.color.len(), self.depth.len(), self.final_t.len()] {
            if got != n {
                return Err(BackwardError::ShapeMismatch { expected: n, got });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Lane accumulators merged into the shared gradient.
    pub merges: usize,
}

/// Gradient accumulator for one splat: mean(2), conic(3), opacity, color(3), depth.
#[derive(Clone, Copy, Debug, Default)]
struct Acc([f64; 10]);

impl Acc {
    fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    fn merge_into(&self, g: &mut Grad2D, k: usize) {
        let v = &self.0;
        g.mean[k][0] += v[0];
        g.mean[k][1] += v[1];
        g.conic[k][0] += v[2];
        g.conic[k][1] += v[3];
        g.conic[k][2] += v[4];
        g.opacity[k] += v[5];
        g.color[k][0] += v[6];
        g.color[k][1] += v[7];
        g.color[k][2] += v[8];
        g.depth[k] += v[9];
    }

    /// Adds the contribution of one pixel given blend weight `w` and `∂L/∂α`.
    #[inline]
    fn add(&mut self, batch: &SplatBatch, k: usize, fp: &Footprint, w: f64, g_alpha: f64, gc: [f64; 3], gd: f64) {
        let v = &mut self.0;
        v[6] += w * gc[0];
        v[7] += w * gc[1];
        v[8] += w * gc[2];
        v[9] += w * gd;
        if fp.clamped {
            return;
        }
        v[5] += g_alpha * fp.g;
        let gq = -0.5 * fp.alpha * g_alpha;
        let conic = batch.conics[k];
        let (dx, dy) = (fp.dx, fp.dy);
        v[2] += gq * dx * dx;
        v[3] += gq * 2.0 * dx * dy;
        v[4] += gq * dy * dy;
        v[0] -= gq * 2.0 * (conic.a * dx + conic.b * dy);
        v[1] -= gq * 2.0 * (conic.b * dx + conic.c * dy);
    }
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Per-tile accumulators keyed by list entry.
fn reduce<F>(tiles: &TileIndex, n_splats: usize, mode: Reduction, per_tile: F) -> (Grad2D, usize)
where
    F: Fn(usize) -> Vec<(u32, Acc)> + Sync,
{
    match mode {
        Reduction::Deterministic => {
            let parts: Vec<Vec<(u32, Acc)>> = (0..tiles.num_tiles()).into_par_iter().map(&per_tile).collect();
            let mut g = Grad2D::zeros(n_splats);
            let mut merges = 0;
            for (k, acc) in parts.into_iter().flatten() {
                acc.merge_into(&mut g, k as usize);
                merges += 1;
            }
            (g, merges)
        }
        Reduction::Fast => (0..tiles.num_tiles())
            .into_par_iter()
            .fold(
                || (Grad2D::zeros(n_splats), 0usize),
                |(mut g, mut m), tile| {
                    for (k, acc) in per_tile(tile) {
                        acc.merge_into(&mut g, k as usize);
                        m += 1;
                    }
                    (g, m)
                },
            )
            .reduce(
                || (Grad2D::zeros(n_splats), 0),
                |(mut a, ma), (b, mb)| {
                    for k in 0..n_splats {
                        Acc([
                            b.mean[k][0],
                            b.mean[k][1],
                            b.conic[k][0],
                            b.conic[k][1],
                            b.conic[k][2],
                            b.opacity[k],
                            b.color[k][0],
                            b.color[k][1],
                            b.color[k][2],
                            b.depth[k],
                        ])
                        .merge_into(&mut a, k);
                    }
                    (a, ma + mb)
                },
            ),
    }
}

/// Reference backward: every pixel walks its blended splats back to front.
pub fn backward_per_pixel(
    buffers: &RenderBuffers,
    batch: &SplatBatch,
    tiles: &TileIndex,
    grads: &PixelGrads,
    mode: Reduction,
) -> Result<Grad2D, BackwardError> {
    grads.check(buffers.pixel_count())?;
    let (width, height) = (buffers.width, buffers.height);
    let bg = buffers.background;
    let per_tile = |tile: usize| {
        let splats = tiles.tile_splats(tile);
        let mut accs = vec![Acc::default(); splats.len()];
        let (x0, x1, y0, y1) = tile_pixels(tile, tiles.tiles_x, width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                let pix = y as usize * width as usize + x as usize;
                let gc = grads.color[pix];
                let gd = grads.depth[pix];
                let gt = grads.final_t[pix];
                let t_final = buffers.final_t[pix];
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = t_final;
                let mut behind_c = bg;
                let mut behind_d = 0.0;
                for i in (0..buffers.n_processed[pix] as usize).rev() {
                    let k = splats[i] as usize;
                    let fp = splat_alpha(batch, k, px, py);
                    if fp.alpha < MIN_ALPHA {
                        continue;
                    }
                    let one_minus = 1.0 - fp.alpha;
                    let t_i = t / one_minus;
                    let w = t_i * fp.alpha;
                    let c = batch.colors[k];
                    let d = batch.depths[k];
                    let diff = [c[0] - behind_c[0], c[1] - behind_c[1], c[2] - behind_c[2]];
                    let g_alpha = t_i * (dot3(gc, diff) + gd * (d - behind_d)) - gt * t_final / one_minus;
                    accs[i].add(batch, k, &fp, w, g_alpha, gc, gd);
                    for ch in 0..3 {
                        behind_c[ch] = fp.alpha * c[ch] + one_minus * behind_c[ch];
                    }
                    behind_d = fp.alpha * d + one_minus * behind_d;
                    t = t_i;
                }
            }
        }
        splats
            .iter()
            .zip(accs)
            .filter(|(_, a)| !a.is_zero())
            .map(|(k, a)| (*k, a))
            .collect()
    };
    Ok(reduce(tiles, batch.len(), mode, per_tile).0)
}

/// Group-parallel backward: each list entry of a checkpoint group owns a private
/// accumulator filled by replaying every pixel from the group's checkpoint.
pub fn backward_per_gaussian(
    buffers: &RenderBuffers,
    batch: &SplatBatch,
    tiles: &TileIndex,
    grads: &PixelGrads,
    mode: Reduction,
) -> Result<(Grad2D, BackwardStats), BackwardError> {
    grads.check(buffers.pixel_count())?;
    let checkpoints = buffers.checkpoints.as_ref().ok_or(BackwardError::MissingCheckpoints)?;
    let (width, height) = (buffers.width, buffers.height);
    let bg = buffers.background;
    let per_tile = |tile: usize| {
        let splats = tiles.tile_splats(tile);
        let (x0, x1, y0, y1) = tile_pixels(tile, tiles.tiles_x, width, height);
        let mut merged = Vec::new();
        for (g, group) in splats.chunks(GROUP_SIZE).enumerate() {
            let start = g * GROUP_SIZE;
            let mut lanes = [Acc::default(); GROUP_SIZE];
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y as usize * width as usize + x as usize;
                    let end = (buffers.n_processed[pix] as usize).min(start + group.len());
                    if end <= start {
                        continue;
                    }
                    let mut state = if g == 0 { PixelState::EMPTY } else { checkpoints[pix][g - 1] };
                    let gc = grads.color[pix];
                    let gd = grads.depth[pix];
                    let gt = grads.final_t[pix];
                    let t_final = buffers.final_t[pix];
                    let total_c = buffers.blend_color[pix];
                    let total_d = buffers.depth[pix];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    for (lane, &k) in group[..end - start].iter().enumerate() {
                        let k = k as usize;
                        let fp = splat_alpha(batch, k, px, py);
                        if fp.alpha < MIN_ALPHA {
                            continue;
                        }
                        let one_minus = 1.0 - fp.alpha;
                        let t_i = state.t;
                        let w = t_i * fp.alpha;
                        let c = batch.colors[k];
                        let d = batch.depths[k];
                        for ch in 0..3 {
                            state.color[ch] += w * c[ch];
                        }
                        state.depth += w * d;
                        state.t *= one_minus;
                        // Everything composited behind this splat, background included.
                        let rest_c = [0, 1, 2].map(|ch| total_c[ch] - state.color[ch] + t_final * bg[ch]);
                        let rest_d = total_d - state.depth;
                        let g_alpha = dot3(gc, c) * t_i - dot3(gc, rest_c) / one_minus + gd * (t_i * d - rest_d / one_minus)
                            - gt * t_final / one_minus;
                        lanes[lane].add(batch, k, &fp, w, g_alpha, gc, gd);
                    }
                }
            }
            for (lane, &k) in group.iter().enumerate() {
                if !lanes[lane].is_zero() {
                    merged.push((k, lanes[lane]));
                }
            }
        }
        merged
    };
    let (g, merges) = reduce(tiles, batch.len(), mode, per_tile);
    Ok((g, BackwardStats { merges }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::bin_sequential;
    use crate::projection::Conic;
    use crate::raster::tests::random_batch;
    use crate::raster::{render, RenderOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grads(rng: &mut impl Rng, n: usize) -> PixelGrads {
        PixelGrads {
            color: (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
            depth: (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
            final_t: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    fn both_paths(b: &SplatBatch, bg: [f64; 3], seed: u64) -> (Grad2D, Grad2D, BackwardStats, TileIndex) {
        let idx = bin_sequential(b);
        let out = render(b, &idx, bg, RenderOptions::training());
        let grads = random_grads(&mut ChaCha8Rng::seed_from_u64(seed), out.pixel_count());
        let pp = backward_per_pixel(&out, b, &idx, &grads, Reduction::Deterministic).unwrap();
        let (pg, stats) = backward_per_gaussian(&out, b, &idx, &grads, Reduction::Deterministic).unwrap();
        (pp, pg, stats, idx)
    }

    #[test]
    fn paths_agree_on_sparse_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = random_batch(&mut rng, 48, 48, 30);
        let (pp, pg, stats, idx) = both_paths(&b, [0.3, 0.1, 0.7], 11);
        assert!(pp.max_abs() > 0.0);
        assert!(pp.max_rel_diff(&pg, 1e-9 * pp.max_abs()) < 1e-6);
        assert!(stats.merges <= idx.num_pairs());
    }

    #[test]
    fn paths_agree_with_four_groups_in_one_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut b = SplatBatch {
            width: 16,
            height: 16,
            ..Default::default()
        };
        for i in 0..100 {
            b.push_2d(
                i,
                [rng.random_range(4.0..12.0), rng.random_range(4.0..12.0)],
                Conic::from_axes(rng.random_range(6.0..10.0), rng.random_range(3.0..6.0), rng.random_range(0.0..3.0)),
                rng.random_range(0.02..0.08),
                rng.random_range(1.0..5.0),
                [rng.random(), rng.random(), rng.random()],
            );
        }
        let idx = bin_sequential(&b);
        assert_eq!(idx.tile_splats(0).len(), 100);
        let out = render(&b, &idx, [0.0; 3], RenderOptions::training());
        assert!(out.checkpoints.as_ref().unwrap().iter().any(|c| c.len() == 3));
        let (pp, pg, _, _) = both_paths(&b, [0.0; 3], 13);
        assert!(pp.max_rel_diff(&pg, 1e-8 * pp.max_abs()) < 1e-5);
    }

    #[test]
    fn zero_upstream_gives_zero_and_no_writes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = random_batch(&mut rng, 32, 32, 20);
        let idx = bin_sequential(&b);
        let out = render(&b, &idx, [0.0; 3], RenderOptions::training());
        let zero = PixelGrads::zeros(out.pixel_count());
        let (g, stats) = backward_per_gaussian(&out, &b, &idx, &zero, Reduction::Deterministic).unwrap();
        assert!(g.is_all_zero());
        assert_eq!(stats.merges, 0);
        assert!(backward_per_pixel(&out, &b, &idx, &zero, Reduction::Fast).unwrap().is_all_zero());
    }

    #[test]
    fn missing_checkpoints_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let b = random_batch(&mut rng, 16, 16, 3);
        let idx = bin_sequential(&b);
        let out = render(&b, &idx, [0.0; 3], RenderOptions::default());
        let g = PixelGrads::zeros(out.pixel_count());
        assert_eq!(
            backward_per_gaussian(&out, &b, &idx, &g, Reduction::Deterministic).unwrap_err(),
            BackwardError::MissingCheckpoints
        );
    }

    #[test]
    fn single_splat_color_gradient_is_blend_weight_sum() {
        let mut b = SplatBatch {
            width: 32,
            height: 32,
            ..Default::default()
        };
        b.push_2d(0, [13.0, 17.0], Conic::from_axes(4.0, 2.0, 0.4), 0.7, 2.0, [0.2, 0.4, 0.6]);
        let idx = bin_sequential(&b);
        let out = render(&b, &idx, [0.0; 3], RenderOptions::training());
        let mut grads = PixelGrads::zeros(out.pixel_count());
        grads.color.iter_mut().for_each(|g| *g = [1.0, 0.0, 0.0]);
        let g = backward_per_pixel(&out, &b, &idx, &grads, Reduction::Deterministic).unwrap();
        // With one splat the blend weight is 1 − T.
        let expected: f64 = out.final_t.iter().map(|t| 1.0 - t).sum();
        assert!((g.color[0][0] - expected).abs() < 1e-12 * expected);
        assert_eq!(g.color[0][1], 0.0);
    }

    #[test]
    fn opacity_gradient_matches_finite_differences() {
        // Two splats over one pixel; loss = red channel + 0.3·depth + 0.2·T.
        let make = |o0: f64, o1: f64| {
            let mut b = SplatBatch {
                width: 16,
                height: 16,
                ..Default::default()
            };
            b.push_2d(0, [5.2, 6.1], Conic::from_axes(3.0, 2.0, 0.3), o0, 1.0, [0.9, 0.1, 0.3]);
            b.push_2d(1, [6.0, 5.0], Conic::from_axes(4.0, 1.5, 1.1), o1, 2.0, [0.2, 0.8, 0.5]);
            b
        };
        let pix = 5 * 16 + 5;
        let loss = |b: &SplatBatch| {
            let out = render(b, &bin_sequential(b), [0.1, 0.2, 0.3], RenderOptions::default());
            out.color.data[pix * 3] + 0.3 * out.depth[pix] + 0.2 * out.final_t[pix]
        };
        let b = make(0.6, 0.5);
        let idx = bin_sequential(&b);
        let out = render(&b, &idx, [0.1, 0.2, 0.3], RenderOptions::training());
        let mut grads = PixelGrads::zeros(out.pixel_count());
        grads.color[pix] = [1.0, 0.0, 0.0];
        grads.depth[pix] = 0.3;
        grads.final_t[pix] = 0.2;
        let g = backward_per_pixel(&out, &b, &idx, &grads, Reduction::Deterministic).unwrap();
        let h = 1e-6;
        let fd0 = (loss(&make(0.6 + h, 0.5)) - loss(&make(0.6 - h, 0.5))) / (2.0 * h);
        let fd1 = (loss(&make(0.6, 0.5 + h)) - loss(&make(0.6, 0.5 - h))) / (2.0 * h);
        assert!((g.opacity[0] - fd0).abs() / fd0.abs() < 1e-3);
        assert!((g.opacity[1] - fd1).abs() / fd1.abs() < 1e-3);
    }

    #[test]
    fn fast_mode_matches_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let b = random_batch(&mut rng, 64, 48, 120);
        let idx = bin_sequential(&b);
        let out = render(&b, &idx, [0.5; 3], RenderOptions::training());
        let grads = random_grads(&mut rng, out.pixel_count());
        let det = backward_per_pixel(&out, &b, &idx, &grads, Reduction::Deterministic).unwrap();
        let fast = backward_per_pixel(&out, &b, &idx, &grads, Reduction::Fast).unwrap();
        assert!(det.max_rel_diff(&fast, 1e-12 * det.max_abs()) < 1e-9);
        let (gfast, _) = backward_per_gaussian(&out, &b, &idx, &grads, Reduction::Fast).unwrap();
        assert!(det.max_rel_diff(&gfast, 1e-8 * det.max_abs()) < 1e-5);
    }
}
