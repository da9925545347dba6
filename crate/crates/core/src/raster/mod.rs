//! Tile rasterizer: front-to-back alpha compositing of depth-sorted splats with
//! per-pixel checkpoints, and the two backward passes.

mod backward;

pub use backward::{backward_per_gaussian, backward_per_pixel, BackwardError, BackwardStats, PixelGrads, Reduction};

use rayon::prelude::*;

use crate::binning::TileIndex;
use crate::image_io::ImageRgb;
use crate::projection::{SplatBatch, MIN_ALPHA};
use crate::scene::TILE_SIZE;

/// List entries per checkpoint group.
pub const GROUP_SIZE: usize = 32;
pub const MAX_ALPHA: f64 = 0.99;
/// Transmittance below which a pixel stops blending.
pub const T_TERMINATE: f64 = 1e-4;

/// Compositing state of one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelState {
    pub t: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

impl PixelState {
    pub const EMPTY: PixelState = PixelState {
        t: 1.0,
        color: [0.0; 3],
        depth: 0.0,
    };
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RenderOptions {
    /// Store a checkpoint every [`GROUP_SIZE`] list entries (needed by the per-Gaussian backward).
    pub checkpoints: bool,
    /// Record which splats blend into each pixel with weight `α·T ≥ 1/255`.
    pub contributions: bool,
}

impl RenderOptions {
    pub fn training() -> Self {
        Self {
            checkpoints: true,
            contributions: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderBuffers {
    pub width: u32,
    pub height: u32,
    pub background: [f64; 3],
    /// Final color including the background term.
    pub color: ImageRgb,
    /// Blended color before the background term.
    pub blend_color: Vec<[f64; 3]>,
    /// Blended centroid depth, not normalized by opacity.
    pub depth: Vec<f64>,
    pub final_t: Vec<f64>,
    /// Splats actually blended per pixel.
    pub n_contrib: Vec<u32>,
    /// Tile list entries walked per pixel, including skipped ones; the backward replay limit.
    pub n_processed: Vec<u32>,
    /// Per pixel, the state after each completed group of [`GROUP_SIZE`] list entries.
    pub checkpoints: Option<Vec<Vec<PixelState>>>,
    /// Per pixel, batch-local splat indices with blend weight `α·T ≥ 1/255`.
    pub contributions: Option<Vec<Vec<u32>>>,
}

impl RenderBuffers {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Depth normalized by accumulated opacity, zero where nothing blended.
    pub fn normalized_depth(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.final_t)
            .map(|(d, t)| if *t < 1.0 { d / (1.0 - t) } else { 0.0 })
            .collect()
    }
}

/// Alpha of splat `k` at the pixel center `(px, py)`, before the skip test.
#[inline]
pub(crate) fn splat_alpha(batch: &SplatBatch, k: usize, px: f64, py: f64) -> Footprint {
    let [mx, my] = batch.means2d[k];
    let dx = px - mx;
    let dy = py - my;
    let q = batch.conics[k].eval(dx, dy);
    let g = (-0.5 * q).exp();
    let raw = batch.opacities[k] * g;
    Footprint {
        alpha: raw.min(MAX_ALPHA),
        clamped: raw > MAX_ALPHA,
        g,
        dx,
        dy,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint {
    pub alpha: f64,
    pub clamped: bool,
    pub g: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Pixel bounds `[x0, x1) × [y0, y1)` of tile `tile` clipped to the image.
pub(crate) fn tile_pixels(tile: usize, tiles_x: u32, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let tx = tile as u32 % tiles_x;
    let ty = tile as u32 / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
}

/// Blends list entries `from..` of `splats` into `state` until the list ends or the
/// pixel terminates. Returns the index one past the last entry walked.
#[inline]
fn blend_run(
    batch: &SplatBatch,
    splats: &[u32],
    from: usize,
    px: f64,
    py: f64,
    state: &mut PixelState,
    mut on_entry: impl FnMut(usize, f64, &PixelState),
) -> usize {
    let mut i = from;
    while i < splats.len() {
        let k = splats[i] as usize;
        let fp = splat_alpha(batch, k, px, py);
        i += 1;
        if fp.alpha < MIN_ALPHA {
            on_entry(i, 0.0, state);
            continue;
        }
        let w = state.t * fp.alpha;
        let c = batch.colors[k];
        for ch in 0..3 {
            state.color[ch] += w * c[ch];
        }
        state.depth += w * batch.depths[k];
        state.t *= 1.0 - fp.alpha;
        on_entry(i, w, state);
        if state.t < T_TERMINATE {
            break;
        }
    }
    i
}

struct PixelOut {
    state: PixelState,
    n_contrib: u32,
    n_processed: u32,
    checkpoints: Vec<PixelState>,
    contributions: Vec<u32>,
}

fn render_pixel(batch: &SplatBatch, splats: &[u32], x: u32, y: u32, opts: RenderOptions) -> PixelOut {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut state = PixelState::EMPTY;
    let mut checkpoints = Vec::new();
    let mut contributions = Vec::new();
    let mut n_contrib = 0;
    let n_processed = blend_run(batch, splats, 0, px, py, &mut state, |i, w, s| {
        if w > 0.0 {
            n_contrib += 1;
            if opts.contributions && w >= MIN_ALPHA {
                contributions.push(splats[i - 1]);
            }
        }
        if opts.checkpoints && i % GROUP_SIZE == 0 {
            checkpoints.push(*s);
        }
    });
    PixelOut {
        state,
        n_contrib,
        n_processed: n_processed as u32,
        checkpoints,
        contributions,
    }
}

/// Composites every tile of `tiles` front to back over `background`.
pub fn render(batch: &SplatBatch, tiles: &TileIndex, background: [f64; 3], opts: RenderOptions) -> RenderBuffers {
    let (width, height) = (batch.width, batch.height);
    let per_tile: Vec<Vec<(usize, PixelOut)>> = (0..tiles.num_tiles())
        .into_par_iter()
        .map(|tile| {
            let splats = tiles.tile_splats(tile);
            let (x0, x1, y0, y1) = tile_pixels(tile, tiles.tiles_x, width, height);
            let mut out = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y as usize * width as usize + x as usize;
                    out.push((pix, render_pixel(batch, splats, x, y, opts)));
                }
            }
            out
        })
        .collect();

    let n = width as usize * height as usize;
    let mut buf = RenderBuffers {
        width,
        height,
        background,
        color: ImageRgb::new(width, height),
        blend_color: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        final_t: vec![1.0; n],
        n_contrib: vec![0; n],
        n_processed: vec![0; n],
        checkpoints: opts.checkpoints.then(|| vec![Vec::new(); n]),
        contributions: opts.contributions.then(|| vec![Vec::new(); n]),
    };
    for (pix, out) in per_tile.into_iter().flatten() {
        let s = out.state;
        for ch in 0..3 {
            buf.color.data[pix * 3 + ch] = s.color[ch] + s.t * background[ch];
        }
        buf.blend_color[pix] = s.color;
        buf.depth[pix] = s.depth;
        buf.final_t[pix] = s.t;
        buf.n_contrib[pix] = out.n_contrib;
        buf.n_processed[pix] = out.n_processed;
        if let Some(cp) = buf.checkpoints.as_mut() {
            cp[pix] = out.checkpoints;
        }
        if let Some(c) = buf.contributions.as_mut() {
            c[pix] = out.contributions;
        }
    }
    buf
}

/// Re-blends pixel `(x, y)` starting from its checkpoint `k` (0 = empty state)
/// and returns the final state.
pub fn replay_from_checkpoint(
    buffers: &RenderBuffers,
    batch: &SplatBatch,
    tiles: &TileIndex,
    x: u32,
    y: u32,
    k: usize,
) -> Option<PixelState> {
    let pix = y as usize * buffers.width as usize + x as usize;
    let mut state = if k == 0 {
        PixelState::EMPTY
    } else {
        *buffers.checkpoints.as_ref()?[pix].get(k - 1)?
    };
    let tile = (y / TILE_SIZE * tiles.tiles_x + x / TILE_SIZE) as usize;
    let splats = &tiles.tile_splats(tile)[..buffers.n_processed[pix] as usize];
    blend_run(batch, splats, k * GROUP_SIZE, x as f64 + 0.5, y as f64 + 0.5, &mut state, |_, _, _| {});
    Some(state)
}

/// Per-splat gradients with respect to the 2D projected parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grad2D {
    pub mean: Vec<[f64; 2]>,
    /// `∂L/∂{a, b, c}` with `b` the off-diagonal conic entry.
    pub conic: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Grad2D {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![[0.0; 2]; n],
            conic: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.mean.as_flattened().iter().all(|v| *v == 0.0)
            && self.conic.as_flattened().iter().all(|v| *v == 0.0)
            && self.opacity.iter().all(|v| *v == 0.0)
            && self.color.as_flattened().iter().all(|v| *v == 0.0)
            && self.depth.iter().all(|v| *v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.as_flattened().iter().all(|v| v.is_finite())
            && self.conic.as_flattened().iter().all(|v| v.is_finite())
            && self.opacity.iter().all(|v| v.is_finite())
            && self.color.as_flattened().iter().all(|v| v.is_finite())
            && self.depth.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise deviation from `other`, relative to `max(|x|, |y|, floor)`.
    pub fn max_rel_diff(&self, other: &Grad2D, floor: f64) -> f64 {
        fn cmp(a: &[f64], b: &[f64], floor: f64) -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
                .fold(0.0, f64::max)
        }
        assert_eq!(self.len(), other.len());
        cmp(self.mean.as_flattened(), other.mean.as_flattened(), floor)
            .max(cmp(self.conic.as_flattened(), other.conic.as_flattened(), floor))
            .max(cmp(&self.opacity, &other.opacity, floor))
            .max(cmp(self.color.as_flattened(), other.color.as_flattened(), floor))
            .max(cmp(&self.depth, &other.depth, floor))
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.mean
            .as_flattened()
            .iter()
            .chain(self.conic.as_flattened())
            .chain(&self.opacity)
            .chain(self.color.as_flattened())
            .chain(&self.depth)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
