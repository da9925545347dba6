//! Photometric and depth objectives with analytic gradients.

use rayon::prelude::*;
use thiserror::Error;

use crate::image_io::{DepthMap, ImageRgb};
use crate::raster::RenderBuffers;

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_DEPTH_WEIGHT: f64 = 0.1;
/// Disparity clamp for both rendered and prior depth.
pub const DISPARITY_EPS: f64 = 1e-4;
/// Minimum accumulated opacity for a pixel's normalized depth to be supervised.
pub const MIN_DEPTH_OPACITY: f64 = 1e-2;
pub const PSNR_CAP: f64 = 99.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub ssim: f64,
    pub photometric: f64,
    pub depth_loss: f64,
    pub total: f64,
    pub lambda: f64,
    pub depth_weight: f64,
}

fn check_shape(a: &ImageRgb, b: &ImageRgb) -> Result<(), LossError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(a.width, a.height, b.width, b.height))
    }
}

/// Mean absolute error and its gradient with respect to `rendered`.
pub fn l1(rendered: &ImageRgb, gt: &ImageRgb) -> Result<(f64, Vec<f64>), LossError> {
    check_shape(rendered, gt)?;
    let n = rendered.data.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = rendered
        .data
        .iter()
        .zip(&gt.data)
        .map(|(r, g)| {
            let d = r - g;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut taps = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter with zero padding. The kernel is symmetric, so this
/// is also its own adjoint.
fn blur(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += t * img[y * w + xx as usize];
                }
            }
            *out = s;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += t * tmp[yy as usize * w + x];
                }
            }
            *o = s;
        }
    });
    out
}

/// Mean SSIM over pixels and channels, and its gradient with respect to `x`.
pub fn ssim(x: &ImageRgb, y: &ImageRgb) -> Result<(f64, Vec<f64>), LossError> {
    check_shape(x, y)?;
    let (w, h) = (x.width as usize, x.height as usize);
    let n = w * h;
    let mut grad = vec![0.0; n * 3];
    let mut total = 0.0;
    for ch in 0..3 {
        let xs: Vec<f64> = (0..n).map(|p| x.data[p * 3 + ch]).collect();
        let ys: Vec<f64> = (0..n).map(|p| y.data[p * 3 + ch]).collect();
        let mu_x = blur(&xs, w, h);
        let mu_y = blur(&ys, w, h);
        let xx = blur(&xs.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let yy = blur(&ys.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let xy = blur(&xs.iter().zip(&ys).map(|(a, b)| a * b).collect::<Vec<_>>(), w, h);
        // Per-pixel partials of the SSIM map w.r.t. μx, E[x²] and E[xy].
        let mut d_mu = vec![0.0; n];
        let mut d_xx = vec![0.0; n];
        let mut d_xy = vec![0.0; n];
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let sxx = xx[p] - mx * mx;
            let syy = yy[p] - my * my;
            let sxy = xy[p] - mx * my;
            let n1 = 2.0 * mx * my + SSIM_C1;
            let n2 = 2.0 * sxy + SSIM_C2;
            let d1 = mx * mx + my * my + SSIM_C1;
            let d2 = sxx + syy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            let ds_dmu = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
            let ds_dsxx = -s / d2;
            let ds_dsxy = 2.0 * n1 / (d1 * d2);
            d_mu[p] = ds_dmu - 2.0 * mx * ds_dsxx - my * ds_dsxy;
            d_xx[p] = ds_dsxx;
            d_xy[p] = ds_dsxy;
        }
        let b_mu = blur(&d_mu, w, h);
        let b_xx = blur(&d_xx, w, h);
        let b_xy = blur(&d_xy, w, h);
        let scale = 1.0 / (3 * n) as f64;
        for p in 0..n {
            grad[p * 3 + ch] = scale * (b_mu[p] + 2.0 * xs[p] * b_xx[p] + ys[p] * b_xy[p]);
        }
    }
    Ok((total / (3 * n) as f64, grad))
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)` and its per-pixel gradient.
pub fn photometric(rendered: &ImageRgb, gt: &ImageRgb, lambda: f64) -> Result<(LossReport, Vec<[f64; 3]>), LossError> {
    let (l1v, g1) = l1(rendered, gt)?;
    let (sv, gs) = ssim(rendered, gt)?;
    let e = (1.0 - lambda) * l1v + lambda * (1.0 - sv);
    let grad = g1
        .chunks_exact(3)
        .zip(gs.chunks_exact(3))
        .map(|(a, b)| [0, 1, 2].map(|c| (1.0 - lambda) * a[c] - lambda * b[c]))
        .collect();
    let report = LossReport {
        l1: l1v,
        ssim: sv,
        photometric: e,
        total: e,
        lambda,
        ..Default::default()
    };
    Ok((report, grad))
}

/// `E_photo` alone, without gradients.
pub fn photometric_value(rendered: &ImageRgb, gt: &ImageRgb, lambda: f64) -> Result<f64, LossError> {
    Ok(photometric(rendered, gt, lambda)?.0.photometric)
}

/// Weighted mean absolute disparity error over `valid` pixels and its gradient
/// with respect to `rendered`.
pub fn disparity_loss(rendered: &[f64], prior: &[f64], valid: &[bool], weight: f64) -> (f64, Vec<f64>) {
    assert!(rendered.len() == prior.len() && prior.len() == valid.len());
    let count = valid.iter().filter(|v| **v).count();
    let mut grad = vec![0.0; rendered.len()];
    if count == 0 || weight == 0.0 {
        return (0.0, grad);
    }
    let scale = weight / count as f64;
    let mut sum = 0.0;
    for p in 0..rendered.len() {
        if !valid[p] {
            continue;
        }
        let dr = rendered[p].max(DISPARITY_EPS);
        let dp = prior[p].max(DISPARITY_EPS);
        let diff = 1.0 / dr - 1.0 / dp;
        sum += diff.abs();
        if rendered[p] > DISPARITY_EPS && diff != 0.0 {
            grad[p] = -scale * diff.signum() / (dr * dr);
        }
    }
    (scale * sum, grad)
}

/// Depth-loss gradients on the raw render outputs.
pub struct DepthLossGrads {
    pub loss: f64,
    pub depth: Vec<f64>,
    pub final_t: Vec<f64>,
}

/// Disparity loss on the opacity-normalized rendered depth `D / (1 − T)`.
///
/// Pixels are supervised where the prior is valid, at least one splat blended,
/// and the accumulated opacity exceeds [`MIN_DEPTH_OPACITY`].
pub fn render_depth_loss(buffers: &RenderBuffers, prior: &DepthMap, weight: f64) -> DepthLossGrads {
    let n = buffers.pixel_count();
    assert_eq!(prior.data.len(), n, "depth prior resolution");
    let valid: Vec<bool> = (0..n)
        .map(|p| prior.valid[p] && buffers.n_contrib[p] > 0 && 1.0 - buffers.final_t[p] > MIN_DEPTH_OPACITY)
        .collect();
    let norm: Vec<f64> = (0..n)
        .map(|p| if valid[p] { buffers.depth[p] / (1.0 - buffers.final_t[p]) } else { 0.0 })
        .collect();
    let (loss, g) = disparity_loss(&norm, &prior.data, &valid, weight);
    let mut depth = vec![0.0; n];
    let mut final_t = vec![0.0; n];
    for p in 0..n {
        if g[p] != 0.0 {
            let a = 1.0 - buffers.final_t[p];
            depth[p] = g[p] / a;
            final_t[p] = g[p] * buffers.depth[p] / (a * a);
        }
    }
    DepthLossGrads { loss, depth, final_t }
}

/// Linear decay from `w0` at iteration 0 to zero at `max_iter / 2`.
pub fn depth_weight_schedule(iter: u32, max_iter: u32, w0: f64) -> f64 {
    let decay_end = max_iter as f64 / 2.0;
    if decay_end <= 0.0 {
        return 0.0;
    }
    (w0 * (1.0 - iter as f64 / decay_end)).max(0.0)
}

pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64, LossError> {
    check_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR in dB on `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64, LossError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}
