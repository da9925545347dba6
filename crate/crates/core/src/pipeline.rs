//! One view through the full differentiable chain: projection, binning,
//! rasterization, losses and both backward stages.

use thiserror::Error;

use crate::binning::{BinningStrategy, TileIndex};
use crate::losses::{photometric, render_depth_loss, LossError, LossReport};
use crate::pose::{PoseDelta, PoseGrad};
use crate::projection::{project, project_vjp, SplatBatch, SplatGrads, DEFAULT_NEAR};
use crate::raster::{
    backward_per_gaussian, backward_per_pixel, render, BackwardError, PixelGrads, Reduction, RenderBuffers,
    RenderOptions,
};
use crate::scene::{Camera, GaussianSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("camera {0} has no ground-truth image")]
    MissingImage(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Backward(#[from] BackwardError),
}

/// Render-time settings shared by every view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub strategy: BinningStrategy,
    pub background: [f64; 3],
    pub near: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            strategy: BinningStrategy::SnugLb,
            background: [0.0; 3],
            near: DEFAULT_NEAR,
        }
    }
}

pub struct ViewRender {
    pub batch: SplatBatch,
    pub tiles: TileIndex,
    pub buffers: RenderBuffers,
}

pub fn render_view(
    set: &GaussianSet,
    camera: &Camera,
    delta: &PoseDelta,
    settings: &RenderSettings,
    opts: RenderOptions,
) -> ViewRender {
    let batch = project(set, camera, delta, settings.near);
    let tiles = settings.strategy.bin(&batch);
    let buffers = render(&batch, &tiles, settings.background, opts);
    ViewRender { batch, tiles, buffers }
}

/// Which backward pass to run through the rasterizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardPath {
    PerGaussian(Reduction),
    /// Reference path, kept for checking.
    PerPixel(Reduction),
}

impl Default for BackwardPath {
    fn default() -> Self {
        BackwardPath::PerGaussian(Reduction::Deterministic)
    }
}

/// Weights of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    /// Disparity weight; zero disables depth supervision.
    pub depth: f64,
}

pub struct ViewGrads {
    pub report: LossReport,
    pub splats: SplatGrads,
    pub pose: PoseGrad,
    pub merges: usize,
}

/// Loss of `set` seen from `camera` and its value alone.
pub fn view_loss(
    set: &GaussianSet,
    camera: &Camera,
    delta: &PoseDelta,
    settings: &RenderSettings,
    weights: &LossWeights,
) -> Result<LossReport, PipelineError> {
    let gt = camera.gt_image.as_ref().ok_or_else(|| PipelineError::MissingImage(camera.name.clone()))?;
    let view = render_view(set, camera, delta, settings, RenderOptions::default());
    let (mut report, _) = photometric(&view.buffers.color, gt, weights.lambda)?;
    if let Some(prior) = camera.depth_prior.as_ref().filter(|_| weights.depth > 0.0) {
        report.depth_loss = render_depth_loss(&view.buffers, prior, weights.depth).loss;
    }
    report.depth_weight = weights.depth;
    report.total = report.photometric + report.depth_loss;
    Ok(report)
}

/// Loss and gradients with respect to every Gaussian parameter and the pose delta.
pub fn view_grads(
    set: &GaussianSet,
    camera: &Camera,
    delta: &PoseDelta,
    settings: &RenderSettings,
    weights: &LossWeights,
    path: BackwardPath,
) -> Result<ViewGrads, PipelineError> {
    let gt = camera.gt_image.as_ref().ok_or_else(|| PipelineError::MissingImage(camera.name.clone()))?;
    let view = render_view(set, camera, delta, settings, RenderOptions::training());
    let (mut report, color) = photometric(&view.buffers.color, gt, weights.lambda)?;
    let n = view.buffers.pixel_count();
    let mut upstream = PixelGrads {
        color,
        depth: vec![0.0; n],
        final_t: vec![0.0; n],
    };
    if let Some(prior) = camera.depth_prior.as_ref().filter(|_| weights.depth > 0.0) {
        let d = render_depth_loss(&view.buffers, prior, weights.depth);
        report.depth_loss = d.loss;
        upstream.depth = d.depth;
        upstream.final_t = d.final_t;
    }
    report.depth_weight = weights.depth;
    report.total = report.photometric + report.depth_loss;

    let (g2d, merges) = match path {
        BackwardPath::PerGaussian(mode) => {
            let (g, stats) = backward_per_gaussian(&view.buffers, &view.batch, &view.tiles, &upstream, mode)?;
            (g, stats.merges)
        }
        BackwardPath::PerPixel(mode) => (backward_per_pixel(&view.buffers, &view.batch, &view.tiles, &upstream, mode)?, 0),
    };
    let (splats, pose) = project_vjp(set, camera, delta, &view.batch, &g2d);
    Ok(ViewGrads {
        report,
        splats,
        pose,
        merges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn both_paths_agree_on_a_synthetic_view() {
        let scene = synthetic::multi_view_scene(&synthetic::SceneSpec::small(), 3);
        let cam = &scene.cameras[0];
        let settings = RenderSettings::default();
        let w = LossWeights { lambda: 0.2, depth: 0.1 };
        let init = synthetic::perturb(&scene.gt, 0.05, 9);
        let d = PoseDelta::identity();
        let a = view_grads(&init, cam, &d, &settings, &w, BackwardPath::default()).unwrap();
        let b = view_grads(&init, cam, &d, &settings, &w, BackwardPath::PerPixel(Reduction::Deterministic)).unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.report.depth_loss > 0.0);
        let flat = |g: &SplatGrads| -> Vec<f64> {
            let mut v = g.positions.as_flattened().to_vec();
            v.extend(g.log_scales.as_flattened());
            v.extend(g.rotations.as_flattened());
            v.extend(&g.opacity_logits);
            v.extend(&g.colors);
            v
        };
        let (fa, fb) = (flat(&a.splats), flat(&b.splats));
        let scale = fb.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() <= 1e-8 * scale, "{x} vs {y}");
        }
        let loss = view_loss(&init, cam, &d, &settings, &w).unwrap();
        assert_eq!(loss.total, a.report.total);
    }

    #[test]
    fn missing_image_is_reported() {
        let set = GaussianSet::with_sh_degree(0);
        let cam = Camera::new(10.0, 10.0, 8.0, 8.0, 16, 16);
        let w = LossWeights { lambda: 0.2, depth: 0.0 };
        let err = view_loss(&set, &cam, &PoseDelta::identity(), &RenderSettings::default(), &w);
        assert!(matches!(err, Err(PipelineError::MissingImage(_))));
    }
}
