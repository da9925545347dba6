//! The optimization loop: view sampling, loss and backward, Adam, densify and
//! pose-bake cadence, and the wall-clock budget stop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::BinningStrategy;
use crate::density::{apply_decisions, error_mask, score_densify, score_prune, DensifyCounts, DensifyParams, ViewEvidence};
use crate::image_io::ImageError;
use crate::ingest::{
    align_depth_scale, attach_images, densify_seed_points, init_from_points, parse_colmap, write_ply, ColmapError,
    PlyError, SeedView, DEFAULT_ITERATIONS, DEFAULT_REL_THRESHOLD,
};
use crate::losses::{depth_weight_schedule, photometric_value, psnr, LossError, LossReport};
use crate::optim::{Adam, LearningRates, OptimError, PoseAdam};
use crate::pipeline::{render_view, view_grads, BackwardPath, LossWeights, PipelineError, RenderSettings};
use crate::pose::{bake, PoseDelta};
use crate::projection::DEFAULT_NEAR;
use crate::raster::{Reduction, RenderOptions};
use crate::scene::{Camera, GaussianSet, RigidTransform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundProfile {
    #[default]
    Round1,
    Round2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub round_profile: RoundProfile,
    pub max_iters: u32,
    pub budget_seconds: f64,
    pub pose_opt: bool,
    pub depth_supervision: bool,
    /// Initial disparity weight, decayed to zero by `max_iters / 2`.
    pub depth_weight: f64,
    pub lambda: f64,
    pub densify: bool,
    pub densify_from: u32,
    /// Defaults to `0.8 · max_iters`.
    pub densify_until: Option<u32>,
    pub densify_interval: u32,
    /// Views sampled per densify round.
    pub densify_views: usize,
    pub tau: f64,
    pub theta_plus: f64,
    pub theta_minus: f64,
    /// Split threshold as a fraction of the scene extent.
    pub split_scale_fraction: f64,
    pub min_splats: usize,
    pub bake_interval: u32,
    pub psnr_interval: u32,
    /// Hold out every n-th camera for evaluation.
    pub test_every: Option<usize>,
    pub seed: u64,
    pub sh_degree: usize,
    pub strategy: BinningStrategy,
    pub deterministic: bool,
    pub background: [f64; 3],
    pub near: f64,
    pub lr: LearningRates,
    pub colmap_dir: Option<PathBuf>,
    /// Defaults to `<colmap_dir>/images`.
    pub images_dir: Option<PathBuf>,
    pub depth_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed_samples_per_view: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(RoundProfile::Round1)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config must be a JSON object")]
    NotAnObject,
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl TrainConfig {
    pub fn for_profile(profile: RoundProfile) -> Self {
        let (max_iters, pose_opt, depth_supervision) = match profile {
            RoundProfile::Round1 => (6000, true, false),
            RoundProfile::Round2 => (15000, false, true),
        };
        Self {
            round_profile: profile,
            max_iters,
            budget_seconds: 60.0,
            pose_opt,
            depth_supervision,
            depth_weight: crate::losses::DEFAULT_DEPTH_WEIGHT,
            lambda: crate::losses::DEFAULT_LAMBDA,
            densify: true,
            densify_from: 500,
            densify_until: None,
            densify_interval: 300,
            densify_views: 10,
            tau: 0.5,
            theta_plus: 16.0,
            theta_minus: 0.9,
            split_scale_fraction: 0.01,
            min_splats: 1,
            bake_interval: crate::pose::BAKE_INTERVAL,
            psnr_interval: 100,
            test_every: None,
            seed: 0,
            sh_degree: 0,
            strategy: BinningStrategy::SnugLb,
            deterministic: false,
            background: [0.0; 3],
            near: DEFAULT_NEAR,
            lr: LearningRates::default(),
            colmap_dir: None,
            images_dir: None,
            depth_dir: None,
            output_dir: None,
            seed_samples_per_view: 0,
        }
    }

    /// Parses a JSON config. Keys not given take the defaults of the selected
    /// `round_profile`.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value.as_object().ok_or(ConfigError::NotAnObject)?;
        let profile = match obj.get("round_profile") {
            Some(p) => serde_json::from_value(p.clone())?,
            None => RoundProfile::default(),
        };
        let mut merged = serde_json::to_value(Self::for_profile(profile))?;
        let base = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in obj {
            if k == "lr" {
                if let (Some(dst), Some(src)) = (base.get_mut("lr").and_then(|l| l.as_object_mut()), v.as_object()) {
                    dst.extend(src.clone());
                    continue;
                }
            }
            base.insert(k.clone(), v.clone());
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.budget_seconds.is_finite() && self.budget_seconds > 0.0) {
            return bad("budget_seconds must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.densify_views == 0 || self.densify_interval == 0 || self.bake_interval == 0 || self.psnr_interval == 0 {
            return bad("intervals and densify_views must be positive");
        }
        if self.test_every == Some(0) || self.test_every == Some(1) {
            return bad("test_every must be at least 2");
        }
        if self.sh_degree > 3 {
            return bad("sh_degree must be at most 3");
        }
        if self.near <= 0.0 {
            return bad("near must be positive");
        }
        Ok(())
    }

    pub fn densify_until(&self) -> u32 {
        self.densify_until.unwrap_or((0.8 * self.max_iters as f64) as u32)
    }

    pub fn reduction(&self) -> Reduction {
        if self.deterministic {
            Reduction::Deterministic
        } else {
            Reduction::Fast
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            strategy: self.strategy,
            background: self.background,
            near: self.near,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("scene has no training cameras")]
    NoCameras,
    #[error("config has no colmap_dir")]
    NoScene,
    #[error("non-finite loss at iteration {iter}; diagnostics in {dump:?}")]
    NonFinite { iter: u32, dump: Option<PathBuf> },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub iter: u32,
    pub l1: f64,
    pub ssim: f64,
    pub depth_loss: f64,
    pub total: f64,
    pub psnr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionRow {
    pub iter: u32,
    pub counts: DensifyCounts,
    pub total_splats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BakeRow {
    pub iter: u32,
    pub rot_vec: Vector3<f64>,
    pub trans: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    Budget,
}

pub struct TrainOutcome {
    pub set: GaussianSet,
    /// Cameras with every pose correction baked in.
    pub cameras: Vec<Camera>,
    /// Composition of every baked delta, acting on world points before the original poses.
    pub pose_correction: RigidTransform,
    pub metrics: Vec<MetricRow>,
    pub decisions: Vec<DecisionRow>,
    pub bakes: Vec<BakeRow>,
    pub iterations: u32,
    pub stop: StopReason,
    /// Time spent in the loop, excluding output writing.
    pub elapsed: Duration,
    pub longest_iteration: Duration,
    pub skipped_rows: u64,
    /// Whether PSNR was measured on training views for lack of a held-out split.
    pub psnr_on_train_views: bool,
}

impl TrainOutcome {
    pub fn final_psnr(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.psnr)
    }
}

/// Radius of the camera centers around their mean, padded by 10%. Falls back
/// to 1 for a single camera.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(Camera::center).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 1e-9 {
        1.1 * r
    } else {
        1.0
    }
}

/// Mean PSNR of `set` over `cameras` that carry a ground-truth image.
pub fn evaluate(set: &GaussianSet, cameras: &[Camera], settings: &RenderSettings) -> Result<f64, TrainError> {
    mean_psnr(set, cameras.iter(), &PoseDelta::identity(), settings)
}

fn mean_psnr<'a>(
    set: &GaussianSet,
    cameras: impl Iterator<Item = &'a Camera>,
    delta: &PoseDelta,
    settings: &RenderSettings,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for cam in cameras {
        let Some(gt) = cam.gt_image.as_ref() else { continue };
        let view = render_view(set, cam, delta, settings, RenderOptions::default());
        sum += psnr(&view.buffers.color, gt)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Indices of training and held-out cameras.
pub fn split_views(n: usize, test_every: Option<usize>) -> (Vec<usize>, Vec<usize>) {
    match test_every {
        Some(k) => (0..n).partition(|i| i % k != 0),
        None => ((0..n).collect(), Vec::new()),
    }
}

/// Loads the scene named by `cfg`: COLMAP model, images, optional depth priors
/// (scale-aligned in place) and the initial Gaussians.
pub fn load_scene(cfg: &TrainConfig) -> Result<(GaussianSet, Vec<Camera>), TrainError> {
    let dir = cfg.colmap_dir.as_ref().ok_or(TrainError::NoScene)?;
    let mut recon = parse_colmap(dir)?;
    let images = cfg.images_dir.clone().unwrap_or_else(|| dir.join("images"));
    attach_images(&mut recon, &images, cfg.depth_dir.as_deref())?;
    let mut alignments = Vec::with_capacity(recon.cameras.len());
    for (v, cam) in recon.cameras.iter_mut().enumerate() {
        let Some(prior) = cam.depth_prior.take() else {
            alignments.push(None);
            continue;
        };
        match align_depth_scale(&prior, &recon.points, cam, DEFAULT_ITERATIONS, DEFAULT_REL_THRESHOLD, cfg.seed + v as u64) {
            Ok(a) => {
                log::info!("{}: depth scale {:.4}, inliers {:.2}", cam.name, a.scale, a.inlier_ratio);
                cam.depth_prior = Some(prior.scaled(a.scale));
                alignments.push(Some(a));
            }
            Err(e) => {
                log::warn!("{}: depth supervision disabled: {e}", cam.name);
                alignments.push(None);
            }
        }
    }
    let views: Vec<SeedView> = recon
        .cameras
        .iter()
        .zip(&alignments)
        .filter_map(|(cam, a)| {
            cam.depth_prior.as_ref().map(|depth| SeedView {
                camera: cam,
                depth,
                // The stored prior is already in scene scale.
                alignment: a.map(|a| crate::ingest::DepthAlignment { scale: 1.0, ..a }),
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = densify_seed_points(&recon, &views, cfg.seed_samples_per_view, &mut rng);
    let set = init_from_points(&seeds.points, cfg.sh_degree);
    Ok((set, recon.cameras))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("iter,l1,ssim,depth_loss,total,psnr\n");
    for r in rows {
        let psnr = r.psnr.map(fmt_f).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, r.l1, r.ssim, r.depth_loss, r.total, psnr);
    }
    s
}

pub fn decisions_csv(rows: &[DecisionRow]) -> String {
    let mut s = String::from("iter,clones,splits,prunes,total_splats\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.counts.clones, r.counts.splits, r.counts.prunes, r.total_splats);
    }
    s
}

pub fn bakes_csv(rows: &[BakeRow]) -> String {
    let mut s = String::from("iter,rot_x,rot_y,rot_z,trans_x,trans_y,trans_z\n");
    for r in rows {
        let (w, t) = (r.rot_vec, r.trans);
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iter, w.x, w.y, w.z, t.x, t.y, t.z);
    }
    s
}

/// Writes the PLY checkpoint and logs of `outcome` into `dir`.
pub fn save_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_ply(&outcome.set, &dir.join("point_cloud.ply"))?;
    for (name, text) in [
        ("metrics.csv", metrics_csv(&outcome.metrics)),
        ("decisions.csv", decisions_csv(&outcome.decisions)),
        ("poses.csv", bakes_csv(&outcome.bakes)),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

fn dump_non_finite(dir: Option<&Path>, iter: u32, camera: &str, report: &LossReport, set: &GaussianSet) -> Option<PathBuf> {
    let dir = dir?;
    let violations: Vec<String> = set.validate().iter().take(32).map(|v| v.to_string()).collect();
    let body = serde_json::json!({
        "iter": iter,
        "camera": camera,
        "l1": report.l1,
        "ssim": report.ssim,
        "depth_loss": report.depth_loss,
        "total": report.total,
        "splats": set.len(),
        "violations": violations,
    });
    let path = dir.join("non_finite.json");
    fs::create_dir_all(dir).ok()?;
    fs::write(&path, serde_json::to_string_pretty(&body).ok()?).ok()?;
    Some(path)
}

struct Densifier<'a> {
    cfg: &'a TrainConfig,
    settings: RenderSettings,
    extent: f64,
}

impl Densifier<'_> {
    fn evidence(&self, set: &GaussianSet, cam: &Camera, delta: &PoseDelta) -> Result<ViewEvidence, TrainError> {
        let opts = RenderOptions {
            checkpoints: false,
            contributions: true,
        };
        let view = render_view(set, cam, delta, &self.settings, opts);
        let gt = cam.gt_image.as_ref().ok_or_else(|| PipelineError::MissingImage(cam.name.clone()))?;
        let mask = error_mask(&view.buffers.color, gt, self.cfg.tau)?.mask;
        let e_photo = photometric_value(&view.buffers.color, gt, self.cfg.lambda)?;
        let ids = &view.batch.source_ids;
        let contributors = view
            .buffers
            .contributions
            .expect("contributions requested")
            .into_iter()
            .map(|local| local.into_iter().map(|k| ids[k as usize]).collect())
            .collect();
        Ok(ViewEvidence {
            mask,
            contributors,
            e_photo,
        })
    }

    fn run(
        &self,
        set: &mut GaussianSet,
        adam: &mut Adam,
        cameras: &[Camera],
        train: &[usize],
        delta: &PoseDelta,
        rng: &mut ChaCha8Rng,
    ) -> Result<DensifyCounts, TrainError> {
        let k = self.cfg.densify_views.min(train.len());
        let mut views = Vec::with_capacity(k);
        for i in sample(rng, train.len(), k).into_iter() {
            views.push(self.evidence(set, &cameras[train[i]], delta)?);
        }
        let s_plus = score_densify(set.len(), &views);
        let s_minus = score_prune(set.len(), &views);
        let params = DensifyParams {
            theta_plus: self.cfg.theta_plus,
            theta_minus: self.cfg.theta_minus,
            scale_split_threshold: self.cfg.split_scale_fraction * self.extent,
            min_splats: self.cfg.min_splats,
        };
        let (decisions, counts) = apply_decisions(set, &s_plus, &s_minus, &params, rng);
        adam.resize(&decisions)?;
        Ok(counts)
    }
}

/// Runs the optimization loop on `set` against `cameras`. When
/// `cfg.output_dir` is set, the checkpoint and logs are written there on any
/// normal termination.
pub fn train(set: GaussianSet, cameras: Vec<Camera>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_path(set, cameras, cfg, BackwardPath::PerGaussian(cfg.reduction()))
}

/// [`train`] with an explicit rasterizer backward pass.
pub fn train_with_path(
    set: GaussianSet,
    cameras: Vec<Camera>,
    cfg: &TrainConfig,
    path: BackwardPath,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    cfg.validate()?;
    let mut set = set;
    let mut cameras = cameras;
    let (train_idx, test_idx) = split_views(cameras.len(), cfg.test_every);
    if train_idx.is_empty() {
        return Err(TrainError::NoCameras);
    }
    let psnr_on_train_views = test_idx.is_empty();
    if psnr_on_train_views {
        log::info!("no held-out views; PSNR is measured on training views");
    }
    let eval_idx = if psnr_on_train_views { &train_idx } else { &test_idx };

    let extent = scene_extent(&cameras);
    let settings = cfg.render_settings();
    let densifier = Densifier { cfg, settings, extent };
    let densify_until = cfg.densify_until();

    let mut view_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut density_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(&set, cfg.lr);
    let mut pose_adam = PoseAdam::default();
    let mut delta = PoseDelta::identity();
    let mut correction = RigidTransform::identity();

    let mut metrics = Vec::new();
    let mut decisions = Vec::new();
    let mut bakes = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut longest = Duration::ZERO;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        let t0 = Instant::now();
        let cam_idx = train_idx[view_rng.random_range(0..train_idx.len())];
        let depth_w = if cfg.depth_supervision {
            depth_weight_schedule(iter - 1, cfg.max_iters, cfg.depth_weight)
        } else {
            0.0
        };
        let weights = LossWeights {
            lambda: cfg.lambda,
            depth: depth_w,
        };
        let grads = view_grads(&set, &cameras[cam_idx], &delta, &settings, &weights, path)?;
        let report = grads.report;
        if !report.total.is_finite() {
            let dump = dump_non_finite(cfg.output_dir.as_deref(), iter, &cameras[cam_idx].name, &report, &set);
            return Err(TrainError::NonFinite { iter, dump });
        }
        adam.step(&mut set, &grads.splats, cfg.lr.position_at(iter - 1, cfg.max_iters, extent));
        if cfg.pose_opt {
            pose_adam.step(&mut delta, &grads.pose, &cfg.lr);
        }

        if cfg.densify && iter % cfg.densify_interval == 0 && iter >= cfg.densify_from && iter < densify_until {
            let counts = densifier.run(&mut set, &mut adam, &cameras, &train_idx, &delta, &mut density_rng)?;
            log::debug!("iter {iter}: {counts:?}, {} splats", set.len());
            decisions.push(DecisionRow {
                iter,
                counts,
                total_splats: set.len(),
            });
        }
        if cfg.pose_opt && iter % cfg.bake_interval == 0 {
            correction = correction.compose(&delta.transform());
            bakes.push(BakeRow {
                iter,
                rot_vec: delta.rot_vec,
                trans: delta.trans,
            });
            bake(&mut delta, &mut cameras);
            pose_adam.reset();
        }

        let psnr = if iter % cfg.psnr_interval == 0 || iter == cfg.max_iters {
            Some(mean_psnr(&set, eval_idx.iter().map(|&i| &cameras[i]), &delta, &settings)?)
        } else {
            None
        };
        metrics.push(MetricRow {
            iter,
            l1: report.l1,
            ssim: report.ssim,
            depth_loss: report.depth_loss,
            total: report.total,
            psnr,
        });
        iterations = iter;

        let dt = t0.elapsed();
        longest = longest.max(dt);
        // Stop before an iteration that would likely overrun the budget.
        let elapsed = start.elapsed().as_secs_f64();
        if iter < cfg.max_iters && elapsed + dt.as_secs_f64() > cfg.budget_seconds {
            log::info!("budget of {}s reached after {iter} iterations", cfg.budget_seconds);
            stop = StopReason::Budget;
            break;
        }
    }

    if !delta.is_identity() {
        correction = correction.compose(&delta.transform());
        bakes.push(BakeRow {
            iter: iterations,
            rot_vec: delta.rot_vec,
            trans: delta.trans,
        });
        bake(&mut delta, &mut cameras);
    }
    if metrics.last().is_some_and(|m| m.psnr.is_none()) {
        let p = mean_psnr(&set, eval_idx.iter().map(|&i| &cameras[i]), &delta, &settings)?;
        metrics.last_mut().unwrap().psnr = Some(p);
    }

    let outcome = TrainOutcome {
        set,
        cameras,
        pose_correction: correction,
        metrics,
        decisions,
        bakes,
        iterations,
        stop,
        elapsed: start.elapsed(),
        longest_iteration: longest,
        skipped_rows: adam.skipped_rows,
        psnr_on_train_views,
    };
    if let Some(dir) = &cfg.output_dir {
        save_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::read_ply;
    use crate::synthetic::{multi_view_scene, perturb, SceneSpec};

    fn quick(max_iters: u32) -> TrainConfig {
        TrainConfig {
            max_iters,
            densify_from: 20,
            densify_interval: 20,
            densify_views: 2,
            psnr_interval: 10,
            deterministic: true,
            pose_opt: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn profiles_and_json_overrides() {
        let r2 = TrainConfig::from_json(r#"{"round_profile": "round2", "seed": 5}"#).unwrap();
        assert_eq!(r2.max_iters, 15000);
        assert!(!r2.pose_opt);
        assert!(r2.depth_supervision);
        assert_eq!(r2.depth_weight, 0.1);
        assert_eq!(r2.seed, 5);
        assert_eq!(r2.densify_until(), 12000);
        let r1 = TrainConfig::from_json(r#"{"lr": {"color": 0.01}}"#).unwrap();
        assert_eq!(r1.max_iters, 6000);
        assert!(r1.pose_opt);
        assert_eq!(r1.lr.color, 0.01);
        assert_eq!(r1.lr.scale, LearningRates::default().scale);
        assert!(TrainConfig::from_json(r#"{"budget_seconds": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"no_such_key": 1}"#).is_err());
        assert!(TrainConfig::from_json("[1]").is_err());
        let round = TrainConfig::from_json(&serde_json::to_string(&r2).unwrap()).unwrap();
        assert_eq!(round, r2);
    }

    #[test]
    fn extent_of_camera_ring() {
        let scene = multi_view_scene(&SceneSpec::small(), 1);
        let e = scene_extent(&scene.cameras);
        assert!(e > 1.0 && e < 1.1 * 3.0 * 2.0);
        assert_eq!(scene_extent(&scene.cameras[..1]), 1.0);
    }

    #[test]
    fn evaluate_of_ground_truth_is_capped() {
        let scene = multi_view_scene(&SceneSpec::small(), 2);
        let p = evaluate(&scene.gt, &scene.cameras, &RenderSettings::default()).unwrap();
        assert_eq!(p, crate::losses::PSNR_CAP);
    }

    #[test]
    fn tiny_budget_stops_after_one_iteration() {
        let scene = multi_view_scene(&SceneSpec::small(), 3);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            budget_seconds: 0.001,
            output_dir: Some(dir.path().to_path_buf()),
            ..quick(1000)
        };
        let out = train(perturb(&scene.gt, 0.05, 1), scene.cameras, &cfg).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.stop, StopReason::Budget);
        assert_eq!(read_ply(&dir.path().join("point_cloud.ply")).unwrap(), out.set);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(out.final_psnr().is_some());
    }

    #[test]
    fn deterministic_runs_repeat() {
        let scene = multi_view_scene(&SceneSpec::small(), 4);
        let init = perturb(&scene.gt, 0.05, 2);
        let cfg = TrainConfig {
            pose_opt: true,
            bake_interval: 15,
            ..quick(60)
        };
        let a = train(init.clone(), scene.cameras.clone(), &cfg).unwrap();
        let b = train(init, scene.cameras, &cfg).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.set, b.set);
        assert_eq!(a.decisions, b.decisions);
        assert!(!a.decisions.is_empty());
        assert_eq!(a.bakes.len(), 4);
        assert_eq!(a.metrics.iter().filter(|m| m.psnr.is_some()).count(), 6);
    }

    #[test]
    fn densify_keeps_optimizer_in_sync() {
        let scene = multi_view_scene(&SceneSpec::small(), 5);
        let cfg = TrainConfig {
            theta_plus: 1.0,
            ..quick(80)
        };
        let out = train(perturb(&scene.gt, 0.1, 3), scene.cameras, &cfg).unwrap();
        let grown = out.decisions.iter().any(|d| d.counts.clones + d.counts.splits > 0);
        assert!(grown);
        let last = out.decisions.last().unwrap();
        assert_eq!(out.set.len(), last.total_splats);
        assert!(out.set.validate().is_empty());
    }

    #[test]
    fn held_out_split() {
        let (train, test) = split_views(9, Some(4));
        assert_eq!(test, vec![0, 4, 8]);
        assert_eq!(train.len(), 6);
        assert_eq!(split_views(3, None).1, Vec::<usize>::new());
    }

    #[test]
    fn camera_without_image_fails() {
        let mut scene = multi_view_scene(&SceneSpec::small(), 6);
        for c in &mut scene.cameras {
            c.gt_image = None;
        }
        assert!(matches!(
            train(scene.gt, scene.cameras, &quick(5)),
            Err(TrainError::Pipeline(PipelineError::MissingImage(_)))
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let mut scene = multi_view_scene(&SceneSpec::small(), 7);
        for c in &mut scene.cameras {
            c.gt_image.as_mut().unwrap().data[0] = f64::NAN;
        }
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..quick(5)
        };
        match train(scene.gt, scene.cameras, &cfg) {
            Err(TrainError::NonFinite { iter: 1, dump: Some(p) }) => assert!(p.exists()),
            other => panic!("unexpected {:?}", other.map(|o| o.iterations)),
        }
    }
}
