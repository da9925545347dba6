//! Monocular depth priors: RANSAC scale alignment against sparse points and
//! back-projected seed sampling.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::colmap::{SparsePoint, SparseReconstruction};
use crate::image_io::DepthMap;
use crate::scene::Camera;

pub const MIN_CORRESPONDENCES: usize = 10;
pub const DEFAULT_ITERATIONS: usize = 256;
pub const DEFAULT_REL_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("only {0} usable sparse correspondences, need {MIN_CORRESPONDENCES}")]
    Unavailable(usize),
    #[error("depth prior is {got_w}x{got_h}, camera is {want_w}x{want_h}")]
    Resolution { got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthAlignment {
    /// Multiply the prior by this to reach scene scale.
    pub scale: f64,
    pub inlier_ratio: f64,
    pub threshold: f64,
}

/// `(prior depth, sparse camera-frame depth)` pairs for points landing on valid prior pixels.
pub fn correspondences(depth: &DepthMap, points: &[SparsePoint], camera: &Camera) -> Vec<(f64, f64)> {
    points
        .iter()
        .filter_map(|p| {
            let c = camera.world_to_cam.apply(&Vector3::from(p.position));
            if c.z <= 0.0 {
                return None;
            }
            let u = camera.fx * c.x / c.z + camera.cx;
            let v = camera.fy * c.y / c.z + camera.cy;
            if u < 0.0 || v < 0.0 || u >= depth.width as f64 || v >= depth.height as f64 {
                return None;
            }
            depth.at(u as u32, v as u32).map(|d| (d, c.z))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn inliers(pairs: &[(f64, f64)], s: f64, thr: f64) -> Vec<usize> {
    (0..pairs.len())
        .filter(|&i| {
            let (pred, sparse) = pairs[i];
            (s * pred - sparse).abs() < thr * sparse
        })
        .collect()
}

/// Scale-only alignment of `pairs` by RANSAC over single-pair hypotheses.
pub fn align_pairs(pairs: &[(f64, f64)], iterations: usize, rel_threshold: f64, seed: u64) -> Result<DepthAlignment, AlignError> {
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(AlignError::Unavailable(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iterations.max(1) {
        let (pred, sparse) = pairs[rng.random_range(0..pairs.len())];
        let set = inliers(pairs, sparse / pred, rel_threshold);
        if set.len() > best.len() {
            best = set;
        }
    }
    let scale = median(best.iter().map(|&i| pairs[i].1 / pairs[i].0).collect());
    Ok(DepthAlignment {
        scale,
        inlier_ratio: best.len() as f64 / pairs.len() as f64,
        threshold: rel_threshold,
    })
}

/// Aligns a depth prior to the sparse points visible in `camera`. The prior is not modified.
pub fn align_depth_scale(
    depth: &DepthMap,
    points: &[SparsePoint],
    camera: &Camera,
    iterations: usize,
    rel_threshold: f64,
    seed: u64,
) -> Result<DepthAlignment, AlignError> {
    if depth.width != camera.width || depth.height != camera.height {
        return Err(AlignError::Resolution {
            got_w: depth.width,
            got_h: depth.height,
            want_w: camera.width,
            want_h: camera.height,
        });
    }
    align_pairs(&correspondences(depth, points, camera), iterations, rel_threshold, seed)
}

/// One view's contribution to seed densification.
pub struct SeedView<'a> {
    pub camera: &'a Camera,
    pub depth: &'a DepthMap,
    pub alignment: Option<DepthAlignment>,
}

#[derive(Clone, Debug)]
pub struct SeedPoints {
    pub points: Vec<SparsePoint>,
    /// Set when no view had an alignment and only the sparse points were returned.
    pub no_aligned_views: bool,
}

/// Back-projects pixel `(x, y)` at camera-frame depth `z` to world space.
pub fn back_project(camera: &Camera, x: u32, y: u32, z: f64) -> Vector3<f64> {
    let u = x as f64 + 0.5;
    let v = y as f64 + 0.5;
    let p = Vector3::new((u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z);
    camera.world_to_cam.inverse().apply(&p)
}

/// Sparse points plus `samples_per_view` back-projected prior pixels from each aligned view.
pub fn densify_seed_points(
    recon: &SparseReconstruction,
    views: &[SeedView],
    samples_per_view: usize,
    rng: &mut impl Rng,
) -> SeedPoints {
    let mut points = recon.points.clone();
    let aligned: Vec<&SeedView> = views.iter().filter(|v| v.alignment.is_some()).collect();
    if aligned.is_empty() {
        log::warn!("no view has a depth alignment; seeding from sparse points only");
        return SeedPoints {
            points,
            no_aligned_views: true,
        };
    }
    for view in aligned {
        let scale = view.alignment.unwrap().scale;
        let valid: Vec<usize> = (0..view.depth.data.len()).filter(|&i| view.depth.valid[i]).collect();
        if valid.is_empty() {
            continue;
        }
        for _ in 0..samples_per_view {
            let i = valid[rng.random_range(0..valid.len())];
            let (x, y) = ((i % view.depth.width as usize) as u32, (i / view.depth.width as usize) as u32);
            let p = back_project(view.camera, x, y, view.depth.data[i] * scale);
            let rgb = match &view.camera.gt_image {
                Some(img) if img.width == view.depth.width && img.height == view.depth.height => {
                    img.pixel(x, y).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
                }
                _ => [128; 3],
            };
            points.push(SparsePoint {
                position: [p.x, p.y, p.z],
                rgb,
            });
        }
    }
    SeedPoints {
        points,
        no_aligned_views: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::exp_so3;
    use crate::scene::RigidTransform;

    fn camera() -> Camera {
        Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32)
    }

    /// Sparse points at random pixels and depths, and a prior holding `f(true depth)` there.
    fn scene(rng: &mut impl Rng, n: usize, f: impl Fn(usize, f64) -> f64) -> (DepthMap, Vec<SparsePoint>) {
        let cam = camera();
        let mut values = vec![0.0; 32 * 32];
        let mut points = Vec::new();
        let mut used = std::collections::HashSet::new();
        while points.len() < n {
            let (x, y) = (rng.random_range(0..32u32), rng.random_range(0..32u32));
            if !used.insert((x, y)) {
                continue;
            }
            let z = rng.random_range(1.0..6.0);
            let p = back_project(&cam, x, y, z);
            values[(y * 32 + x) as usize] = f(points.len(), z);
            points.push(SparsePoint {
                position: [p.x, p.y, p.z],
                rgb: [0; 3],
            });
        }
        (DepthMap::from_values(32, 32, values), points)
    }

    #[test]
    fn exact_prior_has_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, pts) = scene(&mut rng, 40, |_, z| z);
        let a = align_depth_scale(&d, &pts, &camera(), 256, 0.05, 7).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert_eq!(a.inlier_ratio, 1.0);
    }

    #[test]
    fn half_scale_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, pts) = scene(&mut rng, 40, |_, z| 0.5 * z);
        let before = d.clone();
        let a = align_depth_scale(&d, &pts, &camera(), 256, 0.05, 7).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12);
        assert_eq!(d, before);
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, pts) = scene(&mut rng, 100, |i, z| if i % 5 == 0 { 10.0 * z } else { 0.5 * z });
        let pairs = correspondences(&d, &pts, &camera());
        // Exhaustive sweep over every single-pair hypothesis.
        let best = (0..pairs.len())
            .map(|i| inliers(&pairs, pairs[i].1 / pairs[i].0, 0.05))
            .max_by_key(|s| s.len())
            .unwrap();
        let oracle = median(best.iter().map(|&i| pairs[i].1 / pairs[i].0).collect());
        let a = align_depth_scale(&d, &pts, &camera(), 256, 0.05, 11).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-6);
        assert!((a.scale - oracle).abs() < 1e-12);
        assert!(a.inlier_ratio >= 0.8);
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, pts) = scene(&mut rng, 50, |i, z| if i % 4 == 0 { 3.0 * z } else { 0.7 * z });
        let base = align_depth_scale(&d, &pts, &camera(), 64, 0.05, 5).unwrap();
        for k in [0.25, 3.0, 17.0] {
            let a = align_depth_scale(&d.scaled(k), &pts, &camera(), 64, 0.05, 5).unwrap();
            assert!((a.scale * k - base.scale).abs() < 1e-12 * base.scale);
            assert_eq!(a.inlier_ratio, base.inlier_ratio);
        }
    }

    #[test]
    fn too_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, pts) = scene(&mut rng, 9, |_, z| z);
        assert_eq!(align_depth_scale(&d, &pts, &camera(), 10, 0.05, 0), Err(AlignError::Unavailable(9)));
    }

    #[test]
    fn seeds_from_flat_plane() {
        let cam = camera();
        let depth = DepthMap::from_values(32, 32, vec![1.0; 32 * 32]);
        let recon = SparseReconstruction::default();
        let view = SeedView {
            camera: &cam,
            depth: &depth,
            alignment: Some(DepthAlignment {
                scale: 2.0,
                inlier_ratio: 1.0,
                threshold: 0.05,
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let none = densify_seed_points(&recon, std::slice::from_ref(&view), 0, &mut rng);
        assert!(none.points.is_empty());
        let out = densify_seed_points(&recon, &[view], 100, &mut rng);
        assert_eq!(out.points.len(), 100);
        for p in &out.points {
            assert_eq!(p.position[2], 2.0);
            // x = (u − cx)/fx · z with u on the pixel-center grid.
            let u = p.position[0] / 2.0 * 40.0 + 16.0;
            assert!(((u - 0.5) - (u - 0.5).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_views_of_one_plane_agree() {
        // Plane z = 3 in world space seen by two tilted cameras.
        let mut cams = Vec::new();
        let mut depths = Vec::new();
        for k in 0..2 {
            let r = exp_so3(&Vector3::new(0.1 * k as f64, -0.15, 0.05));
            let c = Vector3::new(0.2 * k as f64, -0.1, 0.0);
            let cam = camera().with_pose(RigidTransform::new(r, -(r * c)));
            let inv = cam.world_to_cam.inverse();
            let normal = Vector3::z();
            let values = (0..32 * 32)
                .map(|i| {
                    let ray = Vector3::new(((i % 32) as f64 + 0.5 - 16.0) / 40.0, ((i / 32) as f64 + 0.5 - 16.0) / 40.0, 1.0);
                    let dir = inv.rotation * ray;
                    (3.0 - inv.translation.dot(&normal)) / dir.dot(&normal)
                })
                .collect();
            cams.push(cam);
            depths.push(DepthMap::from_values(32, 32, values));
        }
        let align = Some(DepthAlignment {
            scale: 1.0,
            inlier_ratio: 1.0,
            threshold: 0.05,
        });
        let views: Vec<SeedView> = (0..2)
            .map(|k| SeedView {
                camera: &cams[k],
                depth: &depths[k],
                alignment: align,
            })
            .collect();
        let out = densify_seed_points(&SparseReconstruction::default(), &views, 50, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(out.points.len(), 100);
        assert!(out.points.iter().all(|p| (p.position[2] - 3.0).abs() < 1e-5));
    }

    #[test]
    fn unaligned_views_leave_sparse_points() {
        let cam = camera();
        let depth = DepthMap::from_values(32, 32, vec![1.0; 32 * 32]);
        let mut recon = SparseReconstruction::default();
        recon.points.push(SparsePoint {
            position: [0.0, 0.0, 1.0],
            rgb: [9, 9, 9],
        });
        let view = SeedView {
            camera: &cam,
            depth: &depth,
            alignment: None,
        };
        let out = densify_seed_points(&recon, &[view], 10, &mut ChaCha8Rng::seed_from_u64(8));
        assert!(out.no_aligned_views);
        assert_eq!(out.points, recon.points);
    }
}
