//! Seeded synthetic scenes with known ground truth, used by tests, the
//! benchmark and the acceptance suite.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::image_io::DepthMap;
use crate::pipeline::{render_view, RenderSettings};
use crate::pose::PoseDelta;
use crate::raster::RenderOptions;
use crate::scene::{logit, Camera, GaussianSet, RigidTransform};
use crate::sh::rgb_to_dc;

/// Accumulated opacity below which the synthetic depth prior is marked invalid.
const PRIOR_MIN_OPACITY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub n_splats: usize,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Half-width of the cube holding the splat centers.
    pub half_extent: f64,
    /// Camera distance from the origin.
    pub orbit_radius: f64,
    /// Range of activated splat scales.
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl SceneSpec {
    /// 10 splats, 4 views of 32×32.
    pub fn small() -> Self {
        Self {
            n_splats: 10,
            n_views: 4,
            width: 32,
            height: 32,
            focal: 40.0,
            half_extent: 0.5,
            orbit_radius: 3.0,
            scale_range: (0.08, 0.25),
            opacity_range: (0.6, 0.95),
            sh_degree: 0,
            background: [0.0; 3],
        }
    }

    /// 60 splats, 12 views of 64×48.
    pub fn multi_view() -> Self {
        Self {
            n_splats: 60,
            n_views: 12,
            width: 64,
            height: 48,
            focal: 60.0,
            half_extent: 0.6,
            orbit_radius: 3.0,
            scale_range: (0.05, 0.2),
            opacity_range: (0.5, 0.95),
            ..Self::small()
        }
    }
}

pub struct SyntheticScene {
    pub gt: GaussianSet,
    /// Cameras with rendered ground-truth images and depth priors.
    pub cameras: Vec<Camera>,
}

/// World-to-camera transform of a camera at `eye` looking at `target`, with
/// +y pointing down in the image.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    RigidTransform::new(r, -(r * eye))
}

pub fn random_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
    [q.w, q.i, q.j, q.k]
}

pub fn random_gaussians(spec: &SceneSpec, rng: &mut impl Rng) -> GaussianSet {
    let mut set = GaussianSet::with_sh_degree(spec.sh_degree);
    let stride = set.color_stride();
    let h = spec.half_extent;
    for _ in 0..spec.n_splats {
        let position = std::array::from_fn(|_| rng.random_range(-h..h));
        let log_scale = std::array::from_fn(|_| rng.random_range(spec.scale_range.0..spec.scale_range.1).ln());
        let opacity = rng.random_range(spec.opacity_range.0..spec.opacity_range.1);
        let mut colors = vec![0.0; stride];
        for c in colors.iter_mut().take(3) {
            *c = rgb_to_dc(rng.random_range(0.05..0.95));
        }
        for c in colors.iter_mut().skip(3) {
            *c = rng.random_range(-0.1..0.1);
        }
        set.push(position, log_scale, random_quaternion(rng), logit(opacity), &colors);
    }
    set
}

/// Cameras spread over a band of the orbit sphere, all looking at the origin.
pub fn orbit_cameras(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Camera> {
    (0..spec.n_views)
        .map(|v| {
            let azimuth = std::f64::consts::TAU * (v as f64 + rng.random_range(-0.2..0.2)) / spec.n_views as f64;
            let elevation: f64 = rng.random_range(-0.35..0.35);
            let eye = spec.orbit_radius
                * Vector3::new(azimuth.cos() * elevation.cos(), elevation.sin(), azimuth.sin() * elevation.cos());
            let mut cam = Camera::new(
                spec.focal,
                spec.focal,
                spec.width as f64 / 2.0,
                spec.height as f64 / 2.0,
                spec.width,
                spec.height,
            )
            .with_pose(look_at(eye, Vector3::zeros(), Vector3::y()));
            cam.name = format!("view_{v:03}.png");
            cam
        })
        .collect()
}

/// Renders ground truth and an opacity-normalized depth prior for each camera.
pub fn attach_ground_truth(set: &GaussianSet, cameras: &mut [Camera], background: [f64; 3]) {
    let settings = RenderSettings {
        background,
        ..Default::default()
    };
    for cam in cameras.iter_mut() {
        let view = render_view(set, cam, &PoseDelta::identity(), &settings, RenderOptions::default());
        let b = &view.buffers;
        let depth = (0..b.pixel_count())
            .map(|p| {
                let a = 1.0 - b.final_t[p];
                if a > PRIOR_MIN_OPACITY {
                    b.depth[p] / a
                } else {
                    0.0
                }
            })
            .collect();
        cam.depth_prior = Some(DepthMap::from_values(cam.width, cam.height, depth));
        cam.gt_image = Some(view.buffers.color);
    }
}

pub fn multi_view_scene(spec: &SceneSpec, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_gaussians(spec, &mut rng);
    let mut cameras = orbit_cameras(spec, &mut rng);
    attach_ground_truth(&gt, &mut cameras, spec.background);
    SyntheticScene { gt, cameras }
}

/// Copy of `set` with Gaussian noise of standard deviation `sigma` on every
/// parameter group (positions in world units).
pub fn perturb(set: &GaussianSet, sigma: f64, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let mut out = set.clone();
    for v in out
        .positions
        .as_flattened_mut()
        .iter_mut()
        .chain(out.log_scales.as_flattened_mut())
        .chain(out.rotations.as_flattened_mut())
        .chain(out.opacity_logits.iter_mut())
        .chain(out.colors.iter_mut())
    {
        *v += noise.sample(&mut rng);
    }
    out.normalize_rotations();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_centers_the_target() {
        let t = look_at(Vector3::new(3.0, 1.0, -2.0), Vector3::new(0.5, 0.0, 0.0), Vector3::y());
        let p = t.apply(&Vector3::new(0.5, 0.0, 0.0));
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!(t.orthonormality_error() < 1e-12);
        assert!(t.rotation.determinant() > 0.0);
        // World up maps to image up (negative y).
        assert!(t.rotation[(1, 1)] < 0.0);
    }

    #[test]
    fn scene_is_seeded_and_visible() {
        let spec = SceneSpec::small();
        let a = multi_view_scene(&spec, 4);
        let b = multi_view_scene(&spec, 4);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.cameras.len(), 4);
        assert!(a.gt.validate().is_empty());
        for (ca, cb) in a.cameras.iter().zip(&b.cameras) {
            let img = ca.gt_image.as_ref().unwrap();
            assert_eq!(img, cb.gt_image.as_ref().unwrap());
            assert!(img.data.iter().any(|v| *v > 0.05));
            assert!(ca.depth_prior.as_ref().unwrap().valid.iter().any(|v| *v));
        }
    }

    #[test]
    fn perturb_zero_is_identity() {
        let spec = SceneSpec::small();
        let set = random_gaussians(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let p = perturb(&set, 0.0, 2);
        assert_eq!(p.positions, set.positions);
        assert_ne!(perturb(&set, 0.1, 2).positions, set.positions);
    }
}
