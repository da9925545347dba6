//! Single global pose correction shared by every camera.
//!
//! The delta acts on world points, `x -> exp(rot_vec) x + trans`, before the
//! camera's own world-to-camera transform. Its gradient is accumulated through
//! rendering and it is periodically folded ("baked") into all stored poses.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::scene::{Camera, RigidTransform};

/// Baking cadence in iterations.
pub const BAKE_INTERVAL: u32 = 300;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDelta {
    /// Axis-angle rotation in radians.
    pub rot_vec: Vector3<f64>,
    pub trans: Vector3<f64>,
    pub steps_since_bake: u32,
}

impl Default for PoseDelta {
    fn default() -> Self {
        Self::identity()
    }
}

/// Gradient of a scalar loss with respect to a [`PoseDelta`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseGrad {
    pub rot_vec: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl std::ops::AddAssign for PoseGrad {
    fn add_assign(&mut self, rhs: Self) {
        self.rot_vec += rhs.rot_vec;
        self.trans += rhs.trans;
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map.
pub fn exp_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

/// Axis-angle vector of a rotation matrix.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Partial derivatives `∂exp(v)/∂v_k` for k = 0, 1, 2.
pub fn exp_so3_partials(v: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = v.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2 < 1e-10 {
        // Second-order expansion around the identity.
        let vx = skew(v);
        return basis.map(|e| {
            let ex = skew(&e);
            ex + 0.5 * (ex * vx + vx * ex)
        });
    }
    let r = exp_so3(v);
    let i_minus_r = Matrix3::identity() - r;
    let vx = skew(v);
    [0, 1, 2].map(|k| {
        let w = v.cross(&(i_minus_r * basis[k]));
        (vx * v[k] + skew(&w)) / theta2 * r
    })
}

/// Chain rule from a gradient on the rotation matrix to the axis-angle vector.
pub fn rot_vec_grad(v: &Vector3<f64>, grad_r: &Matrix3<f64>) -> Vector3<f64> {
    let partials = exp_so3_partials(v);
    Vector3::new(
        partials[0].component_mul(grad_r).sum(),
        partials[1].component_mul(grad_r).sum(),
        partials[2].component_mul(grad_r).sum(),
    )
}

impl PoseDelta {
    pub fn identity() -> Self {
        Self {
            rot_vec: Vector3::zeros(),
            trans: Vector3::zeros(),
            steps_since_bake: 0,
        }
    }

    pub fn new(rot_vec: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self {
            rot_vec,
            trans,
            steps_since_bake: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rot_vec == Vector3::zeros() && self.trans == Vector3::zeros()
    }

    /// The world-point transform this delta represents.
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(exp_so3(&self.rot_vec), self.trans)
    }

    pub fn from_transform(t: &RigidTransform) -> Self {
        Self::new(log_so3(&t.rotation), t.translation)
    }

    /// Effective world-to-camera transform of `camera` under this delta.
    pub fn apply(&self, camera: &Camera) -> RigidTransform {
        if self.is_identity() {
            return camera.world_to_cam;
        }
        camera.world_to_cam.compose(&self.transform())
    }

    /// Maps the gradient with respect to an effective camera transform back onto
    /// the delta parameters.
    pub fn grad_from_effective(
        &self,
        camera: &Camera,
        grad_rotation: &Matrix3<f64>,
        grad_translation: &Vector3<f64>,
    ) -> PoseGrad {
        let rc_t = camera.world_to_cam.rotation.transpose();
        let grad_delta_rot = rc_t * grad_rotation;
        PoseGrad {
            rot_vec: rot_vec_grad(&self.rot_vec, &grad_delta_rot),
            trans: rc_t * grad_translation,
        }
    }
}

/// Effective world-to-camera transform of `camera` under `delta`.
pub fn apply_delta(camera: &Camera, delta: &PoseDelta) -> RigidTransform {
    delta.apply(camera)
}

/// Folds `delta` into every camera pose and resets it to the identity.
///
/// The caller is responsible for zeroing the delta's optimizer moments.
pub fn bake(delta: &mut PoseDelta, cameras: &mut [Camera]) {
    if !delta.is_identity() {
        for cam in cameras.iter_mut() {
            cam.world_to_cam = delta.apply(cam);
        }
    }
    *delta = PoseDelta::identity();
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_camera(rng: &mut impl Rng) -> Camera {
        let r = exp_so3(&Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Camera::new(100.0, 100.0, 32.0, 32.0, 64, 64).with_pose(RigidTransform::new(r, t))
    }

    fn random_delta(rng: &mut impl Rng) -> PoseDelta {
        PoseDelta::new(
            Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ),
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
        )
    }

    #[test]
    fn zero_delta_is_identity() {
        let cam = random_camera(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(apply_delta(&cam, &PoseDelta::identity()), cam.world_to_cam);
    }

    #[test]
    fn pure_translation_shifts_world_points() {
        let cam = Camera::new(1.0, 1.0, 0.0, 0.0, 16, 16);
        let delta = PoseDelta::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let p = apply_delta(&cam, &delta).apply(&Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(p, Vector3::new(1.0, 0.0, 5.0));
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let cam = Camera::new(1.0, 1.0, 0.0, 0.0, 16, 16);
        let delta = PoseDelta::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros());
        let p = apply_delta(&cam, &delta).apply(&Vector3::x());
        assert_relative_eq!(p, Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn bake_resets_delta_and_preserves_effective_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cams: Vec<Camera> = (0..3).map(|_| random_camera(&mut rng)).collect();
        let original: Vec<_> = cams.iter().map(|c| c.world_to_cam).collect();

        let mut zero = PoseDelta::identity();
        bake(&mut zero, &mut cams);
        assert!(cams.iter().zip(&original).all(|(c, o)| c.world_to_cam == *o));

        let mut delta = random_delta(&mut rng);
        let effective: Vec<_> = cams.iter().map(|c| apply_delta(c, &delta)).collect();
        bake(&mut delta, &mut cams);
        assert!(delta.is_identity());
        for (cam, eff) in cams.iter().zip(&effective) {
            assert_eq!(apply_delta(cam, &delta), *eff);
            assert_eq!(cam.world_to_cam, *eff);
        }
    }

    #[test]
    fn sequential_bakes_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cams: Vec<Camera> = (0..4).map(|_| random_camera(&mut rng)).collect();
        let d1 = random_delta(&mut rng);
        let d2 = random_delta(&mut rng);

        let mut twice = cams.clone();
        bake(&mut d1.clone(), &mut twice);
        bake(&mut d2.clone(), &mut twice);

        // World points see d2 first, then d1.
        let composed = PoseDelta::from_transform(&d1.transform().compose(&d2.transform()));
        let mut once = cams.clone();
        bake(&mut composed.clone(), &mut once);

        for (a, b) in twice.iter().zip(&once) {
            assert_relative_eq!(a.world_to_cam.rotation, b.world_to_cam.rotation, epsilon = 1e-9);
            assert_relative_eq!(a.world_to_cam.translation, b.world_to_cam.translation, epsilon = 1e-9);
        }
    }

    #[test]
    fn apply_is_a_group_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = random_camera(&mut rng);
        let d = random_delta(&mut rng);
        let d2 = random_delta(&mut rng);
        let mut stepped = cam.clone();
        stepped.world_to_cam = apply_delta(&cam, &d);
        let two_step = apply_delta(&stepped, &d2);
        let combined = PoseDelta::from_transform(&d.transform().compose(&d2.transform()));
        let one_step = apply_delta(&cam, &combined);
        assert_relative_eq!(two_step.rotation, one_step.rotation, epsilon = 1e-12);
        assert_relative_eq!(two_step.translation, one_step.translation, epsilon = 1e-12);
    }

    #[test]
    fn exp_partials_match_finite_differences() {
        for v in [
            Vector3::new(0.3, -0.7, 1.1),
            Vector3::new(1e-7, 0.0, -2e-7),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 3.0),
        ] {
            let partials = exp_so3_partials(&v);
            let h = 1e-6;
            for k in 0..3 {
                let mut p = v;
                p[k] += h;
                let mut m = v;
                m[k] -= h;
                let fd = (exp_so3(&p) - exp_so3(&m)) / (2.0 * h);
                assert_relative_eq!(partials[k], fd, epsilon = 1e-8);
            }
        }
    }
}
