//! Per-view vertex stage: culling, EWA projection to 2D conics, level-set
//! thresholds, and the analytic backward pass including pose derivatives.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::binning::{snugbox, SnugBox};
use crate::pose::{PoseDelta, PoseGrad};
use crate::raster::Grad2D;
use crate::scene::{Camera, GaussianSet, RigidTransform};
use crate::sh;

/// Screen-space covariance dilation in pixels².
pub const DILATION: f64 = 0.3;
/// Smallest alpha that is ever blended.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const DEFAULT_NEAR: f64 = 0.01;

/// Inverse 2D covariance `[[a, b], [b, c]]` in pixel⁻².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Conic {
    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a > 0.0 && self.c > 0.0 && self.det() > 0.0
    }

    /// Quadratic form at an offset from the mean.
    #[inline]
    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        self.a * dx * dx + 2.0 * self.b * dx * dy + self.c * dy * dy
    }

    /// Conic of an ellipse with semi-axes `major`, `minor` (at q = 1) rotated by `angle`.
    pub fn from_axes(major: f64, minor: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (l1, l2) = (1.0 / (major * major), 1.0 / (minor * minor));
        Self {
            a: c * c * l1 + s * s * l2,
            b: c * s * (l1 - l2),
            c: s * s * l1 + c * c * l2,
        }
    }
}

/// Level-set threshold `2 ln(255 o)`, clamped at zero.
pub fn level_set(opacity: f64) -> f64 {
    (2.0 * (255.0 * opacity).ln()).max(0.0)
}

/// Projected state of every splat surviving culling, in source order.
#[derive(Clone, Debug, Default)]
pub struct SplatBatch {
    pub width: u32,
    pub height: u32,
    pub means2d: Vec<[f64; 2]>,
    pub conics: Vec<Conic>,
    pub level_t: Vec<f64>,
    pub depths: Vec<f64>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub source_ids: Vec<u32>,
    pub snugboxes: Vec<SnugBox>,
    /// Camera-frame centers, kept for the backward pass.
    pub cam_points: Vec<[f64; 3]>,
    pub color_clamped: Vec<[bool; 3]>,
}

impl SplatBatch {
    pub fn len(&self) -> usize {
        self.means2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means2d.is_empty()
    }

    pub fn tiles_x(&self) -> u32 {
        self.width.div_ceil(crate::TILE_SIZE)
    }

    pub fn tiles_y(&self) -> u32 {
        self.height.div_ceil(crate::TILE_SIZE)
    }

    /// Builds a batch directly from 2D splats, as used by the tiling benchmark
    /// and tests. Colors default to white.
    pub fn from_2d(width: u32, height: u32, splats: &[(f64, f64, Conic, f64, f64)]) -> Self {
        let mut batch = SplatBatch {
            width,
            height,
            ..Default::default()
        };
        for (i, &(mx, my, conic, opacity, depth)) in splats.iter().enumerate() {
            batch.push_2d(i as u32, [mx, my], conic, opacity, depth, [1.0; 3]);
        }
        batch
    }

    pub fn push_2d(
        &mut self,
        source: u32,
        mean: [f64; 2],
        conic: Conic,
        opacity: f64,
        depth: f64,
        color: [f64; 3],
    ) {
        self.push_raw(source, mean, conic, level_set(opacity), opacity, depth, color);
    }

    /// Like [`push_2d`](Self::push_2d) with an explicit level-set threshold.
    #[allow(clippy::too_many_arguments)]
    pub fn push_raw(
        &mut self,
        source: u32,
        mean: [f64; 2],
        conic: Conic,
        t: f64,
        opacity: f64,
        depth: f64,
        color: [f64; 3],
    ) {
        self.snugboxes
            .push(snugbox(&conic, t, mean, self.width, self.height));
        self.means2d.push(mean);
        self.conics.push(conic);
        self.level_t.push(t);
        self.depths.push(depth);
        self.opacities.push(opacity);
        self.colors.push(color);
        self.source_ids.push(source);
        self.cam_points.push([0.0, 0.0, depth]);
        self.color_clamped.push([false; 3]);
    }
}

/// Per-splat gradients with respect to the stored (pre-activation) parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGrads {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<f64>,
}

impl SplatGrads {
    pub fn zeros_like(set: &GaussianSet) -> Self {
        Self {
            positions: vec![[0.0; 3]; set.len()],
            log_scales: vec![[0.0; 3]; set.len()],
            rotations: vec![[0.0; 4]; set.len()],
            opacity_logits: vec![0.0; set.len()],
            colors: vec![0.0; set.colors.len()],
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.positions.as_flattened().iter().all(|v| *v == 0.0)
            && self.log_scales.as_flattened().iter().all(|v| *v == 0.0)
            && self.rotations.as_flattened().iter().all(|v| *v == 0.0)
            && self.opacity_logits.iter().all(|v| *v == 0.0)
            && self.colors.iter().all(|v| *v == 0.0)
    }
}

fn projection_jacobian(camera: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    let iz = 1.0 / z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * y * iz * iz,
    )
}

fn world_covariance(rotation: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = rotation * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Projects every splat through `camera` with the global pose `delta` applied.
pub fn project(set: &GaussianSet, camera: &Camera, delta: &PoseDelta, near: f64) -> SplatBatch {
    let view = delta.apply(camera);
    project_with_view(set, camera, &view, near)
}

/// Projects every splat through `camera` intrinsics and an explicit world-to-camera transform.
pub fn project_with_view(
    set: &GaussianSet,
    camera: &Camera,
    view: &RigidTransform,
    near: f64,
) -> SplatBatch {
    assert!(near > 0.0, "near plane must be positive");
    let cam_center = view.inverse().translation;
    let projected: Vec<_> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let act = set.activate(i);
            if act.opacity < MIN_ALPHA {
                return None;
            }
            let p_world = Vector3::from(set.positions[i]);
            let p = view.apply(&p_world);
            if p.z <= near {
                return None;
            }
            let mean = [
                camera.fx * p.x / p.z + camera.cx,
                camera.fy * p.y / p.z + camera.cy,
            ];
            let t_mat = projection_jacobian(camera, &p) * view.rotation;
            let cov3 = world_covariance(&act.rotation, &act.scale);
            let cov2 = t_mat * cov3 * t_mat.transpose() + Matrix2::identity() * DILATION;
            let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
            let conic = Conic {
                a: cov2[(1, 1)] / det,
                b: -cov2[(0, 1)] / det,
                c: cov2[(0, 0)] / det,
            };
            let (color, clamped) =
                sh::eval_color(set.sh_degree, set.color_coeffs(i), &(p_world - cam_center));
            Some((i as u32, mean, conic, act.opacity, p, color, clamped))
        })
        .collect();

    let mut batch = SplatBatch {
        width: camera.width,
        height: camera.height,
        ..Default::default()
    };
    for (id, mean, conic, opacity, p, color, clamped) in projected.into_iter().flatten() {
        debug_assert!(conic.is_positive_definite());
        batch.push_2d(id, mean, conic, opacity, p.z, color);
        *batch.cam_points.last_mut().unwrap() = [p.x, p.y, p.z];
        *batch.color_clamped.last_mut().unwrap() = clamped;
    }
    batch
}

/// `∂R(q̂)/∂q` contracted with `grad_r`, including the normalization step.
fn quat_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let gh = [
        2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]),
        2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]),
        2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]),
        2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]),
    ];
    let qh = [w, x, y, z];
    let dot: f64 = (0..4).map(|k| qh[k] * gh[k]).sum();
    [0, 1, 2, 3].map(|k| (gh[k] - qh[k] * dot) / n)
}

/// Per-splat contribution to the 3D gradients and to the effective view transform.
struct SplatVjp {
    source: usize,
    position: Vector3<f64>,
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    colors: Vec<f64>,
    view_rotation: Matrix3<f64>,
    view_translation: Vector3<f64>,
}

/// Backpropagates 2D splat gradients to the Gaussian parameters and the pose delta.
///
/// `batch` must come from [`project`] with identical inputs.
pub fn project_vjp(
    set: &GaussianSet,
    camera: &Camera,
    delta: &PoseDelta,
    batch: &SplatBatch,
    grads: &Grad2D,
) -> (SplatGrads, PoseGrad) {
    let view = delta.apply(camera);
    let cam_center = view.inverse().translation;
    let w = view.rotation;
    let stride = set.color_stride();

    let per_splat: Vec<SplatVjp> = (0..batch.len())
        .into_par_iter()
        .map(|k| {
            let i = batch.source_ids[k] as usize;
            let act = set.activate(i);
            let p_world = Vector3::from(set.positions[i]);
            let p = Vector3::from(batch.cam_points[k]);
            let (fx, fy) = (camera.fx, camera.fy);
            let iz = 1.0 / p.z;

            // Conic -> 2D covariance.
            let conic = batch.conics[k];
            let ci = Matrix2::new(conic.a, conic.b, conic.b, conic.c);
            let [ga, gb, gc] = grads.conic[k];
            let g_conic = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
            let g_cov2 = -(ci * g_conic * ci);

            // 2D covariance -> T = J W and the 3D covariance.
            let j = projection_jacobian(camera, &p);
            let t_mat = j * w;
            let cov3 = world_covariance(&act.rotation, &act.scale);
            let g_t = 2.0 * g_cov2 * t_mat * cov3;
            let g_cov3 = t_mat.transpose() * g_cov2 * t_mat;

            // 3D covariance -> scale and rotation.
            let m = act.rotation * Matrix3::from_diagonal(&act.scale);
            let g_m = 2.0 * g_cov3 * m;
            let g_rot = g_m * Matrix3::from_diagonal(&act.scale);
            let rt_gm = act.rotation.transpose() * g_m;
            let log_scale = [0, 1, 2].map(|a| rt_gm[(a, a)] * act.scale[a]);
            let rotation = quat_grad(set.rotations[i], &g_rot);

            // T = J W.
            let g_j = g_t * w.transpose();
            let mut g_view_rot = j.transpose() * g_t;

            // J, mean and depth -> camera-frame point.
            let [gmx, gmy] = grads.mean[k];
            let mut g_p = Vector3::new(
                gmx * fx * iz - g_j[(0, 2)] * fx * iz * iz,
                gmy * fy * iz - g_j[(1, 2)] * fy * iz * iz,
                -gmx * fx * p.x * iz * iz - gmy * fy * p.y * iz * iz + grads.depth[k],
            );
            g_p.z += -g_j[(0, 0)] * fx * iz * iz + g_j[(0, 2)] * 2.0 * fx * p.x * iz * iz * iz
                - g_j[(1, 1)] * fy * iz * iz
                + g_j[(1, 2)] * 2.0 * fy * p.y * iz * iz * iz;

            // Camera point -> world position and view transform.
            let mut position = w.transpose() * g_p;
            g_view_rot += g_p * p_world.transpose();
            let mut g_view_t = g_p;

            let mut colors = vec![0.0; stride];
            let g_view_dir = sh::eval_color_vjp(
                set.sh_degree,
                set.color_coeffs(i),
                &(p_world - cam_center),
                batch.color_clamped[k],
                grads.color[k],
                &mut colors,
            );
            if set.sh_degree > 0 {
                let t = view.translation;
                position += g_view_dir;
                g_view_t += w * g_view_dir;
                g_view_rot += t * g_view_dir.transpose();
            }

            SplatVjp {
                source: i,
                position,
                log_scale,
                rotation,
                opacity_logit: grads.opacity[k] * act.opacity * (1.0 - act.opacity),
                colors,
                view_rotation: g_view_rot,
                view_translation: g_view_t,
            }
        })
        .collect();

    let mut out = SplatGrads::zeros_like(set);
    let mut g_view_rot = Matrix3::zeros();
    let mut g_view_t = Vector3::zeros();
    // Fixed source order keeps the reduction deterministic.
    for v in per_splat {
        let i = v.source;
        for a in 0..3 {
            out.positions[i][a] += v.position[a];
            out.log_scales[i][a] += v.log_scale[a];
        }
        for a in 0..4 {
            out.rotations[i][a] += v.rotation[a];
        }
        out.opacity_logits[i] += v.opacity_logit;
        for (dst, src) in out.colors[i * stride..(i + 1) * stride].iter_mut().zip(&v.colors) {
            *dst += src;
        }
        g_view_rot += v.view_rotation;
        g_view_t += v.view_translation;
    }
    let pose = delta.grad_from_effective(camera, &g_view_rot, &g_view_t);
    (out, pose)
}
