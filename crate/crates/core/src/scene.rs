//! Canonical Gaussian and camera types plus the standard 3DGS activations.
//!
//! Parameters are stored pre-activation: scales as logs, opacity as a logit and
//! rotations as (possibly unnormalized) quaternions in `w, x, y, z` order.

use nalgebra::{Matrix3, Vector3};

use crate::image_io::{DepthMap, ImageRgb};

/// Tile edge length in pixels.
pub const TILE_SIZE: u32 = 16;

/// Structure-of-arrays store of 3D Gaussian primitives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    /// Quaternions `[w, x, y, z]`.
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    /// Spherical-harmonic coefficients, `sh_coeff_count(sh_degree) * 3` values per
    /// splat laid out coefficient-major: `[k][channel]`.
    pub colors: Vec<f64>,
    pub sh_degree: usize,
}

/// Number of SH basis functions for a degree.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Activated attributes of a single splat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activated {
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub rotation: Matrix3<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

impl GaussianSet {
    pub fn with_sh_degree(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Color values stored per splat.
    pub fn color_stride(&self) -> usize {
        sh_coeff_count(self.sh_degree) * 3
    }

    pub fn color_coeffs(&self, index: usize) -> &[f64] {
        let s = self.color_stride();
        &self.colors[index * s..(index + 1) * s]
    }

    /// Appends a splat. `colors` must hold `color_stride()` values.
    pub fn push(
        &mut self,
        position: [f64; 3],
        log_scale: [f64; 3],
        rotation: [f64; 4],
        opacity_logit: f64,
        colors: &[f64],
    ) {
        assert_eq!(colors.len(), self.color_stride(), "color coefficient count");
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.colors.extend_from_slice(colors);
    }

    /// Copies splat `index` of `other` onto the end of `self`.
    pub fn push_from(&mut self, other: &GaussianSet, index: usize) {
        self.push(
            other.positions[index],
            other.log_scales[index],
            other.rotations[index],
            other.opacity_logits[index],
            other.color_coeffs(index),
        );
    }

    /// Keeps only the splats for which `keep` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.color_stride();
        let mut out = GaussianSet::with_sh_degree(self.sh_degree);
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            out.push(
                self.positions[i],
                self.log_scales[i],
                self.rotations[i],
                self.opacity_logits[i],
                &self.colors[i * stride..(i + 1) * stride],
            );
        }
        *self = out;
    }

    pub fn activate(&self, index: usize) -> Activated {
        let ls = self.log_scales[index];
        Activated {
            scale: Vector3::new(ls[0].exp(), ls[1].exp(), ls[2].exp()),
            opacity: sigmoid(self.opacity_logits[index]),
            rotation: quat_to_matrix(self.rotations[index]),
        }
    }

    /// Renormalizes every quaternion to unit length.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 && n.is_finite() {
                q.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Lists every violated invariant. Never fails.
    pub fn validate(&self) -> Vec<Violation> {
        let mut report = Vec::new();
        let n = self.len();
        let lens = [
            ("log_scales", self.log_scales.len()),
            ("rotations", self.rotations.len()),
            ("opacity_logits", self.opacity_logits.len()),
            ("colors", self.colors.len() / self.color_stride().max(1)),
        ];
        for (field, len) in lens {
            if len != n || (field == "colors" && self.colors.len() % self.color_stride() != 0) {
                report.push(Violation::LengthMismatch { field, len, expected: n });
            }
        }
        if !report.is_empty() {
            return report;
        }
        let stride = self.color_stride();
        for i in 0..n {
            let mut check = |field: &'static str, vals: &[f64]| {
                if vals.iter().any(|v| !v.is_finite()) {
                    report.push(Violation::NonFinite { splat: i, field });
                }
            };
            check("position", &self.positions[i]);
            check("log_scale", &self.log_scales[i]);
            check("rotation", &self.rotations[i]);
            check("opacity_logit", &[self.opacity_logits[i]]);
            check("color", &self.colors[i * stride..(i + 1) * stride]);
            let q = self.rotations[i];
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if !norm.is_finite() || norm == 0.0 {
                report.push(Violation::DegenerateQuaternion { splat: i, norm });
            }
        }
        report
    }
}

/// One broken invariant found by [`GaussianSet::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LengthMismatch {
        field: &'static str,
        len: usize,
        expected: usize,
    },
    NonFinite {
        splat: usize,
        field: &'static str,
    },
    DegenerateQuaternion {
        splat: usize,
        norm: f64,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::LengthMismatch { field, len, expected } => {
                write!(f, "{field} has {len} entries, expected {expected}")
            }
            Violation::NonFinite { splat, field } => write!(f, "splat {splat}: non-finite {field}"),
            Violation::DegenerateQuaternion { splat, norm } => {
                write!(f, "splat {splat}: quaternion norm {norm}")
            }
        }
    }
}

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest entry of `|R Rᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max()
    }
}

/// Pinhole camera with its training targets.
#[derive(Clone, Debug)]
pub struct Camera {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_cam: RigidTransform,
    pub gt_image: Option<ImageRgb>,
    pub depth_prior: Option<DepthMap>,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            name: String::new(),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_cam: RigidTransform::identity(),
            gt_image: None,
            depth_prior: None,
        }
    }

    pub fn with_pose(mut self, world_to_cam: RigidTransform) -> Self {
        self.world_to_cam = world_to_cam;
        self
    }

    pub fn tiles_x(&self) -> u32 {
        self.width.div_ceil(TILE_SIZE)
    }

    pub fn tiles_y(&self) -> u32 {
        self.height.div_ceil(TILE_SIZE)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.world_to_cam.inverse().translation
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0
            && self.height > 0
            && self.fx > 0.0
            && self.fy > 0.0
            && self.world_to_cam.orthonormality_error() < 1e-5
    }
}
