//! Real spherical-harmonic color evaluation (degrees 0–3) and its vector-Jacobian product.

use nalgebra::Vector3;

use crate::scene::sh_coeff_count;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Maps an RGB value to the DC coefficient that reproduces it.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

pub fn dc_to_rgb(dc: f64) -> f64 {
    dc * SH_C0 + 0.5
}

/// Basis values and their gradients with respect to the (unit) direction.
fn basis(degree: usize, d: &Vector3<f64>) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let n = sh_coeff_count(degree);
    let mut b = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    b.push(SH_C0);
    g.push(Vector3::zeros());
    if degree == 0 {
        return (b, g);
    }
    let (x, y, z) = (d.x, d.y, d.z);
    b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
    g.extend([
        Vector3::new(0.0, -SH_C1, 0.0),
        Vector3::new(0.0, 0.0, SH_C1),
        Vector3::new(-SH_C1, 0.0, 0.0),
    ]);
    if degree == 1 {
        return (b, g);
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    b.extend([
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
    ]);
    g.extend([
        SH_C2[0] * Vector3::new(y, x, 0.0),
        SH_C2[1] * Vector3::new(0.0, z, y),
        SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z),
        SH_C2[3] * Vector3::new(z, 0.0, x),
        SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0),
    ]);
    if degree == 2 {
        return (b, g);
    }
    b.extend([
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]);
    g.extend([
        SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0),
        SH_C3[1] * Vector3::new(y * z, x * z, x * y),
        SH_C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z),
        SH_C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z),
        SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy),
        SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0),
    ]);
    (b, g)
}

/// Evaluated color for one splat viewed along `view` (camera center to splat, any length).
///
/// Returns the color after the `max(0, ·)` clamp and a per-channel flag telling
/// whether the clamp was active.
pub fn eval_color(degree: usize, coeffs: &[f64], view: &Vector3<f64>) -> ([f64; 3], [bool; 3]) {
    let dir = if degree == 0 {
        Vector3::zeros()
    } else {
        view.normalize()
    };
    let (b, _) = basis(degree, &dir);
    let mut rgb = [0.5; 3];
    for (k, bk) in b.iter().enumerate() {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v += bk * coeffs[k * 3 + ch];
        }
    }
    let clamped = rgb.map(|v| v < 0.0);
    (rgb.map(|v| v.max(0.0)), clamped)
}

/// Backpropagates `grad_rgb` into the coefficients (accumulated into `grad_coeffs`)
/// and returns the gradient with respect to the unnormalized view vector.
pub fn eval_color_vjp(
    degree: usize,
    coeffs: &[f64],
    view: &Vector3<f64>,
    clamped: [bool; 3],
    grad_rgb: [f64; 3],
    grad_coeffs: &mut [f64],
) -> Vector3<f64> {
    let g = [0, 1, 2].map(|ch| if clamped[ch] { 0.0 } else { grad_rgb[ch] });
    if degree == 0 {
        for ch in 0..3 {
            grad_coeffs[ch] += SH_C0 * g[ch];
        }
        return Vector3::zeros();
    }
    let norm = view.norm();
    let dir = view / norm;
    let (b, db) = basis(degree, &dir);
    let mut grad_dir = Vector3::zeros();
    for k in 0..b.len() {
        let mut dot = 0.0;
        for ch in 0..3 {
            grad_coeffs[k * 3 + ch] += b[k] * g[ch];
            dot += coeffs[k * 3 + ch] * g[ch];
        }
        grad_dir += db[k] * dot;
    }
    (grad_dir - dir * dir.dot(&grad_dir)) / norm
}
