//! Adam over the Gaussian parameter groups plus a separate pose-delta group.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{Action, DensifyDecision};
use crate::pose::{PoseDelta, PoseGrad};
use crate::projection::SplatGrads;
use crate::scene::GaussianSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimError {
    #[error("{decisions} densify decisions for {rows} optimizer rows")]
    CountMismatch { decisions: usize, rows: usize },
}

/// Per-group learning rates. The position rate is multiplied by the scene extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub pose_rotation: f64,
    pub pose_translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            pose_rotation: 1e-4,
            pose_translation: 1e-3,
        }
    }
}

impl LearningRates {
    /// Log-linear decay of the position rate over `max_iters`, scaled by `extent`.
    pub fn position_at(&self, iter: u32, max_iters: u32, extent: f64) -> f64 {
        let t = (iter as f64 / max_iters.max(1) as f64).clamp(0.0, 1.0);
        let (a, b) = (self.position_init, self.position_final);
        if a <= 0.0 || b <= 0.0 {
            // No log space to interpolate in; a frozen group stays frozen.
            return (a * (1.0 - t) + b * t) * extent;
        }
        (a.ln() * (1.0 - t) + b.ln() * t).exp() * extent
    }
}

/// First and second moments for a parameter array of fixed row width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn new(width: usize, rows: usize) -> Self {
        Self {
            width,
            m: vec![0.0; width * rows],
            v: vec![0.0; width * rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len().checked_div(self.width).unwrap_or(0)
    }

    /// Updates `params` row by row; rows with a non-finite gradient are left
    /// untouched and counted.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, bc1: f64, bc2: f64) -> usize {
        let w = self.width;
        let mut skipped = 0;
        for (row, g) in grads.chunks_exact(w).enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                skipped += 1;
                continue;
            }
            for j in 0..w {
                let i = row * w + j;
                self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g[j];
                self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g[j] * g[j];
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        skipped
    }

    fn remap(&mut self, keep: &[usize], appended: usize) {
        let w = self.width;
        let mut m = Vec::with_capacity((keep.len() + appended) * w);
        let mut v = Vec::with_capacity((keep.len() + appended) * w);
        for &r in keep {
            m.extend_from_slice(&self.m[r * w..(r + 1) * w]);
            v.extend_from_slice(&self.v[r * w..(r + 1) * w]);
        }
        m.resize((keep.len() + appended) * w, 0.0);
        v.resize((keep.len() + appended) * w, 0.0);
        self.m = m;
        self.v = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: LearningRates,
    pub step: u64,
    pub positions: Moments,
    pub log_scales: Moments,
    pub rotations: Moments,
    pub opacity_logits: Moments,
    pub colors: Moments,
    /// Rows skipped because of non-finite gradients, over the whole run.
    pub skipped_rows: u64,
}

impl Adam {
    pub fn new(set: &GaussianSet, lr: LearningRates) -> Self {
        let n = set.len();
        Self {
            lr,
            step: 0,
            positions: Moments::new(3, n),
            log_scales: Moments::new(3, n),
            rotations: Moments::new(4, n),
            opacity_logits: Moments::new(1, n),
            colors: Moments::new(set.color_stride(), n),
            skipped_rows: 0,
        }
    }

    fn groups(&self) -> [&Moments; 5] {
        [&self.positions, &self.log_scales, &self.rotations, &self.opacity_logits, &self.colors]
    }

    pub fn rows(&self) -> usize {
        self.positions.rows()
    }

    /// One bias-corrected Adam step on every group, then quaternion renormalization.
    /// Returns the number of rows skipped for non-finite gradients.
    pub fn step(&mut self, set: &mut GaussianSet, grads: &SplatGrads, position_lr: f64) -> usize {
        assert!(self.groups().iter().all(|g| g.rows() == set.len()), "optimizer rows out of sync");
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let lr = self.lr;
        let skipped = self.positions.step(set.positions.as_flattened_mut(), grads.positions.as_flattened(), position_lr, bc1, bc2)
            + self.log_scales.step(set.log_scales.as_flattened_mut(), grads.log_scales.as_flattened(), lr.scale, bc1, bc2)
            + self.rotations.step(set.rotations.as_flattened_mut(), grads.rotations.as_flattened(), lr.rotation, bc1, bc2)
            + self.opacity_logits.step(&mut set.opacity_logits, &grads.opacity_logits, lr.opacity, bc1, bc2)
            + self.colors.step(&mut set.colors, &grads.colors, lr.color, bc1, bc2);
        set.normalize_rotations();
        if skipped > 0 {
            log::warn!("skipped {skipped} parameter rows with non-finite gradients");
        }
        self.skipped_rows += skipped as u64;
        skipped
    }

    /// Tracks a densify round: survivors keep their moments in order, new rows
    /// start at zero.
    pub fn resize(&mut self, decisions: &[DensifyDecision]) -> Result<(), OptimError> {
        if decisions.len() != self.rows() {
            return Err(OptimError::CountMismatch {
                decisions: decisions.len(),
                rows: self.rows(),
            });
        }
        let keep: Vec<usize> = decisions
            .iter()
            .filter(|d| matches!(d.action, Action::Keep | Action::Clone))
            .map(|d| d.splat)
            .collect();
        let appended: usize = decisions
            .iter()
            .map(|d| match d.action {
                Action::Clone => 1,
                Action::Split => 2,
                _ => 0,
            })
            .sum();
        for g in [
            &mut self.positions,
            &mut self.log_scales,
            &mut self.rotations,
            &mut self.opacity_logits,
            &mut self.colors,
        ] {
            g.remap(&keep, appended);
        }
        Ok(())
    }
}

/// Adam state of the global pose delta.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseAdam {
    pub step: u64,
    rot: Moments,
    trans: Moments,
}

impl Default for PoseAdam {
    fn default() -> Self {
        Self {
            step: 0,
            rot: Moments::new(3, 1),
            trans: Moments::new(3, 1),
        }
    }
}

impl PoseAdam {
    pub fn step(&mut self, delta: &mut PoseDelta, grad: &PoseGrad, lr: &LearningRates) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        self.rot.step(delta.rot_vec.as_mut_slice(), grad.rot_vec.as_slice(), lr.pose_rotation, bc1, bc2);
        self.trans.step(delta.trans.as_mut_slice(), grad.trans.as_slice(), lr.pose_translation, bc1, bc2);
        delta.steps_since_bake += 1;
    }

    /// Clears the moments, as required after a bake.
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn is_zeroed(&self) -> bool {
        self.rot.m.iter().chain(&self.rot.v).chain(&self.trans.m).chain(&self.trans.v).all(|v| *v == 0.0)
    }
}
