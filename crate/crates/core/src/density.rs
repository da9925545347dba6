//! Score-guided densification and pruning.
//!
//! Each round samples K views, builds a per-view error mask from the normalized
//! photometric error, and scores every splat by the masked pixels it visibly
//! contributes to. High `s⁺` splats are cloned or split, high `s⁻` splats pruned.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::image_io::ImageRgb;
use crate::losses::LossError;
use crate::scene::GaussianSet;

/// Scale divisor applied to split children.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMask {
    pub width: u32,
    pub height: u32,
    pub tau: f64,
    /// Min-max normalized channel-summed absolute error.
    pub error: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ErrorMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Min-max normalizes `values` into `[0, 1]`; a constant input maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn error_mask(rendered: &ImageRgb, gt: &ImageRgb, tau: f64) -> Result<ErrorMask, LossError> {
    if !rendered.same_shape(gt) {
        return Err(LossError::ShapeMismatch(rendered.width, rendered.height, gt.width, gt.height));
    }
    let raw: Vec<f64> = rendered
        .data
        .chunks_exact(3)
        .zip(gt.data.chunks_exact(3))
        .map(|(r, g)| (0..3).map(|c| (r[c] - g[c]).abs()).sum())
        .collect();
    let error = min_max_normalize(&raw);
    let mask = error.iter().map(|e| *e > tau).collect();
    Ok(ErrorMask {
        width: rendered.width,
        height: rendered.height,
        tau,
        error,
        mask,
    })
}

/// Scoring inputs from one sampled view.
#[derive(Clone, Debug)]
pub struct ViewEvidence {
    pub mask: Vec<bool>,
    /// Per pixel, global splat indices whose blend weight reached `1/255`.
    pub contributors: Vec<Vec<u32>>,
    /// `E_photo` of the whole view.
    pub e_photo: f64,
}

/// Masked-pixel coverage of every splat, averaged over views.
pub fn score_densify(n_splats: usize, views: &[ViewEvidence]) -> Vec<f64> {
    let mut s = vec![0.0; n_splats];
    if views.is_empty() {
        return s;
    }
    for view in views {
        for (pix, ids) in view.contributors.iter().enumerate() {
            if view.mask[pix] {
                for &i in ids {
                    s[i as usize] += 1.0;
                }
            }
        }
    }
    let k = views.len() as f64;
    s.iter_mut().for_each(|v| *v /= k);
    s
}

/// Raw error-weighted coverage summed over views, before normalization.
pub fn prune_raw(n_splats: usize, views: &[ViewEvidence]) -> Vec<f64> {
    let mut raw = vec![0.0; n_splats];
    for view in views {
        for (pix, ids) in view.contributors.iter().enumerate() {
            if view.mask[pix] {
                for &i in ids {
                    raw[i as usize] += view.e_photo;
                }
            }
        }
    }
    raw
}

/// Min-max normalized pruning score.
pub fn score_prune(n_splats: usize, views: &[ViewEvidence]) -> Vec<f64> {
    min_max_normalize(&prune_raw(n_splats, views))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Keep,
    Clone,
    Split,
    Prune,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyDecision {
    pub splat: usize,
    pub action: Action,
    pub s_plus: f64,
    pub s_minus: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyParams {
    pub theta_plus: f64,
    pub theta_minus: f64,
    /// World-space scale above which a densified splat is split rather than cloned.
    pub scale_split_threshold: f64,
    /// Pruning never takes the set below this many splats.
    pub min_splats: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyCounts {
    pub clones: usize,
    pub splits: usize,
    pub prunes: usize,
}

impl DensifyCounts {
    pub fn from_decisions(decisions: &[DensifyDecision]) -> Self {
        let mut c = Self::default();
        for d in decisions {
            match d.action {
                Action::Clone => c.clones += 1,
                Action::Split => c.splits += 1,
                Action::Prune => c.prunes += 1,
                Action::Keep => {}
            }
        }
        c
    }
}

/// Chooses one action per splat. Prune takes precedence; if pruning would go
/// below `min_splats`, the lowest-scoring prune candidates are kept instead.
pub fn decide(set: &GaussianSet, s_plus: &[f64], s_minus: &[f64], params: &DensifyParams) -> Vec<DensifyDecision> {
    assert!(s_plus.len() == set.len() && s_minus.len() == set.len());
    let mut decisions: Vec<DensifyDecision> = (0..set.len())
        .map(|i| {
            let action = if s_minus[i] > params.theta_minus {
                Action::Prune
            } else if s_plus[i] > params.theta_plus {
                let max_scale = set.log_scales[i].iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
                if max_scale < params.scale_split_threshold {
                    Action::Clone
                } else {
                    Action::Split
                }
            } else {
                Action::Keep
            };
            DensifyDecision {
                splat: i,
                action,
                s_plus: s_plus[i],
                s_minus: s_minus[i],
            }
        })
        .collect();
    let mut prunes: Vec<usize> = (0..set.len()).filter(|i| decisions[*i].action == Action::Prune).collect();
    let allowed = set.len().saturating_sub(params.min_splats).min(prunes.len());
    if allowed < prunes.len() {
        // Highest scores are pruned first; ties broken by index for determinism.
        prunes.sort_by(|a, b| s_minus[*b].total_cmp(&s_minus[*a]).then(a.cmp(b)));
        for &i in &prunes[allowed..] {
            decisions[i].action = Action::Keep;
        }
    }
    decisions
}

/// Applies `decisions` to `set`. Survivors keep their order; clones and split
/// children are appended in splat order.
pub fn apply(set: &mut GaussianSet, decisions: &[DensifyDecision], rng: &mut impl Rng) -> DensifyCounts {
    assert_eq!(decisions.len(), set.len());
    let mut out = GaussianSet::with_sh_degree(set.sh_degree);
    for d in decisions {
        if matches!(d.action, Action::Keep | Action::Clone) {
            out.push_from(set, d.splat);
        }
    }
    for d in decisions {
        match d.action {
            Action::Clone => out.push_from(set, d.splat),
            Action::Split => {
                let i = d.splat;
                let act = set.activate(i);
                let parent = Vector3::from(set.positions[i]);
                let log_scale = set.log_scales[i].map(|s| s - SPLIT_SCALE_DIVISOR.ln());
                for _ in 0..2 {
                    let n = Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    );
                    let p = parent + act.rotation * act.scale.component_mul(&n);
                    out.push(
                        [p.x, p.y, p.z],
                        log_scale,
                        set.rotations[i],
                        set.opacity_logits[i],
                        set.color_coeffs(i),
                    );
                }
            }
            _ => {}
        }
    }
    *set = out;
    DensifyCounts::from_decisions(decisions)
}

/// Decides and applies in one step.
pub fn apply_decisions(
    set: &mut GaussianSet,
    s_plus: &[f64],
    s_minus: &[f64],
    params: &DensifyParams,
    rng: &mut impl Rng,
) -> (Vec<DensifyDecision>, DensifyCounts) {
    let decisions = decide(set, s_plus, s_minus, params);
    let counts = apply(set, &decisions, rng);
    (decisions, counts)
}
