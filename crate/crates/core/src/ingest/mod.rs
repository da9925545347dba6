//! Scene ingestion: COLMAP text models, images, depth priors and PLY checkpoints.

mod colmap;
mod depth;
mod ply;

pub use colmap::{parse_colmap, write_colmap, ColmapError, SparsePoint, SparseReconstruction};
pub use depth::{
    align_depth_scale, align_pairs, back_project, correspondences, densify_seed_points, AlignError, DepthAlignment,
    SeedPoints, SeedView, DEFAULT_ITERATIONS, DEFAULT_REL_THRESHOLD, MIN_CORRESPONDENCES,
};
pub use ply::{read_ply, write_ply, PlyError};

use std::path::Path;

use rayon::prelude::*;

use crate::image_io::{read_pfm, ImageError, ImageRgb};
use crate::scene::{logit, GaussianSet};
use crate::sh::rgb_to_dc;

pub const INITIAL_OPACITY: f64 = 0.1;

/// Attaches `images_dir/<name>` as ground truth and, when present,
/// `depth_dir/<stem>.pfm` as the depth prior of every camera.
pub fn attach_images(recon: &mut SparseReconstruction, images_dir: &Path, depth_dir: Option<&Path>) -> Result<(), ImageError> {
    for cam in &mut recon.cameras {
        let img = ImageRgb::load(&images_dir.join(&cam.name))?;
        cam.gt_image = Some(img);
        if let Some(dir) = depth_dir {
            let stem = Path::new(&cam.name).file_stem().unwrap_or_default();
            let path = dir.join(stem).with_extension("pfm");
            if path.exists() {
                cam.depth_prior = Some(read_pfm(&path)?);
            }
        }
    }
    Ok(())
}

/// Isotropic Gaussians at `points`, sized by the RMS distance to their three
/// nearest neighbours.
pub fn init_from_points(points: &[SparsePoint], sh_degree: usize) -> GaussianSet {
    let pos: Vec<[f64; 3]> = points.iter().map(|p| p.position).collect();
    let log_scales: Vec<f64> = (0..pos.len())
        .into_par_iter()
        .map(|i| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in pos.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d2 = (0..3).map(|a| (pos[i][a] - q[a]).powi(2)).sum::<f64>();
                if d2 < best[2] {
                    best[2] = d2;
                    best.sort_by(f64::total_cmp);
                }
            }
            let finite: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            let mean = if finite.is_empty() { 1e-2 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
            0.5 * mean.max(1e-14).ln()
        })
        .collect();
    let mut set = GaussianSet::with_sh_degree(sh_degree);
    let mut colors = vec![0.0; set.color_stride()];
    for (i, p) in points.iter().enumerate() {
        for ch in 0..3 {
            colors[ch] = rgb_to_dc(p.rgb[ch] as f64 / 255.0);
        }
        set.push(p.position, [log_scales[i]; 3], [1.0, 0.0, 0.0, 0.0], logit(INITIAL_OPACITY), &colors);
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_scales_follow_spacing() {
        let points: Vec<SparsePoint> = (0..5)
            .map(|i| SparsePoint {
                position: [i as f64 * 0.5, 0.0, 0.0],
                rgb: [255, 0, 128],
            })
            .collect();
        let set = init_from_points(&points, 0);
        assert_eq!(set.len(), 5);
        // Interior point: neighbours at 0.5, 0.5, 1.0.
        let expected = ((0.25 + 0.25 + 1.0) / 3.0f64).sqrt();
        assert!((set.log_scales[2][0].exp() - expected).abs() < 1e-12);
        assert!((crate::sh::dc_to_rgb(set.colors[0]) - 1.0).abs() < 1e-12);
        assert!(set.validate().is_empty());
    }
}
