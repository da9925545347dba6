//! Disk-to-disk round trip through the library API: COLMAP model and images in,
//! trained PLY and logs out.

use std::fs;
use std::path::Path;

use snugsplat::ingest::{read_ply, write_colmap, SparsePoint, SparseReconstruction};
use snugsplat::synthetic::{multi_view_scene, SceneSpec};
use snugsplat::trainer::{evaluate, load_scene, save_outputs, train, StopReason, TrainConfig};

fn write_scene(dir: &Path, seed: u64) {
    let scene = multi_view_scene(&SceneSpec::small(), seed);
    let images = dir.join("images");
    fs::create_dir_all(&images).unwrap();
    for cam in &scene.cameras {
        cam.gt_image.as_ref().unwrap().save(&images.join(&cam.name)).unwrap();
    }
    let points = scene
        .gt
        .positions
        .iter()
        .map(|p| SparsePoint {
            position: *p,
            rgb: [128, 128, 128],
        })
        .collect();
    let recon = SparseReconstruction {
        cameras: scene.cameras.clone(),
        points,
    };
    write_colmap(dir, &recon).unwrap();
}

#[test]
fn training_from_disk_improves_and_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    write_scene(&scene_dir, 5);
    let out = tmp.path().join("out");
    let cfg = TrainConfig::from_json(&format!(
        r#"{{"round_profile": "round2", "max_iters": 300, "densify": false, "deterministic": true,
            "psnr_interval": 50, "colmap_dir": {:?}, "output_dir": {:?}}}"#,
        scene_dir, out
    ))
    .unwrap();

    let (set, cameras) = load_scene(&cfg).unwrap();
    assert_eq!(set.len(), 10);
    assert!(cameras.iter().all(|c| c.gt_image.is_some()));
    let settings = cfg.render_settings();
    let before = evaluate(&set, &cameras, &settings).unwrap();

    let outcome = train(set, cameras, &cfg).unwrap();
    assert_eq!(outcome.stop, StopReason::MaxIters);
    assert_eq!(outcome.iterations, 300);
    let after = outcome.final_psnr().unwrap();
    assert!(after > before + 3.0, "PSNR {before:.2} -> {after:.2}");

    save_outputs(&outcome, &out).unwrap();
    for name in ["point_cloud.ply", "metrics.csv", "decisions.csv", "poses.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let reloaded = read_ply(&out.join("point_cloud.ply")).unwrap();
    assert_eq!(reloaded, outcome.set);
    let again = evaluate(&reloaded, &outcome.cameras, &settings).unwrap();
    assert_eq!(again, evaluate(&outcome.set, &outcome.cameras, &settings).unwrap());
}

#[test]
fn missing_images_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    write_scene(&scene_dir, 6);
    fs::remove_dir_all(scene_dir.join("images")).unwrap();
    let cfg = TrainConfig::from_json(&format!(r#"{{"colmap_dir": {:?}}}"#, scene_dir)).unwrap();
    assert!(load_scene(&cfg).is_err());
}
