use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use snugsplat::ingest::{write_colmap, write_ply, SparsePoint, SparseReconstruction};
use snugsplat::synthetic::{multi_view_scene, SceneSpec};

fn snugsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snugsplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Writes a COLMAP model with PNG images for a small synthetic scene and
/// returns its ground-truth set.
fn write_scene(dir: &Path) -> snugsplat::scene::GaussianSet {
    let scene = multi_view_scene(&SceneSpec::small(), 21);
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
            rgb: [200, 120, 40],
        })
        .collect();
    let recon = SparseReconstruction {
        cameras: scene.cameras.clone(),
        points,
    };
    write_colmap(dir, &recon).unwrap();
    scene.gt
}

#[test]
fn train_with_tiny_budget_writes_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    write_scene(&scene_dir);
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("config.json");
    let body = format!(
        r#"{{"budget_seconds": 0.001, "max_iters": 50, "colmap_dir": {:?}, "output_dir": {:?}}}"#,
        scene_dir, out
    );
    fs::write(&cfg, body).unwrap();
    let r = snugsplat(&["train", "--config", cfg.to_str().unwrap(), "--deterministic"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("point_cloud.ply").exists());
    assert!(out.join("metrics.csv").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,l1,ssim,depth_loss,total,psnr\n1,"));
}

#[test]
fn train_exit_codes() {
    let r = snugsplat(&["train", "--config", "/definitely/not/here.json"]);
    assert_eq!(r.status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"budget_seconds": -1}"#).unwrap();
    assert_eq!(snugsplat(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    // Valid config, missing scene.
    fs::write(&cfg, r#"{"colmap_dir": "/definitely/not/here"}"#).unwrap();
    assert_eq!(snugsplat(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(snugsplat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(snugsplat(&["--help"]).status.code(), Some(0));
}

#[test]
fn render_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    let gt = write_scene(&scene_dir);
    let ply = tmp.path().join("gt.ply");
    write_ply(&gt, &ply).unwrap();
    let out = tmp.path().join("renders");
    let r = snugsplat(&["render", ply.to_str().unwrap(), scene_dir.to_str().unwrap(), out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2 * SceneSpec::small().n_views);
    // Renders of the ground truth match the stored 8-bit images exactly.
    for entry in fs::read_dir(scene_dir.join("images")).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(fs::read(&p).unwrap(), fs::read(out.join(p.file_name().unwrap())).unwrap());
    }
    let r = snugsplat(&["eval", ply.to_str().unwrap(), scene_dir.to_str().unwrap()]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    let psnr: f64 = text.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(psnr > 45.0, "{text}");
}

#[test]
fn render_of_empty_set_is_background() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    write_scene(&scene_dir);
    let ply = tmp.path().join("empty.ply");
    write_ply(&snugsplat::scene::GaussianSet::with_sh_degree(0), &ply).unwrap();
    let out = tmp.path().join("renders");
    let r = snugsplat(&["render", ply.to_str().unwrap(), scene_dir.to_str().unwrap(), out.to_str().unwrap()]);
    assert!(r.status.success());
    let img = snugsplat::image_io::ImageRgb::load(&out.join("view_000.png")).unwrap();
    assert!(img.data.iter().all(|v| *v == 0.0));
    let missing = snugsplat(&["render", ply.to_str().unwrap(), "/definitely/not/here", out.to_str().unwrap()]);
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn bench_tiling_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for p in [&a, &b] {
        let r = snugsplat(&[
            "bench-tiling",
            "--splats",
            "3000",
            "--anisotropy",
            "10",
            "--seed",
            "4",
            "--deterministic",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert!(r.status.success());
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let pairs = |i: usize| rows[i][2].parse::<usize>().unwrap();
    assert!(pairs(1) < pairs(0));
    assert_eq!(rows[1][4], rows[2][4]);
    assert_eq!(snugsplat(&["bench-tiling", "--splats", "0"]).status.code(), Some(1));
}
