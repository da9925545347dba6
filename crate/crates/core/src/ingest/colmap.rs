//! COLMAP text-format sparse reconstructions (`cameras.txt`, `images.txt`, `points3D.txt`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::scene::{Camera, RigidTransform};

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: unsupported camera model {model}")]
    UnsupportedModel { file: String, line: usize, model: String },
    #[error("{file}:{line}: {reason}")]
    Malformed { file: String, line: usize, reason: String },
    #[error("{file}:{line}: image references undeclared camera {camera_id}")]
    UnknownCamera { file: String, line: usize, camera_id: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsePoint {
    pub position: [f64; 3],
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, Default)]
pub struct SparseReconstruction {
    /// One camera per image record, in file order, named after the image.
    pub cameras: Vec<Camera>,
    pub points: Vec<SparsePoint>,
}

#[derive(Clone, Copy, Debug)]
struct Intrinsics {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn read(dir: &Path, name: &str) -> Result<String, ColmapError> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|source| ColmapError::Io { path, source })
}

/// Non-comment lines with 1-based line numbers. Blank lines are kept because an
/// image's 2D point line may legitimately be empty.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, file: &str, line: usize, what: &str) -> Result<T, ColmapError> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| ColmapError::Malformed {
        file: file.into(),
        line,
        reason: format!("missing or invalid {what}"),
    })
}

fn parse_cameras(text: &str) -> Result<HashMap<u32, Intrinsics>, ColmapError> {
    const F: &str = "cameras.txt";
    let mut out = HashMap::new();
    for (n, line) in lines(text).filter(|(_, l)| !l.is_empty()) {
        let mut tok = line.split_whitespace();
        let id: u32 = parse_field(tok.next(), F, n, "camera id")?;
        let model = tok.next().unwrap_or_default().to_string();
        let width = parse_field(tok.next(), F, n, "width")?;
        let height = parse_field(tok.next(), F, n, "height")?;
        let params: Vec<f64> = tok
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| ColmapError::Malformed {
                file: F.into(),
                line: n,
                reason: "invalid camera parameter".into(),
            })?;
        let (fx, fy, cx, cy) = match (model.as_str(), params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE" | "SIMPLE_PINHOLE", _) => {
                return Err(ColmapError::Malformed {
                    file: F.into(),
                    line: n,
                    reason: format!("{model} with {} parameters", params.len()),
                })
            }
            _ => {
                return Err(ColmapError::UnsupportedModel {
                    file: F.into(),
                    line: n,
                    model,
                })
            }
        };
        out.insert(id, Intrinsics { width, height, fx, fy, cx, cy });
    }
    Ok(out)
}

fn parse_images(text: &str, intrinsics: &HashMap<u32, Intrinsics>) -> Result<Vec<Camera>, ColmapError> {
    const F: &str = "images.txt";
    let mut cameras = Vec::new();
    let mut it = lines(text);
    while let Some((n, line)) = it.next() {
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let _id: u32 = parse_field(tok.next(), F, n, "image id")?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = parse_field(tok.next(), F, n, &format!("quaternion component {k}"))?;
        }
        let mut t = [0.0; 3];
        for (k, v) in t.iter_mut().enumerate() {
            *v = parse_field(tok.next(), F, n, &format!("translation component {k}"))?;
        }
        let camera_id: u32 = parse_field(tok.next(), F, n, "camera id")?;
        let name = tok.next().unwrap_or_default().to_string();
        let k = intrinsics.get(&camera_id).ok_or(ColmapError::UnknownCamera {
            file: F.into(),
            line: n,
            camera_id,
        })?;
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(quat.norm() > 0.0) {
            return Err(ColmapError::Malformed {
                file: F.into(),
                line: n,
                reason: "zero quaternion".into(),
            });
        }
        let rotation = UnitQuaternion::from_quaternion(quat).to_rotation_matrix().into_inner();
        let mut cam = Camera::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
            .with_pose(RigidTransform::new(rotation, Vector3::from(t)));
        cam.name = name;
        cameras.push(cam);
        // The following line lists 2D observations and is not needed.
        it.next();
    }
    Ok(cameras)
}

fn parse_points(text: &str) -> Result<Vec<SparsePoint>, ColmapError> {
    const F: &str = "points3D.txt";
    let mut out = Vec::new();
    for (n, line) in lines(text).filter(|(_, l)| !l.is_empty()) {
        let mut tok = line.split_whitespace();
        let _id: u64 = parse_field(tok.next(), F, n, "point id")?;
        let mut position = [0.0; 3];
        for (k, v) in position.iter_mut().enumerate() {
            *v = parse_field(tok.next(), F, n, &format!("coordinate {k}"))?;
        }
        let mut rgb = [0u8; 3];
        for (k, v) in rgb.iter_mut().enumerate() {
            *v = parse_field(tok.next(), F, n, &format!("color component {k}"))?;
        }
        out.push(SparsePoint { position, rgb });
    }
    Ok(out)
}

/// Parses a COLMAP text model directory.
pub fn parse_colmap(dir: &Path) -> Result<SparseReconstruction, ColmapError> {
    let intrinsics = parse_cameras(&read(dir, "cameras.txt")?)?;
    let cameras = parse_images(&read(dir, "images.txt")?, &intrinsics)?;
    let points = parse_points(&read(dir, "points3D.txt")?)?;
    Ok(SparseReconstruction { cameras, points })
}

/// Writes `recon` as a COLMAP text model, one PINHOLE intrinsic per image.
pub fn write_colmap(dir: &Path, recon: &SparseReconstruction) -> Result<(), ColmapError> {
    let io = |path: PathBuf| move |source| ColmapError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let mut cams = String::from("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (i, c) in recon.cameras.iter().enumerate() {
        let id = i + 1;
        writeln!(cams, "{id} PINHOLE {} {} {} {} {} {}", c.width, c.height, c.fx, c.fy, c.cx, c.cy).unwrap();
        let q = UnitQuaternion::from_matrix(&c.world_to_cam.rotation);
        let t = c.world_to_cam.translation;
        let name = if c.name.is_empty() { format!("view_{id:04}.png") } else { c.name.clone() };
        writeln!(imgs, "{id} {} {} {} {} {} {} {} {id} {name}\n", q.w, q.i, q.j, q.k, t.x, t.y, t.z).unwrap();
    }
    let mut pts = String::from("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n");
    for (i, p) in recon.points.iter().enumerate() {
        let [x, y, z] = p.position;
        let [r, g, b] = p.rgb;
        writeln!(pts, "{} {x} {y} {z} {r} {g} {b} 0", i + 1).unwrap();
    }
    for (name, body) in [("cameras.txt", cams), ("images.txt", imgs), ("points3D.txt", pts)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(path))?;
    }
    Ok(())
}
