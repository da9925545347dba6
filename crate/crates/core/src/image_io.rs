//! Linear float images and depth maps, plus PNG/PPM/PFM readers and writers.
//!
//! 8-bit images are mapped to `[0, 1]` by dividing by 255; no gamma handling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed PFM {path}: {reason}")]
    Pfm { path: String, reason: String },
    #[error("unsupported image extension for {0} (expected png or ppm)")]
    Extension(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Row-major interleaved RGB image with float channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height && self.data.len() == other.data.len()
    }

    /// Reads a PNG or binary PPM by extension.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Codec {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Ok(Self { width, height, data })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes 8-bit PNG or binary PPM depending on the extension, clamping to `[0, 1]`.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "png" => image::save_buffer(
                path,
                &self.to_rgb8(),
                self.width,
                self.height,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|source| ImageError::Codec {
                path: path.display().to_string(),
                source,
            }),
            "ppm" => {
                let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
                write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(io_err(path))?;
                w.write_all(&self.to_rgb8()).map_err(io_err(path))?;
                w.flush().map_err(io_err(path))
            }
            _ => Err(ImageError::Extension(path.display().to_string())),
        }
    }
}

/// Single-channel depth map with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Marks positive finite entries valid.
    pub fn from_values(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        let valid = data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self {
            width,
            height,
            data,
            valid,
        }
    }

    pub fn at(&self, x: u32, y: u32) -> Option<f64> {
        let i = y as usize * self.width as usize + x as usize;
        self.valid[i].then_some(self.data[i])
    }

    pub fn scaled(&self, k: f64) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|d| d * k).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Writes a little-endian grayscale PFM (rows stored bottom-to-top).
pub fn write_pfm(path: &Path, width: u32, height: u32, values: &[f64]) -> Result<(), ImageError> {
    assert_eq!(values.len(), width as usize * height as usize);
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write!(w, "Pf\n{width} {height}\n-1.0\n").map_err(io_err(path))?;
    for row in (0..height as usize).rev() {
        for v in &values[row * width as usize..(row + 1) * width as usize] {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Reads a grayscale PFM into a [`DepthMap`]. Both byte orders are accepted.
pub fn read_pfm(path: &Path) -> Result<DepthMap, ImageError> {
    let pfm_err = |reason: &str| ImageError::Pfm {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header = Vec::new();
    // Header is three whitespace-separated tokens after the magic line.
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        header.clear();
        let n = r.read_until(b'\n', &mut header).map_err(io_err(path))?;
        if n == 0 {
            return Err(pfm_err("truncated header"));
        }
        let line = String::from_utf8_lossy(&header);
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "Pf" {
        return Err(pfm_err("only grayscale 'Pf' files are supported"));
    }
    let width: u32 = tokens[1].parse().map_err(|_| pfm_err("bad width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| pfm_err("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| pfm_err("bad scale"))?;
    let little = scale < 0.0;
    let n = width as usize * height as usize;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| pfm_err("truncated pixel data"))?;
    let mut data = vec![0.0; n];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (i / width as usize, i % width as usize);
        data[(height as usize - 1 - row) * width as usize + col] = v as f64;
    }
    Ok(DepthMap::from_values(width, height, data))
}
