//! Binary little-endian PLY in the usual 3DGS property layout.
//!
//! Properties are written as `double` so a write/read round trip is exact; the
//! reader also accepts `float` and skips properties it does not know.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scene::{sh_coeff_count, GaussianSet};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad PLY header: {0}")]
    Header(String),
    #[error("PLY is missing required property \"{0}\"")]
    MissingProperty(String),
    #[error("PLY has {0} f_rest properties, which matches no SH degree")]
    ShLayout(usize),
    #[error("PLY body ends early")]
    Truncated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

fn property_names(sh_degree: usize) -> Vec<String> {
    let rest = (sh_coeff_count(sh_degree) - 1) * 3;
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).into();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Values of splat `i` in [`property_names`] order. `f_rest` is channel-major.
fn row(set: &GaussianSet, i: usize) -> Vec<f64> {
    let coeffs = set.color_coeffs(i);
    let k = sh_coeff_count(set.sh_degree);
    let mut v = Vec::with_capacity(14 + (k - 1) * 3);
    v.extend_from_slice(&set.positions[i]);
    v.extend_from_slice(&coeffs[..3]);
    for ch in 0..3 {
        v.extend((1..k).map(|j| coeffs[j * 3 + ch]));
    }
    v.push(set.opacity_logits[i]);
    v.extend_from_slice(&set.log_scales[i]);
    v.extend_from_slice(&set.rotations[i]);
    v
}

pub fn write_ply(set: &GaussianSet, path: &Path) -> Result<(), PlyError> {
    let io = |source| PlyError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", set.len());
    for name in property_names(set.sh_degree) {
        header.push_str(&format!("property double {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for i in 0..set.len() {
        for v in row(set, i) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_ply(path: &Path) -> Result<GaussianSet, PlyError> {
    let io = |source| PlyError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String, PlyError> {
        line.clear();
        if r.read_line(&mut line).map_err(io)? == 0 {
            return Err(PlyError::Header("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(PlyError::Header("missing magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(PlyError::Header(format!("unsupported format {fmt}")));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| PlyError::Header(format!("bad count {n}")))?);
                } else if count.is_some() {
                    // Elements after the vertex block are never read.
                } else {
                    return Err(PlyError::Header(format!("element {name} before vertex")));
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(PlyError::Header("list properties on vertices are unsupported".into()));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let s = Scalar::parse(ty).ok_or_else(|| PlyError::Header(format!("unknown type {ty}")))?;
                    props.push((name.to_string(), s));
                }
            }
            _ => return Err(PlyError::Header(format!("unrecognized line \"{l}\""))),
        }
    }
    let count = count.ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    let find = |name: &str| props.iter().position(|(n, _)| n == name);
    let require = |name: &str| find(name).ok_or_else(|| PlyError::MissingProperty(name.to_string()));
    let n_rest = (0..).take_while(|i| find(&format!("f_rest_{i}")).is_some()).count();
    let k = n_rest / 3 + 1;
    let degree = (0..=3).find(|d| sh_coeff_count(*d) == k).filter(|_| n_rest % 3 == 0).ok_or(PlyError::ShLayout(n_rest))?;
    let wanted: Vec<usize> = property_names(degree).iter().map(|n| require(n)).collect::<Result<_, _>>()?;

    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, s)| {
            let o = *acc;
            *acc += s.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let mut buf = vec![0u8; stride];
    let mut set = GaussianSet::with_sh_degree(degree);
    let mut colors = vec![0.0; k * 3];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|_| PlyError::Truncated)?;
        let v: Vec<f64> = wanted.iter().map(|&p| props[p].1.decode(&buf[offsets[p]..])).collect();
        colors[..3].copy_from_slice(&v[3..6]);
        for ch in 0..3 {
            for j in 1..k {
                colors[j * 3 + ch] = v[6 + ch * (k - 1) + (j - 1)];
            }
        }
        let o = 6 + n_rest;
        set.push(
            [v[0], v[1], v[2]],
            [v[o + 1], v[o + 2], v[o + 3]],
            [v[o + 4], v[o + 5], v[o + 6], v[o + 7]],
            v[o],
            &colors,
        );
    }
    Ok(set)
}
