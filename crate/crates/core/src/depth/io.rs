//! Container formats.
//!
//! * depth: binary PGM (`P5`, maxval 65535), big-endian 16-bit millimeters,
//!   0 = missing, plus a JSON sidecar with the same stem,
//! * normals: `NRM1`, `u32` width, `u32` height, `u32` reserved, then
//!   `H * W * 3` little-endian `f32`, row-major,
//! * color: binary PPM (`P6`, 8-bit).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, DepthMap, NormalMap, RgbImage};
use crate::error::{DclError, Result};

const NORMAL_MAGIC: &[u8; 4] = b"NRM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synth,
    Real,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Synth => "synth",
            Domain::Real => "real",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = DclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Domain::Synth),
            "real" => Ok(Domain::Real),
            other => Err(DclError::Usage(format!("unknown domain {other:?} (synth|real)"))),
        }
    }
}

/// JSON metadata stored next to every depth file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub d_max_m: f32,
    pub domain: Domain,
    pub seed: u64,
}

impl DepthSidecar {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }
}

/// `dir/name.pgm` -> `dir/name.json`.
pub fn sidecar_path(depth_path: &Path) -> PathBuf {
    depth_path.with_extension("json")
}

pub fn write_depth(path: &Path, depth: &DepthMap, k: &CameraIntrinsics, domain: Domain, seed: u64) -> Result<()> {
    k.validate(depth.width(), depth.height())?;
    let limit = (depth.d_max() * 1000.0).round();
    if limit > 65535.0 {
        return Err(DclError::Data(format!(
            "d_max {} m does not fit 16-bit millimeters",
            depth.d_max()
        )));
    }
    let mut bytes = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    bytes.reserve(depth.values().len() * 2);
    for &v in depth.values() {
        let mm = (v * 1000.0).round() as u16;
        bytes.extend_from_slice(&mm.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| DclError::io(path, e))?;
    let sidecar = DepthSidecar {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        d_max_m: depth.d_max(),
        domain,
        seed,
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_depth(path: &Path) -> Result<(DepthMap, CameraIntrinsics)> {
    let (d, meta) = read_depth_with_meta(path)?;
    Ok((d, meta.intrinsics()))
}

pub fn read_depth_with_meta(path: &Path) -> Result<(DepthMap, DepthSidecar)> {
    let meta: DepthSidecar = read_json(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| DclError::io(path, e))?;
    let (w, h, maxval, body) = parse_netpbm(path, &bytes, b"P5")?;
    if maxval != 65535 {
        return Err(DclError::format(path, format!("maxval {maxval}, expected 65535")));
    }
    if body.len() != w * h * 2 {
        return Err(DclError::format(
            path,
            format!("expected {} sample bytes, found {}", w * h * 2, body.len()),
        ));
    }
    let limit = (meta.d_max_m * 1000.0).round() as u32;
    let mut values = Vec::with_capacity(w * h);
    for chunk in body.chunks_exact(2) {
        let mm = u16::from_be_bytes([chunk[0], chunk[1]]) as u32;
        if mm > limit {
            return Err(DclError::Range {
                path: path.into(),
                value: mm,
                limit,
            });
        }
        values.push(mm as f32 / 1000.0);
    }
    let depth = DepthMap::new(w, h, values, meta.d_max_m).map_err(|e| DclError::format(path, e.to_string()))?;
    meta.intrinsics()
        .validate(w, h)
        .map_err(|e| DclError::format(sidecar_path(path), e.to_string()))?;
    Ok((depth, meta))
}

pub fn write_rgb(path: &Path, rgb: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
    for px in rgb.pixels() {
        for c in px {
            bytes.push((c * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| DclError::io(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| DclError::io(path, e))?;
    let (w, h, maxval, body) = parse_netpbm(path, &bytes, b"P6")?;
    if maxval != 255 {
        return Err(DclError::format(path, format!("maxval {maxval}, expected 255")));
    }
    if body.len() != w * h * 3 {
        return Err(DclError::format(path, "truncated pixel data"));
    }
    let pixels = body
        .chunks_exact(3)
        .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
        .collect();
    RgbImage::new(w, h, pixels).map_err(|e| DclError::format(path, e.to_string()))
}

pub fn write_normals(path: &Path, normals: &NormalMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + normals.values().len() * 12);
    bytes.extend_from_slice(NORMAL_MAGIC);
    bytes.extend_from_slice(&(normals.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(normals.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for n in normals.values() {
        for c in n {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| DclError::io(path, e))
}

pub fn read_normals(path: &Path) -> Result<NormalMap> {
    let bytes = fs::read(path).map_err(|e| DclError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != NORMAL_MAGIC {
        return Err(DclError::format(path, "missing NRM1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    let body = &bytes[16..];
    if body.len() != w * h * 12 {
        return Err(DclError::format(
            path,
            format!("expected {} payload bytes, found {}", w * h * 12, body.len()),
        ));
    }
    let values = body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap());
            [f(0), f(4), f(8)]
        })
        .collect();
    NormalMap::new(w, h, values).map_err(|e| DclError::format(path, e.to_string()))
}

/// Split a binary netpbm file into `(width, height, maxval, payload)`.
fn parse_netpbm<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, u32, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DclError::format(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and `#` comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(DclError::format(path, "bad header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().unwrap();
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DclError::format(path, "header not terminated by whitespace")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(DclError::format(path, "zero image extent"));
    }
    Ok((w as usize, h as usize, maxval as u32, &bytes[pos..]))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DclError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DclError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DclError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DclError::json(path, e))
}
