//! File formats: binary PGM, FER1 float rasters, point-cloud CSV, PLY
//! export, JSON configs and JSON-lines metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{GefError, Result};
use crate::image_entropy::{GrayImage, Raster};
use crate::neighborhood::NeighborhoodStats;
use crate::primitive::{logit, principal_normal, GaussianPrimitive, Scene};

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| GefError::file(path, e))
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| GefError::file(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| GefError::file(path, e))
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && is_space(bytes[*pos]) {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(GefError::parse(format!("byte {start}"), "expected a decimal header field"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| GefError::parse(format!("byte {start}"), "header field out of range"))
}

pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(GefError::UnsupportedFormat("not a PNM file (missing `P` magic)".into()));
    }
    match bytes[1] {
        b'5' => {}
        b'2' => return Err(GefError::UnsupportedFormat("ASCII PGM (P2); only binary P5 is read".into())),
        b'6' => return Err(GefError::UnsupportedFormat("color PPM (P6); only grayscale P5 is read".into())),
        b'3' => return Err(GefError::UnsupportedFormat("ASCII PPM (P3); only binary P5 is read".into())),
        b'1' | b'4' => return Err(GefError::UnsupportedFormat("bitmap PBM; only grayscale P5 is read".into())),
        other => return Err(GefError::UnsupportedFormat(format!("PNM variant P{}", other as char))),
    }
    let mut pos = 2;
    let width = pgm_token(bytes, &mut pos)?;
    let height = pgm_token(bytes, &mut pos)?;
    let maxval = pgm_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(GefError::UnsupportedFormat(format!("PGM maxval {maxval}; only 255 is read")));
    }
    if pos >= bytes.len() || !is_space(bytes[pos]) {
        return Err(GefError::parse(format!("byte {pos}"), "expected whitespace before the pixel data"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| GefError::parse("header", "image dimensions overflow"))?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(GefError::parse(
            format!("byte {}", bytes.len()),
            format!("truncated pixel data: expected {need} bytes after offset {pos}, found {have}"),
        ));
    }
    GrayImage::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn write_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Float raster stack: `FER1`, then width, height and channel count as
/// little-endian u32, then row-major channel-interleaved little-endian f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Fer1Raster {
    pub width: usize,
    pub height: usize,
    pub n_channels: usize,
    pub data: Vec<f32>,
}

impl Fer1Raster {
    pub fn from_channels(channels: &[&Raster]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| GefError::Contract("a FER1 raster needs at least one channel".into()))?;
        if channels.iter().any(|c| !c.same_shape(first)) {
            return Err(GefError::Dimension("FER1 channels differ in size".into()));
        }
        let n = first.data.len();
        let mut data = Vec::with_capacity(n * channels.len());
        for p in 0..n {
            data.extend(channels.iter().map(|c| c.data[p] as f32));
        }
        Ok(Self {
            width: first.width,
            height: first.height,
            n_channels: channels.len(),
            data,
        })
    }

    pub fn channel(&self, c: usize) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(self.n_channels).map(|&v| v as f64).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(b"FER1");
        for v in [self.width, self.height, self.n_channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != b"FER1" {
            return Err(GefError::UnsupportedFormat("missing FER1 magic".into()));
        }
        if bytes.len() < 16 {
            return Err(GefError::parse(format!("byte {}", bytes.len()), "truncated FER1 header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (width, height, n_channels) = (word(0), word(1), word(2));
        let count = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(n_channels))
            .ok_or_else(|| GefError::parse("byte 4", "FER1 dimensions overflow"))?;
        let payload = bytes.len() - 16;
        if payload != count * 4 {
            return Err(GefError::parse(
                "byte 16",
                format!("{width}x{height}x{n_channels} declares {} payload bytes, found {payload}", count * 4),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            n_channels,
            data,
        })
    }
}

pub const CSV_HEADER: &str = "x,y,z,sx,sy,sz,qw,qx,qy,qz,opacity,r,g,b,weight";

pub fn write_point_cloud(scene: &Scene) -> String {
    let mut out = String::with_capacity(16 * 15 * (scene.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in &scene.primitives {
        let s = p.scale();
        let fields = [
            p.center.x,
            p.center.y,
            p.center.z,
            s.x,
            s.y,
            s.z,
            p.rotation[0],
            p.rotation[1],
            p.rotation[2],
            p.rotation[3],
            p.opacity(),
            p.color.x,
            p.color.y,
            p.color.z,
            p.weight,
        ];
        let line: Vec<String> = fields.iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub const NEIGHBORHOOD_CSV_HEADER: &str = "index,snri,entropy,eta";

/// Per-primitive neighborhood table. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_neighborhood_stats(stats: &[NeighborhoodStats]) -> String {
    let mut out = String::from(NEIGHBORHOOD_CSV_HEADER);
    out.push('\n');
    for s in stats {
        out.push_str(&format!("{},{},{},{}\n", s.index, s.snri, s.entropy, s.threshold));
    }
    out
}

/// Parses point-cloud CSV rows into primitives. Rotations are kept as
/// written apart from normalization.
pub fn read_point_cloud(text: &str) -> Result<Vec<GaussianPrimitive>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(GefError::parse("line 1", format!("expected header `{CSV_HEADER}`, found `{h}`"))),
        None => return Err(GefError::parse("line 1", "missing header")),
    }
    let mut prims = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .enumerate()
            .map(|(col, v)| {
                v.trim().parse::<f64>().map_err(|_| {
                    GefError::parse(format!("line {lineno}, column {}", col + 1), format!("`{}` is not a number", v.trim()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 15 {
            return Err(GefError::parse(format!("line {lineno}"), format!("expected 15 fields, found {}", vals.len())));
        }
        if let Some(col) = vals.iter().position(|v| !v.is_finite()) {
            return Err(GefError::parse(format!("line {lineno}, column {}", col + 1), "non-finite value"));
        }
        if vals[3..6].iter().any(|&s| s <= 0.0) {
            return Err(GefError::parse(format!("line {lineno}"), "scales must be positive"));
        }
        if !(0.0..=1.0).contains(&vals[10]) {
            return Err(GefError::parse(format!("line {lineno}, column 11"), "opacity must lie in [0, 1]"));
        }
        let q = Vector4::new(vals[6], vals[7], vals[8], vals[9]);
        if q.norm() < 1e-12 {
            return Err(GefError::parse(format!("line {lineno}"), "zero quaternion"));
        }
        prims.push(GaussianPrimitive {
            center: Vector3::new(vals[0], vals[1], vals[2]),
            log_scale: Vector3::new(vals[3].ln(), vals[4].ln(), vals[5].ln()),
            rotation: q.normalize(),
            opacity_logit: logit(vals[10]),
            color: Vector3::new(vals[11], vals[12], vals[13]),
            weight: vals[14],
        });
    }
    Ok(prims)
}

/// Smallest scale among `prims`, a floor that leaves every primitive as is.
pub fn smallest_scale(prims: &[GaussianPrimitive]) -> Option<f64> {
    prims.iter().flat_map(|p| p.scale().iter().copied().collect::<Vec<_>>()).reduce(f64::min)
}

/// ASCII PLY with position, normal, 8-bit color, opacity and scales.
pub fn write_ply(scene: &Scene) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property float opacity\nproperty float scale_0\nproperty float scale_1\nproperty float scale_2\n\
         end_header\n",
        scene.len()
    );
    for p in &scene.primitives {
        let n = principal_normal(p).direction;
        let c = p.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        let s = p.scale();
        out.push_str(&format!(
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {} {} {} {:.6} {:.6} {:.6} {:.6}\n",
            p.center.x,
            p.center.y,
            p.center.z,
            n.x,
            n.y,
            n.z,
            c.x,
            c.y,
            c.z,
            p.opacity(),
            s.x,
            s.y,
            s.z
        ));
    }
    out
}

/// Parses JSON into `T`, returning the dotted paths of keys `T` does not
/// know about alongside the value.
pub fn parse_json_config<T: DeserializeOwned>(text: &str) -> Result<(T, Vec<String>)> {
    let mut unknown = Vec::new();
    let de = &mut serde_json::Deserializer::from_str(text);
    let value: T = serde_ignored::deserialize(de, |path| unknown.push(path.to_string())).map_err(|e| {
        GefError::parse(format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })?;
    Ok((value, unknown))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Writes one compact JSON object per line.
pub struct JsonLines<W: Write> {
    out: W,
}

impl<W: Write> JsonLines<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
