//! Binary little-endian PLY with named per-Gaussian fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{Gaussian, GaussianCloud, SourceTag};
use crate::error::{Error, Result};

const FIELDS: [&str; 16] = [
    "position_x",
    "position_y",
    "position_z",
    "log_scale_0",
    "log_scale_1",
    "log_scale_2",
    "rotation_w",
    "rotation_x",
    "rotation_y",
    "rotation_z",
    "color_r",
    "color_g",
    "color_b",
    "opacity_logit",
    "staticness_logit",
    "source_frame",
];
const SOURCE_PIXEL: [&str; 2] = ["source_u", "source_v"];

pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    cloud.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in &FIELDS[..15] {
        writeln!(w, "property double {name}")?;
    }
    for name in [FIELDS[15], SOURCE_PIXEL[0], SOURCE_PIXEL[1]] {
        writeln!(w, "property int {name}")?;
    }
    writeln!(w, "end_header")?;
    for (g, s) in cloud.gaussians.iter().zip(&cloud.sources) {
        let vals = [
            g.mu.x,
            g.mu.y,
            g.mu.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.color[0],
            g.color[1],
            g.color[2],
            g.opacity_logit,
            g.staticness_logit,
        ];
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        let tag = s.map_or([-1, -1, -1], |t| [t.frame as i32, t.u as i32, t.v as i32]);
        for v in tag {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy)]
enum Scalar {
    F64,
    F32,
    I32,
    U32,
    I16,
    U16,
    I8,
    U8,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "double" | "float64" => Self::F64,
            "float" | "float32" => Self::F32,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 | Self::I32 | Self::U32 => 4,
            Self::I16 | Self::U16 => 2,
            Self::I8 | Self::U8 => 1,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            Self::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::I16 => i16::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::U16 => u16::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
        }
    }
}

/// Reads a cloud written by [`write_cloud`] or any binary little-endian PLY
/// carrying the same property names (source fields are optional).
pub fn read_cloud(path: &Path) -> Result<GaussianCloud> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::MissingFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(bad(format!("unsupported format {fmt}")));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| bad(format!("vertex count: {e}")))?)
            }
            ["element", other, _] => return Err(bad(format!("unexpected element {other}"))),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| bad(format!("unsupported property type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            _ => return Err(bad(format!("unexpected header line {l:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let lookup = |name: &str| props.iter().position(|(n, _)| n == name);
    let mut idx = Vec::new();
    for name in &FIELDS[..15] {
        idx.push(lookup(name).ok_or_else(|| bad(format!("missing property {name}")))?);
    }
    let src: Vec<Option<usize>> = [FIELDS[15], SOURCE_PIXEL[0], SOURCE_PIXEL[1]]
        .iter()
        .map(|n| lookup(n))
        .collect();
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |o, (_, t)| {
            let cur = *o;
            *o += t.size();
            Some(cur)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let mut buf = vec![0u8; stride];
    let mut cloud = GaussianCloud::default();
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|e| bad(format!("truncated at vertex {i}: {e}")))?;
        let get = |p: usize| {
            let (o, t) = (offsets[p], props[p].1);
            t.read(&buf[o..o + t.size()])
        };
        let v: Vec<f64> = idx.iter().map(|&p| get(p)).collect();
        let g = Gaussian {
            mu: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            rotation: [v[6], v[7], v[8], v[9]],
            color: [v[10], v[11], v[12]],
            opacity_logit: v[13],
            staticness_logit: v[14],
        };
        let tag = match (src[0], src[1], src[2]) {
            (Some(f), Some(u), Some(w)) if get(f) >= 0.0 => Some(SourceTag {
                frame: get(f) as usize,
                u: get(u) as usize,
                v: get(w) as usize,
            }),
            _ => None,
        };
        cloud.push(g, tag);
    }
    Ok(cloud)
}
