//! PLY input and output for integer voxel clouds.
//!
//! Reads `ascii` and `binary_little_endian` files whose vertex element has
//! integer-valued `x`, `y`, `z` properties (any scalar type). Other vertex
//! properties are skipped. Elements after the vertices are ignored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::octree::{PointCloud, VoxelCoord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
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
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return Err(Error::Ply(format!("unknown property type {name:?}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    // (name, type); `None` type marks a list property.
    props: Vec<(String, Option<Scalar>)>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body: usize,
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let end = data
        .windows(11)
        .position(|w| w == b"end_header\n" || w == b"end_header\r")
        .ok_or_else(|| Error::Ply("missing end_header".into()))?;
    let mut body = end + "end_header".len();
    if data.get(body) == Some(&b'\r') {
        body += 1;
    }
    if data.get(body) == Some(&b'\n') {
        body += 1;
    }
    let text = std::str::from_utf8(&data[..end]).map_err(|_| Error::Ply("header is not text".into()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Ply("missing ply signature".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(Error::Ply(format!("unsupported format {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Ply(format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Ply("property before element".into()))?
                .props
                .push((name.to_string(), None)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Ply("property before element".into()))?
                .props
                .push((name.to_string(), Some(Scalar::parse(ty)?))),
            _ => return Err(Error::Ply(format!("unexpected header line {line:?}"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| Error::Ply("missing format line".into()))?,
        elements,
        body,
    })
}

fn to_coord(v: f64) -> Result<u32> {
    if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
        return Err(Error::Ply(format!("coordinate {v} is not a non-negative integer")));
    }
    Ok(v as u32)
}

fn axes(el: &Element) -> Result<[usize; 3]> {
    let find = |n: &str| {
        el.props
            .iter()
            .position(|(p, _)| p == n)
            .ok_or_else(|| Error::Ply(format!("vertex element has no {n} property")))
    };
    Ok([find("x")?, find("y")?, find("z")?])
}

/// Parses PLY bytes into raw coordinates (not yet deduplicated).
pub fn parse_coords(data: &[u8]) -> Result<Vec<VoxelCoord>> {
    let h = parse_header(data)?;
    let vi = h
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let vertex = &h.elements[vi];
    let ax = axes(vertex)?;
    let body = &data[h.body..];
    let mut out = Vec::with_capacity(vertex.count);
    match h.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| Error::Ply("ascii body is not text".into()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let skip: usize = h.elements[..vi].iter().map(|e| e.count).sum();
            for _ in 0..skip {
                lines.next().ok_or_else(|| Error::Ply("truncated body".into()))?;
            }
            for k in 0..vertex.count {
                let line = lines.next().ok_or_else(|| Error::Ply(format!("truncated at vertex {k}")))?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                let get = |i: usize| -> Result<u32> {
                    let s = vals.get(i).ok_or_else(|| Error::Ply(format!("short vertex line {k}")))?;
                    to_coord(s.parse().map_err(|_| Error::Ply(format!("bad number {s:?}")))?)
                };
                out.push(VoxelCoord::new(get(ax[0])?, get(ax[1])?, get(ax[2])?));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut pos = 0;
            for e in &h.elements[..vi] {
                let mut row = 0;
                for (name, ty) in &e.props {
                    row += ty
                        .ok_or_else(|| Error::Ply(format!("list property {name} before vertices")))?
                        .size();
                }
                pos += row * e.count;
            }
            let mut offsets = Vec::with_capacity(vertex.props.len());
            let mut row = 0;
            for (name, ty) in &vertex.props {
                let ty = ty.ok_or_else(|| Error::Ply(format!("list property {name} in vertex element")))?;
                offsets.push((row, ty));
                row += ty.size();
            }
            let need = pos + row * vertex.count;
            if body.len() < need {
                return Err(Error::Ply(format!("binary body has {} of {need} bytes", body.len())));
            }
            for k in 0..vertex.count {
                let base = pos + k * row;
                let get = |i: usize| {
                    let (off, ty) = offsets[i];
                    to_coord(ty.read_le(&body[base + off..]))
                };
                out.push(VoxelCoord::new(get(ax[0])?, get(ax[1])?, get(ax[2])?));
            }
        }
    }
    Ok(out)
}

/// Parses a cloud; `bitdepth = None` picks the smallest depth that fits.
pub fn parse_ply(data: &[u8], bitdepth: Option<u8>) -> Result<PointCloud> {
    let coords = parse_coords(data)?;
    match bitdepth {
        Some(d) => PointCloud::new(coords, d),
        None => PointCloud::with_min_bitdepth(coords),
    }
}

pub fn read_ply(path: &Path, bitdepth: Option<u8>) -> Result<PointCloud> {
    parse_ply(&std::fs::read(path)?, bitdepth)
}

pub fn ply_bytes(pc: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty int x\nproperty int y\nproperty int z\nend_header\n",
        pc.len()
    )
    .into_bytes();
    for c in pc.coords() {
        match format {
            PlyFormat::Ascii => out.extend(format!("{} {} {}\n", c.x, c.y, c.z).bytes()),
            PlyFormat::BinaryLittleEndian => {
                for v in c.to_array() {
                    out.extend((v as i32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(pc: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    std::fs::write(path, ply_bytes(pc, format))?;
    Ok(())
}
