// SPDX-License-Identifier: Apache-2.0

//! Minimal PLY reader/writer for vertex clouds (ASCII and binary little endian).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Ply(format!("unknown scalar type '{other}'"))),
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

    fn read_le(self, b: &[u8]) -> f64 {
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::Ply("unexpected end of header".into()));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Ply("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(&mut line)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => {
                        return Err(Error::Ply(format!("unsupported format '{other}'")))
                    }
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Ply(format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                el.props.push(Property::List {
                    count: Scalar::parse(c)?,
                    item: Scalar::parse(i)?,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                });
            }
            _ => return Err(Error::Ply(format!("unrecognized header line '{}'", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| Error::Ply("missing format line".into()))?;
    Ok(Header { format, elements })
}

/// Reads a PLY file, voxelizing its vertices.
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let vertex = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let vprops = &header.elements[vertex].props;
    let find = |n: &str| {
        vprops
            .iter()
            .position(|p| matches!(p, Property::Scalar { name, .. } if name == n))
    };
    let xyz = [find("x"), find("y"), find("z")];
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(Error::Ply("vertex element lacks x/y/z".into()));
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };

    let mut coords = Vec::new();
    let mut colors = rgb.map(|_| Vec::new());
    let mut values = Vec::new();
    match header.format {
        Format::Ascii => {
            let mut text = String::new();
            r.read_to_string(&mut text)?;
            let mut tokens = text.split_whitespace();
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    values.clear();
                    for p in &el.props {
                        match p {
                            Property::Scalar { .. } => values.push(next_number(&mut tokens)?),
                            Property::List { .. } => {
                                let n = next_number(&mut tokens)? as usize;
                                for _ in 0..n {
                                    next_number(&mut tokens)?;
                                }
                                values.push(0.0);
                            }
                        }
                    }
                    if ei == vertex {
                        push_vertex(&values, [ix, iy, iz], rgb, &mut coords, colors.as_mut())?;
                    }
                }
            }
        }
        Format::BinaryLe => {
            let mut buf = Vec::new();
            r.read_to_end(&mut buf)?;
            let mut pos = 0usize;
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                let s = buf
                    .get(*pos..*pos + n)
                    .ok_or_else(|| Error::Ply("truncated binary body".into()))?;
                *pos += n;
                Ok(s)
            };
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    values.clear();
                    for p in &el.props {
                        match *p {
                            Property::Scalar { ty, .. } => {
                                values.push(ty.read_le(take(&mut pos, ty.size())?))
                            }
                            Property::List { count, item } => {
                                let n = count.read_le(take(&mut pos, count.size())?) as usize;
                                take(&mut pos, n * item.size())?;
                                values.push(0.0);
                            }
                        }
                    }
                    if ei == vertex {
                        push_vertex(&values, [ix, iy, iz], rgb, &mut coords, colors.as_mut())?;
                    }
                }
            }
        }
    }
    PointCloud::voxelize(&coords, colors)
}

fn next_number<'a>(it: &mut impl Iterator<Item = &'a str>) -> Result<f64> {
    let t = it
        .next()
        .ok_or_else(|| Error::Ply("truncated ascii body".into()))?;
    t.parse::<f64>()
        .map_err(|_| Error::Ply(format!("bad number '{t}'")))
}

fn push_vertex(
    values: &[f64],
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    coords: &mut Vec<[f64; 3]>,
    colors: Option<&mut Vec<[u8; 3]>>,
) -> Result<()> {
    coords.push(xyz.map(|i| values[i]));
    if let (Some(rgb), Some(colors)) = (rgb, colors) {
        let mut c = [0u8; 3];
        for k in 0..3 {
            let v = values[rgb[k]];
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::Ply(format!("colour value {v} outside 0..=255")));
            }
            c[k] = v as u8;
        }
        colors.push(c);
    }
    Ok(())
}

/// Writes a binary little-endian PLY with float coordinates and, when
/// present, uchar colours.
pub fn save_ply(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", pc.len())?;
    for a in ["x", "y", "z"] {
        writeln!(w, "property float {a}")?;
    }
    if pc.has_colors() {
        for a in ["red", "green", "blue"] {
            writeln!(w, "property uchar {a}")?;
        }
    }
    writeln!(w, "end_header")?;
    for (i, p) in pc.points().iter().enumerate() {
        for c in p {
            // exact for coordinates below 2^24
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        if let Some(cols) = pc.colors() {
            w.write_all(&cols[i])?;
        }
    }
    w.flush()?;
    Ok(())
}
