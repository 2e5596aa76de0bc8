//! PLY reading and writing for colored vertex clouds.
//!
//! Reads `ascii 1.0` and `binary_little_endian 1.0` files whose first element is
//! `vertex`. Any scalar vertex properties are accepted; only `x`, `y`, `z` and
//! `red`, `green`, `blue` are kept. Writes float positions and uchar colors.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{color_from_u8, color_to_u8, ColoredPointCloud};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn parse_err(line: usize, message: impl Into<String>) -> PlyError {
    PlyError::Parse {
        line,
        message: message.into(),
    }
}

/// A loaded cloud plus what had to be filled in.
#[derive(Clone, Debug)]
pub struct PlyLoad {
    pub cloud: ColoredPointCloud,
    /// The file had no color properties; every point was painted white.
    pub colors_filled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

struct Header {
    format: Format,
    vertices: usize,
    props: Vec<(String, Scalar)>,
    /// Number of header lines, including `end_header`.
    lines: usize,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header, PlyError> {
    let mut line_no = 0;
    let mut next_line = |r: &mut R| -> Result<(usize, String), PlyError> {
        let mut buf = Vec::new();
        line_no += 1;
        if r.read_until(b'\n', &mut buf)? == 0 {
            return Err(parse_err(line_no, "unexpected end of header"));
        }
        let s = String::from_utf8(buf).map_err(|_| parse_err(line_no, "header is not UTF-8"))?;
        Ok((line_no, s.trim_end_matches(['\n', '\r']).to_string()))
    };

    let (n, magic) = next_line(r)?;
    if magic.trim() != "ply" {
        return Err(parse_err(n, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut vertices = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let (n, line) = next_line(r)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", kind, version] => {
                if *version != "1.0" {
                    return Err(parse_err(n, format!("unsupported version {version}")));
                }
                format = Some(match *kind {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => return Err(parse_err(n, format!("unsupported format {other}"))),
                });
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| parse_err(n, format!("bad element count '{count}'")))?;
                if *name == "vertex" {
                    if vertices.is_some() {
                        return Err(parse_err(n, "duplicate vertex element"));
                    }
                    vertices = Some(count);
                    in_vertex = true;
                } else {
                    if vertices.is_none() && count > 0 {
                        return Err(parse_err(
                            n,
                            format!("element '{name}' before vertex is not supported"),
                        ));
                    }
                    in_vertex = false;
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(parse_err(n, "list properties on vertices are not supported"));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let scalar = Scalar::parse(ty)
                        .ok_or_else(|| parse_err(n, format!("unknown property type '{ty}'")))?;
                    props.push((name.to_string(), scalar));
                }
            }
            ["end_header"] => {
                let format = format.ok_or_else(|| parse_err(n, "missing format line"))?;
                let vertices = vertices.ok_or_else(|| parse_err(n, "missing vertex element"))?;
                return Ok(Header {
                    format,
                    vertices,
                    props,
                    lines: n,
                });
            }
            _ => return Err(parse_err(n, format!("unrecognized header line '{line}'"))),
        }
    }
}

/// Reads a PLY stream.
pub fn read_ply<R: Read>(reader: R) -> Result<PlyLoad, PlyError> {
    let mut r = BufReader::new(reader);
    let header = read_header(&mut r)?;
    let find = |name: &str| header.props.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(header.lines, "vertex element lacks x, y, z")),
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };

    let mut values = vec![0.0; header.props.len()];
    let mut positions = Vec::with_capacity(header.vertices);
    let mut colors = Vec::with_capacity(header.vertices);
    match header.format {
        Format::Ascii => {
            let mut line_no = header.lines;
            let mut buf = String::new();
            while positions.len() < header.vertices {
                buf.clear();
                line_no += 1;
                if r.read_line(&mut buf)? == 0 {
                    return Err(parse_err(
                        line_no,
                        format!(
                            "expected {} vertices, found {}",
                            header.vertices,
                            positions.len()
                        ),
                    ));
                }
                let tokens: Vec<&str> = buf.split_whitespace().collect();
                if tokens.is_empty() {
                    continue;
                }
                if tokens.len() < values.len() {
                    return Err(parse_err(
                        line_no,
                        format!("expected {} values, got {}", values.len(), tokens.len()),
                    ));
                }
                for ((v, tok), (_, scalar)) in values.iter_mut().zip(&tokens).zip(&header.props) {
                    let parsed: f64 = tok
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad number '{tok}'")))?;
                    // match what a binary file of the same declared type would hold
                    *v = if *scalar == Scalar::F32 { parsed as f32 as f64 } else { parsed };
                }
                push_vertex(&header, &values, [xi, yi, zi], color_idx, &mut positions, &mut colors)
                    .map_err(|m| parse_err(line_no, m))?;
            }
        }
        Format::BinaryLe => {
            let stride: usize = header.props.iter().map(|(_, s)| s.size()).sum();
            let mut record = vec![0u8; stride];
            for i in 0..header.vertices {
                r.read_exact(&mut record).map_err(|e| match e.kind() {
                    io::ErrorKind::UnexpectedEof => parse_err(
                        header.lines,
                        format!("expected {} vertices, found {i}", header.vertices),
                    ),
                    _ => PlyError::Io(e),
                })?;
                let mut off = 0;
                for (v, (_, s)) in values.iter_mut().zip(&header.props) {
                    *v = s.read_le(&record[off..off + s.size()]);
                    off += s.size();
                }
                push_vertex(&header, &values, [xi, yi, zi], color_idx, &mut positions, &mut colors)
                    .map_err(|m| parse_err(header.lines, format!("vertex {i}: {m}")))?;
            }
        }
    }

    let colors_filled = color_idx.is_none();
    let cloud = ColoredPointCloud::new(positions, colors)
        .map_err(|e| parse_err(header.lines, e.to_string()))?;
    Ok(PlyLoad {
        cloud,
        colors_filled,
    })
}

fn push_vertex(
    header: &Header,
    values: &[f64],
    xyz: [usize; 3],
    color_idx: Option<[usize; 3]>,
    positions: &mut Vec<[f64; 3]>,
    colors: &mut Vec<[f64; 3]>,
) -> Result<(), String> {
    let p = [values[xyz[0]], values[xyz[1]], values[xyz[2]]];
    if p.iter().any(|v| !v.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    positions.push(p);
    let c = match color_idx {
        None => [1.0; 3],
        Some(idx) => idx.map(|i| {
            let ty = header.props[i].1;
            if ty.is_integer() {
                color_from_u8(values[i].clamp(0.0, 255.0) as u8)
            } else {
                values[i].clamp(0.0, 1.0)
            }
        }),
    };
    colors.push(c);
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PlyLoad, PlyError> {
    read_ply(File::open(path)?)
}

/// Writes float x/y/z and uchar red/green/blue.
pub fn write_ply<W: Write>(
    cloud: &ColoredPointCloud,
    writer: W,
    binary: bool,
) -> Result<(), PlyError> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}")?;
    }
    for ch in ["red", "green", "blue"] {
        writeln!(w, "property uchar {ch}")?;
    }
    writeln!(w, "end_header")?;
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        let rgb = c.map(color_to_u8);
        if binary {
            for v in p {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            w.write_all(&rgb)?;
        } else {
            writeln!(
                w,
                "{} {} {} {} {} {}",
                p[0] as f32, p[1] as f32, p[2] as f32, rgb[0], rgb[1], rgb[2]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ply(
    cloud: &ColoredPointCloud,
    path: impl AsRef<Path>,
    binary: bool,
) -> Result<(), PlyError> {
    write_ply(cloud, File::create(path)?, binary)
}
