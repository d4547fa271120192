//! Point-cloud files: whitespace-separated XYZ text and the binary
//! little-endian PLY vertex subset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{validate_batch, PointBatch, RawPoint};

/// Significant digits written per value by [`write_xyz`].
pub const XYZ_SIGNIFICANT_DIGITS: usize = 9;

/// Loads `.ply` files as PLY and anything else as XYZ.
pub fn load_points<T: Scalar>(path: impl AsRef<Path>) -> Result<PointBatch<T>> {
    let path = path.as_ref();
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        load_ply(path)
    } else {
        load_xyz(path)
    }
}

pub fn load_xyz<T: Scalar>(path: impl AsRef<Path>) -> Result<PointBatch<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::from(e).at_path(path))?;
    parse_xyz(BufReader::new(file)).map_err(|e| e.at_path(path))
}

/// One point per line: `x y z [f0 f1 ...]`. Blank lines and lines starting
/// with `#` are skipped; line numbers in errors are 1-based.
pub fn parse_xyz<T: Scalar, R: BufRead>(reader: R) -> Result<PointBatch<T>> {
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let values = trimmed
            .split_whitespace()
            .map(|tok| {
                tok.parse::<T>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        if values.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 3 fields, found {}", values.len()),
            });
        }
        let mut p = RawPoint::new(0, [values[0], values[1], values[2]]);
        if values.len() > 3 {
            p.features = Some(values[3..].to_vec());
        }
        raw.push(p);
    }
    if raw.is_empty() {
        return Err(Error::EmptyFile);
    }
    validate_batch(raw)
}

/// Writes coordinates then features, nine significant digits each.
pub fn write_xyz<T: Scalar, W: Write>(batch: &PointBatch<T>, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let prec = XYZ_SIGNIFICANT_DIGITS - 1;
    for (i, p) in batch.coords().iter().enumerate() {
        write!(w, "{:.prec$e} {:.prec$e} {:.prec$e}", p[0], p[1], p[2])?;
        if let Some(f) = batch.features() {
            for v in f.row(i) {
                write!(w, " {:.prec$e}", v)?;
            }
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_xyz<T: Scalar>(batch: &PointBatch<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::from(e).at_path(path))?;
    write_xyz(batch, file).map_err(|e| e.at_path(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, PlyType::F32 | PlyType::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar {
        name: String,
        ty: PlyType,
    },
    List {
        name: String,
        count: PlyType,
        item: PlyType,
    },
}

impl PlyProperty {
    fn name(&self) -> &str {
        match self {
            PlyProperty::Scalar { name, .. } | PlyProperty::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

fn read_header_line<R: BufRead>(reader: &mut R, line_no: &mut usize) -> Result<String> {
    let mut buf = Vec::new();
    if reader.read_until(b'\n', &mut buf)? == 0 {
        return Err(Error::UnsupportedFormat(
            "PLY header ends before end_header".into(),
        ));
    }
    *line_no += 1;
    let text = String::from_utf8(buf).map_err(|_| Error::Parse {
        line: *line_no,
        message: "header is not ASCII".into(),
    })?;
    Ok(text.trim_end_matches(['\n', '\r']).to_string())
}

fn parse_ply_header<R: BufRead>(reader: &mut R) -> Result<Vec<PlyElement>> {
    let mut line_no = 0;
    if read_header_line(reader, &mut line_no)?.trim() != "ply" {
        return Err(Error::UnsupportedFormat("missing 'ply' magic".into()));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_seen = false;
    loop {
        let line = read_header_line(reader, &mut line_no)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |message: &str| Error::Parse {
            line: line_no,
            message: message.to_string(),
        };
        match fields.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", fmt, version] => {
                if *fmt != "binary_little_endian" || *version != "1.0" {
                    return Err(Error::UnsupportedFormat(format!(
                        "PLY format {fmt} {version}"
                    )));
                }
                format_seen = true;
            }
            ["format", ..] => return Err(bad("malformed format line")),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?;
                let count = PlyType::parse(count).ok_or_else(|| bad("unknown list count type"))?;
                let item = PlyType::parse(item).ok_or_else(|| bad("unknown list item type"))?;
                if count.is_float() {
                    return Err(bad("list count type must be an integer"));
                }
                el.properties.push(PlyProperty::List {
                    name: name.to_string(),
                    count,
                    item,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?;
                let ty = PlyType::parse(ty).ok_or_else(|| bad("unknown property type"))?;
                el.properties.push(PlyProperty::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => return Err(bad("unrecognized header line")),
        }
    }
    if !format_seen {
        return Err(Error::UnsupportedFormat(
            "PLY header has no format line".into(),
        ));
    }
    Ok(elements)
}

fn skip_element<R: Read>(reader: &mut R, el: &PlyElement) -> Result<()> {
    let mut scratch = vec![0u8; 8];
    for _ in 0..el.count {
        for p in &el.properties {
            match p {
                PlyProperty::Scalar { ty, .. } => reader.read_exact(&mut scratch[..ty.size()])?,
                PlyProperty::List { count, item, .. } => {
                    reader.read_exact(&mut scratch[..count.size()])?;
                    let n = count.decode(&scratch) as usize;
                    std::io::copy(
                        &mut reader.by_ref().take((n * item.size()) as u64),
                        &mut std::io::sink(),
                    )?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_ply<T: Scalar>(path: impl AsRef<Path>) -> Result<PointBatch<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::from(e).at_path(path))?;
    parse_ply(BufReader::new(file)).map_err(|e| e.at_path(path))
}

/// Reads the `vertex` element of a binary little-endian PLY stream.
///
/// `x`, `y`, `z` must be float or double; every other scalar vertex
/// property becomes a feature column in header order. Other elements are
/// skipped with a warning.
pub fn parse_ply<T: Scalar, R: BufRead>(mut reader: R) -> Result<PointBatch<T>> {
    let elements = parse_ply_header(&mut reader)?;
    for el in &elements {
        if el.name != "vertex" {
            log::warn!("skipping PLY element {:?} ({} entries)", el.name, el.count);
            skip_element(&mut reader, el)?;
            continue;
        }
        if let Some(p) = el
            .properties
            .iter()
            .find(|p| matches!(p, PlyProperty::List { .. }))
        {
            return Err(Error::UnsupportedFormat(format!(
                "list property {:?} on vertex element",
                p.name()
            )));
        }
        let props: Vec<(&str, PlyType)> = el
            .properties
            .iter()
            .map(|p| match p {
                PlyProperty::Scalar { name, ty } => (name.as_str(), *ty),
                PlyProperty::List { .. } => unreachable!(),
            })
            .collect();
        let axis = |n: &str| -> Result<usize> {
            let i = props
                .iter()
                .position(|(name, _)| *name == n)
                .ok_or_else(|| {
                    Error::UnsupportedFormat(format!("vertex element has no {n} property"))
                })?;
            if !props[i].1.is_float() {
                return Err(Error::UnsupportedFormat(format!(
                    "vertex {n} must be float or double"
                )));
            }
            Ok(i)
        };
        let xyz = [axis("x")?, axis("y")?, axis("z")?];
        let feature_cols: Vec<usize> = (0..props.len()).filter(|i| !xyz.contains(i)).collect();
        if el.count == 0 {
            return Err(Error::EmptyFile);
        }

        let row_size: usize = props.iter().map(|(_, t)| t.size()).sum();
        let mut offsets = Vec::with_capacity(props.len());
        let mut acc = 0;
        for (_, t) in &props {
            offsets.push(acc);
            acc += t.size();
        }
        let mut row = vec![0u8; row_size];
        let mut raw = Vec::with_capacity(el.count);
        for _ in 0..el.count {
            reader.read_exact(&mut row)?;
            let value = |i: usize| T::of(props[i].1.decode(&row[offsets[i]..]));
            let mut p = RawPoint::new(0, xyz.map(value));
            if !feature_cols.is_empty() {
                p.features = Some(feature_cols.iter().map(|&i| value(i)).collect());
            }
            raw.push(p);
        }
        return validate_batch(raw);
    }
    Err(Error::UnsupportedFormat(
        "PLY file has no vertex element".into(),
    ))
}

/// Writes a binary little-endian PLY with `double` properties for `f64`
/// batches and `float` otherwise. Feature columns are named `f0, f1, ...`
/// unless names are given.
pub fn write_ply<T: Scalar, W: Write>(
    batch: &PointBatch<T>,
    feature_names: Option<&[String]>,
    writer: W,
) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let double = std::mem::size_of::<T>() == 8;
    let ty = if double { "double" } else { "float" };
    let width = batch.feature_width().unwrap_or(0);
    if let Some(names) = feature_names {
        if names.len() != width {
            return Err(Error::ShapeMismatch(format!(
                "{} feature names for {width} columns",
                names.len()
            )));
        }
    }
    writeln!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}",
        batch.count()
    )?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property {ty} {axis}")?;
    }
    for j in 0..width {
        match feature_names {
            Some(names) => writeln!(w, "property {ty} {}", names[j])?,
            None => writeln!(w, "property {ty} f{j}")?,
        }
    }
    writeln!(w, "end_header")?;
    let mut put = |v: T| -> std::io::Result<()> {
        if double {
            w.write_all(&v.as_f64().to_le_bytes())
        } else {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())
        }
    };
    for (i, p) in batch.coords().iter().enumerate() {
        for v in p {
            put(*v)?;
        }
        if let Some(f) = batch.features() {
            for v in f.row(i) {
                put(*v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
