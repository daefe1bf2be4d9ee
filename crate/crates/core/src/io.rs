//! File interchange: NPY v1.0 tensors, CSV reports and JSON training configs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const NPY_ALIGN: usize = 64;

fn format_err(field: &str, detail: impl std::fmt::Display) -> Error {
    Error::Format {
        field: field.to_string(),
        detail: detail.to_string(),
    }
}

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpyDtype {
    F4,
    F8,
}

impl NpyDtype {
    fn descr(self) -> &'static str {
        match self {
            NpyDtype::F4 => "<f4",
            NpyDtype::F8 => "<f8",
        }
    }

    fn size(self) -> usize {
        match self {
            NpyDtype::F4 => 4,
            NpyDtype::F8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: NpyDtype,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

impl NpyHeader {
    fn dict(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let shape = match dims.len() {
            1 => format!("({},)", dims[0]),
            _ => format!("({})", dims.join(", ")),
        };
        format!(
            "{{'descr': '{}', 'fortran_order': {}, 'shape': {}, }}",
            self.dtype.descr(),
            if self.fortran_order { "True" } else { "False" },
            shape
        )
    }
}

/// Text following `'key':` in a header dict, with leading spaces removed.
fn header_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}':");
    let start = dict
        .find(&needle)
        .ok_or_else(|| format_err(key, "missing from header"))?;
    Ok(dict[start + needle.len()..].trim_start())
}

fn parse_header(dict: &str) -> Result<NpyHeader> {
    let descr = header_value(dict, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| format_err("descr", "expected a quoted dtype string"))?;
    let dtype = match descr {
        "<f4" => NpyDtype::F4,
        "<f8" => NpyDtype::F8,
        other => return Err(format_err("descr", format!("unsupported dtype '{other}'"))),
    };

    let fortran = header_value(dict, "fortran_order")?;
    let fortran_order = if fortran.starts_with("False") {
        false
    } else if fortran.starts_with("True") {
        true
    } else {
        return Err(format_err("fortran_order", "expected True or False"));
    };
    if fortran_order {
        return Err(format_err("fortran_order", "Fortran-ordered arrays are not supported"));
    }

    let shape_txt = header_value(dict, "shape")?;
    let inner = shape_txt
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| format_err("shape", "expected a tuple"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| format_err("shape", format!("bad extent '{s}': {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(NpyHeader {
        dtype,
        fortran_order,
        shape,
    })
}

pub fn encode_npy(t: &Tensor, dtype: NpyDtype) -> Vec<u8> {
    let header = NpyHeader {
        dtype,
        fortran_order: false,
        shape: t.shape().to_vec(),
    };
    let mut dict = header.dict();
    // magic(6) + version(2) + u16 length(2) + dict + '\n' fills a multiple of 64
    let unpadded = NPY_MAGIC.len() + 4 + dict.len() + 1;
    dict.extend(std::iter::repeat_n(' ', (NPY_ALIGN - unpadded % NPY_ALIGN) % NPY_ALIGN));
    dict.push('\n');

    let mut out = Vec::with_capacity(NPY_MAGIC.len() + 4 + dict.len() + t.len() * dtype.size());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for &v in t.data() {
        match dtype {
            NpyDtype::F4 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            NpyDtype::F8 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_npy(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(format_err("magic", "file does not start with \\x93NUMPY"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(format_err(
            "version",
            format!("only version 1.0 is supported, found {}.{}", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    let dict = bytes
        .get(10..data_start)
        .ok_or_else(|| format_err("header_len", "header runs past end of file"))?;
    let dict = std::str::from_utf8(dict).map_err(|e| format_err("header", e))?;
    let header = parse_header(dict)?;

    let count: usize = header.shape.iter().product();
    let payload = &bytes[data_start..];
    let expected = count * header.dtype.size();
    if payload.len() != expected {
        return Err(format_err(
            "data",
            format!("expected {expected} bytes for shape {:?}, found {}", header.shape, payload.len()),
        ));
    }
    let data: Vec<f64> = match header.dtype {
        NpyDtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        NpyDtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::from_vec(&header.shape, data)
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_npy(&fs::read(path)?)
}

pub fn write_npy(path: impl AsRef<Path>, t: &Tensor, dtype: NpyDtype) -> Result<()> {
    fs::write(path, encode_npy(t, dtype))?;
    Ok(())
}

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// 17 significant digits, enough to re-parse to the same double.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// CSV with LF line endings. Every row must have the header's arity.
pub fn write_csv_to<W: Write>(out: W, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != header.len()) {
        return Err(format_err(
            "row",
            format!("row {i} has {} fields, header has {}", row.len(), header.len()),
        ));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let csv_err = |e: csv::Error| format_err("csv", e);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv_to(&mut buf, header, rows)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Parses a training config from JSON text; missing keys take their
/// defaults, unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    if !value.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    let cfg: TrainConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    parse_config(&fs::read_to_string(path)?)
}
