//! Matrix files and ground-truth manifests.
//!
//! Two matrix formats are supported:
//!
//! * `.npy` arrays, version 1.0, 2-D, C order, little-endian `f4` or `f8`.
//!   `f4` data is widened to `f64` on load; writes are always `f8`.
//! * CSV with one row per line and comma-separated decimal values.
//!
//! Manifests are JSON documents naming the gallery size, the relevant gallery
//! items per query and, optionally, a list of model score files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::matrix::{EmbeddingMatrix, ScoreMatrix};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Array,
    Csv,
}

impl MatrixFormat {
    /// Picks the format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("npy") => Ok(MatrixFormat::Array),
            Some(e) if e.eq_ignore_ascii_case("csv") => Ok(MatrixFormat::Csv),
            _ => Err(Error::Format {
                path: path.to_owned(),
                location: "extension".into(),
                message: "expected a .npy or .csv file".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A raw 2-D matrix as read from disk, before it is given a role.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub dtype: Dtype,
}

impl DenseMatrix {
    pub fn into_scores(self) -> Result<ScoreMatrix> {
        ScoreMatrix::new(self.rows, self.cols, self.data)
    }

    pub fn into_embeddings(self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(self.rows, self.cols, self.data)
    }
}

/// Anything that can be written as a row-major matrix.
pub trait MatrixData {
    fn dims(&self) -> (usize, usize);
    fn values(&self) -> &[f64];
}

impl MatrixData for ScoreMatrix {
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }

    fn values(&self) -> &[f64] {
        self.as_slice()
    }
}

impl MatrixData for EmbeddingMatrix {
    fn dims(&self) -> (usize, usize) {
        (self.n_rows(), self.n_cols())
    }

    fn values(&self) -> &[f64] {
        self.as_slice()
    }
}

impl MatrixData for DenseMatrix {
    fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn values(&self) -> &[f64] {
        &self.data
    }
}

fn format_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_owned(),
        location: location.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn check_finite(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) if cols > 0 => Err(Error::Validation(format!(
            "{}: entry ({}, {}) is not finite: {}",
            path.display(),
            pos / cols,
            pos % cols,
            data[pos]
        ))),
        _ => {
            if rows == 0 || cols == 0 {
                return Err(format_err(path, "shape", format!("empty matrix {rows}x{cols}")));
            }
            Ok(())
        }
    }
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let m = match format {
        MatrixFormat::Array => decode_array(&bytes, path)?,
        MatrixFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|e| format_err(path, format!("byte {}", e.utf8_error().valid_up_to()), "not UTF-8"))?;
            decode_csv(&text, path)?
        }
    };
    check_finite(path, m.rows, m.cols, &m.data)?;
    Ok(m)
}

/// Loads a matrix, picking the format from the extension.
pub fn load_matrix_auto(path: &Path) -> Result<DenseMatrix> {
    load_matrix(path, MatrixFormat::from_path(path)?)
}

pub fn load_scores(path: &Path) -> Result<ScoreMatrix> {
    load_matrix_auto(path)?.into_scores()
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    load_matrix_auto(path)?.into_embeddings()
}

pub fn write_matrix<M: MatrixData + ?Sized>(m: &M, path: &Path, format: MatrixFormat) -> Result<()> {
    let (rows, cols) = m.dims();
    let bytes = match format {
        MatrixFormat::Array => encode_array(rows, cols, m.values()),
        MatrixFormat::Csv => encode_csv(cols, m.values()).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_matrix_auto<M: MatrixData + ?Sized>(m: &M, path: &Path) -> Result<()> {
    write_matrix(m, path, MatrixFormat::from_path(path)?)
}

// ---------------------------------------------------------------------------
// .npy

/// Serializes a row-major `f64` matrix as a version 1.0 `.npy` file.
pub fn encode_array(rows: usize, cols: usize, data: &[f64]) -> Vec<u8> {
    let dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    // Pad with spaces so the payload starts on an aligned offset; the header
    // ends with a newline.
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    let header_len = dict.len() + pad + 1;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header_len + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
enum PyValue {
    Str(String),
    Bool(bool),
    Int(usize),
    Tuple(Vec<PyValue>),
}

/// Parser for the Python dict literal in a `.npy` header. Offsets are
/// reported relative to the start of the file.
struct HeaderParser<'a> {
    src: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        format_err(self.path, format!("byte {}", PREAMBLE_LEN + self.pos), msg)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = self.peek().ok_or_else(|| self.err("unexpected end of header"))?;
        if quote != b'\'' && quote != b'"' {
            return Err(self.err("expected a quoted string"));
        }
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn value(&mut self) -> Result<PyValue> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(PyValue::Str),
            Some(b'(') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    if self.peek() == Some(b')') {
                        self.pos += 1;
                        break;
                    }
                    items.push(self.value()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')' in tuple")),
                    }
                }
                Ok(PyValue::Tuple(items))
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
                text.parse()
                    .map(PyValue::Int)
                    .map_err(|_| self.err(format!("integer {text} out of range")))
            }
            Some(_) => {
                for (word, v) in [("True", true), ("False", false)] {
                    if self.src[self.pos..].starts_with(word.as_bytes()) {
                        self.pos += word.len();
                        return Ok(PyValue::Bool(v));
                    }
                }
                Err(self.err("unsupported value in header"))
            }
            None => Err(self.err("unexpected end of header")),
        }
    }

    fn dict(&mut self) -> Result<Vec<(String, PyValue, usize)>> {
        self.expect(b'{')?;
        let mut entries = Vec::new();
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            self.skip_ws();
            let at = self.pos;
            let key = self.string()?;
            self.expect(b':')?;
            let value = self.value()?;
            entries.push((key, value, at));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}' in header dict")),
            }
        }
        Ok(entries)
    }
}

/// Parses a `.npy` byte buffer. `path` is only used in error messages.
pub fn decode_array(bytes: &[u8], path: &Path) -> Result<DenseMatrix> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(path, "byte 0", "missing \\x93NUMPY magic"));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(format_err(path, "byte 6", "truncated preamble"));
    }
    if bytes[6..8] != [1, 0] {
        return Err(format_err(
            path,
            "byte 6",
            format!("unsupported format version {}.{}", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE_LEN + header_len;
    if bytes.len() < data_start {
        return Err(format_err(
            path,
            "byte 8",
            format!("header length {header_len} runs past end of file ({} bytes)", bytes.len()),
        ));
    }

    let mut parser = HeaderParser {
        src: &bytes[PREAMBLE_LEN..data_start],
        pos: 0,
        path,
    };
    let entries = parser.dict()?;
    let field = |name: &str| entries.iter().find(|(k, _, _)| k == name);
    let at = |off: usize| format!("byte {}", PREAMBLE_LEN + off);

    let dtype = match field("descr") {
        Some((_, PyValue::Str(d), _)) if d == "<f8" => Dtype::F64,
        Some((_, PyValue::Str(d), _)) if d == "<f4" => Dtype::F32,
        Some((_, v, off)) => {
            return Err(format_err(path, at(*off), format!("unsupported dtype {v:?}; need '<f4' or '<f8'")))
        }
        None => return Err(format_err(path, "header", "missing 'descr'")),
    };
    match field("fortran_order") {
        Some((_, PyValue::Bool(false), _)) => {}
        Some((_, PyValue::Bool(true), off)) => {
            return Err(format_err(path, at(*off), "fortran_order arrays are not supported"))
        }
        Some((_, _, off)) => return Err(format_err(path, at(*off), "fortran_order must be a bool")),
        None => return Err(format_err(path, "header", "missing 'fortran_order'")),
    }
    let (rows, cols) = match field("shape") {
        Some((_, PyValue::Tuple(dims), off)) => match dims.as_slice() {
            [PyValue::Int(r), PyValue::Int(c)] => (*r, *c),
            _ => return Err(format_err(path, at(*off), format!("expected a 2-D shape, got {dims:?}"))),
        },
        Some((_, _, off)) => return Err(format_err(path, at(*off), "shape must be a tuple")),
        None => return Err(format_err(path, "header", "missing 'shape'")),
    };

    let payload = &bytes[data_start..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| format_err(path, "header", "shape overflows"))?;
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("byte {data_start}"),
            format!("payload is {} bytes, shape ({rows}, {cols}) needs {expected}", payload.len()),
        ));
    }
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
    };
    Ok(DenseMatrix {
        rows,
        cols,
        data,
        dtype,
    })
}

// ---------------------------------------------------------------------------
// CSV

pub fn decode_csv(text: &str, path: &Path) -> Result<DenseMatrix> {
    let mut cols = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for (j, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_err(
                    path,
                    format!("line {}", lineno + 1),
                    format!("field {} is not a number: {:?}", j + 1, field.trim()),
                )
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(format_err(
                    path,
                    format!("line {}", lineno + 1),
                    format!("row has {width} fields, expected {c}"),
                ))
            }
            Some(_) => {}
        }
        rows += 1;
    }
    Ok(DenseMatrix {
        rows,
        cols: cols.unwrap_or(0),
        data,
        dtype: Dtype::F64,
    })
}

/// Shortest round-trip decimal representation of every value.
pub fn encode_csv(cols: usize, data: &[f64]) -> String {
    let mut out = String::new();
    for row in data.chunks_exact(cols) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RelevantSpec {
    /// `[[0], [1, 4], ...]`, one entry per query in order.
    List(Vec<Vec<usize>>),
    /// `{"0": [0], "1": [1, 4]}`, keyed by query index.
    Map(BTreeMap<String, Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    pub gallery: usize,
    pub relevant: RelevantSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelEntry>,
}

impl Manifest {
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let relevant = match &self.relevant {
            RelevantSpec::List(v) => v.clone(),
            RelevantSpec::Map(m) => {
                let mut by_query = BTreeMap::new();
                for (k, v) in m {
                    let q: usize = k
                        .trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("query key {k:?} is not an index")))?;
                    by_query.insert(q, v.clone());
                }
                let n = self
                    .queries
                    .unwrap_or_else(|| by_query.keys().next_back().map_or(0, |&q| q + 1));
                if let Some(&q) = by_query.keys().find(|&&q| q >= n) {
                    return Err(Error::invalid(format!("query {q} beyond declared count {n}")));
                }
                (0..n)
                    .map(|q| {
                        by_query
                            .remove(&q)
                            .ok_or_else(|| Error::invalid(format!("query {q} has no relevant entry")))
                    })
                    .collect::<Result<_>>()?
            }
        };
        if let Some(n) = self.queries {
            if n != relevant.len() {
                return Err(Error::invalid(format!(
                    "manifest declares {n} queries but lists {}",
                    relevant.len()
                )));
            }
        }
        GroundTruth::new(self.gallery, relevant)
    }

    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        Self {
            queries: Some(gt.n_queries()),
            gallery: gt.gallery_size(),
            relevant: RelevantSpec::List((0..gt.n_queries()).map(|q| gt.relevant(q).to_vec()).collect()),
            models: Vec::new(),
        }
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        format_err(path, format!("line {} column {}", e.line(), e.column()), e.to_string())
    })
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    }
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    read_manifest(path)?.ground_truth().map_err(|e| with_path(path, e))
}

/// Reads a manifest and resolves model paths against its directory,
/// checking that every model file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut m = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for entry in &mut m.models {
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        if !entry.path.is_file() {
            return Err(Error::Validation(format!(
                "{}: model {:?} file {} does not exist",
                path.display(),
                entry.name,
                entry.path.display()
            )));
        }
    }
    Ok(m)
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}
