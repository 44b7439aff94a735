//! Surface scans, cross-section profiles and the portable file formats.
//!
//! Two scan formats are supported:
//!
//! * `grid-csv`: `key=value` header lines (comma separated pairs allowed)
//!   carrying `x_res`, `y_res` and the source metadata, followed by one
//!   comma-separated line per grid row. Lines starting with `#` are ignored.
//! * `grid-bin`: magic `STRI`, a version byte, then little-endian
//!   `rows: u32`, `cols: u32`, `x_res: f64`, `y_res: f64`, a 12-byte meta
//!   block and finally `rows * cols` row-major `f32` heights.
//!
//! Signatures are stored as two-column CSV (`position_um,depth_um`) preceded
//! by `# key=value` comment lines.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::extraction::Signature;
use crate::meta::{Direction, MetaError, Side, SizeClass, SourceMeta};

const MAGIC: &[u8; 4] = b"STRI";
const BIN_VERSION: u8 = 1;
const BIN_HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8 + 8 + 12;

/// Where in a file a format error was detected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Line { line: usize, column: Option<usize> },
    Cell { row: usize, col: usize },
    Byte(usize),
    Header,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line { line, column: None } => write!(f, "line {line}"),
            Location::Line { line, column: Some(c) } => write!(f, "line {line}, column {c}"),
            Location::Cell { row, col } => write!(f, "cell (row {row}, col {col})"),
            Location::Byte(b) => write!(f, "byte offset {b}"),
            Location::Header => write!(f, "header"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProfileIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error at {location}: {message}")]
    Format { location: Location, message: String },
    #[error("invalid data: {0}")]
    Invalid(String),
}

impl From<MetaError> for ProfileIoError {
    fn from(e: MetaError) -> Self {
        ProfileIoError::Invalid(e.to_string())
    }
}

fn format_err(location: Location, message: impl Into<String>) -> ProfileIoError {
    ProfileIoError::Format { location, message: message.into() }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ProfileIoError + '_ {
    move |source| ProfileIoError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanFormat {
    GridCsv,
    GridBin,
}

impl FromStr for ScanFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grid-csv" => Ok(ScanFormat::GridCsv),
            "grid-bin" => Ok(ScanFormat::GridBin),
            other => Err(format!("unknown scan format {other:?}")),
        }
    }
}

impl ScanFormat {
    /// Guesses the format from a file extension (`.csv` or `.bin`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(ScanFormat::GridCsv),
            "bin" | "stri" => Some(ScanFormat::GridBin),
            _ => None,
        }
    }
}

/// A rectangular heightmap. Heights are micrometers, stored row-major.
///
/// Rows run along the striations, columns across them, so a single row is a
/// cross-section of the mark.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceScan {
    rows: usize,
    cols: usize,
    heights: Vec<f32>,
    x_resolution: f64,
    y_resolution: f64,
    meta: SourceMeta,
}

impl SurfaceScan {
    pub fn new(
        rows: usize,
        cols: usize,
        heights: Vec<f32>,
        x_resolution: f64,
        y_resolution: f64,
        meta: SourceMeta,
    ) -> Result<Self, ProfileIoError> {
        if rows < 1 || cols < 2 {
            return Err(ProfileIoError::Invalid(format!(
                "grid must have at least 1 row and 2 columns, got {rows}x{cols}"
            )));
        }
        if heights.len() != rows * cols {
            return Err(ProfileIoError::Invalid(format!(
                "expected {} heights for a {rows}x{cols} grid, got {}",
                rows * cols,
                heights.len()
            )));
        }
        if !(x_resolution > 0.0 && x_resolution.is_finite()) || !(y_resolution > 0.0 && y_resolution.is_finite()) {
            return Err(ProfileIoError::Invalid(format!(
                "resolutions must be positive, got x={x_resolution} y={y_resolution}"
            )));
        }
        if let Some(i) = heights.iter().position(|h| !h.is_finite()) {
            return Err(format_err(Location::Cell { row: i / cols, col: i % cols }, "non-finite height"));
        }
        meta.validate()?;
        Ok(SurfaceScan { rows, cols, heights, x_resolution, y_resolution, meta })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.heights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn x_resolution(&self) -> f64 {
        self.x_resolution
    }

    pub fn y_resolution(&self) -> f64 {
        self.y_resolution
    }

    pub fn meta(&self) -> &SourceMeta {
        &self.meta
    }
}

/// A 1-D cross-section of a scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    values: Vec<f64>,
    pitch: f64,
    meta: SourceMeta,
}

impl Profile {
    pub fn new(values: Vec<f64>, pitch: f64, meta: SourceMeta) -> Result<Self, ProfileIoError> {
        if values.len() < 2 {
            return Err(ProfileIoError::Invalid(format!("profile needs at least 2 samples, got {}", values.len())));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(ProfileIoError::Invalid(format!("pitch must be positive, got {pitch}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ProfileIoError::Invalid(format!("non-finite profile value at index {i}")));
        }
        Ok(Profile { values, pitch, meta })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn meta(&self) -> &SourceMeta {
        &self.meta
    }
}

/// Default cross-section: the vertical middle of the mark.
pub const DEFAULT_ROW_FRACTION: f64 = 0.5;

/// Returns row `round(row_fraction * (rows - 1))` as a profile with
/// `pitch = x_resolution`. The fraction is clamped to `[0, 1]`.
pub fn extract_profile(scan: &SurfaceScan, row_fraction: f64) -> Profile {
    let f = if row_fraction.is_nan() { DEFAULT_ROW_FRACTION } else { row_fraction.clamp(0.0, 1.0) };
    let r = (f * (scan.rows - 1) as f64).round() as usize;
    Profile { values: scan.row(r).iter().map(|&h| h as f64).collect(), pitch: scan.x_resolution, meta: scan.meta }
}

pub fn load_scan(path: &Path, format: ScanFormat) -> Result<SurfaceScan, ProfileIoError> {
    match format {
        ScanFormat::GridCsv => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            parse_grid_csv(&text)
        }
        ScanFormat::GridBin => {
            let bytes = fs::read(path).map_err(io_err(path))?;
            decode_grid_bin(&bytes)
        }
    }
}

pub fn save_scan(scan: &SurfaceScan, path: &Path, format: ScanFormat) -> Result<(), ProfileIoError> {
    let bytes = match format {
        ScanFormat::GridCsv => render_grid_csv(scan).into_bytes(),
        ScanFormat::GridBin => encode_grid_bin(scan),
    };
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn parse_grid_csv(text: &str) -> Result<SurfaceScan, ProfileIoError> {
    let mut x_res = None;
    let mut y_res = None;
    let mut meta = SourceMeta::default();
    let mut heights = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.contains('=') {
            if rows > 0 {
                return Err(format_err(Location::Line { line: line_no, column: None }, "header line after grid data"));
            }
            for (col, pair) in line.split(',').enumerate() {
                let loc = Location::Line { line: line_no, column: Some(col + 1) };
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| format_err(loc.clone(), format!("expected key=value, got {pair:?}")))?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "x_res" | "y_res" => {
                        let v: f64 =
                            value.parse().map_err(|_| format_err(loc.clone(), format!("bad resolution {value:?}")))?;
                        if key == "x_res" {
                            x_res = Some(v);
                        } else {
                            y_res = Some(v);
                        }
                    }
                    _ => {
                        let known = meta.apply_pair(key, value).map_err(|e| format_err(loc.clone(), e.0))?;
                        if !known {
                            return Err(format_err(loc, format!("unknown header key {key:?}")));
                        }
                    }
                }
            }
            continue;
        }

        let start = heights.len();
        for (col, cell) in line.split(',').enumerate() {
            let v: f32 = cell.trim().parse().map_err(|_| {
                format_err(
                    Location::Line { line: line_no, column: Some(col + 1) },
                    format!("cannot parse height {cell:?}"),
                )
            })?;
            if !v.is_finite() {
                return Err(format_err(Location::Cell { row: rows, col }, format!("non-finite height {cell:?}")));
            }
            heights.push(v);
        }
        let width = heights.len() - start;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(format_err(
                    Location::Line { line: line_no, column: None },
                    format!("row {rows} has {width} columns, expected {c}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }

    let x_res = x_res.ok_or_else(|| format_err(Location::Header, "missing x_res"))?;
    let y_res = y_res.ok_or_else(|| format_err(Location::Header, "missing y_res"))?;
    let cols = cols.ok_or_else(|| format_err(Location::Header, "no grid rows"))?;
    SurfaceScan::new(rows, cols, heights, x_res, y_res, meta)
}

pub fn render_grid_csv(scan: &SurfaceScan) -> String {
    let mut out = String::new();
    out.push_str(&format!("x_res={}\ny_res={}\n", scan.x_resolution, scan.y_resolution));
    for (k, v) in scan.meta.to_pairs() {
        out.push_str(&format!("{k}={v}\n"));
    }
    for r in 0..scan.rows {
        let row: Vec<String> = scan.row(r).iter().map(|h| h.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn encode_grid_bin(scan: &SurfaceScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(BIN_HEADER_LEN + 4 * scan.heights.len());
    out.extend_from_slice(MAGIC);
    out.push(BIN_VERSION);
    out.extend_from_slice(&(scan.rows as u32).to_le_bytes());
    out.extend_from_slice(&(scan.cols as u32).to_le_bytes());
    out.extend_from_slice(&scan.x_resolution.to_le_bytes());
    out.extend_from_slice(&scan.y_resolution.to_le_bytes());
    let m = &scan.meta;
    out.extend_from_slice(&m.tool_id.to_le_bytes());
    out.push(match m.side {
        Side::A => 0,
        Side::B => 1,
    });
    out.push(m.angle_deg.unwrap_or(0) as u8);
    out.push(match m.direction {
        None => 0,
        Some(Direction::Push) => 1,
        Some(Direction::Pull) => 2,
    });
    out.extend_from_slice(&m.replicate.to_le_bytes());
    out.push(match m.size_class {
        None => 0,
        Some(SizeClass::Small) => 1,
        Some(SizeClass::Large) => 2,
    });
    for h in &scan.heights {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProfileIoError> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(Location::Byte(self.pos), "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ProfileIoError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ProfileIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ProfileIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_grid_bin(bytes: &[u8]) -> Result<SurfaceScan, ProfileIoError> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(format_err(Location::Byte(0), "bad magic, expected \"STRI\""));
    }
    let version = rd.u8()?;
    if version != BIN_VERSION {
        return Err(format_err(Location::Byte(4), format!("unsupported version {version}")));
    }
    let rows = rd.u32()? as usize;
    let cols = rd.u32()? as usize;
    let x_res = rd.f64()?;
    let y_res = rd.f64()?;
    let meta_at = rd.pos;
    let tool_id = rd.u32()?;
    let side = match rd.u8()? {
        0 => Side::A,
        1 => Side::B,
        v => return Err(format_err(Location::Byte(meta_at + 4), format!("bad side code {v}"))),
    };
    let angle_deg = match rd.u8()? {
        0 => None,
        a => Some(a as u32),
    };
    let direction = match rd.u8()? {
        0 => None,
        1 => Some(Direction::Push),
        2 => Some(Direction::Pull),
        v => return Err(format_err(Location::Byte(meta_at + 6), format!("bad direction code {v}"))),
    };
    let replicate = rd.u32()?;
    let size_class = match rd.u8()? {
        0 => None,
        1 => Some(SizeClass::Small),
        2 => Some(SizeClass::Large),
        v => return Err(format_err(Location::Byte(meta_at + 11), format!("bad size code {v}"))),
    };
    let n = rows.checked_mul(cols).ok_or_else(|| format_err(Location::Byte(5), "grid dimensions overflow"))?;
    let expected = BIN_HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(format_err(
            Location::Byte(bytes.len().min(expected)),
            format!("expected {expected} bytes for a {rows}x{cols} grid, found {}", bytes.len()),
        ));
    }
    let heights: Vec<f32> =
        bytes[BIN_HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let meta = SourceMeta { tool_id, side, angle_deg, direction, replicate, size_class };
    SurfaceScan::new(rows, cols, heights, x_res, y_res, meta)
}

pub fn save_signature(sig: &Signature, path: &Path) -> Result<(), ProfileIoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_signature(sig, &mut w).map_err(io_err(path))
}

pub fn write_signature<W: Write>(sig: &Signature, w: &mut W) -> io::Result<()> {
    writeln!(w, "# pitch_um={}", sig.pitch())?;
    for (k, v) in sig.meta().to_pairs() {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "position_um,depth_um")?;
    for (i, v) in sig.values().iter().enumerate() {
        writeln!(w, "{},{}", i as f64 * sig.pitch(), v)?;
    }
    w.flush()
}

pub fn load_signature(path: &Path) -> Result<Signature, ProfileIoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_signature_csv(&text)
}

pub fn parse_signature_csv(text: &str) -> Result<Signature, ProfileIoError> {
    let mut meta = SourceMeta::default();
    let mut pitch = None;
    let mut positions = Vec::new();
    let mut values = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                if k == "pitch_um" {
                    pitch = Some(v.parse::<f64>().map_err(|_| {
                        format_err(Location::Line { line: line_no, column: None }, format!("bad pitch {v:?}"))
                    })?);
                } else {
                    meta.apply_pair(k, v)
                        .map_err(|e| format_err(Location::Line { line: line_no, column: None }, e.0))?;
                }
            }
            continue;
        }
        if line.starts_with("position_um") {
            continue;
        }
        let mut cells = line.split(',');
        let mut next = |col: usize| -> Result<f64, ProfileIoError> {
            let loc = Location::Line { line: line_no, column: Some(col) };
            let cell = cells.next().ok_or_else(|| format_err(loc.clone(), "missing column"))?.trim();
            let v: f64 = cell.parse().map_err(|_| format_err(loc.clone(), format!("cannot parse {cell:?}")))?;
            if !v.is_finite() {
                return Err(format_err(loc, format!("non-finite value {cell:?}")));
            }
            Ok(v)
        };
        positions.push(next(1)?);
        values.push(next(2)?);
    }
    let pitch = match pitch {
        Some(p) => p,
        None if positions.len() >= 2 => positions[1] - positions[0],
        None => return Err(format_err(Location::Header, "cannot determine pitch")),
    };
    Signature::new(values, pitch, meta).map_err(|e| ProfileIoError::Invalid(e.to_string()))
}
