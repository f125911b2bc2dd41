//! On-disk formats: 8-bit binary PGM, `.dije` field snapshots, cluster CSV.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::estimator::DenseJacobianField;
use crate::field::{GridShape, VectorField};
use crate::flow::Frame;
use crate::selfrecog::{ClusterModel, SelfMask};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(kind: &'static str, reason: impl Into<String>) -> IoError {
    IoError::Format {
        kind,
        reason: reason.into(),
    }
}

pub fn encode_pgm(shape: GridShape, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", shape.width(), shape.height()).into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn frame_bytes(frame: &Frame) -> Vec<u8> {
    frame
        .intensities()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn mask_bytes(mask: &SelfMask) -> Vec<u8> {
    mask.as_slice()
        .iter()
        .map(|&m| if m { 255 } else { 0 })
        .collect()
}

pub fn write_frame_pgm(path: &Path, frame: &Frame) -> Result<(), IoError> {
    fs::write(path, encode_pgm(frame.shape(), &frame_bytes(frame))).map_err(io_err(path))
}

pub fn write_mask_pgm(path: &Path, mask: &SelfMask) -> Result<(), IoError> {
    fs::write(path, encode_pgm(mask.shape(), &mask_bytes(mask))).map_err(io_err(path))
}

/// Parse an 8-bit P5 image into its shape and raw bytes.
pub fn decode_pgm(data: &[u8]) -> Result<(GridShape, Vec<u8>), IoError> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("pgm", "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(format_err("pgm", format!("bad magic {:?}", tokens[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err("pgm", format!("bad number {s:?}")))
    };
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(format_err("pgm", format!("unsupported maxval {maxval}")));
    }
    let shape = GridShape::new(w, h).map_err(|e| format_err("pgm", e.to_string()))?;
    let body = &data[pos + 1..];
    if body.len() < shape.len() {
        return Err(format_err("pgm", "truncated pixel data"));
    }
    Ok((shape, body[..shape.len()].to_vec()))
}

pub fn read_frame_pgm(path: &Path, index: u64) -> Result<Frame, IoError> {
    let data = fs::read(path).map_err(io_err(path))?;
    let (shape, bytes) = decode_pgm(&data)?;
    Frame::new(
        shape,
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        index,
    )
    .map_err(|e| format_err("pgm", e.to_string()))
}

pub fn read_mask_pgm(path: &Path) -> Result<SelfMask, IoError> {
    let data = fs::read(path).map_err(io_err(path))?;
    let (shape, bytes) = decode_pgm(&data)?;
    SelfMask::from_vec(shape, bytes.iter().map(|&b| b >= 128).collect())
        .map_err(|e| format_err("pgm", e.to_string()))
}

const MAGIC: &[u8; 4] = b"DIJE";
const HEADER_LEN: usize = 20;

/// `DIJE` magic, then width, height, joints and frame index as little-endian
/// `u32`, then each pixel's `3N` little-endian `f64` state in row-major order.
pub fn encode_field(field: &DenseJacobianField, frame_index: u32) -> Vec<u8> {
    let shape = field.shape();
    let values = field.state().as_slice();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    out.extend_from_slice(MAGIC);
    for v in [
        shape.width() as u32,
        shape.height() as u32,
        field.n_joints() as u32,
        frame_index,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(data: &[u8]) -> Result<(DenseJacobianField, u32), IoError> {
    if data.len() < HEADER_LEN || &data[..4] != MAGIC {
        return Err(format_err("dije", "missing DIJE header"));
    }
    let word =
        |k: usize| u32::from_le_bytes(data[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
    let (w, h, n, frame) = (
        word(0) as usize,
        word(1) as usize,
        word(2) as usize,
        word(3),
    );
    let shape = GridShape::new(w, h).map_err(|e| format_err("dije", e.to_string()))?;
    let expected = shape.len() * 3 * n * 8;
    let body = &data[HEADER_LEN..];
    if n == 0 || body.len() != expected {
        return Err(format_err(
            "dije",
            format!("expected {expected} payload bytes, found {}", body.len()),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let state = VectorField::from_vec(shape, 3 * n, values)
        .map_err(|e| format_err("dije", e.to_string()))?;
    let field =
        DenseJacobianField::from_state(n, state).map_err(|e| format_err("dije", e.to_string()))?;
    Ok((field, frame))
}

pub fn write_field(
    path: &Path,
    field: &DenseJacobianField,
    frame_index: u32,
) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_field(field, frame_index))
        .map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_field(path: &Path) -> Result<(DenseJacobianField, u32), IoError> {
    decode_field(&fs::read(path).map_err(io_err(path))?)
}

/// One row per cluster: center components, eval, is_self.
pub fn cluster_csv(model: &ClusterModel) -> String {
    let dim = model.centers.first().map_or(0, Vec::len);
    let mut s: String = (0..dim).map(|d| format!("c{d},")).collect();
    s.push_str("eval,is_self\n");
    for (i, (c, e)) in model.centers.iter().zip(&model.evals).enumerate() {
        for v in c {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!("{e},{}\n", model.is_self(i) as u8));
    }
    s
}
