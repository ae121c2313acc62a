//! Grayscale portable float maps (`Pf`). A negative scale marks a
//! little-endian payload; rows are stored bottom to top.

use std::path::Path;

use tdstereo_tensor::Tensor;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};

fn malformed(offset: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        what: "PFM",
        offset,
        msg: msg.into(),
    }
}

/// Reads the next whitespace-delimited header token starting at `*pos`.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<(usize, &'a str)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed(start, "unexpected end of header"));
    }
    let s = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| malformed(start, "header is not ASCII"))?;
    Ok((start, s))
}

/// Decodes a PFM into an `H×W` tensor (top row first).
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let (at, magic) = token(bytes, &mut pos)?;
    match magic {
        "Pf" => {}
        "PF" => return Err(malformed(at, "colour PFM (PF) is not supported; expected Pf")),
        other => return Err(malformed(at, format!("expected 'Pf', found '{other}'"))),
    }
    let dim = |pos: &mut usize| -> Result<usize> {
        let (at, t) = token(bytes, pos)?;
        match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(malformed(at, format!("invalid dimension '{t}'"))),
        }
    };
    let w = dim(&mut pos)?;
    let h = dim(&mut pos)?;
    let (at, s) = token(bytes, &mut pos)?;
    let scale: f64 = s
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite() && *v != 0.0)
        .ok_or_else(|| malformed(at, format!("invalid scale '{s}'")))?;
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed(pos, "missing separator after scale"));
    }
    pos += 1;
    let n = w * h;
    if bytes.len() - pos != 4 * n {
        return Err(malformed(
            pos,
            format!("payload has {} bytes, expected {} for {w}×{h}", bytes.len() - pos, 4 * n),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; n];
    for (k, chunk) in bytes[pos..].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (k / w, k % w);
        data[(h - 1 - row) * w + col] = v as f64;
    }
    Ok(Tensor::new(vec![h, w], data)?)
}

/// Encodes an `H×W` tensor as little-endian PFM (values rounded to 32-bit).
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 2 || t.is_empty() {
        return Err(Error::Invalid(format!("PFM needs a non-empty H×W map, got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for col in 0..w {
            out.extend_from_slice(&(t.data()[row * w + col] as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Malformed { offset, msg, .. } => Error::Format {
            path: path.to_path_buf(),
            msg: format!("malformed PFM at byte {offset}: {msg}"),
        },
        other => other,
    })
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a disparity map; non-finite or negative entries are invalid.
pub fn read_disparity(path: &Path) -> Result<DisparityMap> {
    let t = read(path)?;
    let valid = t.map(|v| if v.is_finite() && v >= 0.0 { 1.0 } else { 0.0 });
    let values = Tensor::new(
        t.shape().to_vec(),
        t.data()
            .iter()
            .zip(valid.data())
            .map(|(&v, &m)| if m == 1.0 { v } else { 0.0 })
            .collect(),
    )?;
    DisparityMap::new(values, valid)
}

/// Writes a disparity map with invalid pixels stored as +∞.
pub fn write_disparity(path: &Path, d: &DisparityMap) -> Result<()> {
    let t = Tensor::new(
        d.values().shape().to_vec(),
        d.values()
            .data()
            .iter()
            .zip(d.valid().data())
            .map(|(&v, &m)| if m == 1.0 { v } else { f64::INFINITY })
            .collect(),
    )?;
    write(path, &t)
}
