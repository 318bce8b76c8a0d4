//! Minimal NPY (v1.0 / v2.0) codec.
//!
//! Only little-endian, C-ordered arrays are supported. `f32` and `i32` are
//! stored as-is; `f64` and `i64` files are narrowed on read, with an explicit
//! range check for the integer case.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{StoreError, Tensor, TensorData};

const MAGIC: &[u8] = b"\x93NUMPY";

/// Raw payload of a decoded NPY file, before any narrowing.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum RawArray {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

pub(crate) struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> StoreError {
    StoreError::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses the python-dict header literal numpy emits, e.g.
/// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }`.
fn parse_header(text: &str, path: &Path) -> Result<Header, StoreError> {
    let text = text.trim();
    let body = text
        .strip_prefix('{')
        .and_then(|t| t.trim_end().strip_suffix('}'))
        .ok_or_else(|| malformed(path, "header is not a dict literal"))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;

    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after_key) = take_quoted(rest).ok_or_else(|| malformed(path, "bad header key"))?;
        let after_colon = after_key
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| malformed(path, "missing ':' in header"))?
            .trim_start();
        let after_value = match key {
            "descr" => {
                let (v, r) = take_quoted(after_colon).ok_or_else(|| malformed(path, "bad descr"))?;
                descr = Some(v.to_string());
                r
            }
            "fortran_order" => {
                if let Some(r) = after_colon.strip_prefix("False") {
                    fortran_order = Some(false);
                    r
                } else if let Some(r) = after_colon.strip_prefix("True") {
                    fortran_order = Some(true);
                    r
                } else {
                    return Err(malformed(path, "bad fortran_order"));
                }
            }
            "shape" => {
                let inner = after_colon
                    .strip_prefix('(')
                    .ok_or_else(|| malformed(path, "bad shape"))?;
                let close = inner.find(')').ok_or_else(|| malformed(path, "unterminated shape"))?;
                let dims = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| malformed(path, "non-integer dimension"))?;
                shape = Some(dims);
                &inner[close + 1..]
            }
            other => return Err(malformed(path, format!("unexpected header key '{other}'"))),
        };
        rest = after_value.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    Ok(Header {
        descr: descr.ok_or_else(|| malformed(path, "missing descr"))?,
        fortran_order: fortran_order.ok_or_else(|| malformed(path, "missing fortran_order"))?,
        shape: shape.ok_or_else(|| malformed(path, "missing shape"))?,
    })
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    let end = s[1..].find(quote)? + 1;
    Some((&s[1..end], &s[end + 1..]))
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, RawArray), StoreError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(malformed(path, "bad magic"));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(malformed(path, "truncated header length"));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
            (len, 12)
        }
        v => return Err(malformed(path, format!("unsupported format version {v}"))),
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(malformed(path, "truncated header"));
    }
    let text = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| malformed(path, "header is not text"))?;
    let header = parse_header(text, path)?;
    if header.fortran_order {
        return Err(malformed(path, "fortran-ordered arrays are not supported"));
    }

    let count: usize = header.shape.iter().product();
    let payload = &bytes[payload_start..];
    let width = match header.descr.as_str() {
        "<f4" | "<i4" => 4,
        "<f8" | "<i8" => 8,
        other => {
            return Err(StoreError::UnsupportedDtype {
                path: path.to_path_buf(),
                dtype: other.to_string(),
            })
        }
    };
    if payload.len() != count * width {
        return Err(malformed(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), count * width),
        ));
    }

    let raw = match header.descr.as_str() {
        "<f4" => RawArray::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        "<i4" => RawArray::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        "<f8" => RawArray::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => RawArray::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok((header.shape, raw))
}

/// Builds a v1.0 preamble (magic, version, header length, padded header) for
/// the given dtype descriptor and shape.
fn encode_header(descr: &str, shape: &[usize]) -> Vec<u8> {
    let shape_text = match shape {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_text}, }}");
    // magic(6) + version(2) + len(2) + dict + '\n' must be a multiple of 64.
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

pub(crate) fn encode_tensor(t: &Tensor) -> Vec<u8> {
    match &t.data {
        TensorData::F32(v) => {
            let mut out = encode_header("<f4", &t.shape);
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
        TensorData::I32(v) => {
            let mut out = encode_header("<i4", &t.shape);
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
    }
}

pub(crate) fn encode_f64(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = encode_header("<f8", shape);
    out.reserve(data.len() * 8);
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    Ok(())
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_64_byte_aligned() {
        for shape in [vec![1], vec![2, 3], vec![3, 0, 4], vec![512, 224, 224]] {
            let h = encode_header("<f4", &shape);
            assert_eq!(h.len() % 64, 0, "shape {shape:?}");
            assert_eq!(*h.last().unwrap(), b'\n');
        }
    }

    #[test]
    fn parses_numpy_style_header() {
        let p = Path::new("x.npy");
        let h = parse_header("{'descr': '<i8', 'fortran_order': False, 'shape': (4,), }", p).unwrap();
        assert_eq!(h.descr, "<i8");
        assert_eq!(h.shape, vec![4]);
        let h = parse_header("{'descr': '<f4', 'fortran_order': False, 'shape': (), }", p).unwrap();
        assert!(h.shape.is_empty());
    }

    #[test]
    fn rejects_fortran_order() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        let dict = "{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }\n";
        bytes.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(
            decode(&bytes, Path::new("f.npy")),
            Err(StoreError::MalformedFile { .. })
        ));
    }
}
