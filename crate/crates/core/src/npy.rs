//! Minimal NumPy `.npy` (format 1.0) reader and writer for checkpoint arrays.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let shape = match t.shape().len() {
        0 => "()".to_string(),
        1 => format!("({},)", t.shape()[0]),
        _ => format!(
            "({})",
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        T::NPY_DESCR,
        shape
    );
    // magic(6) + version(2) + len(2) + header + '\n' aligned to 64
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + t.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8], what: &str) -> Result<Tensor<T>> {
    let bad = |m: &str| Error::Format(format!("{what}: {m}"));
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("not an .npy file"));
    }
    if bytes[6] != 1 {
        return Err(bad("unsupported .npy version"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    let descr = field(header, "descr").ok_or_else(|| bad("missing descr"))?;
    let descr = descr.trim().trim_matches('\'');
    if descr != T::NPY_DESCR {
        return Err(bad(&format!("dtype {descr}, expected {}", T::NPY_DESCR)));
    }
    if field(header, "fortran_order").map(str::trim) != Some("False") {
        return Err(bad("fortran order not supported"));
    }
    let shape_src = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let shape: Vec<usize> = shape_src
        .trim()
        .trim_start_matches('(')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_>>()?;
    let body = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if body.len() != n * T::BYTES {
        return Err(bad(&format!("expected {} data bytes, found {}", n * T::BYTES, body.len())));
    }
    let data = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

fn field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let rest = header.split(&format!("'{key}':")).nth(1)?;
    rest.split(',').next()
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
