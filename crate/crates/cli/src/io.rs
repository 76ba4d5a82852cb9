//! Netpbm reading and writing: 8-bit P6 images in, P5 class maps in and out.

use std::path::Path;

use algm_core::vit::Image;
use algm_core::AlgmError;

fn read(path: &Path) -> Result<Vec<u8>, AlgmError> {
    std::fs::read(path).map_err(|e| AlgmError::Io { path: path.to_path_buf(), source: e })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), AlgmError> {
    std::fs::write(path, bytes).map_err(|e| AlgmError::Io { path: path.to_path_buf(), source: e })
}

fn bad(path: &Path, msg: impl Into<String>) -> AlgmError {
    AlgmError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into()),
    }
}

/// Parsed header fields plus the offset of the first raster byte.
struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header, AlgmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(path, format!("not a {} file", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "malformed header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, "header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, "malformed header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad(path, format!("unsupported geometry {width}x{height} maxval {maxval}")));
    }
    Ok(Header { width, height, maxval, offset: pos + 1 })
}

/// Reads an 8-bit binary PPM scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Image, AlgmError> {
    let bytes = read(path)?;
    let h = header(&bytes, b"P6", path)?;
    if h.maxval > 255 {
        return Err(bad(path, "only 8-bit PPM is supported"));
    }
    let n = h.width * h.height * 3;
    let raster = bytes.get(h.offset..h.offset + n).ok_or_else(|| bad(path, "truncated raster"))?;
    let maxval = h.maxval as f32;
    Image::new(h.height, h.width, raster.iter().map(|&b| b as f32 / maxval).collect())
}

/// Reads a binary PGM as integer values, returning `(height, width, values)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u32>), AlgmError> {
    let bytes = read(path)?;
    let h = header(&bytes, b"P5", path)?;
    let n = h.width * h.height;
    let wide = h.maxval > 255;
    let len = if wide { 2 * n } else { n };
    let raster = bytes.get(h.offset..h.offset + len).ok_or_else(|| bad(path, "truncated raster"))?;
    let values = if wide {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        raster.iter().map(|&b| b as u32).collect()
    };
    Ok((h.height, h.width, values))
}

/// Encodes values as a binary PGM, 16-bit when any value exceeds 255.
pub fn encode_pgm(height: usize, width: usize, values: &[u32]) -> Vec<u8> {
    let max = values.iter().copied().max().unwrap_or(0);
    let maxval = if max > 255 { 65535 } else { 255 };
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval > 255 {
        for &v in values {
            out.extend_from_slice(&(v.min(65535) as u16).to_be_bytes());
        }
    } else {
        out.extend(values.iter().map(|&v| v as u8));
    }
    out
}
