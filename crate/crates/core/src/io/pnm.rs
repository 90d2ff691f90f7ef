//! Binary netpbm files: label maps as P5 greymaps storing class ids
//! directly, and multi-channel images as a P6 variant whose payload is the
//! channel planes one after another rather than interleaved pixels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::data::LabelMap;

pub const MAXVAL: usize = 255;

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n{MAXVAL}\n").into_bytes()
}

/// Parses `magic width height maxval` plus the single whitespace byte that
/// precedes the payload; `#` comments run to end of line.
fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let echo = || String::from_utf8_lossy(&bytes[..bytes.len().min(16)]).into_owned();
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("truncated header {:?}", echo())));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("?"));
    }
    if fields[0] != magic {
        return Err(Error::Format(format!(
            "expected {magic} file, header starts {:?}",
            echo()
        )));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad {what} {s:?} in header {:?}", echo())))
    };
    let (w, h, maxval) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if maxval != MAXVAL {
        return Err(Error::Format(format!("maxval {maxval} is not {MAXVAL}")));
    }
    if pos >= bytes.len() {
        return Err(Error::Format("missing payload".into()));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn encode_pgm(mask: &LabelMap) -> Vec<u8> {
    let mut out = header("P5", mask.width, mask.height);
    out.extend_from_slice(&mask.labels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, payload) = parse_header(bytes, "P5")?;
    if payload.len() != w * h {
        return Err(Error::Format(format!(
            "{w}x{h} greymap needs {} payload bytes, found {}",
            w * h,
            payload.len()
        )));
    }
    LabelMap::new(h, w, payload.to_vec())
}

/// `image [C, H, W]` in `[0, 1]`, quantised to bytes.
pub fn encode_planar(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Format(format!(
            "planar pixmaps hold [3, H, W] images, got {s:?}"
        )));
    }
    let mut out = header("P6", s[2], s[1]);
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * MAXVAL as f32).round() as u8),
    );
    Ok(out)
}

pub fn decode_planar(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, payload) = parse_header(bytes, "P6")?;
    if payload.len() != 3 * w * h {
        return Err(Error::Format(format!(
            "{w}x{h} pixmap needs {} payload bytes, found {}",
            3 * w * h,
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| b as f32 / MAXVAL as f32).collect();
    Tensor::new(vec![3, h, w], data)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_planar(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_planar(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_planar(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_planar(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_2x2_greymap() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 255]).unwrap();
        let golden: &[u8] = b"P5\n2 2\n255\n\x00\x01\x02\xff";
        assert_eq!(encode_pgm(&m), golden);
        assert_eq!(decode_pgm(golden).unwrap(), m);
    }

    #[test]
    fn comments_are_skipped() {
        let m = decode_pgm(b"P5 # note\n1 2\n255\n\x07\x08").unwrap();
        assert_eq!((m.width, m.height, m.labels), (1, 2, vec![7, 8]));
    }

    #[test]
    fn foreign_files_are_rejected_with_header_echo() {
        let err = decode_pgm(b"P2\n2 2\n255\n0 1 2 3").unwrap_err().to_string();
        assert!(err.contains("P2"), "{err}");
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn planar_pixmap_round_trip() {
        let data: Vec<f32> = (0..12).map(|v| v as f32 * 20.0 / 255.0).collect();
        let t = Tensor::new(vec![3, 2, 2], data).unwrap();
        let bytes = encode_planar(&t).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 2\n255\n");
        assert_eq!(bytes[11..], (0..12).map(|v| (v * 20) as u8).collect::<Vec<_>>()[..]);
        assert_eq!(encode_planar(&decode_planar(&bytes).unwrap()).unwrap(), bytes);
    }
}
