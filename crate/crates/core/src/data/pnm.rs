//! Netpbm grayscale and color images (P2, P3, P5, P6).

use std::path::Path;

use crate::error::{Error, Result};
use crate::patch::ImageTensor;
use crate::texture::GrayImage;

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Header {
    magic: u8,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'2' | b'3' | b'5' | b'6') {
        return Err(bad(path, "expected a P2, P3, P5 or P6 netpbm header"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, "malformed header"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(bad(path, "invalid dimensions or maxval"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, "malformed header"));
    }
    Ok(Header {
        magic: bytes[1],
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes a netpbm image into a `1 x 1 x C x H x W` tensor in `[0, 1]`,
/// with `C` = 1 for graymaps and 3 for pixmaps.
pub fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<ImageTensor> {
    let h = parse_header(path, bytes)?;
    let channels = if matches!(h.magic, b'3' | b'6') { 3 } else { 1 };
    let n = h.width * h.height * channels;
    let raw: Vec<usize> = match h.magic {
        b'5' | b'6' => {
            let wide = h.maxval > 255;
            let need = n * if wide { 2 } else { 1 };
            let body = &bytes[h.data_start..];
            if body.len() < need {
                return Err(bad(path, "truncated pixel data"));
            }
            if wide {
                body[..need]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
                    .collect()
            } else {
                body[..need].iter().map(|&b| b as usize).collect()
            }
        }
        _ => {
            let text = std::str::from_utf8(&bytes[h.data_start..])
                .map_err(|_| bad(path, "non-ASCII plain pixel data"))?;
            let vals: Vec<usize> = text
                .split_ascii_whitespace()
                .take(n)
                .map(|t| t.parse().map_err(|_| bad(path, format!("bad sample `{t}`"))))
                .collect::<Result<_>>()?;
            if vals.len() < n {
                return Err(bad(path, "truncated pixel data"));
            }
            vals
        }
    };
    if raw.iter().any(|&v| v > h.maxval) {
        return Err(bad(path, "sample exceeds maxval"));
    }
    let mut img = ImageTensor::zeros(1, 1, channels, h.height, h.width);
    let scale = h.maxval as f64;
    for c in 0..channels {
        let plane = img.plane_mut(0, 0, c);
        for (i, v) in plane.iter_mut().enumerate() {
            *v = raw[i * channels + c] as f64 / scale;
        }
    }
    Ok(img)
}

pub fn read_pnm(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(path, &bytes)
}

/// Encodes sample 0, frame 0 of `img` as 8-bit binary PGM (1 channel) or
/// PPM (3 channels). Values are clamped to `[0, 1]` and rounded.
pub fn encode_pnm(img: &ImageTensor) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InconsistentDims(format!(
                "netpbm needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let planes: Vec<&[f64]> = (0..img.channels).map(|c| img.plane(0, 0, c)).collect();
    for i in 0..img.height * img.width {
        for p in &planes {
            out.push((p[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_pnm(path: &Path, img: &ImageTensor) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_binary_agree() {
        let p = Path::new("x");
        let plain = decode_pnm(p, b"P2\n# comment\n3 1\n255\n0 128 255\n").unwrap();
        let raw = decode_pnm(p, b"P5 3 1 255\n\x00\x80\xff").unwrap();
        assert_eq!(plain, raw);
        assert_eq!(plain.values, vec![0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn color_is_planar_after_decode() {
        let img = decode_pnm(Path::new("x"), b"P3 2 1 255 255 0 0 0 0 255").unwrap();
        assert_eq!(img.dims(), [1, 1, 3, 1, 2]);
        assert_eq!(img.plane(0, 0, 0), &[1.0, 0.0]);
        assert_eq!(img.plane(0, 0, 2), &[0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let img = decode_pnm(Path::new("x"), b"P5 1 1 65535\n\xff\xff").unwrap();
        assert_eq!(img.values, vec![1.0]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c";
        let img = decode_pnm(Path::new("x"), bytes).unwrap();
        assert_eq!(encode_pnm(&img).unwrap(), bytes.to_vec());
    }

    #[test]
    fn malformed_inputs() {
        let p = Path::new("x");
        assert!(decode_pnm(p, b"P4 1 1\n\x00").is_err());
        assert!(decode_pnm(p, b"P5 2 2 255\n\x00").is_err());
        assert!(decode_pnm(p, b"P2 1 1 10 11").is_err());
        assert!(decode_pnm(p, b"P2 x 1 10 1").is_err());
    }
}
