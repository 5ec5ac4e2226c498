//! Binary netpbm I/O: 8-bit P6 for color, 16-bit P5 for depth.
//!
//! Depth is stored as `round(meters × depth_scale)` in big-endian 16-bit
//! samples; 0 is "no measurement".

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::image::{DepthMap, RgbImage};

/// Millimeters per meter, the default on-disk depth scale.
pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first payload byte.
    data_start: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(malformed("missing 'P' magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments between tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == 2 {
            return Err(malformed("no whitespace after magic"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(malformed(format!("expected {what} at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| malformed(format!("number '{text}' out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("header must end with a single whitespace byte")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval: maxval as u32,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, samples: usize) -> Result<&'a [u8]> {
    let width = if header.maxval > 255 { 2 } else { 1 };
    let expected = samples * width;
    let found = bytes.len() - header.data_start;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    Ok(&bytes[header.data_start..header.data_start + expected])
}

fn sample(data: &[u8], i: usize, wide: bool) -> u32 {
    if wide {
        u32::from(u16::from_be_bytes([data[2 * i], data[2 * i + 1]]))
    } else {
        u32::from(data[i])
    }
}

/// Encodes `[0, 1]` RGB as P6 with maxval 255.
pub fn encode_ppm(rgb: &RgbImage) -> Vec<u8> {
    let (h, w) = (rgb.height(), rgb.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((rgb.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Decodes P6 (8- or 16-bit) into `[0, 1]` RGB.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P6" {
        return Err(malformed(format!("expected P6, found {}", String::from_utf8_lossy(&header.magic))));
    }
    let (h, w) = (header.height, header.width);
    let data = payload(bytes, &header, 3 * h * w)?;
    let wide = header.maxval > 255;
    let scale = f64::from(header.maxval);
    let mut rgb = RgbImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = sample(data, (y * w + x) * 3 + c, wide);
                rgb.set(c, y, x, f64::from(v.min(header.maxval)) / scale);
            }
        }
    }
    Ok(rgb)
}

/// Encodes depth as 16-bit P5. Fails with [`Error::DepthOverflow`] when a
/// value does not fit.
pub fn encode_depth_pgm(depth: &DepthMap, depth_scale: f64) -> Result<Vec<u8>> {
    if !(depth_scale > 0.0 && depth_scale.is_finite()) {
        return invalid(format!("depth scale must be positive, got {depth_scale}"));
    }
    let (h, w) = (depth.height(), depth.width());
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * h * w);
    for &m in depth.as_slice() {
        let q = (m * depth_scale).round();
        if q > 65535.0 {
            return Err(Error::DepthOverflow { meters: m });
        }
        out.extend_from_slice(&(q as u16).to_be_bytes());
    }
    Ok(out)
}

/// Decodes a P5 depth image; sample `v` becomes `v / depth_scale` meters.
pub fn decode_depth_pgm(bytes: &[u8], depth_scale: f64) -> Result<DepthMap> {
    if !(depth_scale > 0.0 && depth_scale.is_finite()) {
        return invalid(format!("depth scale must be positive, got {depth_scale}"));
    }
    let header = parse_header(bytes)?;
    if &header.magic != b"P5" {
        return Err(malformed(format!("expected P5, found {}", String::from_utf8_lossy(&header.magic))));
    }
    let n = header.height * header.width;
    let data = payload(bytes, &header, n)?;
    let wide = header.maxval > 255;
    let values = (0..n).map(|i| f64::from(sample(data, i, wide)) / depth_scale).collect();
    DepthMap::new(header.height, header.width, values)
}

pub fn write_ppm(path: &Path, rgb: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(rgb))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_depth_pgm(path: &Path, depth: &DepthMap, depth_scale: f64) -> Result<()> {
    fs::write(path, encode_depth_pgm(depth, depth_scale)?)?;
    Ok(())
}

pub fn read_depth_pgm(path: &Path, depth_scale: f64) -> Result<DepthMap> {
    decode_depth_pgm(&fs::read(path)?, depth_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_millimeter_round_trip() {
        let d = DepthMap::new(1, 3, vec![1.234, 0.0, 65.535]).unwrap();
        let bytes = encode_depth_pgm(&d, DEFAULT_DEPTH_SCALE).unwrap();
        assert_eq!(&bytes[..16], b"P5\n3 1\n65535\n\x04\xd2\x00");
        let back = decode_depth_pgm(&bytes, DEFAULT_DEPTH_SCALE).unwrap();
        assert_eq!(back.as_slice(), &[1.234, 0.0, 65.535]);
    }

    #[test]
    fn depth_overflow() {
        let d = DepthMap::new(1, 1, vec![65.5356]).unwrap();
        assert!(matches!(encode_depth_pgm(&d, DEFAULT_DEPTH_SCALE), Err(Error::DepthOverflow { .. })));
    }

    #[test]
    fn ppm_round_trip_and_comments() {
        let rgb = RgbImage::new(1, 2, vec![0.0, 1.0, 0.5, 0.25, 1.0 / 255.0, 0.9]).unwrap();
        let back = decode_ppm(&encode_ppm(&rgb)).unwrap();
        for (a, b) in rgb.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let commented = b"P6 # comment\n1 # w\n1\n255\n\xff\x00\x80";
        let img = decode_ppm(commented).unwrap();
        assert_eq!((img.get(0, 0, 0), img.get(1, 0, 0)), (1.0, 0.0));
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_ppm(b"P6\n1 x\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n255"), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00"),
            Err(Error::Truncated { expected: 6, found: 3 })
        ));
        assert!(matches!(
            decode_depth_pgm(b"P5\n1 1\n65535\n\x00", 1000.0),
            Err(Error::Truncated { expected: 2, found: 1 })
        ));
        assert!(matches!(decode_depth_pgm(b"P5\n0 1\n255\n", 1000.0), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn eight_bit_pgm_is_accepted() {
        let d = decode_depth_pgm(b"P5\n2 1\n255\n\x02\x00", 1.0).unwrap();
        assert_eq!(d.as_slice(), &[2.0, 0.0]);
    }
}
