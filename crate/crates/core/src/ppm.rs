//! Binary portable graymap (P5) and pixmap (P6) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded image, channel-interleaved, values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for graymaps, 3 for pixmaps.
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    /// Converts between gray and RGB: RGB→gray averages channels, gray→RGB
    /// replicates.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        let data = match (self.channels, channels) {
            (a, b) if a == b => self.data.clone(),
            (3, 1) => self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
            (1, 3) => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            (a, b) => {
                return Err(Error::Config(format!(
                    "cannot convert {a}-channel image to {b} channels"
                )))
            }
        };
        Ok(Image {
            channels,
            data,
            ..*self
        })
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Header fields: magic, then width, height, maxval separated by whitespace
/// and `#` comments, then exactly one whitespace byte.
fn parse_header(bytes: &[u8]) -> std::result::Result<(usize, [usize; 3], usize), String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file (expected P5 or P6)".into()),
    };
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
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    Ok((channels, fields, pos + 1))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let (channels, [width, height, maxval], start) = parse_header(bytes).map_err(|m| format_err(path, m))?;
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("invalid maxval {maxval}")));
    }
    let wide = maxval > 255;
    let n = width * height * channels;
    let need = n * if wide { 2 } else { 1 };
    let body = &bytes[start..];
    if body.len() < need {
        return Err(format_err(
            path,
            format!("pixel data truncated: {} of {need} bytes", body.len()),
        ));
    }
    let scale = maxval as f64;
    let data = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale)
            .collect()
    } else {
        body[..need].iter().map(|&b| b as f64 / scale).collect()
    };
    let image = Image {
        width,
        height,
        channels,
        data,
    };
    if image.data.iter().any(|&v| v > 1.0) {
        return Err(format_err(path, "sample exceeds maxval"));
    }
    Ok(image)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Encodes 8-bit samples; `channels` selects P5 (1) or P6 (3).
pub fn encode(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::shape("ppm encode", &[height, width, channels], &[pixels.len()]));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_image(path: impl AsRef<Path>, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(width, height, channels, pixels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Quantizes `[0, 1]` samples to bytes.
pub fn to_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
