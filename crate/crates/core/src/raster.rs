//! Minimal netpbm codecs: binary PPM (P6) for RGB images and binary PGM (P5)
//! for label masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::validation(format!(
                "RGB buffer has {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Copies the `w`×`h` window whose top-left corner is (`x`, `y`).
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::validation(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = parse_header(bytes, b"P6")?;
        if header.maxval != 255 {
            return Err(Error::UnsupportedDepth(header.maxval));
        }
        let need = header.width * header.height * 3;
        let payload = &bytes[offset..];
        if payload.len() < need {
            return Err(Error::Corrupt(format!(
                "PPM payload has {} bytes, expected {need}",
                payload.len()
            )));
        }
        RgbImage::from_raw(header.width, header.height, payload[..need].to_vec())
    }
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RgbImage::from_ppm_bytes(&bytes)
}

pub fn write_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, image.to_ppm_bytes()).map_err(|e| Error::io(path, e))
}

/// Parsed PGM content: dimensions, maxval and samples in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u32>,
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (header, offset) = parse_header(bytes, b"P5")?;
    let n = header.width * header.height;
    let payload = &bytes[offset..];
    let samples = match header.maxval {
        255 => {
            if payload.len() < n {
                return Err(Error::Corrupt(format!(
                    "PGM payload has {} bytes, expected {n}",
                    payload.len()
                )));
            }
            payload[..n].iter().map(|&b| b as u32).collect()
        }
        65535 => {
            if payload.len() < 2 * n {
                return Err(Error::Corrupt(format!(
                    "PGM payload has {} bytes, expected {}",
                    payload.len(),
                    2 * n
                )));
            }
            // netpbm stores 16-bit samples most-significant byte first
            payload[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect()
        }
        other => return Err(Error::UnsupportedDepth(other)),
    };
    Ok(GrayImage {
        width: header.width,
        height: header.height,
        maxval: header.maxval,
        samples,
    })
}

/// Encodes samples as P5, choosing 8-bit depth when every sample fits.
pub fn encode_pgm(width: usize, height: usize, samples: &[u32]) -> Result<Vec<u8>> {
    if samples.len() != width * height {
        return Err(Error::validation("PGM sample count does not match dimensions"));
    }
    let max = samples.iter().copied().max().unwrap_or(0);
    if max > 65535 {
        return Err(Error::validation(format!(
            "label {max} does not fit in a 16-bit PGM"
        )));
    }
    let maxval = if max <= 255 { 255 } else { 65535 };
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval == 255 {
        out.extend(samples.iter().map(|&s| s as u8));
    } else {
        for &s in samples {
            out.extend_from_slice(&(s as u16).to_be_bytes());
        }
    }
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(Header, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected netpbm magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header value out of range".into()))?;
    }
    // exactly one whitespace byte precedes the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    Ok((
        Header {
            width: width as usize,
            height: height as usize,
            maxval: u32::try_from(maxval).unwrap_or(u32::MAX),
        },
        pos,
    ))
}
