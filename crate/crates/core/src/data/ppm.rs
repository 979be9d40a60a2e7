//! Binary PGM (P5) / PPM (P6) with 8-bit samples.

use std::path::Path;

use super::{io_err, DataError, Image};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels_q());
    out
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, encode_ppm(img)).map_err(io_err(path))
}

pub fn load_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let mut cursor = Header { bytes, pos: 0 };
    let magic = cursor.token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(DataError::MalformedHeader(format!(
                "unsupported magic {other:?}"
            )))
        }
    };
    let width = cursor.number("width")?;
    let height = cursor.number("height")?;
    let maxval = cursor.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(DataError::MalformedHeader("zero image dimension".into()));
    }
    if !(1..=255).contains(&maxval) {
        return Err(DataError::MalformedHeader(format!(
            "maxval {maxval} is not an 8-bit range"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => return Err(DataError::MalformedHeader("missing raster separator".into())),
    }
    let expected = width * height * channels;
    let payload = &bytes[cursor.pos..];
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let raw = &payload[..expected];
    let pixels = if maxval == 255 {
        raw.to_vec()
    } else {
        let scale = 255.0 / maxval as f64;
        raw.iter()
            .map(|&v| (f64::from(v.min(maxval as u8)) * scale).round() as u8)
            .collect()
    };
    Image::from_q(width, height, channels, pixels)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<String, DataError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(DataError::MalformedHeader("unexpected end of header".into())),
            }
        }
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || *b == b'#' {
                break;
            }
            self.pos += 1;
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| DataError::MalformedHeader(format!("{what} {tok:?} is not a number")))
    }
}
