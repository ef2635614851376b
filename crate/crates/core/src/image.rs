// SPDX-License-Identifier: Apache-2.0

//! 8-bit grayscale rasters and binary PGM (P5) I/O.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a binary PGM: {0}")]
    BadPgm(String),
    #[error("pixel buffer of {found} bytes does not match {width}x{height}")]
    SizeMismatch { width: usize, height: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                found: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel at clamped integer coordinates.
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Count of pixels at or above `threshold`.
    pub fn count_at_least(&self, threshold: u8) -> usize {
        self.pixels.iter().filter(|&&p| p >= threshold).count()
    }

    /// Area-averaged resample to `out_w × out_h`, values scaled to [0, 1].
    pub fn area_resample(&self, out_w: usize, out_h: usize) -> Vec<f64> {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        let mut out = vec![0.0; out_w * out_h];
        for oy in 0..out_h {
            let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
            for ox in 0..out_w {
                let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
                let mut acc = 0.0;
                for y in y0.floor() as usize..(y1.ceil() as usize).min(self.height) {
                    let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                    if wy == 0.0 {
                        continue;
                    }
                    for x in x0.floor() as usize..(x1.ceil() as usize).min(self.width) {
                        let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                        acc += wx * wy * self.get(x, y) as f64;
                    }
                }
                out[oy * out_w + ox] = acc / (sx * sy * 255.0);
            }
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut at = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments between header fields
            while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
                if bytes[at] == b'#' {
                    while at < bytes.len() && bytes[at] != b'\n' {
                        at += 1;
                    }
                } else {
                    at += 1;
                }
            }
            let start = at;
            while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if start == at {
                return Err(ImageError::BadPgm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(ImageError::BadPgm(format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| ImageError::BadPgm(format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(ImageError::BadPgm(format!("maxval {maxval}, expected 255")));
        }
        // exactly one whitespace byte before the raster
        at += 1;
        let data = bytes.get(at..).unwrap_or_default();
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                found: data.len(),
            });
        }
        Self::from_pixels(width, height, data.to_vec())
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|source| ImageError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ImageError::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_pgm(&bytes)
    }
}
