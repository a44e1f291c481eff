//! Minimal binary PNM support: P5 (grayscale) and P6 (RGB) with 8-bit depth.
//! Enough to feed photographs in and write heatmap overlays out without an
//! image dependency.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image, `channels` is 1 (gray) or 3 (RGB), pixels row-major,
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new_gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Image> {
        if pixels.len() != width * height {
            return Err(Error::InvalidShape(format!(
                "gray image {width}x{height} needs {} bytes, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image { width, height, channels: 1, pixels })
    }

    pub fn new_rgb(width: usize, height: usize, pixels: Vec<u8>) -> Result<Image> {
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidShape(format!(
                "rgb image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image { width, height, channels: 3, pixels })
    }

    /// Collapse RGB to a single luminance channel (ITU-R 601 weights); gray
    /// images pass through unchanged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        Image { width: self.width, height: self.height, channels: 1, pixels }
    }
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> HeaderScanner<'a> {
    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                line: 0,
                msg: format!("{}: missing {what} in header", self.path),
            });
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token(what)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!(
                    "{}: {what} is not a number: {:?}",
                    self.path,
                    String::from_utf8_lossy(tok)
                ),
            })
    }
}

/// Read a binary PGM (P5) or PPM (P6) file.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut sc = HeaderScanner { bytes: &bytes, pos: 0, path: path.display().to_string() };

    let magic = sc.token("format magic")?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "{}: unsupported format {:?} (only binary P5/P6)",
                    path.display(),
                    String::from_utf8_lossy(other)
                ),
            })
        }
    };
    let width = sc.number("width")?;
    let height = sc.number("height")?;
    let maxval = sc.number("max value")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{}: zero image dimension {width}x{height}", path.display()),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{}: unsupported max value {maxval} (only 8-bit)", path.display()),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    if sc.pos >= bytes.len() || !bytes[sc.pos].is_ascii_whitespace() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{}: missing separator before pixel data", path.display()),
        });
    }
    let data_start = sc.pos + 1;
    let need = width * height * channels;
    let available = bytes.len() - data_start;
    if available < need {
        return Err(Error::Parse {
            line: 0,
            msg: format!(
                "{}: truncated pixel data, need {need} bytes, found {available}",
                path.display()
            ),
        });
    }
    let mut pixels = bytes[data_start..data_start + need].to_vec();
    if maxval != 255 {
        // rescale so downstream code can assume full 8-bit range
        for p in pixels.iter_mut() {
            *p = ((*p as usize * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    Ok(Image { width, height, channels, pixels })
}

/// Write a binary PPM (P6). Gray images are replicated to RGB.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let rgb: Vec<u8> = match img.channels {
        3 => img.pixels.clone(),
        1 => img.pixels.iter().flat_map(|&p| [p, p, p]).collect(),
        other => {
            return Err(Error::InvalidShape(format!(
                "cannot write {other}-channel image as PPM"
            )))
        }
    };
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&rgb);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
