//! 8-bit RGB raster images: a minimal PPM loader/writer and bilinear resize.
//!
//! PPM support covers binary `P6` (read and write) and ASCII `P3` (read
//! only), maxval 255, with `#` comments allowed in the header. PNG input is
//! available behind the `png` cargo feature.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub const CHANNELS: usize = 3;

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                shape: vec![height, width, CHANNELS],
                reason: "image dimensions must be positive".into(),
            });
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidShape {
                shape: vec![height, width, CHANNELS],
                reason: format!(
                    "expected {} samples, got {}",
                    height * width * CHANNELS,
                    data.len()
                ),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Solid-color image.
    pub fn solid(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Sample at `(row, col, channel)`.
    pub fn at(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * CHANNELS + channel]
    }

    /// Reads a PPM image (`P6` binary or `P3` ASCII, maxval 255).
    pub fn read_ppm(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0usize;

        let magic = next_header_token(&bytes, &mut pos)
            .ok_or_else(|| Error::Record("ppm: missing magic number".into()))?;
        if magic != "P6" && magic != "P3" {
            return Err(Error::Record(format!(
                "ppm: unsupported magic `{magic}` (want P6 or P3)"
            )));
        }
        let mut dims = [0usize; 3];
        for slot in &mut dims {
            let tok = next_header_token(&bytes, &mut pos)
                .ok_or_else(|| Error::Record("ppm: truncated header".into()))?;
            *slot = tok
                .parse()
                .map_err(|_| Error::Record(format!("ppm: bad header token `{tok}`")))?;
        }
        let (width, height, maxval) = (dims[0], dims[1], dims[2]);
        if maxval != 255 {
            return Err(Error::Record(format!(
                "ppm: unsupported maxval {maxval} (want 255)"
            )));
        }
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(CHANNELS))
            .ok_or_else(|| Error::Record("ppm: dimensions overflow".into()))?;

        let data = if magic == "P6" {
            // Exactly one whitespace byte separates the header from the blob.
            pos += 1;
            let blob = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Record("ppm: truncated pixel data".into()))?;
            blob.to_vec()
        } else {
            let mut data = Vec::with_capacity(n);
            while data.len() < n {
                let tok = next_header_token(&bytes, &mut pos)
                    .ok_or_else(|| Error::Record("ppm: truncated pixel data".into()))?;
                let v: usize = tok
                    .parse()
                    .map_err(|_| Error::Record(format!("ppm: bad sample `{tok}`")))?;
                if v > 255 {
                    return Err(Error::Record(format!("ppm: sample {v} exceeds maxval")));
                }
                data.push(v as u8);
            }
            data
        };
        Self::new(height, width, data)
    }

    /// Writes the image as binary `P6`.
    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    /// Loads an image by file extension: `.ppm` always, `.png` with the
    /// `png` feature.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        match ext.as_str() {
            "ppm" => Self::read_ppm(BufReader::new(File::open(path)?)),
            #[cfg(feature = "png")]
            "png" => {
                let img = image::open(path)
                    .map_err(|e| Error::Record(format!("png: {e}")))?
                    .into_rgb8();
                Self::new(
                    img.height() as usize,
                    img.width() as usize,
                    img.into_raw(),
                )
            }
            other => Err(Error::Record(format!(
                "unsupported image extension `{other}` (want ppm)"
            ))),
        }
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ppm(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Advances past whitespace and `#` comments, returning the next token.
fn next_header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

/// Bilinear resample to `target = (height, width)`, where both extents must
/// be positive multiples of 448.
///
/// Source coordinates use the half-pixel-center convention
/// `s = (d + 0.5)·(in/out) − 0.5`, clamped at the borders; samples are
/// rounded half away from zero back to 8 bits. A same-size resize is the
/// identity.
pub fn resize_image(img: &RawImage, target: (usize, usize)) -> Result<RawImage> {
    let (th, tw) = target;
    for (axis, v) in [("height", th), ("width", tw)] {
        if v == 0 || v % 448 != 0 {
            return Err(Error::Config {
                key: format!("resolution.{}", &axis[..1]),
                reason: format!("target {axis} {v} is not a positive multiple of 448"),
            });
        }
    }
    if (img.height, img.width) == (th, tw) {
        return Ok(img.clone());
    }
    let scale_y = img.height as f64 / th as f64;
    let scale_x = img.width as f64 / tw as f64;
    let mut out = vec![0u8; th * tw * CHANNELS];
    for dy in 0..th {
        let sy = (dy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0 as isize).clamp(0, img.height as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, img.height as isize - 1) as usize;
        for dx in 0..tw {
            let sx = (dx as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0 as isize).clamp(0, img.width as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, img.width as isize - 1) as usize;
            for c in 0..CHANNELS {
                let p00 = img.at(y0c, x0c, c) as f64;
                let p01 = img.at(y0c, x1c, c) as f64;
                let p10 = img.at(y1c, x0c, c) as f64;
                let p11 = img.at(y1c, x1c, c) as f64;
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                let v = top + (bottom - top) * fy;
                out[(dy * tw + dx) * CHANNELS + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RawImage::new(th, tw, out)
}
