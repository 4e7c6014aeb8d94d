//! Equirectangular rasters and their file formats.
//!
//! Color images go through 8-bit PNG; depth and other float fields use the
//! binary PFM format (negative scale header = little-endian, rows stored
//! bottom to top as is conventional for the format).

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Row-major, channel-interleaved raster. Color samples live in [0,1],
/// depth in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ErpImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("zero raster dimension"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "raster data length {} != {}×{}×{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(ErpImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ErpImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, v: f32) -> Self {
        ErpImage {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        ErpImage {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let at = (y * self.width + x) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    /// Standard ERP rasters are twice as wide as tall.
    pub fn is_standard_aspect(&self) -> bool {
        self.width == 2 * self.height
    }

    /// Enforces the 2:1 ERP aspect unless explicitly overridden.
    pub fn require_standard_aspect(&self, allow_nonstandard: bool) -> Result<()> {
        if !allow_nonstandard && !self.is_standard_aspect() {
            return Err(Error::invalid(format!(
                "ERP raster {}×{} is not 2:1; pass the override to proceed",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Longitude (in [0,2π)) and colatitude (in (0,π)) of a pixel center.
    pub fn pixel_direction(&self, x: usize, y: usize) -> (f64, f64) {
        let lon = 2.0 * std::f64::consts::PI * (x as f64 + 0.5) / self.width as f64;
        let colat = std::f64::consts::PI * (y as f64 + 0.5) / self.height as f64;
        (lon, colat)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .ok_or_else(|| Error::Format("gray buffer size".into()))?;
                img.save(path).map_err(|e| Error::Format(e.to_string()))
            }
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .ok_or_else(|| Error::Format("rgb buffer size".into()))?;
                img.save(path).map_err(|e| Error::Format(e.to_string()))
            }
            c => Err(Error::invalid(format!("cannot write {c}-channel PNG"))),
        }
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Format(e.to_string()))?;
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
                ErpImage::new(w, h, 1, data)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let data = rgb.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
                ErpImage::new(w, h, 3, data)
            }
        }
    }

    /// Writes a 1- or 3-channel float raster as PFM.
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_pfm(&mut w, self)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        read_pfm(&mut r)
    }

    /// Reads PNG or PFM based on the file extension.
    pub fn read_auto(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        match p.extension().and_then(|e| e.to_str()) {
            Some("pfm") => ErpImage::read_pfm(p),
            Some("png") => ErpImage::read_png(p),
            other => Err(Error::invalid(format!(
                "unsupported image extension {other:?} (use .png or .pfm)"
            ))),
        }
    }

    /// Writes PNG or PFM based on the file extension.
    pub fn write_auto(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        match p.extension().and_then(|e| e.to_str()) {
            Some("pfm") => self.write_pfm(p),
            Some("png") => self.write_png(p),
            other => Err(Error::invalid(format!(
                "unsupported image extension {other:?} (use .png or .pfm)"
            ))),
        }
    }
}

pub fn write_pfm(w: &mut impl Write, img: &ErpImage) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    write!(w, "{tag}\n{} {}\n-1.0\n", img.width, img.height)?;
    // Rows bottom to top.
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * img.channels..(y + 1) * img.width * img.channels];
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of PFM header".into()));
            }
            return Ok(tok);
        }
        let c = b[0] as char;
        if c.is_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(c);
        }
    }
}

pub fn read_pfm(r: &mut impl BufRead) -> Result<ErpImage> {
    let tag = read_token(r)?;
    let channels = match tag.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    };
    let width: usize = read_token(r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM width".into()))?;
    let height: usize = read_token(r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM height".into()))?;
    let scale: f64 = read_token(r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero PFM dimension".into()));
    }
    let little_endian = scale < 0.0;
    let n = width * height * channels;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let mut data = vec![0f32; n];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        data[i] = if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
    }
    // Undo the bottom-to-top row order.
    let mut flipped = vec![0f32; n];
    let rowlen = width * channels;
    for y in 0..height {
        let src = &data[(height - 1 - y) * rowlen..(height - y) * rowlen];
        flipped[y * rowlen..(y + 1) * rowlen].copy_from_slice(src);
    }
    ErpImage::new(width, height, channels, flipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_gray() {
        let img = ErpImage::from_fn(6, 3, 1, |x, y, _| (x * 10 + y) as f32 * 0.125 - 1.5);
        let mut buf = Vec::new();
        write_pfm(&mut buf, &img).unwrap();
        let back = read_pfm(&mut buf.as_slice()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_roundtrip_color() {
        let img = ErpImage::from_fn(4, 2, 3, |x, y, c| (x + 2 * y + 3 * c) as f32);
        let mut buf = Vec::new();
        write_pfm(&mut buf, &img).unwrap();
        let back = read_pfm(&mut buf.as_slice()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn aspect_enforcement() {
        let img = ErpImage::zeros(64, 32, 1);
        assert!(img.require_standard_aspect(false).is_ok());
        let odd = ErpImage::zeros(64, 48, 1);
        assert!(odd.require_standard_aspect(false).is_err());
        assert!(odd.require_standard_aspect(true).is_ok());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ErpImage::new(4, 4, 1, vec![0.0; 15]).is_err());
        assert!(ErpImage::new(0, 4, 1, vec![]).is_err());
    }
}
