//! NSFC1 binary grids and PNG/CSV export.
//!
//! Layout of an NSFC1 file, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       5     magic "NSFC1"
//! 5       4     rows     (u32)
//! 9       4     cols     (u32)
//! 13      4     channels (u32)
//! 17      4*N   f32 payload, N = channels*rows*cols,
//!               channel-major then row-major (index = (c*rows + r)*cols + col)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"NSFC1";
const HEADER_LEN: usize = 5 + 12;

/// A dense `channels x rows x cols` grid of f32 values as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(channels: usize, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * rows * cols {
            return Err(Error::shape(format!(
                "grid payload has {} values, expected {channels}x{rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, channels, data })
    }

    /// Narrows f64 values to f32.
    pub fn from_f64(channels: usize, rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(channels, rows, cols, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for dim in [self.rows, self.cols, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
            return Err(Error::format(origin, "missing NSFC1 magic"));
        }
        let word = |i: usize| {
            let off = 5 + 4 * i;
            u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
        };
        let (rows, cols, channels) = (word(0), word(1), word(2));
        let count = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::format(origin, "dimension overflow"))?;
        if bytes.len() != HEADER_LEN + 4 * count {
            return Err(Error::format(
                origin,
                format!("payload is {} bytes, header announces {count} f32 values", bytes.len() - HEADER_LEN),
            ));
        }
        let data = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { rows, cols, channels, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.encode())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("channel,row,col,value\n");
        for c in 0..self.channels {
            for r in 0..self.rows {
                for col in 0..self.cols {
                    let v = self.data[(c * self.rows + r) * self.cols + col];
                    s.push_str(&format!("{c},{r},{col},{v}\n"));
                }
            }
        }
        write_bytes(path, s.as_bytes())
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Linear radiance to display value: scale by `2^exposure`, clamp, gamma 2.2.
pub fn tonemap(v: f64, exposure: f64) -> u8 {
    let scaled = (v * exposure.exp2()).clamp(0.0, 1.0);
    (scaled.powf(1.0 / 2.2) * 255.0).round() as u8
}

/// Inverse of [`tonemap`] up to 8-bit quantization.
pub fn untonemap(v: u8, exposure: f64) -> f64 {
    (v as f64 / 255.0).powf(2.2) / exposure.exp2()
}

/// Writes a grid as an 8-bit PNG. Three channels map to RGB, anything else is
/// averaged to grayscale.
pub fn write_png(grid: &Grid, exposure: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let plane = grid.rows * grid.cols;
    let (color, pixels): (png::ColorType, Vec<u8>) = if grid.channels == 3 {
        let mut px = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                px.push(tonemap(grid.data[c * plane + i] as f64, exposure));
            }
        }
        (png::ColorType::Rgb, px)
    } else {
        let px = (0..plane)
            .map(|i| {
                let mean = (0..grid.channels).map(|c| grid.data[c * plane + i] as f64).sum::<f64>()
                    / grid.channels.max(1) as f64;
                tonemap(mean, exposure)
            })
            .collect();
        (png::ColorType::Grayscale, px)
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, grid.cols as u32, grid.rows as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_bytes(path, &buf)
}

/// Reads an 8-bit grayscale or RGB(A) PNG back into linear values.
pub fn read_png(path: impl AsRef<Path>, exposure: f64) -> Result<Grid> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (rows, cols) = (info.height as usize, info.width as usize);
    let plane = rows * cols;
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
    };
    let mut data = vec![0f32; plane * channels];
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = untonemap(buf[i * stride + c], exposure) as f32;
        }
    }
    Grid::new(channels, rows, cols, data)
}

/// Writes UTF-8 text, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
