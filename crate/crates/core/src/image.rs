//! Float image buffers and the PFM / PPM / PGM codecs.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved image. Samples are held as f64 in memory and
/// serialized as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        ImageBuffer { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        let mut img = Self::new(width, height, channels);
        img.data.iter_mut().for_each(|v| *v = value);
        img
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, channels, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn scaled(&self, s: f64) -> ImageBuffer {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Writes a little-endian PFM (scale -1.0, bottom-to-top rows).
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4 + 32);
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        write!(bytes, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row_len = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row_len..(y + 1) * row_len] {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
        let path = path.as_ref();
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let channels = match line.trim() {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("header is not PF/Pf")),
        };
        line.clear();
        reader.read_line(&mut line)?;
        let dims: Vec<usize> =
            line.split_whitespace().filter_map(|s| s.parse().ok()).collect();
        if dims.len() != 2 {
            return Err(bad("bad dimensions line"));
        }
        let (width, height) = (dims[0], dims[1]);
        line.clear();
        reader.read_line(&mut line)?;
        let scale: f64 = line.trim().parse().map_err(|_| bad("bad scale line"))?;
        let little = scale < 0.0;
        let mut raw = vec![0u8; width * height * channels * 4];
        reader.read_exact(&mut raw).map_err(|_| bad("truncated sample data"))?;
        let row_len = width * channels;
        let mut data = vec![0.0; width * height * channels];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let file_row = i / row_len;
            let y = height - 1 - file_row;
            data[y * row_len + i % row_len] = v as f64;
        }
        ImageBuffer::from_data(width, height, channels, data)
    }

    /// 8-bit binary PPM preview with gamma 2.2 encoding. Single-channel
    /// images are replicated to gray.
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.pixel_count() * 3 + 32);
        write!(bytes, "P6\n{} {}\n255\n", self.width, self.height)?;
        for i in 0..self.pixel_count() {
            let px = self.pixel(i);
            for c in 0..3 {
                let v = if self.channels == 3 { px[c] } else { px[0] };
                bytes.push(encode_gamma(v));
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Writes a binary PGM; values are clamped to [0,1] and scaled to 255
    /// without gamma (masks).
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.pixel_count() + 32);
        write!(bytes, "P5\n{} {}\n255\n", self.width, self.height)?;
        for i in 0..self.pixel_count() {
            bytes.push((self.pixel(i)[0].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
        let path = path.as_ref();
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let bytes = fs::read(path)?;
        // Header: magic, width, height, maxval separated by whitespace.
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let maxval: f64 = fields[3].parse().map_err(|_| bad("bad maxval"))?;
        let body = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated data"))?;
        let data = body.iter().map(|&b| b as f64 / maxval).collect();
        ImageBuffer::from_data(width, height, 1, data)
    }
}

pub fn encode_gamma(v: f64) -> u8 {
    (v.clamp(0.0, 1.0).powf(1.0 / 2.2) * 255.0).round() as u8
}
