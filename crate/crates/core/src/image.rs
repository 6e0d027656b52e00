//! Image and scan-mask containers plus their binary persistence formats.
//!
//! Images are stored as `UASIM1\0`, `u32` height, `u32` width (little-endian)
//! and then `height * width` little-endian `f32` values in row-major order.
//! Masks are stored as `UAMSK1\0`, the same two dimensions, and the mask bits
//! packed row-major, most significant bit first, with the final byte
//! zero-padded.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 7] = b"UASIM1\0";
pub const MASK_MAGIC: &[u8; 7] = b"UAMSK1\0";

/// A single-channel grid of non-negative finite intensities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    /// Builds a validated image: finite, non-negative values and a buffer
    /// that matches the dimensions.
    pub fn from_vec(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let img = Self::from_vec_unchecked(height, width, pixels)?;
        img.validate()?;
        Ok(img)
    }

    /// Like [`Image::from_vec`] but only checks the buffer length. Used for
    /// signed quantities such as calibrated interval bounds.
    pub fn from_vec_unchecked(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Input(format!(
                "pixel buffer has {} values, expected {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, v)) = self
            .pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Input(format!(
                "pixel {i} has invalid intensity {v}"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Crops a `rows x cols` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Image {
        assert!(row + rows <= self.height && col + cols <= self.width);
        Image::from_fn(rows, cols, |r, c| self.get(row + r, col + c))
    }

    /// Rounds every pixel to the nearest `f32`, so the in-memory image equals
    /// what the binary format stores.
    pub fn quantize_f32(mut self) -> Image {
        for v in &mut self.pixels {
            *v = *v as f32 as f64;
        }
        self
    }

    pub(crate) fn ensure_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Input(format!(
                "{what}: shape mismatch {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + 4 * self.pixels.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in &self.pixels {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Image> {
        let (height, width, body) = read_header(bytes, IMAGE_MAGIC, path)?;
        if body.len() != 4 * height * width {
            return Err(Error::format(
                path,
                format!(
                    "expected {} bytes of pixel data, found {}",
                    4 * height * width,
                    body.len()
                ),
            ));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Image::from_vec_unchecked(height, width, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_bytes(&bytes, path)
    }
}

fn read_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 7],
    path: &Path,
) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 15 || &bytes[..7] != magic {
        return Err(Error::format(path, "bad magic or truncated header"));
    }
    let height = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    Ok((height, width, &bytes[15..]))
}

/// Set of pixel coordinates inside an image grid. Stored as a dense bitmap,
/// so coordinates are deduplicated and in-bounds by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ScanMask {
    pub fn empty(height: usize, width: usize) -> Self {
        ScanMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        ScanMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Builds a mask from `(row, col)` pairs; duplicates collapse, anything
    /// out of bounds is rejected.
    pub fn from_coords(
        height: usize,
        width: usize,
        coords: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut mask = Self::empty(height, width);
        for (r, c) in coords {
            if r >= height || c >= width {
                return Err(Error::Input(format!(
                    "coordinate ({r}, {c}) outside {height}x{width} grid"
                )));
            }
            mask.bits[r * width + c] = true;
        }
        Ok(mask)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        ScanMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.bits[row * self.width + col]
    }

    pub fn contains_index(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Coordinates in ascending `(row, col)` order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn is_subset_of(&self, other: &ScanMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + self.bits.len().div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                if b {
                    byte |= 0x80 >> i;
                }
            }
            out.push(byte);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ScanMask> {
        let (height, width, body) = read_header(bytes, MASK_MAGIC, path)?;
        let n = height * width;
        if body.len() != n.div_ceil(8) {
            return Err(Error::format(path, "mask bit payload has wrong length"));
        }
        let bits = (0..n).map(|i| body[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(ScanMask {
            height,
            width,
            bits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ScanMask> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ScanMask::from_bytes(&bytes, path)
    }
}

/// Encodes values in `[0, 1]` as an 8-bit binary (`P5`) PGM.
pub fn to_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn save_pgm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, to_pgm(img)).map_err(|e| Error::io(path, e))
}
