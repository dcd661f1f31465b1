//! Color images and depth maps.

use crate::error::{Error, Result};

/// Row-major RGB image with channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("color image", "zero extent"));
        }
        if data.len() != width * height {
            return Err(Error::shape(
                "color image",
                format!("{width}x{height} needs {} pixels, got {}", width * height, data.len()),
            ));
        }
        if let Some(i) = data
            .iter()
            .position(|p| p.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} has a channel outside [0, 1]"
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    /// Pixel with coordinates clamped to the image (edge replication).
    pub fn get_clamped(&self, x: isize, y: isize) -> [f32; 3] {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample at continuous coordinates; pixel centers sit on
    /// integer coordinates and samples beyond the border replicate edges.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let p00 = self.get_clamped(x0, y0);
        let p10 = self.get_clamped(x0 + 1, y0);
        let p01 = self.get_clamped(x0, y0 + 1);
        let p11 = self.get_clamped(x0 + 1, y0 + 1);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            out[c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32;
        }
        out
    }

    /// Quantized to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|p| p.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8))
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{width}x{height} RGB needs {} bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        Self::new(width, height, data)
    }
}

/// Row-major depth in meters; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("depth map", "zero extent"));
        }
        if data.len() != width * height {
            return Err(Error::shape(
                "depth map",
                format!("{width}x{height} needs {} values, got {}", width * height, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "depth {} at pixel {i} is negative or non-finite",
                data[i]
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Depth in whole millimeters, saturating at 65535; invalid stays 0.
    pub fn to_millimeters(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16)
            .collect()
    }

    pub fn from_millimeters(width: usize, height: usize, mm: &[u16]) -> Result<Self> {
        Self::new(width, height, mm.iter().map(|&v| v as f64 / 1000.0).collect())
    }
}
