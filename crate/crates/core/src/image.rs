//! RGB images with unit-interval channel values, PNG I/O and the training
//! augmentations.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ImageSize;

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 32;

/// Height x width x 3, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Error unless both sides reach [`MIN_SIDE`].
    pub fn check_min_size(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::Input(format!(
                "image {}x{} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Round-trips through 8-bit quantization, as a PNG save/load would.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    /// Luma replicated across the three channels.
    pub fn grayscale(&self) -> Self {
        let mut out = self.clone();
        for px in out.data.chunks_mut(3) {
            let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.iter_mut().for_each(|v| *v = l.clamp(0.0, 1.0));
        }
        out
    }

    pub fn brightness(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
        out
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * 3;
                let dst = (y * self.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Mean of the three channels at a fractional position, bilinear, with
    /// edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        let (p00, p10, p01, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - ax) + p10[c] * ax;
            let bot = p01[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }
}
