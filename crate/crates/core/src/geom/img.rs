//! RGB images with f64 channels in the 0..=255 range.

use std::path::Path;

use nalgebra::Vector3;

use crate::{Error, Result};

/// Row-major RGB image; channel values live on the 0..=255 scale but are
/// stored as f64 (quantization happens only when encoding to 8-bit).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: u32,
    pub height: u32,
    pub data: Vec<Vector3<f64>>,
}

impl ImageBuf {
    pub fn filled(width: u32, height: u32, value: Vector3<f64>) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn black(width: u32, height: u32) -> Self {
        Self::filled(width, height, Vector3::zeros())
    }

    pub fn pixel_index(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn get(&self, x: u32, y: u32) -> Vector3<f64> {
        self.data[self.pixel_index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: Vector3<f64>) {
        let idx = self.pixel_index(x, y);
        self.data[idx] = value;
    }

    /// Bilinear sample at a continuous pixel coordinate (pixel centers sit at
    /// half-integers, matching the rasterizer); the border is clamped.
    pub fn sample_bilinear(&self, p: nalgebra::Vector2<f64>) -> Vector3<f64> {
        let fx = p.x - 0.5;
        let fy = p.y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let clamp_x = |x: f64| (x.max(0.0) as u32).min(self.width - 1);
        let clamp_y = |y: f64| (y.max(0.0) as u32).min(self.height - 1);
        let (x0i, x1i) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let (y0i, y1i) = (clamp_y(y0), clamp_y(y0 + 1.0));
        self.get(x0i, y0i) * ((1.0 - tx) * (1.0 - ty))
            + self.get(x1i, y0i) * (tx * (1.0 - ty))
            + self.get(x0i, y1i) * ((1.0 - tx) * ty)
            + self.get(x1i, y1i) * (tx * ty)
    }

    /// Quantizes to 8-bit: clamp each channel to [0, 255], then round half
    /// away from zero. This is the only place values leave the f64 domain.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for c in 0..3 {
                out.push(px[c].clamp(0.0, 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != (width * height * 3) as usize {
            return Err(Error::Dimension(format!(
                "expected {} bytes for a {width}x{height} RGB image, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        Ok(ImageBuf {
            width,
            height,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8();
        image::save_buffer(
            path,
            &buf,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::parse(path, format!("png encode failed: {e}")))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::parse(path, format!("png decode failed: {e}")))?
            .into_rgb8();
        Self::from_rgb8(img.width(), img.height(), img.as_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_clamps_and_rounds() {
        let mut img = ImageBuf::black(2, 1);
        img.set(0, 0, Vector3::new(-5.0, 254.5, 300.0));
        img.set(1, 0, Vector3::new(0.49, 0.5, 127.1));
        assert_eq!(img.to_rgb8(), vec![0, 255, 255, 0, 1, 127]);
    }

    #[test]
    fn rgb8_round_trip_preserves_integral_values() {
        let mut img = ImageBuf::black(3, 2);
        for (k, px) in img.data.iter_mut().enumerate() {
            *px = Vector3::new(k as f64, (k * 7 % 256) as f64, 255.0 - k as f64);
        }
        let back = ImageBuf::from_rgb8(3, 2, &img.to_rgb8()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn png_round_trip_is_lossless_for_8bit_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ImageBuf::black(5, 4);
        for (k, px) in img.data.iter_mut().enumerate() {
            *px = Vector3::new((k * 13 % 256) as f64, (k * 5 % 256) as f64, (k % 256) as f64);
        }
        img.save_png(&path).unwrap();
        let back = ImageBuf::load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn from_rgb8_rejects_wrong_length() {
        assert!(ImageBuf::from_rgb8(2, 2, &[0u8; 11]).is_err());
    }
}
