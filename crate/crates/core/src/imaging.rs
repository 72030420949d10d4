//! RGB float images and PNG encoding.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::{Result, SagsError};

/// Interleaved RGB image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(SagsError::Argument(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| color).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| SagsError::Image("buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| image_err(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SagsError::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: image::ImageError) -> SagsError {
    SagsError::Image(format!("{}: {e}", path.display()))
}

pub fn save_gray8(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| SagsError::Image("buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn save_gray16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| SagsError::Image("buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn load_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = Image::filled(3, 2, [0.0, 0.5, 1.0]);
        img.set_pixel(2, 1, [0.2, 0.4, 0.6]);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!(back.pixel(0, 0), [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn missing_file_names_path() {
        let err = Image::load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn size_checked() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
    }
}
