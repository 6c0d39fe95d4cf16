//! 8-bit RGB images and PNG coding for images and label maps.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::shape(format!("{height}x{width} RGB image with {} bytes", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let scale = T::lit(1.0 / 255.0);
        Tensor::from_fn([3, self.height, self.width], |i| T::from_count(self.data[3 * (i % hw) + i / hw] as usize) * scale)
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    /// Decodes any 8/16-bit gray, gray+alpha, palette, RGB or RGBA PNG;
    /// alpha is dropped and 16-bit samples keep their high byte.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, color, buf) = decode_png(bytes)?;
        let data: Vec<u8> = match color {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(Error::Unsupported("unexpanded palette PNG".into())),
        };
        Self::new(h, w, data)
    }
}

impl LabelMap {
    /// 8-bit grayscale PNG; pixel value is the label.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width(), self.height(), png::ColorType::Grayscale, self.data())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, color, buf) = decode_png(bytes)?;
        if color != png::ColorType::Grayscale {
            return Err(Error::Unsupported(format!("label PNG must be 8-bit grayscale, got {color:?}")));
        }
        LabelMap::new(h, w, buf)
    }
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let png_err = |e: png::EncodingError| Error::Unsupported(format!("PNG encoding: {e}"));
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let bad = |e: png::DecodingError| Error::InvalidShape(format!("undecodable PNG: {e}"));
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::InvalidShape("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let img = RgbImage::new(2, 3, (0..18).map(|v| v * 13).collect()).unwrap();
        assert_eq!(RgbImage::from_png(&img.to_png().unwrap()).unwrap(), img);
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 255]).unwrap();
        assert_eq!(LabelMap::from_png(&labels.to_png().unwrap()).unwrap(), labels);
        assert!(RgbImage::from_png(b"not a png").is_err());
    }

    #[test]
    fn gray_png_expands_to_rgb() {
        let labels = LabelMap::new(1, 2, vec![7, 200]).unwrap();
        let img = RgbImage::from_png(&labels.to_png().unwrap()).unwrap();
        assert_eq!(img.data(), &[7, 7, 7, 200, 200, 200]);
    }

    #[test]
    fn tensor_is_planar() {
        let img = RgbImage::new(1, 2, vec![255, 0, 0, 0, 255, 0]).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
