//! In-memory RGB frames and label maps, with PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, stored row-major as `[height, width, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB needs {} values, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Mirror columns: column `j` moves to `width - 1 - j`.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let (width, height, bytes) = decode_png(path, png::Transformations::normalize_to_color8(), true)?;
        let data = bytes.into_iter().map(|b| f64::from(b) / 255.0).collect();
        Image::new(width, height, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        write_png(enc, &bytes, path)
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }
}

/// Per-pixel integer label ids (0 = background), row-major `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("label image", format!("{width}x{height} needs {} ids", width * height)));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of one label id.
    pub fn mask_of(&self, id: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == id).collect()
    }

    /// Loads a paletted (palette indices are the ids) or 8-bit grayscale PNG.
    pub fn load_png(path: &Path) -> Result<LabelImage> {
        let (width, height, bytes) = decode_png(path, png::Transformations::IDENTITY, false)?;
        LabelImage::new(width, height, bytes)
    }

    /// Writes an 8-bit paletted PNG whose palette indices are the label ids.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(label_palette());
        write_png(enc, &self.data, path)
    }
}

/// DAVIS-style palette: id 0 black, then bit-interleaved distinct colors.
pub fn label_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for id in 0u32..256 {
        let (mut r, mut g, mut b) = (0u32, 0u32, 0u32);
        let mut c = id;
        for shift in (0..8).rev() {
            r |= (c & 1) << shift;
            g |= ((c >> 1) & 1) << shift;
            b |= ((c >> 2) & 1) << shift;
            c >>= 3;
        }
        pal.extend_from_slice(&[r as u8, g as u8, b as u8]);
    }
    pal
}

/// Writes a single-channel 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    write_png(enc, data, path)
}

fn write_png(enc: png::Encoder<'_, BufWriter<File>>, bytes: &[u8], path: &Path) -> Result<()> {
    let to_err = |e: png::EncodingError| Error::Decode { path: path.to_path_buf(), detail: e.to_string() };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

fn decode_png(path: &Path, transform: png::Transformations, want_rgb: bool) -> Result<(usize, usize, Vec<u8>)> {
    let to_err = |detail: String| Error::Decode { path: path.to_path_buf(), detail };
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(|e| to_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| to_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| to_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(to_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
    };
    if !want_rgb {
        if channels != 1 {
            return Err(to_err(format!("label maps must be paletted or grayscale, got {:?}", info.color_type)));
        }
        return Ok((w, h, buf));
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf.chunks(channels) {
        match channels {
            1 | 2 => rgb.extend_from_slice(&[px[0], px[0], px[0]]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    Ok((w, h, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution() {
        let img = Image::new(3, 1, (0..9).map(|v| v as f64 / 9.0).collect()).unwrap();
        let f = img.flip_horizontal();
        assert_eq!(f.pixel(0, 0), img.pixel(0, 2));
        assert_eq!(f.flip_horizontal(), img);
    }

    #[test]
    fn png_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(4, 2, (0..24).map(|v| v as f64 / 23.0).collect()).unwrap().quantized();
        let p = dir.path().join("f.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);

        let labels = LabelImage::new(3, 2, vec![0, 1, 2, 3, 0, 7]).unwrap();
        let p = dir.path().join("l.png");
        labels.save_png(&p).unwrap();
        assert_eq!(LabelImage::load_png(&p).unwrap(), labels);
    }

    #[test]
    fn palette_starts_black_and_is_distinct() {
        let pal = label_palette();
        assert_eq!(&pal[..3], &[0, 0, 0]);
        let colors: std::collections::HashSet<_> = pal.chunks(3).collect();
        assert_eq!(colors.len(), 256);
    }
}
