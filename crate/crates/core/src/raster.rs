//! Pixel grids and raster file IO.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Height × width × channels, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { pixels: Array3::zeros((height, width, channels)) }
    }

    pub fn from_pixels(pixels: Array3<f32>) -> Self {
        Self { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum()
    }

    /// Loads an 8-bit PNG/PGM as RGB (3 channels) or gray (1 channel).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let pixels = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                    g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
                })
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                    rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
                })
            }
        };
        Ok(Self { pixels })
    }

    /// Saves as 8-bit; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.pixels.dim();
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let result = if c == 1 {
            let mut out = GrayImage::new(w as u32, h as u32);
            for ((y, x, _), &v) in self.pixels.indexed_iter() {
                out.put_pixel(x as u32, y as u32, Luma([to_u8(v)]));
            }
            out.save(path)
        } else {
            let mut out = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = std::array::from_fn(|k| to_u8(self.pixels[[y, x, k.min(c - 1)]]));
                    out.put_pixel(x as u32, y as u32, Rgb(px));
                }
            }
            out.save(path)
        };
        result.map_err(|source| Error::Image { path: path.into(), source })
    }
}

/// Writes an 8-bit single-channel raster (PNG or binary PGM by extension).
pub fn save_gray_u8(values: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in values.indexed_iter() {
        out.put_pixel(x as u32, y as u32, Luma([v]));
    }
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    if format == ImageFormat::Pnm {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
        encoder
            .encode(out.as_raw().as_slice(), w as u32, h as u32, image::ExtendedColorType::L8)
            .map_err(|source| Error::Image { path: path.into(), source })
    } else {
        out.save_with_format(path, format).map_err(|source| Error::Image { path: path.into(), source })
    }
}

pub fn load_gray_u8(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| g.get_pixel(x as u32, y as u32)[0]))
}

/// `round(255 · v / max(v))`, all zeros when the map is identically zero.
pub fn heatmap_u8(map: &Array2<f64>) -> Array2<u8> {
    let max = map.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (255.0 * v.max(0.0) / max).round().min(255.0) as u8)
}
