//! PNG images: RGB input pairs, 16-bit ground truth and visualisations.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use tdstereo_tensor::Tensor;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};

/// Fixed scale of 16-bit disparity PNGs: stored value = disparity × 256,
/// with 0 marking pixels without ground truth.
pub const GT_PNG_SCALE: f64 = 256.0;

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            format!("reading {}", path.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image as a `3×H×W` tensor with channels in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.into_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * plane + p] = px.0[k] as f64 / 65535.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Writes a `3×H×W` tensor in [0, 1] as an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::Invalid(format!("expected a 3×H×W image, got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|k| (t.data()[k * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    save(path, img.save(path))
}

fn save(path: &Path, r: image::ImageResult<()>) -> Result<()> {
    r.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a 16-bit disparity PNG (value / 256; zero = invalid).
pub fn read_disparity16(path: &Path) -> Result<DisparityMap> {
    let img = open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f64> = img.pixels().map(|p| p.0[0] as f64).collect();
    let valid = Tensor::new(vec![h, w], raw.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())?;
    let values = Tensor::new(vec![h, w], raw.iter().map(|&v| v / GT_PNG_SCALE).collect())?;
    DisparityMap::new(values, valid)
}

pub fn write_disparity16(path: &Path, d: &DisparityMap) -> Result<()> {
    let (h, w) = (d.height(), d.width());
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let v = if d.is_valid(y, x) {
            (d.get(y, x) * GT_PNG_SCALE).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        Luma([v])
    });
    save(path, img.save(path))
}

/// Colour-mapped visualisation over `[0, max_disp]`, holes black.
pub fn write_colormap(path: &Path, d: &DisparityMap, max_disp: f64) -> Result<()> {
    let bytes = super::colormap::colorize(d, max_disp);
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(d.width() as u32, d.height() as u32, bytes).expect("buffer sized to image");
    save(path, img.save(path))
}
