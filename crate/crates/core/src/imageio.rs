//! PNG/JPEG reading and PNG writing for the in-memory image types.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};

/// 8-bit single-channel image (masks, heatmaps).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreyImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn to_rgb(img: DynamicImage) -> RgbImage {
    let rgb = img.to_rgb8();
    RgbImage { height: rgb.height() as usize, width: rgb.width() as usize, pixels: rgb.into_raw() }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let rgb = to_rgb(img);
    if rgb.height == 0 || rgb.width == 0 {
        return Err(image_err(path, "empty image"));
    }
    Ok(rgb)
}

/// Decodes PNG or JPEG bytes; greyscale inputs are expanded to RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| image_err(Path::new("<memory>"), e))?;
    let rgb = to_rgb(img);
    if rgb.height == 0 || rgb.width == 0 {
        return Err(image_err(Path::new("<memory>"), "empty image"));
    }
    Ok(rgb)
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("pixel buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn encode_grey_png(img: &GreyImage) -> Vec<u8> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("pixel buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_png(img))?;
    Ok(())
}

pub fn write_grey_png(path: &Path, img: &GreyImage) -> Result<()> {
    std::fs::write(path, encode_grey_png(img))?;
    Ok(())
}

/// `(height, width)` from the image header, without decoding pixels.
pub fn image_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| image_err(Path::new("<memory>"), e))?;
    let (w, h) = reader.into_dimensions().map_err(|e| image_err(Path::new("<memory>"), e))?;
    Ok((h as usize, w as usize))
}

pub fn decode_grey(bytes: &[u8]) -> Result<GreyImage> {
    let img = image::load_from_memory(bytes).map_err(|e| image_err(Path::new("<memory>"), e))?.to_luma8();
    Ok(GreyImage { height: img.height() as usize, width: img.width() as usize, pixels: img.into_raw() })
}

pub fn read_grey(path: &Path) -> Result<GreyImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    Ok(GreyImage { height: img.height() as usize, width: img.width() as usize, pixels: img.into_raw() })
}

/// Bilinear resize; returns a copy when the size already matches.
pub fn resize_rgb(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if (img.height, img.width) == (height, width) {
        return img.clone();
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("pixel buffer matches dimensions");
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    RgbImage { height, width, pixels: out.into_raw() }
}

/// Places images left to right on a white canvas, top-aligned.
pub fn contact_sheet(images: &[RgbImage], gap: usize) -> RgbImage {
    let height = images.iter().map(|i| i.height).max().unwrap_or(1);
    let width = images.iter().map(|i| i.width).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut sheet = RgbImage::filled(height, width.max(1), [255, 255, 255]);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            for x in 0..img.width {
                sheet.set(y, x0 + x, img.get(y, x));
            }
        }
        x0 += img.width + gap;
    }
    sheet
}
