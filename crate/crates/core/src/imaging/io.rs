//! PNG and PPM (P6) image files, 8-bit only.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Image, Mask};

fn u8_to_f(v: u8) -> f64 {
    v as f64 / 255.0
}

fn f_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => load_ppm(path),
        _ => load_png(path),
    }
}

fn load_png(path: &Path) -> Result<Image> {
    let dyn_img = image::open(path).map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))?;
    use image::DynamicImage::*;
    let rgb = match dyn_img {
        ImageRgb8(img) => img,
        ImageRgba8(img) => image::DynamicImage::ImageRgba8(img).to_rgb8(),
        ImageLuma8(img) => image::DynamicImage::ImageLuma8(img).to_rgb8(),
        ImageRgb16(_) | ImageRgba16(_) | ImageLuma16(_) | ImageLumaA16(_) => {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported bit depth (16-bit) in {}",
                path.display()
            )))
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported color type {:?} in {}",
                other.color(),
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::new(w, h);
    for (x, y, px) in rgb.enumerate_pixels() {
        img.set(
            x as usize,
            y as usize,
            [u8_to_f(px[0]), u8_to_f(px[1]), u8_to_f(px[2])],
        );
    }
    Ok(img)
}

fn load_ppm(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != b"P6" {
        return Err(Error::UnsupportedFormat(format!(
            "not a P6 PPM: {}",
            path.display()
        )));
    }
    let mut header = Vec::new();
    // three whitespace-separated tokens: width, height, maxval
    while header.len() < 3 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::UnsupportedFormat(format!(
                "truncated PPM header: {}",
                path.display()
            )));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(String::from));
    }
    let dims: Vec<usize> = header
        .iter()
        .take(3)
        .map(|s| {
            s.parse::<usize>().map_err(|_| {
                Error::UnsupportedFormat(format!("bad PPM header token '{s}': {}", path.display()))
            })
        })
        .collect::<Result<_>>()?;
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "unsupported bit depth (maxval {maxval}) in {}",
            path.display()
        )));
    }
    let mut buf = vec![0u8; w * h * 3];
    r.read_exact(&mut buf)
        .map_err(|_| Error::UnsupportedFormat(format!("truncated PPM data: {}", path.display())))?;
    Ok(Image {
        width: w,
        height: h,
        pixels: buf.into_iter().map(u8_to_f).collect(),
    })
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => save_ppm(image, path),
        _ => save_png(image, path),
    }
}

fn save_png(image: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let px = image.get(x, y);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([f_to_u8(px[0]), f_to_u8(px[1]), f_to_u8(px[2])]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))
}

fn save_ppm(image: &Image, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P6\n{} {}\n255\n", image.width, image.height).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = image.pixels.iter().map(|&v| f_to_u8(v)).collect();
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit grayscale mask; pixels >= 128 count as lesion.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let dyn_img = image::open(path).map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))?;
    let gray = match dyn_img {
        image::DynamicImage::ImageLuma8(img) => img,
        image::DynamicImage::ImageRgb8(img) => image::DynamicImage::ImageRgb8(img).to_luma8(),
        image::DynamicImage::ImageLuma16(_) | image::DynamicImage::ImageRgb16(_) => {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported bit depth (16-bit) in {}",
                path.display()
            )))
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported mask color type {:?} in {}",
                other.color(),
                path.display()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut mask = Mask::new(w, h);
    for (x, y, px) in gray.enumerate_pixels() {
        mask.set(x as usize, y as usize, u8::from(px[0] >= 128));
    }
    Ok(mask)
}

/// Writes a mask as 8-bit grayscale PNG: 0 = background, 255 = lesion.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask.get(x, y) != 0 { 255 } else { 0 }]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))
}

/// Writes superpixel labels as 16-bit grayscale PNG.
pub fn save_labels_png(labels: &[u32], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let v = labels[y * width + x];
            buf.put_pixel(x as u32, y as u32, image::Luma([v.min(u16::MAX as u32) as u16]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))
}
