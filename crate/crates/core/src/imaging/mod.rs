//! Image I/O, color conversion, resizing, and the photometric / geometric
//! augmentations used by the training pipeline.

pub(crate) mod augment;
mod color;
mod io;

pub use augment::{geometric_augment, photometric_transform, GeometricConfig, PhotometricParams};
pub use color::{lab_to_rgb, rgb_to_lab};
pub use io::{load_image, load_mask, save_image, save_labels_png, save_mask};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// RGB image, float working form with channels interleaved per pixel,
/// values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// H*W*3, row-major, RGB interleaved.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    pub fn clamp(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resize, half-pixel-center convention.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::new(out_w, out_h);
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        for oy in 0..out_h {
            let src_y = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (src_y.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = (src_y - y0 as f64).clamp(0.0, 1.0);
            for ox in 0..out_w {
                let src_x = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (src_x.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = (src_x - x0 as f64).clamp(0.0, 1.0);
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    let tl = self.get(x0, y0)[c];
                    let tr = self.get(x1, y0)[c];
                    let bl = self.get(x0, y1)[c];
                    let br = self.get(x1, y1)[c];
                    let top = tl * (1.0 - fx) + tr * fx;
                    let bot = bl * (1.0 - fx) + br * fx;
                    rgb[c] = top * (1.0 - fy) + bot * fy;
                }
                out.set(ox, oy, rgb);
            }
        }
        out
    }

    /// Planar `[1,3,H,W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let px = self.get(x, y);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = px[c];
                }
            }
        }
        Tensor::from_vec(&[1, 3, h, w], data).expect("sized above")
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Image> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected [1,3,H,W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    rgb[c] = t.data()[c * h * w + y * w + x];
                }
                img.set(x, y, rgb);
            }
        }
        Ok(img)
    }
}

/// Binary segmentation mask, 1 = lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Nearest-neighbor resize (keeps the mask binary).
    pub fn resize(&self, out_w: usize, out_h: usize) -> Mask {
        let mut out = Mask::new(out_w, out_h);
        for oy in 0..out_h {
            let sy = (((oy as f64 + 0.5) * self.height as f64 / out_h as f64 - 0.5).round()
                as isize)
                .clamp(0, self.height as isize - 1) as usize;
            for ox in 0..out_w {
                let sx = (((ox as f64 + 0.5) * self.width as f64 / out_w as f64 - 0.5).round()
                    as isize)
                    .clamp(0, self.width as isize - 1) as usize;
                out.set(ox, oy, self.get(sx, sy));
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("sized")
    }
}

/// CIELAB image, channels (L, a, b) interleaved, L in [0, 100].
#[derive(Debug, Clone)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LabImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}
