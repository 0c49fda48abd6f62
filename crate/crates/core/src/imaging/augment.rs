//! Photometric transform T (geometry-preserving) and geometric augmentations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Mask};

/// Ranges for the photometric jitter. Each delta is drawn uniformly from its
/// `(lo, hi)` interval; a degenerate interval pins the delta.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhotometricParams {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: (f64, f64),
    pub blur_sigma: (f64, f64),
}

impl Default for PhotometricParams {
    fn default() -> Self {
        // the augmentation list comes from the training recipe; magnitudes are
        // ours and configurable
        PhotometricParams {
            brightness: (-0.2, 0.2),
            contrast: (-0.2, 0.2),
            saturation: (-0.2, 0.2),
            hue: (-0.05, 0.05),
            blur_sigma: (0.0, 1.5),
        }
    }
}

impl PhotometricParams {
    pub fn identity() -> Self {
        PhotometricParams {
            brightness: (0.0, 0.0),
            contrast: (0.0, 0.0),
            saturation: (0.0, 0.0),
            hue: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

pub(crate) fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let (h, s, v) = (hsv[0].rem_euclid(1.0) * 6.0, hsv[1], hsv[2]);
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 1e-9 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (w, h) = (image.width as isize, image.height as isize);
    // horizontal then vertical pass, edge clamp
    let mut tmp = Image::new(image.width, image.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x + ki as isize - radius).clamp(0, w - 1);
                let px = image.get(sx as usize, y as usize);
                for c in 0..3 {
                    acc[c] += kv * px[c];
                }
            }
            tmp.set(x as usize, y as usize, acc);
        }
    }
    let mut out = Image::new(image.width, image.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y + ki as isize - radius).clamp(0, h - 1);
                let px = tmp.get(x as usize, sy as usize);
                for c in 0..3 {
                    acc[c] += kv * px[c];
                }
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    out
}

/// Color jitter + Gaussian blur. Geometry is untouched so covariance pairs
/// stay pixel-aligned; output is clamped to [0,1] and deterministic per seed.
pub fn photometric_transform(image: &Image, params: &PhotometricParams, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let db = sample(&mut rng, params.brightness);
    let dc = sample(&mut rng, params.contrast);
    let ds = sample(&mut rng, params.saturation);
    let dh = sample(&mut rng, params.hue);
    let sigma = sample(&mut rng, params.blur_sigma);

    let mut out = image.clone();
    if dh != 0.0 || ds != 0.0 {
        for px in out.pixels.chunks_exact_mut(3) {
            let mut hsv = rgb_to_hsv([px[0], px[1], px[2]]);
            hsv[0] = (hsv[0] + dh).rem_euclid(1.0);
            hsv[1] = (hsv[1] * (1.0 + ds)).clamp(0.0, 1.0);
            let rgb = hsv_to_rgb(hsv);
            px.copy_from_slice(&rgb);
        }
    }
    if dc != 0.0 {
        for v in &mut out.pixels {
            *v = (*v - 0.5) * (1.0 + dc) + 0.5;
        }
    }
    if db != 0.0 {
        for v in &mut out.pixels {
            *v += db;
        }
    }
    out = gaussian_blur(&out, sigma);
    out.clamp();
    out
}

/// Probabilities and magnitudes of the geometric augmentations. The paper
/// fixes the probabilities (5% each, rotation 20%); magnitudes are ours.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeometricConfig {
    pub p_mirror: f64,
    pub p_rotate: f64,
    pub p_shift: f64,
    pub p_shear: f64,
    pub p_zoom: f64,
    pub max_rotate_deg: f64,
    pub max_shift_frac: f64,
    pub max_shear_deg: f64,
    pub zoom_range: (f64, f64),
}

impl Default for GeometricConfig {
    fn default() -> Self {
        GeometricConfig {
            p_mirror: 0.05,
            p_rotate: 0.20,
            p_shift: 0.05,
            p_shear: 0.05,
            p_zoom: 0.05,
            max_rotate_deg: 15.0,
            max_shift_frac: 0.10,
            max_shear_deg: 10.0,
            zoom_range: (0.9, 1.1),
        }
    }
}

impl GeometricConfig {
    pub fn identity() -> Self {
        GeometricConfig {
            p_mirror: 0.0,
            p_rotate: 0.0,
            p_shift: 0.0,
            p_shear: 0.0,
            p_zoom: 0.0,
            ..Default::default()
        }
    }

    pub fn always_mirror() -> Self {
        GeometricConfig {
            p_mirror: 1.0,
            ..GeometricConfig::identity()
        }
    }
}

/// 2x3 affine matrix mapping output coordinates to source coordinates.
type Affine = [[f64; 3]; 2];

fn affine_identity() -> Affine {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
}

fn affine_mul(a: &Affine, b: &Affine) -> Affine {
    // rows of a applied after b (both augmented with [0,0,1])
    let mut out = affine_identity();
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
        }
    }
    out
}

/// Applies one seeded spatial transform to image and mask together: bilinear
/// sampling for the image, nearest-neighbor for the mask.
pub fn geometric_augment(
    image: &Image,
    mask: &Mask,
    config: &GeometricConfig,
    seed: u64,
) -> (Image, Mask) {
    assert_eq!(
        (image.width, image.height),
        (mask.width, mask.height),
        "mask dims must equal image dims"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (image.width, image.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    // inverse transform (output -> source), composed around the image center
    let mut m = affine_identity();
    let mut any = false;
    // draw all decisions in a fixed order so the stream is stable
    let mirror = rng.gen::<f64>() < config.p_mirror;
    let rotate = rng.gen::<f64>() < config.p_rotate;
    let shift = rng.gen::<f64>() < config.p_shift;
    let shear = rng.gen::<f64>() < config.p_shear;
    let zoom = rng.gen::<f64>() < config.p_zoom;
    let angle = sample(&mut rng, (-config.max_rotate_deg, config.max_rotate_deg)).to_radians();
    let dx = sample(&mut rng, (-config.max_shift_frac, config.max_shift_frac)) * w as f64;
    let dy = sample(&mut rng, (-config.max_shift_frac, config.max_shift_frac)) * h as f64;
    let shear_t = sample(&mut rng, (-config.max_shear_deg, config.max_shear_deg))
        .to_radians()
        .tan();
    let zf = sample(&mut rng, config.zoom_range);

    if mirror {
        m = affine_mul(&[[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &m);
        any = true;
    }
    if rotate {
        // inverse rotation = rotation by -angle
        let (s, c) = (-angle).sin_cos();
        m = affine_mul(&[[c, -s, 0.0], [s, c, 0.0]], &m);
        any = true;
    }
    if shear {
        m = affine_mul(&[[1.0, -shear_t, 0.0], [0.0, 1.0, 0.0]], &m);
        any = true;
    }
    if zoom {
        let inv = 1.0 / zf;
        m = affine_mul(&[[inv, 0.0, 0.0], [0.0, inv, 0.0]], &m);
        any = true;
    }
    if shift {
        m = affine_mul(&[[1.0, 0.0, -dx], [0.0, 1.0, -dy]], &m);
        any = true;
    }
    if !any {
        return (image.clone(), mask.clone());
    }

    let mut out_img = Image::new(w, h);
    let mut out_mask = Mask::new(w, h);
    for oy in 0..h {
        for ox in 0..w {
            let xo = ox as f64 - cx;
            let yo = oy as f64 - cy;
            let sx = m[0][0] * xo + m[0][1] * yo + m[0][2] + cx;
            let sy = m[1][0] * xo + m[1][1] * yo + m[1][2] + cy;
            // image: bilinear with edge clamp
            let x0f = sx.floor();
            let y0f = sy.floor();
            let fx = sx - x0f;
            let fy = sy - y0f;
            let clampx = |v: f64| (v.max(0.0) as usize).min(w - 1);
            let clampy = |v: f64| (v.max(0.0) as usize).min(h - 1);
            let (x0, x1) = (clampx(x0f), clampx(x0f + 1.0));
            let (y0, y1) = (clampy(y0f), clampy(y0f + 1.0));
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let top = image.get(x0, y0)[c] * (1.0 - fx) + image.get(x1, y0)[c] * fx;
                let bot = image.get(x0, y1)[c] * (1.0 - fx) + image.get(x1, y1)[c] * fx;
                rgb[c] = top * (1.0 - fy) + bot * fy;
            }
            out_img.set(ox, oy, rgb);
            // mask: nearest neighbor, outside maps to background
            let nx = sx.round();
            let ny = sy.round();
            let mv = if nx < 0.0 || ny < 0.0 || nx > (w - 1) as f64 || ny > (h - 1) as f64 {
                0
            } else {
                mask.get(nx as usize, ny as usize)
            };
            out_mask.set(ox, oy, mv);
        }
    }
    (out_img, out_mask)
}
