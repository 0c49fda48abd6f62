//! Two-domain synthetic lesion generator. Both domains share the same lesion
//! geometry; they differ only photometrically (palette, noise, vignette,
//! edge contrast), so the domain shift is style, not content.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::augment::hsv_to_rgb;
use crate::imaging::{save_image, save_mask, Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// background hue range, within [0,1)
    pub bg_hue: (f64, f64),
    /// lesion hue range, within [0,1)
    pub lesion_hue: (f64, f64),
    /// iid texture noise amplitude on the background value channel
    pub noise_amp: f64,
    /// radial darkening strength at the image corners
    pub vignette: f64,
    pub lesion_count: (usize, usize),
    /// minor/major axis ratio range, in (0,1]
    pub eccentricity: (f64, f64),
    /// extra darkening of the outer lesion rim (0 = none)
    pub edge_contrast: f64,
    /// HSV saturation range shared by background and lesions; muted values
    /// keep the palette visible while leaving luminance cues informative
    pub saturation: (f64, f64),
    /// iid noise amplitude on the background hue/saturation channels
    pub chroma_noise: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.bg_hue, self.lesion_hue] {
            if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
                return Err(Error::InvalidArg(format!(
                    "hue range ({lo}, {hi}) must be ordered and inside [0,1)"
                )));
            }
        }
        if self.lesion_count.0 < 1 || self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::InvalidArg("lesion count range must start at >= 1".into()));
        }
        if self.eccentricity.0 <= 0.0 || self.eccentricity.1 > 1.0 {
            return Err(Error::InvalidArg("eccentricity must lie in (0,1]".into()));
        }
        if self.saturation.0 <= 0.0 || self.saturation.1 > 1.0 || self.saturation.0 > self.saturation.1 {
            return Err(Error::InvalidArg("saturation range must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Warm reds/pinks, soft edges.
pub fn source_preset() -> DomainSpec {
    DomainSpec {
        name: "source".into(),
        bg_hue: (0.90, 0.97),
        lesion_hue: (0.90, 0.97),
        noise_amp: 0.22,
        vignette: 0.25,
        lesion_count: (1, 3),
        eccentricity: (0.5, 0.95),
        edge_contrast: 0.0,
        saturation: (0.15, 0.30),
        chroma_noise: 0.0,
    }
}

/// Green-cyan palette with higher-contrast lesion edges.
pub fn target_preset() -> DomainSpec {
    DomainSpec {
        name: "target".into(),
        bg_hue: (0.38, 0.45),
        lesion_hue: (0.38, 0.45),
        noise_amp: 0.22,
        vignette: 0.25,
        lesion_count: (1, 3),
        eccentricity: (0.5, 0.95),
        edge_contrast: 0.25,
        saturation: (0.15, 0.30),
        chroma_noise: 0.0,
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    /// rotation of the major axis
    cos_t: f64,
    sin_t: f64,
    hue: f64,
}

impl Ellipse {
    /// Squared normalized radius: <= 1 inside.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }

    /// Ramanujan's perimeter approximation.
    fn perimeter(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        let h = ((a - b) / (a + b)).powi(2);
        std::f64::consts::PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
    }
}

fn sample_ellipses(spec: &DomainSpec, size: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let count = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
    let s = size as f64;
    let mut out: Vec<Ellipse> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..200 {
            let a = rng.gen_range(0.08 * s..0.18 * s);
            let ratio = rng.gen_range(spec.eccentricity.0..spec.eccentricity.1);
            let b = a * ratio;
            // keep the whole ellipse inside the frame
            let cx = rng.gen_range(a..s - a);
            let cy = rng.gen_range(a..s - a);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let hue = rng.gen_range(spec.lesion_hue.0..spec.lesion_hue.1);
            let e = Ellipse {
                cx,
                cy,
                a,
                b,
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                hue,
            };
            // bounding-circle separation guarantees disjoint lesions
            let overlaps = out
                .iter()
                .any(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() < o.a + a + 2.0);
            if !overlaps {
                out.push(e);
                break;
            }
        }
    }
    out
}

/// One image/mask pair; the mask is the exact union of the rasterized
/// ellipses (pixel centers inside the analytic boundary).
pub fn gen_sample(spec: &DomainSpec, size: usize, seed: u64) -> Result<(Image, Mask)> {
    spec.validate()?;
    if size == 0 || size % 8 != 0 {
        return Err(Error::InvalidArg(format!("size {size} must be a positive multiple of 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_hue = rng.gen_range(spec.bg_hue.0..spec.bg_hue.1);
    let bg_sat = rng.gen_range(spec.saturation.0..spec.saturation.1);
    let bg_val = rng.gen_range(0.60..0.72);
    let ellipses = sample_ellipses(spec, size, &mut rng);
    let lesion_sat = rng.gen_range(spec.saturation.0..spec.saturation.1);
    let lesion_val = rng.gen_range(0.35..0.48);

    let mut image = Image::new(size, size);
    let mut mask = Mask::new(size, size);
    let half = size as f64 / 2.0;
    let rmax2 = 2.0 * half * half;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let inside = ellipses.iter().find(|e| e.rho2(fx, fy) <= 1.0);
            let mut hsv = match inside {
                Some(e) => {
                    mask.data[y * size + x] = 1;
                    let rho = e.rho2(fx, fy).sqrt();
                    // smooth interior: gentle radial shading, no noise
                    let mut val = lesion_val * (1.0 - 0.15 * rho);
                    if rho > 0.85 {
                        val *= 1.0 - spec.edge_contrast * (rho - 0.85) / 0.15;
                    }
                    [e.hue, lesion_sat, val]
                }
                None => {
                    // noise on all three channels keeps any single channel
                    // from being a noise-free shortcut
                    let noise = rng.gen_range(-spec.noise_amp..spec.noise_amp);
                    let c = spec.chroma_noise;
                    let (hue_noise, sat_noise) = if c > 0.0 {
                        (rng.gen_range(-c..c), rng.gen_range(-1.25 * c..1.25 * c))
                    } else {
                        (0.0, 0.0)
                    };
                    [
                        (bg_hue + hue_noise).rem_euclid(1.0),
                        (bg_sat + sat_noise).clamp(0.02, 1.0),
                        bg_val + noise,
                    ]
                }
            };
            let r2 = (fx - half).powi(2) + (fy - half).powi(2);
            hsv[2] *= 1.0 - spec.vignette * r2 / rmax2;
            hsv[2] = hsv[2].clamp(0.0, 1.0);
            let rgb = hsv_to_rgb(hsv);
            image.set(x, y, rgb);
        }
    }
    // analytic cross-check: rasterized area within one perimeter of exact
    let count = mask.data.iter().filter(|&&m| m != 0).count() as f64;
    let area: f64 = ellipses.iter().map(|e| e.area()).sum();
    let tol: f64 = ellipses.iter().map(|e| e.perimeter()).sum();
    debug_assert!(
        (count - area).abs() <= tol,
        "rasterized {count} vs analytic {area} (tol {tol})"
    );
    Ok((image, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub domain: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: String,
    pub size: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-sample seed derived by fixed hashing, so samples can be generated in
/// any order (or in parallel) with identical results.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(index as u64 + 1))
}

/// Writes `images/` and `masks/` PNGs plus `manifest.json` with a seeded
/// 80/10/10 train/val/test assignment.
pub fn gen_dataset(spec: &DomainSpec, n: usize, size: usize, out_dir: &Path, seed: u64) -> Result<Manifest> {
    spec.validate()?;
    if n < 10 {
        return Err(Error::InvalidArg(format!("dataset size {n} must be >= 10")));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = sample_seed(seed, i);
        let (image, mask) = gen_sample(spec, size, s)?;
        let file = format!("{:05}.png", i);
        save_image(&image, &images_dir.join(&file))?;
        save_mask(&mask, &masks_dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            split: splits[i],
            domain: spec.name.clone(),
            seed: s,
        });
    }
    let manifest = Manifest {
        domain: spec.name.clone(),
        size,
        seed,
        entries,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(out_dir: &Path) -> Result<Manifest> {
    let path = out_dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
