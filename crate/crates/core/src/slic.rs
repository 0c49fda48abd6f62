//! SLIC superpixels: grid-seeded local k-means in joint Lab-spatial space,
//! followed by connectivity enforcement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, LabImage};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlicParams {
    /// Target superpixel count.
    pub k: usize,
    /// Compactness: higher m favors regular region shape over color adherence.
    pub m: f64,
    pub max_iter: usize,
    /// Regions smaller than this fraction of N/k are absorbed into a neighbor.
    pub min_region_frac: f64,
}

impl SlicParams {
    pub fn new(k: usize, m: f64) -> Self {
        SlicParams {
            k,
            m,
            max_iter: 10,
            min_region_frac: 0.25,
        }
    }
}

/// Per-pixel region labels plus region statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub num_regions: usize,
    pub region_sizes: Vec<usize>,
}

impl SuperpixelGrid {
    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Joint Lab + spatial cluster center.
#[derive(Debug, Clone, Copy)]
pub struct Center {
    pub l: f64,
    pub a: f64,
    pub b: f64,
    pub x: f64,
    pub y: f64,
}

/// Eq-style SLIC distance: sqrt(d_c^2 + (d_s/S)^2 * m^2).
#[inline]
pub fn slic_distance<T: Scalar>(d_c: T, d_s: T, m: T, s: T) -> T {
    let spatial = d_s / s * m;
    (d_c * d_c + spatial * spatial).sqrt()
}

fn color_gradient(lab: &LabImage, x: usize, y: usize) -> f64 {
    let (w, h) = (lab.width, lab.height);
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(w - 1);
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(h - 1);
    let dx: f64 = lab
        .get(xp, y)
        .iter()
        .zip(lab.get(xm, y))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let dy: f64 = lab
        .get(x, yp)
        .iter()
        .zip(lab.get(x, ym))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    dx + dy
}

/// Regular grid of step S = sqrt(N/k), each seed nudged to the
/// lowest-gradient pixel in its 3x3 neighborhood (ties keep the grid
/// position).
pub fn init_centers(lab: &LabImage, k: usize) -> Result<Vec<Center>> {
    let (w, h) = (lab.width, lab.height);
    let n = w * h;
    if k == 0 || k > n {
        return Err(Error::InvalidArg(format!(
            "superpixel count k={k} must be in [1, {n}]"
        )));
    }
    let s = (n as f64 / k as f64).sqrt();
    let nx = (w as f64 / s).ceil().max(1.0) as usize;
    let ny = (h as f64 / s).ceil().max(1.0) as usize;
    let mut centers = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            // half-pixel grid position; a flat cell is its own fixed point
            let fx = (gx as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let fy = (gy as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let px = (fx.round().max(0.0) as usize).min(w - 1);
            let py = (fy.round().max(0.0) as usize).min(h - 1);
            let mut best: Option<(usize, usize)> = None;
            let mut best_grad = color_gradient(lab, px, py);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let cx = px as i64 + dx;
                    let cy = py as i64 + dy;
                    if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
                        continue;
                    }
                    let g = color_gradient(lab, cx as usize, cy as usize);
                    // strict improvement only: ties keep the grid position
                    if g < best_grad {
                        best_grad = g;
                        best = Some((cx as usize, cy as usize));
                    }
                }
            }
            let (sx, sy, cpx, cpy) = match best {
                Some((bx, by)) => (bx as f64, by as f64, bx, by),
                None => (fx, fy, px, py),
            };
            let px3 = lab.get(cpx, cpy);
            centers.push(Center {
                l: px3[0],
                a: px3[1],
                b: px3[2],
                x: sx,
                y: sy,
            });
        }
    }
    Ok(centers)
}

/// Iterative assign/update SLIC loop plus connectivity enforcement.
pub fn slic_run(lab: &LabImage, params: &SlicParams) -> Result<SuperpixelGrid> {
    let (w, h) = (lab.width, lab.height);
    let n = w * h;
    if params.m <= 0.0 {
        return Err(Error::InvalidArg("compactness m must be > 0".into()));
    }
    let mut centers = init_centers(lab, params.k)?;
    let s = (n as f64 / params.k as f64).sqrt();
    let window = s.ceil() as i64; // search window is 2S x 2S around the center
    let mut labels = vec![u32::MAX; n];
    let mut dists = vec![f64::INFINITY; n];

    for _ in 0..params.max_iter.max(1) {
        dists.iter_mut().for_each(|d| *d = f64::INFINITY);
        // assignment: ties broken by lowest center index (strict improvement
        // over earlier centers only)
        for (ci, c) in centers.iter().enumerate() {
            let x_lo = ((c.x as i64) - window).max(0) as usize;
            let x_hi = (((c.x as i64) + window) as usize).min(w - 1);
            let y_lo = ((c.y as i64) - window).max(0) as usize;
            let y_hi = (((c.y as i64) + window) as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let px = lab.get(x, y);
                    let dc = ((px[0] - c.l).powi(2)
                        + (px[1] - c.a).powi(2)
                        + (px[2] - c.b).powi(2))
                    .sqrt();
                    let ds =
                        ((x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2)).sqrt();
                    let d = slic_distance(dc, ds, params.m, s);
                    let i = y * w + x;
                    if d < dists[i] {
                        dists[i] = d;
                        labels[i] = ci as u32;
                    }
                }
            }
        }
        // any pixel outside every window falls back to the nearest center
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if labels[i] == u32::MAX {
                    let px = lab.get(x, y);
                    for (ci, c) in centers.iter().enumerate() {
                        let dc = ((px[0] - c.l).powi(2)
                            + (px[1] - c.a).powi(2)
                            + (px[2] - c.b).powi(2))
                        .sqrt();
                        let ds =
                            ((x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2)).sqrt();
                        let d = slic_distance(dc, ds, params.m, s);
                        if d < dists[i] {
                            dists[i] = d;
                            labels[i] = ci as u32;
                        }
                    }
                }
            }
        }
        // update: mean Lab + position per cluster, fixed scan order
        let mut acc = vec![[0.0f64; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for y in 0..h {
            for x in 0..w {
                let ci = labels[y * w + x] as usize;
                let px = lab.get(x, y);
                acc[ci][0] += px[0];
                acc[ci][1] += px[1];
                acc[ci][2] += px[2];
                acc[ci][3] += x as f64;
                acc[ci][4] += y as f64;
                counts[ci] += 1;
            }
        }
        let mut max_move = 0.0f64;
        for (ci, c) in centers.iter_mut().enumerate() {
            if counts[ci] == 0 {
                continue;
            }
            let inv = 1.0 / counts[ci] as f64;
            let nx = acc[ci][3] * inv;
            let ny = acc[ci][4] * inv;
            max_move = max_move.max(((nx - c.x).powi(2) + (ny - c.y).powi(2)).sqrt());
            *c = Center {
                l: acc[ci][0] * inv,
                a: acc[ci][1] * inv,
                b: acc[ci][2] * inv,
                x: nx,
                y: ny,
            };
        }
        if max_move < 0.1 * s {
            break;
        }
    }

    let min_size = (params.min_region_frac * n as f64 / params.k as f64).floor() as usize;
    Ok(enforce_connectivity(&labels, w, h, min_size))
}

/// Relabels 4-connected components and absorbs components smaller than
/// `min_size` into their largest 4-connected neighbor.
pub fn enforce_connectivity(
    labels: &[u32],
    w: usize,
    h: usize,
    min_size: usize,
) -> SuperpixelGrid {
    let n = w * h;
    // connected-component pass, deterministic scan order
    let mut cc = vec![usize::MAX; n];
    let mut cc_sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if cc[start] != usize::MAX {
            continue;
        }
        let id = cc_sizes.len();
        let lbl = labels[start];
        let mut size = 0usize;
        stack.push(start);
        cc[start] = id;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if cc[j] == usize::MAX && labels[j] == lbl {
                    cc[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        cc_sizes.push(size);
    }
    let num_cc = cc_sizes.len();

    // adjacency between components
    let mut adj = vec![std::collections::BTreeSet::new(); num_cc];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && cc[i] != cc[i + 1] {
                adj[cc[i]].insert(cc[i + 1]);
                adj[cc[i + 1]].insert(cc[i]);
            }
            if y + 1 < h && cc[i] != cc[i + w] {
                adj[cc[i]].insert(cc[i + w]);
                adj[cc[i + w]].insert(cc[i]);
            }
        }
    }

    // union-find merge of undersized components into their largest neighbor
    let mut parent: Vec<usize> = (0..num_cc).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut sizes = cc_sizes.clone();
    loop {
        let mut merged_any = false;
        for id in 0..num_cc {
            let root = find(&mut parent, id);
            if root != id || sizes[root] >= min_size {
                continue;
            }
            // largest neighboring root, ties to the lowest id
            let mut best: Option<(usize, usize)> = None;
            let neighbors: Vec<usize> = adj[root].iter().copied().collect();
            for nb in neighbors {
                let nr = find(&mut parent, nb);
                if nr == root {
                    continue;
                }
                let cand = (sizes[nr], nr);
                best = Some(match best {
                    None => (cand.0, cand.1),
                    Some((bs, bi)) => {
                        if cand.0 > bs || (cand.0 == bs && cand.1 < bi) {
                            (cand.0, cand.1)
                        } else {
                            (bs, bi)
                        }
                    }
                });
            }
            if let Some((_, target)) = best {
                parent[root] = target;
                sizes[target] += sizes[root];
                let moved: Vec<usize> = adj[root].iter().copied().collect();
                for m in moved {
                    if m != target {
                        adj[target].insert(m);
                        adj[m].insert(target);
                    }
                }
                merged_any = true;
            }
        }
        if !merged_any {
            break;
        }
    }

    // compact relabel in first-occurrence order
    let mut remap = vec![u32::MAX; num_cc];
    let mut out = vec![0u32; n];
    let mut region_sizes = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, cc[i]);
        if remap[root] == u32::MAX {
            remap[root] = region_sizes.len() as u32;
            region_sizes.push(0);
        }
        out[i] = remap[root];
        region_sizes[out[i] as usize] += 1;
    }
    SuperpixelGrid {
        width: w,
        height: h,
        labels: out,
        num_regions: region_sizes.len(),
        region_sizes,
    }
}

/// Draws region boundaries over the image in a fixed color. A pixel is a
/// boundary pixel when any 4-neighbor (or the image edge) differs.
pub fn overlay(image: &Image, grid: &SuperpixelGrid) -> Result<Image> {
    if image.width != grid.width || image.height != grid.height {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs grid {}x{}",
            image.width, image.height, grid.width, grid.height
        )));
    }
    const BOUNDARY: [f64; 3] = [1.0, 1.0, 0.0];
    let mut out = image.clone();
    let (w, h) = (grid.width, grid.height);
    for y in 0..h {
        for x in 0..w {
            let l = grid.label(x, y);
            let differs = x == 0
                || y == 0
                || x == w - 1
                || y == h - 1
                || grid.label(x - 1, y) != l
                || grid.label(x + 1, y) != l
                || grid.label(x, y - 1) != l
                || grid.label(x, y + 1) != l;
            if differs {
                out.set(x, y, BOUNDARY);
            }
        }
    }
    Ok(out)
}

/// Mean isoperimetric quotient 4*pi*A/P^2 over regions; higher is more
/// compact. Perimeter counts pixel edges on region or image boundaries.
pub fn mean_isoperimetric_quotient(grid: &SuperpixelGrid) -> f64 {
    let (w, h) = (grid.width, grid.height);
    let mut perims = vec![0usize; grid.num_regions];
    for y in 0..h {
        for x in 0..w {
            let l = grid.label(x, y) as usize;
            if x == 0 || grid.label(x - 1, y) as usize != l {
                perims[l] += 1;
            }
            if x == w - 1 || grid.label(x + 1, y) as usize != l {
                perims[l] += 1;
            }
            if y == 0 || grid.label(x, y - 1) as usize != l {
                perims[l] += 1;
            }
            if y == h - 1 || grid.label(x, y + 1) as usize != l {
                perims[l] += 1;
            }
        }
    }
    let mut sum = 0.0;
    for (r, &p) in perims.iter().enumerate() {
        let a = grid.region_sizes[r] as f64;
        if p > 0 {
            sum += 4.0 * std::f64::consts::PI * a / (p as f64 * p as f64);
        }
    }
    sum / grid.num_regions as f64
}

    /// Smooth sinusoid color field with mild seeded noise; color gradients
/// pull against the spatial term without overwhelming it.
pub fn textured_image(w: usize, h: usize, seed: u64) -> Image {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 * 0.15;
            let fy = y as f64 * 0.15;
            let r = 0.5 + 0.4 * fx.sin() * fy.cos() + 0.1 * (rng.gen::<f64>() - 0.5);
            let g = 0.5 + 0.4 * (fy * 0.8).sin() + 0.1 * (rng.gen::<f64>() - 0.5);
            let b = 0.5 + 0.4 * (fx * 0.6).cos() + 0.1 * (rng.gen::<f64>() - 0.5);
            img.set(
                x,
                y,
                [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)],
            );
        }
    }
    img
}
